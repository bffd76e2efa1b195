//! On-disk formats: SAE checkpoints, activation streams and CSV tables.
//!
//! Both binary formats are little-endian with 32-bit float payloads.

pub mod checkpoint;
pub mod csv;
pub mod stream;

pub use checkpoint::{load_checkpoint, read_checkpoint, read_header, save_checkpoint, write_checkpoint, Checkpoint, CheckpointError};
pub use csv::{fmt_float, Table};
pub use stream::{write_stream, StreamError, StreamReader, StreamWriter};
