//! Activation streams: `b"ACTS"`, u32 version, u32 D, u64 count, then
//! `count * D` little-endian f32 values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

use crate::trainer::{BatchSource, TrainError};

pub const MAGIC: &[u8; 4] = b"ACTS";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: u64 = 20;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("bad stream magic {found:?} at byte 0 (expected \"ACTS\")")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported stream version {version} at byte 4")]
    UnsupportedVersion { version: u32 },
    #[error("stream header is {actual} bytes, need 20")]
    ShortHeader { actual: u64 },
    #[error("stream file is {actual} bytes but the header (D={dims}, count={count}) implies {expected}")]
    SizeMismatch { dims: u32, count: u64, expected: u64, actual: u64 },
    #[error("offset {offset} is past the end of a {count}-sample stream")]
    BadOffset { offset: u64, count: u64 },
    #[error("batch has {got} columns, stream dimension is {want}")]
    Dims { got: usize, want: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Appends rows to a new stream file; the sample count is patched on `finish`.
pub struct StreamWriter {
    out: BufWriter<File>,
    dims: u32,
    count: u64,
}

impl StreamWriter {
    pub fn create(path: &Path, dims: usize) -> Result<Self, StreamError> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(dims as u32).to_le_bytes())?;
        out.write_all(&0u64.to_le_bytes())?;
        Ok(Self { out, dims: dims as u32, count: 0 })
    }

    pub fn append(&mut self, rows: ArrayView2<f64>) -> Result<(), StreamError> {
        if rows.ncols() != self.dims as usize {
            return Err(StreamError::Dims { got: rows.ncols(), want: self.dims as usize });
        }
        for v in rows.iter() {
            self.out.write_all(&(*v as f32).to_le_bytes())?;
        }
        self.count += rows.nrows() as u64;
        Ok(())
    }

    pub fn finish(mut self) -> Result<u64, StreamError> {
        self.out.seek(SeekFrom::Start(12))?;
        self.out.write_all(&self.count.to_le_bytes())?;
        self.out.flush()?;
        Ok(self.count)
    }
}

/// Writes `rows` as a complete stream.
pub fn write_stream(path: &Path, rows: ArrayView2<f64>) -> Result<(), StreamError> {
    let mut w = StreamWriter::create(path, rows.ncols())?;
    w.append(rows)?;
    w.finish()?;
    Ok(())
}

/// Sequential reader with deterministic restart from any sample offset.
pub struct StreamReader {
    path: PathBuf,
    file: BufReader<File>,
    dims: usize,
    count: u64,
    position: u64,
}

impl StreamReader {
    pub fn open(path: &Path) -> Result<Self, StreamError> {
        let mut file = File::open(path)?;
        let actual = file.metadata()?.len();
        if actual < HEADER_BYTES {
            return Err(StreamError::ShortHeader { actual });
        }
        let mut head = [0u8; HEADER_BYTES as usize];
        file.read_exact(&mut head)?;
        if &head[..4] != MAGIC {
            return Err(StreamError::BadMagic { found: head[..4].to_vec() });
        }
        let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(StreamError::UnsupportedVersion { version });
        }
        let dims = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes"));
        let count = u64::from_le_bytes(head[12..20].try_into().expect("8 bytes"));
        let expected = count
            .checked_mul(dims as u64)
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(HEADER_BYTES));
        if expected != Some(actual) || (dims == 0 && count > 0) {
            return Err(StreamError::SizeMismatch { dims, count, expected: expected.unwrap_or(u64::MAX), actual });
        }
        Ok(Self { path: path.to_path_buf(), file: BufReader::new(file), dims: dims as usize, count, position: 0 })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Index of the next sample to be read.
    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn remaining(&self) -> u64 {
        self.count - self.position
    }

    /// Restarts reading at sample `offset`.
    pub fn seek(&mut self, offset: u64) -> Result<(), StreamError> {
        if offset > self.count {
            return Err(StreamError::BadOffset { offset, count: self.count });
        }
        self.file.seek(SeekFrom::Start(HEADER_BYTES + offset * self.dims as u64 * 4))?;
        self.position = offset;
        Ok(())
    }

    /// Reads up to `rows` samples; `None` once exhausted.
    pub fn read_batch(&mut self, rows: usize) -> Result<Option<Array2<f64>>, StreamError> {
        let n = (rows as u64).min(self.remaining()) as usize;
        if n == 0 {
            return Ok(None);
        }
        let mut raw = vec![0u8; n * self.dims * 4];
        self.file.read_exact(&mut raw)?;
        self.position += n as u64;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect();
        Ok(Some(Array2::from_shape_vec((n, self.dims), values).expect("sized above")))
    }

    /// Iterator over batches of `rows` samples from the current position.
    pub fn batches(&mut self, rows: usize) -> Batches<'_> {
        Batches { reader: self, rows }
    }
}

pub struct Batches<'a> {
    reader: &'a mut StreamReader,
    rows: usize,
}

impl Iterator for Batches<'_> {
    type Item = Result<Array2<f64>, StreamError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.rows == 0 {
            return None;
        }
        self.reader.read_batch(self.rows).transpose()
    }
}

impl BatchSource for StreamReader {
    fn dims(&self) -> usize {
        self.dims
    }

    fn next_batch(&mut self, rows: usize) -> Result<Array2<f64>, TrainError> {
        if (rows as u64) > self.remaining() {
            return Err(TrainError::StreamExhausted { needed: rows as u64, available: self.remaining() });
        }
        self.read_batch(rows)
            .map_err(|e| TrainError::Source(e.to_string()))
            .map(|b| b.unwrap_or_else(|| Array2::zeros((0, self.dims))))
    }
}
