//! SAE checkpoint format.
//!
//! ```text
//! offset 0   b"SAEC"
//! offset 4   u32  format version
//! offset 8   u64  header length H
//! offset 16  H bytes of JSON header
//! then       f32 arrays: W_enc (L x D), b_enc (L), W_dec (L x D), b_dec (D)
//! then       optional Adam moments, in the order listed by the header
//! ```
//!
//! Tied SAEs still store `W_enc` (a copy of `W_dec`) so the parameter block
//! has one layout; their moments omit the encoder tensors.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sae::{Activation, MatryoshkaSpec, SaeError, SaeParams};
use crate::trainer::{AdamState, ParamTensors, TrainerState};

pub const MAGIC: &[u8; 4] = b"SAEC";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {found:?} at byte 0 (expected \"SAEC\")")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint version {version} at byte 4")]
    UnsupportedVersion { version: u32 },
    #[error("truncated {section} at byte {offset}: needed {needed} bytes, {available} available")]
    Truncated { section: &'static str, offset: u64, needed: u64, available: u64 },
    #[error("payload at byte {offset} is {actual} bytes but the header describes {expected}")]
    DimMismatch { offset: u64, expected: u64, actual: u64 },
    #[error("invalid header at byte {offset}: {message}")]
    Header { offset: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything a checkpoint stores.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: SaeParams,
    pub step: u64,
    pub samples_seen: u64,
    pub since_fired: Vec<u64>,
    pub l1_coeff: f64,
    pub seed: u64,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainerState, l1_coeff: f64, seed: u64, with_optimizer: bool) -> Self {
        Self {
            params: state.params.clone(),
            step: state.step,
            samples_seen: state.samples_seen,
            since_fired: state.since_fired.clone(),
            l1_coeff,
            seed,
            optimizer: with_optimizer.then(|| state.adam.clone()),
        }
    }

    /// Trainer state; fresh optimizer moments when none were stored.
    pub fn into_state(self) -> TrainerState {
        let adam = self.optimizer.unwrap_or_else(|| AdamState::new(&self.params));
        TrainerState {
            params: self.params,
            adam,
            step: self.step,
            samples_seen: self.samples_seen,
            since_fired: self.since_fired,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub dims: usize,
    pub width: usize,
    pub activation: String,
    pub k: Option<usize>,
    pub tied: bool,
    pub matryoshka: Option<MatryoshkaSpec>,
    pub step: u64,
    pub samples_seen: u64,
    pub l1_coeff: f64,
    pub seed: u64,
    pub since_fired: Vec<u64>,
    pub optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerHeader {
    pub adam_step: u64,
    /// Names of the trailing moment tensors, in file order.
    pub tensors: Vec<String>,
}

fn moment_names(tied: bool) -> Vec<String> {
    let mut out = Vec::new();
    for m in ["m", "v"] {
        for t in ["w_enc", "b_enc", "w_dec", "b_dec"] {
            if tied && t == "w_enc" {
                continue;
            }
            out.push(format!("{m}.{t}"));
        }
    }
    out
}

fn parse_activation(name: &str, k: Option<usize>) -> Result<Activation, String> {
    match (name, k) {
        ("relu", None) => Ok(Activation::Relu),
        ("topk", Some(k)) => Ok(Activation::TopK { k }),
        ("batch_topk", Some(k)) => Ok(Activation::BatchTopK { k }),
        _ => Err(format!("unknown activation {name:?} with k = {k:?}")),
    }
}

fn push_f32(buf: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn tensors_of(t: &ParamTensors) -> Vec<&[f64]> {
    t.tensors()
}

/// Serialises a checkpoint to bytes.
pub fn write_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let p = &ckpt.params;
    let header = Header {
        dims: p.dims(),
        width: p.width(),
        activation: p.activation.name().to_string(),
        k: p.activation.k(),
        tied: p.is_tied(),
        matryoshka: p.matryoshka.clone(),
        step: ckpt.step,
        samples_seen: ckpt.samples_seen,
        l1_coeff: ckpt.l1_coeff,
        seed: ckpt.seed,
        since_fired: ckpt.since_fired.clone(),
        optimizer: ckpt
            .optimizer
            .as_ref()
            .map(|a| OptimizerHeader { adam_step: a.step, tensors: moment_names(p.is_tied()) }),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut buf = Vec::with_capacity(PREAMBLE + json.len() + 8 * p.width() * p.dims());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    push_f32(&mut buf, p.w_enc().as_slice().expect("standard layout"));
    push_f32(&mut buf, p.b_enc.as_slice().expect("standard layout"));
    push_f32(&mut buf, p.w_dec.as_slice().expect("standard layout"));
    push_f32(&mut buf, p.b_dec.as_slice().expect("standard layout"));
    if let Some(adam) = &ckpt.optimizer {
        for t in tensors_of(&adam.m).into_iter().chain(tensors_of(&adam.v)) {
            push_f32(&mut buf, t);
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8], CheckpointError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(CheckpointError::Truncated {
                section,
                offset: self.pos as u64,
                needed: n as u64,
                available: available as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn floats(&mut self, n: usize) -> Vec<f64> {
        let raw = &self.bytes[self.pos..self.pos + 4 * n];
        self.pos += 4 * n;
        raw.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect()
    }
}

/// Parses a checkpoint from bytes.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic.to_vec() });
    }
    let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { version });
    }
    let header_len = u64::from_le_bytes(cur.take(8, "header length")?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| CheckpointError::Truncated {
        section: "header",
        offset: PREAMBLE as u64,
        needed: header_len,
        available: (bytes.len() - PREAMBLE) as u64,
    })?;
    let header_bytes = cur.take(header_len, "header")?;
    let bad_header = |message: String| CheckpointError::Header { offset: PREAMBLE as u64, message };
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| bad_header(e.to_string()))?;
    let activation = parse_activation(&header.activation, header.k).map_err(bad_header)?;
    let (l, d) = (header.width, header.dims);
    if l == 0 || d == 0 {
        return Err(bad_header(format!("dims {d} and width {l} must be positive")));
    }
    if header.since_fired.len() != l {
        return Err(bad_header(format!("since_fired has {} entries for width {l}", header.since_fired.len())));
    }
    if let Some(opt) = &header.optimizer {
        if opt.tensors != moment_names(header.tied) {
            return Err(bad_header(format!("unexpected optimizer tensors {:?}", opt.tensors)));
        }
    }
    let ld = l.checked_mul(d).ok_or_else(|| bad_header("L x D overflows".into()))?;
    let param_floats = ld
        .checked_mul(2)
        .and_then(|v| v.checked_add(l + d))
        .ok_or_else(|| bad_header("parameter count overflows".into()))?;
    let moment_floats = match &header.optimizer {
        None => 0,
        Some(_) => {
            let per = if header.tied { ld + l + d } else { 2 * ld + l + d };
            2 * per
        }
    };
    let expected = (param_floats + moment_floats) as u64 * 4;
    let payload_offset = cur.pos as u64;
    let actual = (bytes.len() - cur.pos) as u64;
    if actual < expected {
        return Err(CheckpointError::Truncated {
            section: "payload",
            offset: payload_offset + actual,
            needed: expected,
            available: actual,
        });
    }
    if actual > expected {
        return Err(CheckpointError::DimMismatch { offset: payload_offset, expected, actual });
    }

    let mat = |v: Vec<f64>| Array2::from_shape_vec((l, d), v).expect("sized above");
    let w_enc = mat(cur.floats(ld));
    let b_enc = Array1::from(cur.floats(l));
    let w_dec = mat(cur.floats(ld));
    let b_dec = Array1::from(cur.floats(d));
    let params = SaeParams::from_parts(
        (!header.tied).then_some(w_enc),
        b_enc,
        w_dec,
        b_dec,
        activation,
        header.matryoshka.clone(),
    )
    .map_err(|e: SaeError| bad_header(e.to_string()))?;

    let optimizer = header.optimizer.as_ref().map(|opt| {
        let mut read_moments = || ParamTensors {
            w_enc: (!header.tied).then(|| mat(cur.floats(ld))),
            b_enc: Array1::from(cur.floats(l)),
            w_dec: mat(cur.floats(ld)),
            b_dec: Array1::from(cur.floats(d)),
        };
        let m = read_moments();
        let v = read_moments();
        AdamState { step: opt.adam_step, m, v }
    });

    Ok(Checkpoint {
        params,
        step: header.step,
        samples_seen: header.samples_seen,
        since_fired: header.since_fired,
        l1_coeff: header.l1_coeff,
        seed: header.seed,
        optimizer,
    })
}

/// Reads only the JSON header (for `inspect`).
pub fn read_header(bytes: &[u8]) -> Result<Header, CheckpointError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic.to_vec() });
    }
    let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { version });
    }
    let len = u64::from_le_bytes(cur.take(8, "header length")?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).unwrap_or(usize::MAX);
    let raw = cur.take(len, "header")?;
    serde_json::from_slice(raw).map_err(|e| CheckpointError::Header { offset: PREAMBLE as u64, message: e.to_string() })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, write_checkpoint(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    read_checkpoint(&std::fs::read(path)?)
}
