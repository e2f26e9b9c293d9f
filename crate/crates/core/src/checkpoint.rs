//! Versioned binary weight checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "FFCK"
//! version u32      currently 1
//! count   u32      number of tensors
//! per tensor:
//!   rank  u32
//!   dims  rank × u32
//!   data  product(dims) × f64, row-major
//! ```
//!
//! Tensors appear in the model's canonical parameter order (encoders by
//! channel, then selection policy, then fusion). Loading validates the
//! stored shapes against a freshly-initialized model of the same
//! configuration, so a checkpoint can never silently graft onto a
//! mismatched architecture.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::Model;
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"FFCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint holds {got} tensors, model expects {expected}")]
    TensorCount { expected: usize, got: usize },
    #[error("tensor {index}: checkpoint shape {got:?}, model expects {expected:?}")]
    Shape {
        index: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("tensor {index} coordinate {coord} is not finite")]
    NonFinite { index: usize, coord: usize },
    #[error("trailing bytes after the last tensor")]
    TrailingBytes,
}

pub fn save(path: &Path, model: &Model) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let params = model.params();
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for t in params {
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load weights into `model`, which must already have the matching
/// architecture (same scenario and model config as at save time).
pub fn load(path: &Path, model: &mut Model) -> Result<(), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = read_u32(&mut r)? as usize;
    let expected = model.params().len();
    if count != expected {
        return Err(CheckpointError::TensorCount {
            expected,
            got: count,
        });
    }
    let mut tensors = Vec::with_capacity(count);
    for index in 0..count {
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let want = model.params()[index].shape().to_vec();
        if shape != want {
            return Err(CheckpointError::Shape {
                index,
                expected: want,
                got: shape,
            });
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for coord in 0..len {
            r.read_exact(&mut buf)?;
            let v = f64::from_le_bytes(buf);
            if !v.is_finite() {
                return Err(CheckpointError::NonFinite { index, coord });
            }
            data.push(v);
        }
        tensors.push(Tensor::new(shape, data).expect("validated shape"));
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(CheckpointError::TrailingBytes);
    }
    for (slot, tensor) in model.params_mut().into_iter().zip(tensors) {
        *slot = tensor;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
