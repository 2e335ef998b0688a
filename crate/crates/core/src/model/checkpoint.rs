//! Binary checkpoint format.
//!
//! All integers and floats little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "AOFL"
//! 4       4     format version (u32, currently 1)
//! 8       4     d
//! 12      4     layers
//! 16      4     d_ff
//! 20      4     d_c
//! 24      4     num_classes
//! 28      4     heads
//! 32      8·P   parameters (f64) in `ModelParams::visit` order
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{ModelDims, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AOFL";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
}

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut out: W) -> Result<(), CheckpointError> {
    let dims = params.dims;
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * params.param_count());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [
        CHECKPOINT_VERSION as usize,
        dims.d,
        dims.layers,
        dims.d_ff,
        dims.d_c,
        dims.num_classes,
        dims.heads,
    ] {
        let v = u32::try_from(v).map_err(|_| CheckpointError::Format(format!("dimension {v} exceeds u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    params.visit(|m| {
        for v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    });
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ModelParams, CheckpointError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN {
        return Err(CheckpointError::Format(format!(
            "{} bytes is shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Format(format!("magic {:?} is not \"AOFL\"", &bytes[..4])));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if field(0) != CHECKPOINT_VERSION as usize {
        return Err(CheckpointError::Format(format!("unsupported version {}", field(0))));
    }
    let dims = ModelDims {
        d: field(1),
        layers: field(2),
        d_ff: field(3),
        d_c: field(4),
        num_classes: field(5),
        heads: field(6),
    };
    dims.validate().map_err(|e| CheckpointError::Format(e.to_string()))?;
    let payload = &bytes[HEADER_LEN..];
    let expected = dims.param_count();
    if payload.len() != 8 * expected {
        return Err(CheckpointError::Format(format!(
            "payload has {} bytes, dimensions {dims:?} need {}",
            payload.len(),
            8 * expected
        )));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(CheckpointError::Format("non-finite parameter".into()));
    }
    ModelParams::from_flat(dims, &flat).map_err(|e| CheckpointError::Format(e.to_string()))
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, CheckpointError> {
    read_checkpoint(fs::File::open(path)?)
}
