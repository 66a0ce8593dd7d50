//! Binary checkpoints: `ALLB0001`, a little-endian `u32` header length, a JSON
//! header, then the parameters as little-endian `f64` in layout order.

use std::path::Path;

use advland_core::model::{Arch, Model};
use advland_core::params::{ParamVector, Segment};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"ALLB0001";
const FAMILY: &[u8; 4] = b"ALLB";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic(Vec<u8>),
    #[error("checkpoint version {found} is not supported (expected 0001)")]
    VersionMismatch { found: String },
    #[error("truncated header: need {expected} bytes, have {actual}")]
    TruncatedHeader { expected: usize, actual: usize },
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("payload is {actual} bytes, expected {expected}")]
    PayloadLength { expected: usize, actual: usize },
    #[error("header layout does not match the architecture: {0}")]
    Layout(String),
    #[error("bad header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Provenance saved next to the parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub arch: Arch,
    pub layout: Vec<Segment>,
    pub dtype: String,
    pub seed: u64,
    pub epoch: usize,
    pub eps: f64,
}

pub fn to_bytes(model: &Model, meta: CheckpointMeta) -> Vec<u8> {
    let header = Header {
        arch: model.arch().clone(),
        layout: model.params().layout().to_vec(),
        dtype: "f64".into(),
        seed: meta.seed,
        epoch: meta.epoch,
        eps: meta.eps,
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let values = model.params().values();
    let mut out = Vec::with_capacity(12 + json.len() + 8 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, CheckpointMeta), CheckpointError> {
    if bytes.len() < 12 {
        return Err(CheckpointError::TruncatedHeader {
            expected: 12,
            actual: bytes.len(),
        });
    }
    if &bytes[..8] != MAGIC {
        if &bytes[..4] == FAMILY {
            return Err(CheckpointError::VersionMismatch {
                found: String::from_utf8_lossy(&bytes[4..8]).into_owned(),
            });
        }
        return Err(CheckpointError::BadMagic(bytes[..8].to_vec()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(CheckpointError::TruncatedHeader {
            expected: hlen,
            actual: body.len(),
        });
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    if header.dtype != "f64" {
        return Err(CheckpointError::UnsupportedDtype(header.dtype));
    }
    if header.layout != header.arch.layout() {
        return Err(CheckpointError::Layout(format!(
            "{:?} vs {:?}",
            header.layout,
            header.arch.layout()
        )));
    }
    let count: usize = header.layout.iter().map(Segment::size).sum();
    let payload = &body[hlen..];
    if payload.len() != 8 * count {
        return Err(CheckpointError::PayloadLength {
            expected: 8 * count,
            actual: payload.len(),
        });
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
        .collect();
    let params = ParamVector::from_values(&header.layout, values)
        .map_err(|e| CheckpointError::Layout(e.to_string()))?;
    let model =
        Model::new(header.arch, params).map_err(|e| CheckpointError::Layout(e.to_string()))?;
    Ok((
        model,
        CheckpointMeta {
            seed: header.seed,
            epoch: header.epoch,
            eps: header.eps,
        },
    ))
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    meta: CheckpointMeta,
) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(model, meta)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta), CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes)
}
