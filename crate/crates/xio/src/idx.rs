//! MNIST-style IDX files: unsigned-byte images (magic `0x00000803`) and
//! labels (magic `0x00000801`), optionally gzip-compressed.

use std::io::Read;
use std::path::Path;

use advland_core::data::{Dataset, Domain};
use flate2::read::GzDecoder;
use ndarray::Array2;
use thiserror::Error;

use crate::error::{Result, XioError};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Class count assumed for IDX label files.
pub const IDX_CLASSES: usize = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdxError {
    #[error("wrong magic at offset 0: expected {expected:#010x}, found {found:#010x}")]
    WrongMagic { expected: u32, found: u32 },
    #[error("truncated at offset {offset}: needed {needed} bytes, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{extra} trailing bytes at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("image count {images} (offset 4) differs from label count {labels} (offset 4)")]
    CountMismatch { images: usize, labels: usize },
    #[error("zero-sized dimension at offset {offset}")]
    EmptyDimension { offset: usize },
}

/// Raw images of one IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, IdxError> {
    let slice = bytes.get(offset..offset + 4).ok_or(IdxError::Truncated {
        offset,
        needed: 4,
        available: bytes.len().saturating_sub(offset),
    })?;
    Ok(u32::from_be_bytes(slice.try_into().expect("four bytes")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::WrongMagic { expected, found });
    }
    Ok(())
}

fn payload(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8], IdxError> {
    let available = bytes.len().saturating_sub(offset);
    if available < len {
        return Err(IdxError::Truncated {
            offset,
            needed: len,
            available,
        });
    }
    if available > len {
        return Err(IdxError::TrailingBytes {
            offset: offset + len,
            extra: available - len,
        });
    }
    Ok(&bytes[offset..])
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages, IdxError> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    if rows == 0 {
        return Err(IdxError::EmptyDimension { offset: 8 });
    }
    if cols == 0 {
        return Err(IdxError::EmptyDimension { offset: 12 });
    }
    let len = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or(IdxError::Truncated {
            offset: 16,
            needed: usize::MAX,
            available: bytes.len().saturating_sub(16),
        })?;
    let pixels = payload(bytes, 16, len)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, count)?.to_vec())
}

/// Builds a dataset with pixels scaled by `1/255` and domain `[0, 1]`.
pub fn dataset_from_bytes(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let imgs = parse_images(images).map_err(|source| XioError::Idx {
        path: "<images>".into(),
        source,
    })?;
    let labs = parse_labels(labels).map_err(|source| XioError::Idx {
        path: "<labels>".into(),
        source,
    })?;
    build(imgs, labs)
}

fn build(imgs: IdxImages, labs: Vec<u8>) -> Result<Dataset> {
    if imgs.count != labs.len() {
        return Err(XioError::Idx {
            path: "<pair>".into(),
            source: IdxError::CountMismatch {
                images: imgs.count,
                labels: labs.len(),
            },
        });
    }
    let m = imgs.rows * imgs.cols;
    let inputs = Array2::from_shape_vec(
        (imgs.count, m),
        imgs.pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )
    .expect("payload length checked");
    let labels = labs.into_iter().map(usize::from).collect();
    Ok(Dataset::new(
        inputs,
        labels,
        IDX_CLASSES,
        Some(Domain::UNIT),
    )?)
}

/// Reads a file, inflating it when it starts with the gzip magic.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| XioError::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| XioError::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Loads an image/label file pair. `limit` keeps only the first examples.
pub fn parse_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    let ib = read_maybe_gz(images)?;
    let lb = read_maybe_gz(labels)?;
    let mut imgs = parse_images(&ib).map_err(|source| XioError::Idx {
        path: images.to_path_buf(),
        source,
    })?;
    let mut labs = parse_labels(&lb).map_err(|source| XioError::Idx {
        path: labels.to_path_buf(),
        source,
    })?;
    if let Some(n) = limit {
        if imgs.count == labs.len() && n < imgs.count {
            imgs.pixels.truncate(n * imgs.rows * imgs.cols);
            imgs.count = n;
            labs.truncate(n);
        }
    }
    build(imgs, labs)
}

/// Serialises images back to IDX bytes (used for fixtures and subsets).
pub fn encode_images(imgs: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + imgs.pixels.len());
    for v in [
        IMAGES_MAGIC,
        imgs.count as u32,
        imgs.rows as u32,
        imgs.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&imgs.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
