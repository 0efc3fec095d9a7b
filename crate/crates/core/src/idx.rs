//! IDX (MNIST-style) file ingestion.
//!
//! Layout: big-endian `u32` magic, one big-endian `u32` per dimension, then
//! the raw unsigned bytes. Images use magic `0x00000803` (three dimensions:
//! count, rows, cols), labels use `0x00000801` (one dimension: count).

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::meta::FixedDataset;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("magic mismatch: expected {expected:#010x}, found {found:#010x}")]
    MagicMismatch { expected: u32, found: u32 },
    #[error("truncated file: header promises {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("truncated header")]
    TruncatedHeader,
    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {0} outside 0..=9")]
    LabelRange(u8),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_header(cur: &mut Cursor<&[u8]>, magic: u32, dims: usize) -> std::result::Result<Vec<usize>, IdxError> {
    let found = cur
        .read_u32::<BigEndian>()
        .map_err(|_| IdxError::TruncatedHeader)?;
    if found != magic {
        return Err(IdxError::MagicMismatch {
            expected: magic,
            found,
        });
    }
    (0..dims)
        .map(|_| {
            cur.read_u32::<BigEndian>()
                .map(|d| d as usize)
                .map_err(|_| IdxError::TruncatedHeader)
        })
        .collect()
}

fn read_payload(cur: &mut Cursor<&[u8]>, expected: usize) -> std::result::Result<Vec<u8>, IdxError> {
    let mut payload = Vec::with_capacity(expected);
    cur.read_to_end(&mut payload).expect("in-memory read");
    if payload.len() < expected {
        return Err(IdxError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    payload.truncate(expected);
    Ok(payload)
}

pub fn parse_images(bytes: &[u8]) -> std::result::Result<IdxImages, IdxError> {
    let mut cur = Cursor::new(bytes);
    let dims = read_header(&mut cur, IMAGES_MAGIC, 3)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let pixels = read_payload(&mut cur, count * rows * cols)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_labels(bytes: &[u8]) -> std::result::Result<Vec<u8>, IdxError> {
    let mut cur = Cursor::new(bytes);
    let count = read_header(&mut cur, LABELS_MAGIC, 1)?[0];
    let labels = read_payload(&mut cur, count)?;
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(IdxError::LabelRange(bad));
    }
    Ok(labels)
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for word in [
        IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.write_u32::<BigEndian>(word).expect("vec write");
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.write_u32::<BigEndian>(LABELS_MAGIC).expect("vec write");
    out.write_u32::<BigEndian>(labels.len() as u32)
        .expect("vec write");
    out.extend_from_slice(labels);
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an image/label file pair into a fixed dataset with pixels kept as
/// raw bytes (scaled to `[0,1]` on access).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<FixedDataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let images = parse_images(&read_file(images_path)?).map_err(|source| Error::Idx {
        path: images_path.to_path_buf(),
        source,
    })?;
    let labels = parse_labels(&read_file(labels_path)?).map_err(|source| Error::Idx {
        path: labels_path.to_path_buf(),
        source,
    })?;
    if images.count != labels.len() {
        return Err(Error::Idx {
            path: labels_path.to_path_buf(),
            source: IdxError::CountMismatch {
                images: images.count,
                labels: labels.len(),
            },
        });
    }
    Ok(FixedDataset::new(images.rows * images.cols, images.pixels, labels))
}
