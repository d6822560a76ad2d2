//! IDX (MNIST-style) image and label files.
//!
//! Images: big-endian `0x00000803`, then `n`, `rows`, `cols` as `u32`, then
//! `n·rows·cols` unsigned bytes. Labels: `0x00000801`, `n`, then `n` bytes.

use std::path::Path;

use super::{DataError, Dataset, Split};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize, file: &'static str) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated {
            file,
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_body(
    bytes: &[u8],
    header: usize,
    body: usize,
    file: &'static str,
) -> Result<(), DataError> {
    let expected = header + body;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            file,
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingBytes {
            file,
            extra: bytes.len() - expected,
        });
    }
    Ok(())
}

/// Parses an image file into `[n, 1, rows, cols]` pixels scaled to `[0, 1]`.
pub fn parse_images(bytes: &[u8]) -> Result<Tensor, DataError> {
    const FILE: &str = "image file";
    let magic = read_u32(bytes, 0, FILE)?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            file: FILE,
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = read_u32(bytes, 4, FILE)? as usize;
    let rows = read_u32(bytes, 8, FILE)? as usize;
    let cols = read_u32(bytes, 12, FILE)? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(DataError::Invalid(format!(
            "image file declares dimensions {n}×{rows}×{cols}"
        )));
    }
    check_body(bytes, 16, n * rows * cols, FILE)?;
    let data = bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Tensor::new(vec![n, 1, rows, cols], data)?)
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>, DataError> {
    const FILE: &str = "label file";
    let magic = read_u32(bytes, 0, FILE)?;
    if magic != LABELS_MAGIC {
        return Err(DataError::BadMagic {
            file: FILE,
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let n = read_u32(bytes, 4, FILE)? as usize;
    check_body(bytes, 8, n, FILE)?;
    Ok(bytes[8..].iter().map(|&b| usize::from(b)).collect())
}

/// Combines parsed images and labels; `num_classes` is the largest label plus one.
pub fn dataset_from_bytes(
    images: &[u8],
    labels: &[u8],
    split: Split,
) -> Result<Dataset, DataError> {
    let inputs = parse_images(images)?;
    let labels = parse_labels(labels)?;
    if inputs.shape()[0] != labels.len() {
        return Err(DataError::CountMismatch {
            images: inputs.shape()[0],
            labels: labels.len(),
        });
    }
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(inputs, labels, num_classes, split)
}

pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset, DataError> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|source| DataError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    dataset_from_bytes(&read(images)?, &read(labels)?, split)
}

/// Encodes images (`[n, 1, rows, cols]` or `[n, rows, cols]`, values in `[0, 1]`)
/// and labels as IDX files.
pub fn encode(images: &Tensor, labels: &[usize]) -> (Vec<u8>, Vec<u8>) {
    let s = images.shape();
    let (n, rows, cols) = (s[0], s[s.len() - 2], s[s.len() - 1]);
    let mut img = Vec::with_capacity(16 + images.numel());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(
        images
            .data()
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend(labels.iter().map(|&l| l as u8));
    (img, lab)
}
