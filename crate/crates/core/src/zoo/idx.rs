//! IDX image/label file loading (the classic big-endian u8 format).

use super::dataset::{Dataset, Sample, CATEGORIES};
use crate::tensor::Tensor;
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: String, reason: String },
    #[error("{path}: payload truncated: expected {expected} bytes, found {actual}")]
    TruncatedPayload {
        path: String,
        expected: usize,
        actual: usize,
    },
    #[error("image file has {images} items but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at item {index} exceeds the {classes} known classes")]
    LabelOutOfRange {
        label: u8,
        index: usize,
        classes: usize,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn parse_header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>, IdxError> {
    let header_len = 4 + 4 * dims;
    let err = |reason: String| IdxError::MalformedHeader {
        path: path.display().to_string(),
        reason,
    };
    if bytes.len() < header_len {
        return Err(err(format!("file has {} bytes, header needs {header_len}", bytes.len())));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(err(format!("magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    Ok((0..dims).map(|d| be_u32(bytes, 4 + 4 * d) as usize).collect())
}

/// Loads an IDX image file plus its companion label file into a dataset with
/// the five standard category names. Pixels become `f64` in `[0, 255]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, IdxError> {
    let img_bytes = fs::read(images_path)?;
    let dims = parse_header(images_path, &img_bytes, IMAGES_MAGIC, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let expected = 16 + n * rows * cols;
    if img_bytes.len() < expected {
        return Err(IdxError::TruncatedPayload {
            path: images_path.display().to_string(),
            expected,
            actual: img_bytes.len(),
        });
    }

    let lbl_bytes = fs::read(labels_path)?;
    let ldims = parse_header(labels_path, &lbl_bytes, LABELS_MAGIC, 1)?;
    if lbl_bytes.len() < 8 + ldims[0] {
        return Err(IdxError::TruncatedPayload {
            path: labels_path.display().to_string(),
            expected: 8 + ldims[0],
            actual: lbl_bytes.len(),
        });
    }
    if ldims[0] != n {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: ldims[0],
        });
    }

    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let label = lbl_bytes[8 + i];
        if label as usize >= CATEGORIES.len() {
            return Err(IdxError::LabelOutOfRange {
                label,
                index: i,
                classes: CATEGORIES.len(),
            });
        }
        let start = 16 + i * rows * cols;
        let px: Vec<f64> = img_bytes[start..start + rows * cols]
            .iter()
            .map(|&b| b as f64)
            .collect();
        samples.push(Sample {
            id: i,
            image: Tensor::new(px, vec![1, rows, cols]).expect("u8 pixels are finite"),
            label: label as usize,
        });
    }
    Ok(Dataset {
        samples,
        class_names: CATEGORIES.iter().map(|s| s.to_string()).collect(),
        pixel_range: (0.0, 255.0),
    })
}

/// Writes a dataset out as an IDX image/label file pair, rounding pixels to
/// the nearest byte. Useful for fixtures and for exporting synthetic data.
pub fn write_idx(data: &Dataset, images_path: &Path, labels_path: &Path) -> Result<(), IdxError> {
    let shape = data.image_shape();
    let (rows, cols) = (shape[1], shape[2]);
    let mut img = Vec::with_capacity(16 + data.samples.len() * rows * cols);
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(data.samples.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    let mut lbl = Vec::with_capacity(8 + data.samples.len());
    lbl.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(data.samples.len() as u32).to_be_bytes());
    for s in &data.samples {
        for &p in s.image.data() {
            img.push(p.round().clamp(0.0, 255.0) as u8);
        }
        lbl.push(s.label as u8);
    }
    fs::File::create(images_path)?.write_all(&img)?;
    fs::File::create(labels_path)?.write_all(&lbl)?;
    Ok(())
}
