//! Big-endian IDX files (the MNIST distribution format).

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;
const IDX_CLASSES: usize = 10;

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Data("truncated IDX header".into()))
}

/// Returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Data(format!("image file magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    let need = n * rows * cols;
    if body.len() < need {
        return Err(Error::Data(format!("image file truncated: {} of {need} pixel bytes", body.len())));
    }
    Ok((n, rows, cols, &body[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Data(format!("label file magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let n = read_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Data(format!("label file truncated: {} of {n} labels", body.len())));
    }
    Ok(&body[..n])
}

/// Loads an image/label file pair; pixels are scaled to `[0, 1]` and the
/// inputs have shape `[N, 1, rows, cols]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = fs::read(images_path)?;
    let lab = fs::read(labels_path)?;
    let (n, rows, cols, pixels) = parse_idx_images(&img)?;
    let labels = parse_idx_labels(&lab)?;
    if labels.len() != n {
        return Err(Error::Data(format!("{n} images but {} labels", labels.len())));
    }
    let labels: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&y| y >= IDX_CLASSES) {
        return Err(Error::Data(format!("label {bad} out of range for {IDX_CLASSES} classes")));
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Dataset::new(Tensor::new(vec![n, 1, rows, cols], data)?, labels, IDX_CLASSES)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IMAGES_MAGIC, n, rows, cols] {
            v.extend(x.to_be_bytes());
        }
        v.extend(pixels);
        v
    }

    fn labels(ys: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend(LABELS_MAGIC.to_be_bytes());
        v.extend((ys.len() as u32).to_be_bytes());
        v.extend(ys);
        v
    }

    #[test]
    fn round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        fs::write(&ip, images(2, 2, 2, &[0, 255, 51, 102, 1, 2, 3, 4])).unwrap();
        fs::write(&lp, labels(&[3, 9])).unwrap();
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.inputs().shape(), &[2, 1, 2, 2]);
        assert_eq!(&d.inputs().data()[..4], &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(d.labels(), &[3, 9]);

        fs::write(&lp, labels(&[3, 10])).unwrap();
        assert!(load_idx(&ip, &lp).is_err());
        fs::write(&lp, labels(&[3])).unwrap();
        assert!(load_idx(&ip, &lp).is_err());
        fs::write(&ip, images(2, 2, 2, &[0, 1, 2])).unwrap();
        assert!(parse_idx_images(&fs::read(&ip).unwrap()).is_err());
        assert!(parse_idx_labels(&images(1, 1, 1, &[0])).is_err());
    }
}
