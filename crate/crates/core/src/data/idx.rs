//! Big-endian IDX containers of unsigned bytes, as used by MNIST-style
//! datasets.

use std::path::Path;

use crate::error::{Error, Result};

use super::Dataset;

pub const IDX_IMAGES: u32 = 0x0000_0803;
pub const IDX_LABELS: u32 = 0x0000_0801;

fn header(bytes: &[u8], words: usize, what: &str) -> Result<Vec<u32>> {
    if bytes.len() < 4 * words {
        return Err(Error::Data(format!(
            "{what}: truncated header ({} bytes, need {})",
            bytes.len(),
            4 * words
        )));
    }
    Ok(bytes[..4 * words]
        .chunks_exact(4)
        .map(|w| u32::from_be_bytes([w[0], w[1], w[2], w[3]]))
        .collect())
}

fn check_magic(found: u32, expected: u32, what: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Data(format!(
            "{what}: magic 0x{found:08x}, expected 0x{expected:08x}"
        )));
    }
    Ok(())
}

/// `(count, rows, cols, pixels)`.
pub fn read_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let h = header(bytes, 4, "image file")?;
    check_magic(h[0], IDX_IMAGES, "image file")?;
    let (n, rows, cols) = (h[1] as usize, h[2] as usize, h[3] as usize);
    let body = &bytes[16..];
    let need = n * rows * cols;
    if body.len() != need {
        return Err(Error::Data(format!(
            "image file: header promises {need} pixel bytes, found {}",
            body.len()
        )));
    }
    Ok((n, rows, cols, body))
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let h = header(bytes, 2, "label file")?;
    check_magic(h[0], IDX_LABELS, "label file")?;
    let body = &bytes[8..];
    if body.len() != h[1] as usize {
        return Err(Error::Data(format!(
            "label file: header promises {} labels, found {}",
            h[1],
            body.len()
        )));
    }
    Ok(body)
}

pub fn write_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), n * rows * cols, "pixel count");
    let mut out = Vec::with_capacity(16 + pixels.len());
    for w in [IDX_IMAGES, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&w.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Single-channel dataset with pixels scaled to `[0, 1]`; the class count
/// is one more than the largest label.
pub fn load_idx_dataset(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let ib = std::fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let lb = std::fs::read(lp).map_err(|e| Error::io(lp, e))?;
    let (n, rows, cols, pixels) = read_idx_images(&ib)?;
    let labels = read_idx_labels(&lb)?;
    if labels.len() != n {
        return Err(Error::Data(format!("{n} images but {} labels", labels.len())));
    }
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let images = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Dataset::new(1, rows, cols, classes, images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trip() {
        let px: Vec<u8> = (0..8).collect();
        let bytes = write_idx_images(2, 2, 2, &px);
        let (n, r, c, body) = read_idx_images(&bytes).unwrap();
        assert_eq!((n, r, c, body), (2, 2, 2, &px[..]));
        assert_eq!(read_idx_labels(&write_idx_labels(&[3, 1])).unwrap(), &[3, 1]);
    }

    #[test]
    fn wrong_magic_and_truncation() {
        let mut labels = write_idx_labels(&[1, 2]);
        labels[3] = 0x03;
        assert!(read_idx_labels(&labels).is_err());
        let images = write_idx_images(2, 2, 2, &[0; 8]);
        assert!(read_idx_images(&images[..20]).is_err());
        assert!(read_idx_images(&images[..10]).is_err());
    }
}
