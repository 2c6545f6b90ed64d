//! IDX raster files: big-endian `u32` magic `0x00000803`, three `u32`
//! dimensions `(count, rows, cols)`, then `count·rows·cols` unsigned bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Dataset, DatasetMeta};
use crate::diff::Tensor;
use crate::error::{Error, Result};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("truncated IDX header at byte {at}")))
}

/// Parses an in-memory IDX image file, keeping at most `limit` images.
pub fn parse_idx_images(bytes: &[u8], limit: Option<usize>) -> Result<Dataset> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let pixels = rows * cols;
    let body = &bytes[16..];
    if body.len() < count * pixels {
        return Err(Error::Format(format!(
            "truncated IDX body: {} bytes for {count} images of {rows}x{cols}",
            body.len()
        )));
    }
    let n = limit.map_or(count, |l| l.min(count));
    let data = body[..n * pixels].iter().map(|&p| f64::from(p) / 255.0).collect();
    Ok(Dataset {
        x: Tensor::new(vec![n, pixels], data)?,
        y: None,
        n_classes: None,
        meta: Some(DatasetMeta::Images { rows, cols }),
    })
}

/// Loads an IDX image file. Pixels are scaled to `[0, 1]`, one flattened
/// image per row.
pub fn load_idx_images(path: &Path, limit: Option<usize>) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    parse_idx_images(&bytes, limit)
}

/// Writes images (each `rows·cols` bytes) in IDX format.
pub fn write_idx_images<W: Write>(mut w: W, rows: usize, cols: usize, images: &[Vec<u8>]) -> Result<()> {
    if images.iter().any(|im| im.len() != rows * cols) {
        return Err(Error::dim("idx image", &[rows * cols], &[]));
    }
    w.write_all(&IDX_IMAGE_MAGIC.to_be_bytes())?;
    for d in [images.len(), rows, cols] {
        let d = u32::try_from(d).map_err(|_| Error::Format("IDX dimension exceeds u32".into()))?;
        w.write_all(&d.to_be_bytes())?;
    }
    for im in images {
        w.write_all(im)?;
    }
    Ok(())
}
