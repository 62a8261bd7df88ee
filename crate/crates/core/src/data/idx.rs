use std::path::Path;

use super::{parse_err, read_file, Dataset, Pixels};
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| parse_err(path, offset as u64, format!("truncated header: file has {} bytes", bytes.len())))
}

/// Parses an IDX file, returning its extents and payload.
fn parse(path: &Path, bytes: &[u8], magic: u32, rank: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(parse_err(path, 0, format!("expected magic 0x{magic:08x}, found 0x{found:08x}")));
    }
    let dims = (0..rank).map(|i| be_u32(bytes, 4 + 4 * i, path).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * rank;
    let expected = dims.iter().product::<usize>();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(parse_err(
            path,
            (header + payload.len().min(expected)) as u64,
            format!("expected {expected} data bytes for extents {dims:?}, found {}", payload.len()),
        ));
    }
    Ok((dims, payload.to_vec()))
}

/// Reads an IDX image file (`0x00000803`, `N x H x W`) and its IDX label
/// file (`0x00000801`, `N`). Pixels are scaled to `[0, 1]`; the class count
/// is one more than the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let ib = read_file(images_path)?;
    let lb = read_file(labels_path)?;
    let (idims, pixels) = parse(images_path, &ib, IMAGES_MAGIC, 3)?;
    let (ldims, labels) = parse(labels_path, &lb, LABELS_MAGIC, 1)?;
    if idims[0] != ldims[0] {
        return Err(parse_err(labels_path, 4, format!("{} labels for {} images", ldims[0], idims[0])));
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new([1, idims[1], idims[2]], Pixels::Bytes(pixels), labels, classes)
}

/// Writes `n` images of `h x w` bytes in IDX format.
pub fn write_idx_images(path: &Path, h: usize, w: usize, pixels: &[u8]) -> Result<()> {
    if h * w == 0 || pixels.len() % (h * w) != 0 {
        return Err(Error::Contract(format!("{} bytes are not whole {h}x{w} images", pixels.len())));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [pixels.len() / (h * w), h, w] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
