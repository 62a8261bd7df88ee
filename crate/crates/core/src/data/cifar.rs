use std::path::{Path, PathBuf};

use super::{parse_err, read_file, Dataset, Pixels};
use crate::error::{Error, Result};

const PIXELS: usize = 3 * 32 * 32;

/// CIFAR binary record layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    /// One label byte per record, 10 classes.
    Ten,
    /// Coarse and fine label bytes; the 100 fine labels are used.
    HundredFine,
    /// Coarse and fine label bytes; the 20 coarse labels are used.
    HundredCoarse,
}

impl CifarVariant {
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Ten => 1,
            _ => 2,
        }
    }

    fn classes(self) -> usize {
        match self {
            CifarVariant::Ten => 10,
            CifarVariant::HundredFine => 100,
            CifarVariant::HundredCoarse => 20,
        }
    }

    fn record(self) -> usize {
        self.label_bytes() + PIXELS
    }
}

/// Reads and concatenates CIFAR binary batch files.
pub fn load_cifar_binary(paths: &[PathBuf], variant: CifarVariant) -> Result<Dataset> {
    let rec = variant.record();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_file(path)?;
        if bytes.len() % rec != 0 {
            let whole = bytes.len() / rec * rec;
            return Err(parse_err(
                path,
                whole as u64,
                format!("file length {} is not a multiple of the {rec}-byte record; expected {} bytes", bytes.len(), whole + rec),
            ));
        }
        pixels.reserve(bytes.len() / rec * PIXELS);
        for (r, chunk) in bytes.chunks(rec).enumerate() {
            let label = match variant {
                CifarVariant::HundredFine => chunk[1],
                _ => chunk[0],
            } as usize;
            if label >= variant.classes() {
                return Err(parse_err(path, (r * rec) as u64, format!("label {label} outside [0, {})", variant.classes())));
            }
            labels.push(label);
            pixels.extend_from_slice(&chunk[variant.label_bytes()..]);
        }
    }
    Dataset::new([3, 32, 32], Pixels::Bytes(pixels), labels, variant.classes())
}

/// Writes records in CIFAR binary layout. For the hundred-class variants
/// `labels` holds `(coarse, fine)` pairs; for CIFAR-10 the second entry is
/// ignored.
pub fn write_cifar_binary(path: &Path, variant: CifarVariant, labels: &[(u8, u8)], pixels: &[u8]) -> Result<()> {
    if pixels.len() != labels.len() * PIXELS {
        return Err(Error::Contract(format!("{} pixel bytes for {} records", pixels.len(), labels.len())));
    }
    let mut out = Vec::with_capacity(labels.len() * variant.record());
    for (i, &(a, b)) in labels.iter().enumerate() {
        out.push(a);
        if variant != CifarVariant::Ten {
            out.push(b);
        }
        out.extend_from_slice(&pixels[i * PIXELS..(i + 1) * PIXELS]);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
