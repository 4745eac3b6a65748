//! Byte-level decoders for the CIFAR-10 binary and MNIST IDX formats.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(msg: alloc::string::String) -> Error {
    Error::Format(msg)
}

/// Decodes a CIFAR-10 batch: each record is one label byte followed by the
/// red, green and blue 32×32 planes. Pixels are scaled to `[0, 1]`.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Vec<(Vec<f64>, usize)>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD;
        return Err(format_err(format!(
            "cifar10: {} bytes is not a whole number of {CIFAR_RECORD}-byte records \
             (expected {} or {} bytes)",
            bytes.len(),
            whole * CIFAR_RECORD,
            (whole + 1) * CIFAR_RECORD
        )));
    }
    bytes
        .chunks_exact(CIFAR_RECORD)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(format_err(format!("cifar10: record {i} has label byte {label} > 9")));
            }
            let pixels = rec[1..].iter().map(|&b| f64::from(b) / 255.0).collect();
            Ok((pixels, label))
        })
        .collect()
}

/// Builds one CIFAR-10 record.
pub fn encode_cifar10_record(label: u8, pixels: &[u8]) -> Vec<u8> {
    let mut rec = Vec::with_capacity(CIFAR_RECORD);
    rec.push(label);
    rec.extend_from_slice(pixels);
    rec
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    let b = bytes.get(at..at + 4)?;
    Some(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = be_u32(bytes, 0).ok_or_else(|| {
        format_err(format!("idx: expected at least 4 header bytes, found {}", bytes.len()))
    })?;
    if magic != expected {
        return Err(format_err(format!("idx: bad magic {magic:#010x}, expected {expected:#010x}")));
    }
    Ok(())
}

/// Grayscale images `(count, rows, cols, pixels)` from an IDX3 file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<Vec<u8>>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let header = |at| {
        be_u32(bytes, at)
            .map(|v| v as usize)
            .ok_or_else(|| format_err(format!("idx: expected 16 header bytes, found {}", bytes.len())))
    };
    let (n, rows, cols) = (header(4)?, header(8)?, header(12)?);
    let expected = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .and_then(|v| v.checked_add(16));
    if expected != Some(bytes.len()) {
        let expected = expected.map_or_else(|| "more than usize::MAX".into(), |e| format!("{e}"));
        return Err(format_err(format!(
            "idx: expected {expected} bytes for {n} images of {rows}x{cols}, found {}",
            bytes.len()
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(format_err(format!("idx: image size {rows}x{cols} is empty")));
    }
    let images = bytes[16..].chunks_exact(rows * cols).map(<[u8]>::to_vec).collect();
    Ok(IdxImages { rows, cols, images })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = be_u32(bytes, 4)
        .ok_or_else(|| format_err(format!("idx: expected 8 header bytes, found {}", bytes.len())))?
        as usize;
    if bytes.len() != 8 + n {
        return Err(format_err(format!(
            "idx: expected {} bytes for {n} labels, found {}",
            8 + n,
            bytes.len()
        )));
    }
    Ok(bytes[8..].to_vec())
}

/// Builds an IDX3 image file from equally sized `rows × cols` images.
pub fn encode_idx_images(rows: usize, cols: usize, images: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IDX_IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    images.iter().for_each(|img| out.extend_from_slice(img));
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Inverse of the `[0, 1]` pixel scaling, saturating outside the range.
pub fn quantize(v: f64) -> u8 {
    libm::round(v.clamp(0.0, 1.0) * 255.0) as u8
}

/// Centre-pads (or centre-crops) a `rows × cols` byte image to
/// `target × target`, scaling to `[0, 1]`.
pub fn center_fit(pixels: &[u8], rows: usize, cols: usize, target: usize) -> Vec<f64> {
    let mut out = vec![0.0; target * target];
    let off = |src: usize| (target as isize - src as isize) / 2;
    let (oy, ox) = (off(rows), off(cols));
    for y in 0..rows {
        for x in 0..cols {
            let (ty, tx) = (y as isize + oy, x as isize + ox);
            if (0..target as isize).contains(&ty) && (0..target as isize).contains(&tx) {
                out[ty as usize * target + tx as usize] = f64::from(pixels[y * cols + x]) / 255.0;
            }
        }
    }
    out
}
