use std::fs;
use std::path::Path;

use super::{SampleSet, SplitTag};
use crate::error::{Result, SevenError};
use crate::tensor::{ByteReader, Tensor};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_magic(r: &mut ByteReader<'_>, expected: u32) -> Result<()> {
    if r.is_empty() {
        return Err(r.error_at(0, "empty file"));
    }
    let magic = r.u32_be()?;
    if magic != expected {
        return Err(r.error_at(0, format!("bad magic {magic:#010x}, expected {expected:#010x}")));
    }
    Ok(())
}

fn read_count(r: &mut ByteReader<'_>) -> Result<usize> {
    Ok(r.u32_be()? as usize)
}

/// Parses an IDX3 image file into `[n, 1, rows, cols]`, scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8], context: &str) -> Result<Tensor> {
    let mut r = ByteReader::new(bytes, context);
    read_magic(&mut r, IMAGES_MAGIC)?;
    let n = read_count(&mut r)?;
    let rows = read_count(&mut r)?;
    let cols = read_count(&mut r)?;
    let len = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| r.error_at(4, "image dimensions overflow"))?;
    let pixels = r.take(len)?;
    if !r.is_empty() {
        return Err(r.error_at(r.offset(), "trailing bytes after image data"));
    }
    let data = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8], context: &str) -> Result<Vec<u32>> {
    let mut r = ByteReader::new(bytes, context);
    read_magic(&mut r, LABELS_MAGIC)?;
    let n = read_count(&mut r)?;
    let labels = r.take(n)?;
    if !r.is_empty() {
        return Err(r.error_at(r.offset(), "trailing bytes after label data"));
    }
    Ok(labels.iter().map(|&b| b as u32).collect())
}

/// Reads an IDX image/label file pair.
pub fn ingest_idx(images_path: &Path, labels_path: &Path, split: SplitTag) -> Result<SampleSet> {
    let img_bytes = fs::read(images_path).map_err(|e| SevenError::io(images_path, e))?;
    let lbl_bytes = fs::read(labels_path).map_err(|e| SevenError::io(labels_path, e))?;
    let images = parse_idx_images(&img_bytes, &images_path.display().to_string())?;
    let labels = parse_idx_labels(&lbl_bytes, &labels_path.display().to_string())?;
    if images.batch() != labels.len() {
        return Err(SevenError::format(
            labels_path.display().to_string(),
            4,
            format!(
                "label count {} does not match image count {} in {}",
                labels.len(),
                images.batch(),
                images_path.display()
            ),
        ));
    }
    SampleSet::new(images, labels, split)
}
