use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};

use super::{SampleSet, SplitTag};
use crate::error::{Result, SevenError};
use crate::tensor::Tensor;

/// Result of reading a `root/<class>/<image>` tree.
#[derive(Debug)]
pub struct DirIngest {
    pub samples: SampleSet,
    /// Class directory names; class id `k` is `class_names[k]`.
    pub class_names: Vec<String>,
    /// Files that could not be decoded.
    pub skipped: Vec<PathBuf>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| SevenError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| SevenError::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Loads every image under `root/<class>/`, converts it to grayscale in
/// `[0, 1]`, and resizes it to `(height, width)` with a linear filter.
/// Class ids follow the sorted order of the class directory names.
pub fn ingest_image_dir(root: &Path, (height, width): (usize, usize), split: SplitTag) -> Result<DirIngest> {
    if height == 0 || width == 0 {
        return Err(SevenError::invalid("image size must be at least 1x1"));
    }
    let mut class_names = Vec::new();
    let mut class_ids = Vec::new();
    let mut data = Vec::new();
    let mut skipped = Vec::new();
    for class_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let id = class_names.len() as u32;
        class_names.push(
            class_dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        for file in sorted_entries(&class_dir)?.into_iter().filter(|p| p.is_file()) {
            let img = match image::open(&file) {
                Ok(img) => img.to_luma32f(),
                Err(e) => {
                    log::warn!("skipping {}: {e}", file.display());
                    skipped.push(file);
                    continue;
                }
            };
            let img = if img.dimensions() == (width as u32, height as u32) {
                img
            } else {
                imageops::resize(&img, width as u32, height as u32, FilterType::Triangle)
            };
            data.extend(img.into_raw().into_iter().map(|v| (v as f64).clamp(0.0, 1.0)));
            class_ids.push(id);
        }
    }
    if class_ids.is_empty() {
        return Err(SevenError::invalid(format!(
            "no readable images under {} ({} skipped)",
            root.display(),
            skipped.len()
        )));
    }
    let images = Tensor::new(vec![class_ids.len(), 1, height, width], data)?;
    Ok(DirIngest {
        samples: SampleSet::new(images, class_ids, split)?,
        class_names,
        skipped,
    })
}
