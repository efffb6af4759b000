use std::path::{Path, PathBuf};

use image::RgbImage;

use crate::error::{Error, Result};
use crate::io::{load_rgb, resize_square};

/// Every decodable image of a directory, resized to a square.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<RgbImage>,
    pub paths: Vec<PathBuf>,
    /// Files that could not be decoded.
    pub skipped: usize,
}

/// Reads the regular files of `dir` in name order. Files that fail to decode
/// are skipped and counted; an empty result is an error.
pub fn load_dataset(dir: &Path, size: u32) -> Result<Dataset> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| std::io::Error::new(e.kind(), format!("image directory {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_file()).collect();
    files.sort();
    let mut ds = Dataset { images: Vec::new(), paths: Vec::new(), skipped: 0 };
    for p in files {
        match load_rgb(&p) {
            Ok(img) => {
                ds.images.push(resize_square(&img, size));
                ds.paths.push(p);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                ds.skipped += 1;
            }
        }
    }
    if ds.skipped > 0 {
        log::info!("{} unreadable files skipped in {}", ds.skipped, dir.display());
    }
    if ds.images.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    Ok(ds)
}
