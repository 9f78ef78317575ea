//! File formats and datasets: 8-bit PNG for 2D images and masks, the `OVOL`
//! container for 3D volumes, JSON dataset manifests, and synthetic tasks.
//!
//! The format is chosen from the file extension: `.png` for PNG, anything
//! else for `OVOL`.

pub mod image;
pub mod manifest;
pub mod synth;
pub mod volume;

use std::path::Path;

pub use self::image::{load_image_png, load_mask_png, save_image_png, save_mask_png};
pub use manifest::{DatasetManifest, ManifestEntry, Split, TaskMeta};
pub use synth::{gen_synthetic, synth_dataset, synth_sample, SynthTask};
pub use volume::{load_volume, save_volume, Volume, VolumeData};

use crate::error::Result;
use crate::grid::{CellGrid, LabelGrid};
pub use crate::train::Sample;

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<CellGrid> {
    let path = path.as_ref();
    if is_png(path) {
        load_image_png(path)
    } else {
        load_volume(path)?.to_grid()
    }
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<LabelGrid> {
    let path = path.as_ref();
    if is_png(path) {
        load_mask_png(path)
    } else {
        load_volume(path)?.to_labels()
    }
}

/// Loads an image and its mask, checking that their extents agree.
pub fn load_sample(image: impl AsRef<Path>, mask: impl AsRef<Path>) -> Result<Sample> {
    Sample::new(load_image(image)?, load_mask(mask)?)
}

pub fn save_image(image: &CellGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if is_png(path) {
        save_image_png(image, path)
    } else {
        save_volume(&Volume::from_grid(image)?, path)
    }
}

pub fn save_mask(mask: &LabelGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if is_png(path) {
        save_mask_png(mask, path)
    } else {
        save_volume(&Volume::from_labels(mask)?, path)
    }
}
