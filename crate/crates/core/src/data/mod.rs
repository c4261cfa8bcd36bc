//! Volume ingestion, normalization, splitting, patching and synthetic data.

mod nifti;
mod patches;
mod raw;
mod split;
mod synth;
mod volume;

use std::path::Path;

pub use nifti::{encode_nifti, parse_nifti, read_nifti, write_nifti, NiftiDatatype, NiftiImage, NiftiPayload};
pub use patches::{check_patch_fits, crop, extract_patches, grid_origins, stitch, Patch, PatchMode};
pub use raw::{raw_paths, read_raw_volume, write_raw_volume};
pub use split::{split_dataset, split_sizes, DatasetSplit, MANIFEST_FILE};
pub use synth::{gen_synthetic, synth_volume, SynthConfig};
pub use volume::{normalize_hu, HuWindow, VolumeSample};

use crate::error::DataError;

/// Builds a sample from an image/label pair of NIfTI files on the same grid.
pub fn read_nifti_pair(id: &str, image: &Path, label: &Path) -> Result<VolumeSample, DataError> {
    let img = read_nifti(image)?;
    let seg = read_nifti(label)?;
    if img.dims != seg.dims {
        return Err(DataError::ShapeMismatch {
            image: img.dims,
            label: seg.dims,
        });
    }
    let mut mask = Vec::with_capacity(seg.data.len());
    for (i, &v) in seg.data.iter().enumerate() {
        if v != 0.0 && v != 1.0 {
            return Err(DataError::NonBinaryLabel {
                path: label.to_path_buf(),
                index: i,
                value: f64::from(v),
            });
        }
        mask.push(v as u8);
    }
    VolumeSample::new(id, img.dims, img.spacing_mm, img.data, mask)
}

/// Reads every listed raw volume from `dir`.
pub fn read_raw_dataset(dir: &Path, ids: &[String]) -> Result<Vec<VolumeSample>, DataError> {
    ids.iter().map(|id| read_raw_volume(dir, id)).collect()
}
