//! Raw volume format: `<id>.vol` (little-endian f32, row-major D,H,W),
//! `<id>.seg` (u8 labels) and a JSON sidecar `<id>.json`:
//!
//! ```json
//! {"dims": [D, H, W], "spacing_mm": [sz, sy, sx], "dtype": "f32"}
//! ```
//!
//! `dtype` describes the `.vol` payload and may also be `"u8"`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::volume::VolumeSample;
use crate::error::DataError;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
}

pub fn raw_paths(dir: &Path, id: &str) -> [PathBuf; 3] {
    ["vol", "seg", "json"].map(|ext| dir.join(format!("{id}.{ext}")))
}

pub fn write_raw_volume(sample: &VolumeSample, dir: &Path) -> Result<(), DataError> {
    let [vol, seg, json] = raw_paths(dir, &sample.id);
    let payload: Vec<u8> = sample.image.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&vol, payload).map_err(|e| DataError::io(&vol, e))?;
    fs::write(&seg, &sample.label).map_err(|e| DataError::io(&seg, e))?;
    let sidecar = Sidecar {
        dims: sample.dims,
        spacing_mm: sample.spacing_mm,
        dtype: "f32".into(),
    };
    let text = serde_json::to_string(&sidecar).expect("sidecar serializes");
    fs::write(&json, text).map_err(|e| DataError::io(&json, e))
}

pub fn read_raw_volume(dir: &Path, id: &str) -> Result<VolumeSample, DataError> {
    let [vol, seg, json] = raw_paths(dir, id);
    let text = fs::read_to_string(&json).map_err(|e| DataError::io(&json, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| DataError::Sidecar {
        path: json.clone(),
        reason: e.to_string(),
    })?;
    if sidecar.dims.contains(&0) {
        return Err(DataError::Sidecar {
            path: json,
            reason: format!("zero extent in dims {:?}", sidecar.dims),
        });
    }
    if !sidecar.spacing_mm.iter().all(|s| s.is_finite() && *s > 0.0) {
        return Err(DataError::Sidecar {
            path: json,
            reason: format!("non-positive spacing {:?}", sidecar.spacing_mm),
        });
    }
    let n: usize = sidecar.dims.iter().product();

    let bytes = fs::read(&vol).map_err(|e| DataError::io(&vol, e))?;
    let image: Vec<f32> = match sidecar.dtype.as_str() {
        "f32" => {
            check_len(&vol, n * 4, bytes.len())?;
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        }
        "u8" => {
            check_len(&vol, n, bytes.len())?;
            bytes.iter().map(|&b| f32::from(b)).collect()
        }
        other => {
            return Err(DataError::UnknownDtype {
                path: json,
                dtype: other.to_string(),
            })
        }
    };

    let label = fs::read(&seg).map_err(|e| DataError::io(&seg, e))?;
    check_len(&seg, n, label.len())?;
    if let Some(i) = label.iter().position(|&v| v > 1) {
        return Err(DataError::NonBinaryLabel {
            path: seg,
            index: i,
            value: f64::from(label[i]),
        });
    }
    VolumeSample::new(id, sidecar.dims, sidecar.spacing_mm, image, label)
}

fn check_len(path: &Path, expected: usize, actual: usize) -> Result<(), DataError> {
    if expected != actual {
        return Err(DataError::PayloadSize {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    Ok(())
}
