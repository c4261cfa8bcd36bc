use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::tensor::Tensor;

/// One CT volume: Hounsfield intensities and a binary pancreas mask on the
/// same `(D, H, W)` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub id: String,
    pub dims: [usize; 3],
    /// Voxel size in mm as `(z, y, x)`.
    pub spacing_mm: [f64; 3],
    pub image: Vec<f32>,
    pub label: Vec<u8>,
}

impl VolumeSample {
    pub fn new(
        id: impl Into<String>,
        dims: [usize; 3],
        spacing_mm: [f64; 3],
        image: Vec<f32>,
        label: Vec<u8>,
    ) -> Result<Self, DataError> {
        let n: usize = dims.iter().product();
        if dims.contains(&0) {
            return Err(DataError::InvalidVolume(format!("zero extent in {dims:?}")));
        }
        if image.len() != n || label.len() != n {
            return Err(DataError::InvalidVolume(format!(
                "dims {dims:?} hold {n} voxels but image has {} and label {}",
                image.len(),
                label.len()
            )));
        }
        if !spacing_mm.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(DataError::InvalidVolume(format!("non-positive spacing {spacing_mm:?}")));
        }
        if let Some(i) = label.iter().position(|&v| v > 1) {
            return Err(DataError::InvalidVolume(format!("label value {} at voxel {i}", label[i])));
        }
        Ok(Self {
            id: id.into(),
            dims,
            spacing_mm,
            image,
            label,
        })
    }

    pub fn voxel_count(&self) -> usize {
        self.image.len()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.label.iter().filter(|&&v| v == 1).count() as f64 / self.label.len() as f64
    }
}

/// Intensity window mapped onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HuWindow {
    pub lo: f64,
    pub hi: f64,
}

impl Default for HuWindow {
    /// Abdominal soft-tissue window.
    fn default() -> Self {
        Self { lo: -100.0, hi: 240.0 }
    }
}

impl HuWindow {
    pub fn new(lo: f64, hi: f64) -> Result<Self, DataError> {
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(DataError::InvalidVolume(format!("HU window needs lo < hi, got ({lo}, {hi})")));
        }
        Ok(Self { lo, hi })
    }

    pub fn apply(&self, hu: f32) -> f32 {
        let v = (hu as f64).clamp(self.lo, self.hi);
        ((v - self.lo) / (self.hi - self.lo)) as f32
    }
}

/// Clamps to the window and maps affinely onto `[0, 1]`; shape `(D, H, W)`.
pub fn normalize_hu(sample: &VolumeSample, window: HuWindow) -> Tensor<f32> {
    let data = sample.image.iter().map(|&v| window.apply(v)).collect();
    Tensor::new(sample.dims.to_vec(), data).expect("sample dims validated")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(values: Vec<f32>) -> VolumeSample {
        let n = values.len();
        VolumeSample::new("v", [1, 1, n], [1.0; 3], values, vec![0; n]).unwrap()
    }

    #[test]
    fn window_endpoints_and_clamp() {
        let w = HuWindow::default();
        let t = normalize_hu(&sample(vec![-100.0, 240.0, -1000.0, 3000.0, 70.0]), w);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0, 0.5]);
    }

    #[test]
    fn rejects_bad_window_and_labels() {
        assert!(HuWindow::new(10.0, 10.0).is_err());
        assert!(VolumeSample::new("v", [1, 1, 2], [1.0; 3], vec![0.0; 2], vec![0, 2]).is_err());
        assert!(VolumeSample::new("v", [1, 1, 2], [0.0, 1.0, 1.0], vec![0.0; 2], vec![0, 1]).is_err());
    }
}
