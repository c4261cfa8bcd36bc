//! Synthetic phantoms: a few soft-edged bright ellipsoids on a noisy
//! background, with a small foreground fraction.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::raw::write_raw_volume;
use super::split::{split_dataset, DatasetSplit};
use super::volume::VolumeSample;
use crate::error::DataError;

const MAX_ATTEMPTS: usize = 40;
const MAX_RESCALES: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// `(D, H, W)` of every volume.
    pub extent: [usize; 3],
    /// Total number of volumes; the split rule divides them.
    pub count: usize,
    /// Inclusive foreground-fraction range, within `(0, 0.05]`.
    pub fg_fraction: [f64; 2],
    /// Inclusive range for the number of ellipsoids per volume.
    pub ellipsoids: [usize; 2],
    /// Range for the ratio between an ellipsoid's semi-axes and its mean radius.
    pub aspect: [f64; 2],
    pub background_hu: f64,
    pub contrast_hu: f64,
    pub noise_hu: f64,
    /// Width of the intensity ramp at ellipsoid borders, in voxels.
    pub edge_voxels: f64,
    pub spacing_mm: [f64; 3],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            extent: [32, 32, 32],
            count: 30,
            fg_fraction: [0.005, 0.03],
            ellipsoids: [1, 3],
            aspect: [0.7, 1.4],
            background_hu: 40.0,
            contrast_hu: 160.0,
            noise_hu: 15.0,
            edge_voxels: 0.3,
            spacing_mm: [2.0, 0.8, 0.8],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn voxel_count(&self) -> usize {
        self.extent.iter().product()
    }

    /// Admissible foreground voxel counts.
    pub fn count_bounds(&self) -> (usize, usize) {
        let v = self.voxel_count() as f64;
        let [lo, hi] = self.fg_fraction;
        ((lo * v).ceil() as usize, (hi * v).floor() as usize)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::SynthConfig(m));
        if self.extent.iter().any(|&e| e < 4) {
            return bad(format!("extent {:?} must be at least 4 on every axis", self.extent));
        }
        if self.count < 3 {
            return bad(format!("count {} is below the 3 volumes a split needs", self.count));
        }
        let [lo, hi] = self.fg_fraction;
        if !(lo > 0.0 && lo <= hi && hi <= 0.05) {
            return bad(format!("fg_fraction [{lo}, {hi}] must satisfy 0 < lo <= hi <= 0.05"));
        }
        let (cmin, cmax) = self.count_bounds();
        if cmin > cmax {
            return bad(format!(
                "no whole voxel count lies in [{lo}, {hi}] of {} voxels; widen the range or enlarge the extent",
                self.voxel_count()
            ));
        }
        let [kmin, kmax] = self.ellipsoids;
        if kmin == 0 || kmin > kmax {
            return bad(format!("ellipsoid count range [{kmin}, {kmax}] is invalid"));
        }
        if kmin > cmax {
            return bad(format!("{kmin} ellipsoids cannot fit in at most {cmax} foreground voxels"));
        }
        let [alo, ahi] = self.aspect;
        if !(alo > 0.0 && alo <= ahi && ahi.is_finite()) {
            return bad(format!("aspect range [{alo}, {ahi}] is invalid"));
        }
        let finite = [self.background_hu, self.contrast_hu, self.noise_hu, self.edge_voxels];
        if finite.iter().any(|v| !v.is_finite()) || self.noise_hu < 0.0 || self.edge_voxels <= 0.0 {
            return bad("intensities must be finite, noise_hu >= 0 and edge_voxels > 0".into());
        }
        if !self.spacing_mm.iter().all(|s| s.is_finite() && *s > 0.0) {
            return bad(format!("spacing {:?} must be positive", self.spacing_mm));
        }
        Ok(())
    }

    pub fn volume_id(index: usize) -> String {
        format!("synth_{index:04}")
    }
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    /// Normalized radius; `<= 1` inside.
    fn rho(&self, p: [f64; 3], scale: f64) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / (self.semi[a] * scale)).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn voxels(extent: [usize; 3]) -> impl Iterator<Item = [f64; 3]> {
    let [d, h, w] = extent;
    (0..d).flat_map(move |z| (0..h).flat_map(move |y| (0..w).map(move |x| [z as f64, y as f64, x as f64])))
}

fn rasterize(shapes: &[Ellipsoid], extent: [usize; 3], scale: f64) -> Vec<u8> {
    voxels(extent)
        .map(|p| u8::from(shapes.iter().any(|e| e.rho(p, scale) <= 1.0)))
        .collect()
}

fn draw_shapes(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Vec<Ellipsoid>, f64) {
    let v = cfg.voxel_count() as f64;
    let [lo, hi] = cfg.fg_fraction;
    let target = rng.random_range(lo..=hi) * v;
    let k = rng.random_range(cfg.ellipsoids[0]..=cfg.ellipsoids[1]);
    let shares: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = shares.iter().sum();
    let shapes = shares
        .iter()
        .map(|s| {
            let vol = target * s / total;
            let radius = (3.0 * vol / (4.0 * PI)).cbrt();
            let ratios: [f64; 3] = std::array::from_fn(|_| rng.random_range(cfg.aspect[0]..=cfg.aspect[1]));
            let norm = (ratios[0] * ratios[1] * ratios[2]).cbrt();
            let semi = ratios.map(|r| radius * r / norm);
            let center = std::array::from_fn(|a| {
                let e = cfg.extent[a] as f64;
                let lo = semi[a] + 1.0;
                let hi = e - semi[a] - 2.0;
                if lo < hi {
                    rng.random_range(lo..hi)
                } else {
                    (e - 1.0) / 2.0
                }
            });
            Ellipsoid { center, semi }
        })
        .collect();
    (shapes, target)
}

/// Generates one phantom deterministically from `(cfg.seed, index)`.
pub fn synth_volume(cfg: &SynthConfig, index: usize) -> Result<VolumeSample, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let (cmin, cmax) = cfg.count_bounds();

    for _ in 0..MAX_ATTEMPTS {
        let (shapes, target) = draw_shapes(cfg, &mut rng);
        let mut scale = 1.0;
        for _ in 0..MAX_RESCALES {
            let label = rasterize(&shapes, cfg.extent, scale);
            let count = label.iter().filter(|&&l| l == 1).count();
            if (cmin..=cmax).contains(&count) {
                return Ok(render(cfg, index, &shapes, scale, label, &mut rng));
            }
            let ratio = target / count.max(1) as f64;
            scale *= ratio.cbrt().clamp(0.5, 2.0);
        }
    }
    Err(DataError::SynthConfig(format!(
        "could not place ellipsoids with a foreground fraction in {:?} for volume {index}",
        cfg.fg_fraction
    )))
}

fn render(
    cfg: &SynthConfig,
    index: usize,
    shapes: &[Ellipsoid],
    scale: f64,
    label: Vec<u8>,
    rng: &mut ChaCha8Rng,
) -> VolumeSample {
    let image = voxels(cfg.extent)
        .map(|p| {
            // Approximate signed distance to the nearest border, in voxels.
            let edge = shapes
                .iter()
                .map(|e| {
                    let mean = (e.semi[0] * e.semi[1] * e.semi[2]).cbrt() * scale;
                    let dist = (1.0 - e.rho(p, scale)) * mean;
                    1.0 / (1.0 + (-dist / cfg.edge_voxels).exp())
                })
                .fold(0.0, f64::max);
            let noise: f64 = rng.sample(StandardNormal);
            (cfg.background_hu + cfg.contrast_hu * edge + cfg.noise_hu * noise) as f32
        })
        .collect();
    VolumeSample::new(SynthConfig::volume_id(index), cfg.extent, cfg.spacing_mm, image, label)
        .expect("generated volume is well formed")
}

/// Writes `count` raw volumes plus `manifest.json` into `out_dir`. The config
/// is validated before anything is written.
pub fn gen_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetSplit, DataError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| DataError::io(out_dir, e))?;
    let mut ids = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let sample = synth_volume(cfg, i)?;
        write_raw_volume(&sample, out_dir)?;
        ids.push(sample.id);
    }
    let split = split_dataset(&ids, cfg.seed)?;
    split.write(out_dir)?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_volume_within_fraction_and_binary() {
        let cfg = SynthConfig::default();
        for i in 0..4 {
            let v = synth_volume(&cfg, i).unwrap();
            let f = v.foreground_fraction();
            assert!((0.005..=0.03).contains(&f), "{f}");
            assert!(v.label.iter().all(|&l| l <= 1));
        }
    }

    #[test]
    fn deterministic_per_index() {
        let cfg = SynthConfig::default();
        assert_eq!(synth_volume(&cfg, 2).unwrap(), synth_volume(&cfg, 2).unwrap());
        assert_ne!(synth_volume(&cfg, 2).unwrap().image, synth_volume(&cfg, 3).unwrap().image);
    }

    #[test]
    fn foreground_is_brighter() {
        let v = synth_volume(&SynthConfig::default(), 0).unwrap();
        let mean = |want: u8| {
            let vals: Vec<f64> = v.image.iter().zip(&v.label).filter(|p| *p.1 == want).map(|p| *p.0 as f64).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        assert!(mean(1) - mean(0) > 80.0);
    }

    #[test]
    fn infeasible_configs_rejected() {
        let tiny = SynthConfig {
            extent: [4, 4, 4],
            fg_fraction: [0.005, 0.01],
            ..Default::default()
        };
        assert!(tiny.validate().is_err());
        let wide = SynthConfig {
            fg_fraction: [0.01, 0.2],
            ..Default::default()
        };
        assert!(wide.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(gen_synthetic(&tiny, &dir.path().join("out")).is_err());
        assert!(!dir.path().join("out").exists());
    }
}
