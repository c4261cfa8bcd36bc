//! TOML experiment configuration. Unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voxseg::data::{HuWindow, MANIFEST_FILE};
use voxseg::{AdamConfig, LrSchedule, ModelConfig, TverskyParams};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Tversky,
    AdaptiveTverskyce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub mode: LossMode,
    pub alpha: f64,
    pub beta: f64,
    pub smooth: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let p = TverskyParams::RECALL_WEIGHTED;
        Self {
            mode: LossMode::AdaptiveTverskyce,
            alpha: p.alpha,
            beta: p.beta,
            smooth: p.smooth,
        }
    }
}

impl LossSection {
    pub fn params(&self) -> Result<TverskyParams, CliError> {
        TverskyParams::new(self.alpha, self.beta, self.smooth).map_err(|e| CliError::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub initial_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay: f64,
    pub lr_patience: usize,
    pub lr_floor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        let s = LrSchedule::default();
        let a = AdamConfig::default();
        Self {
            initial_lr: s.initial_lr,
            batch_size: 10,
            epochs: 150,
            lr_decay: s.decay_factor,
            lr_patience: s.patience,
            lr_floor: s.floor_lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

impl OptimSection {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::new(self.initial_lr, self.lr_decay, self.lr_patience, self.lr_floor)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeFormat {
    /// `<id>.vol` / `<id>.seg` / `<id>.json`
    Raw,
    /// `<id>.nii` image and `<id>.seg.nii` label
    Nifti,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding the volumes and `manifest.json`.
    pub dir: PathBuf,
    pub format: VolumeFormat,
    /// Training patch and inference tile extent `(D, H, W)`.
    pub patch: [usize; 3],
    pub patches_per_volume: usize,
    pub hu_window: [f64; 2],
}

impl Default for DataSection {
    fn default() -> Self {
        let w = HuWindow::default();
        Self {
            dir: PathBuf::new(),
            format: VolumeFormat::Raw,
            patch: [32, 32, 32],
            patches_per_volume: 1,
            hu_window: [w.lo, w.hi],
        }
    }
}

impl DataSection {
    pub fn window(&self) -> Result<HuWindow, CliError> {
        HuWindow::new(self.hu_window[0], self.hu_window[1]).map_err(|e| CliError::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointSection {
    /// Also keep `epoch_NNNN.ckpt` every this many epochs; 0 disables.
    pub every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub optim: OptimSection,
    pub data: DataSection,
    #[serde(default)]
    pub checkpoint: CheckpointSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads the file, applies command-line overrides, resolves `data.dir`
    /// against the config's directory and validates.
    pub fn load(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if seed.is_some() {
            cfg.seed = seed;
        }
        if let Some(out) = out {
            cfg.out = Some(out.to_path_buf());
        }
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.data.dir.is_relative() {
            cfg.data.dir = base.join(&cfg.data.dir);
        }
        if let Some(o) = &cfg.out {
            if o.is_relative() && out.is_none() {
                cfg.out = Some(base.join(o));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated config has a seed")
    }

    pub fn out_dir(&self) -> &Path {
        self.out.as_deref().expect("validated config has an output directory")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.seed.is_none() {
            return bad("`seed` is required (in the file or via --seed)".into());
        }
        if self.out.is_none() {
            return bad("`out` is required (in the file or via --out)".into());
        }
        self.model.validate()?;
        if self.model.in_channels != 1 || self.model.out_classes != 2 {
            return bad("binary segmentation needs in_channels = 1 and out_classes = 2".into());
        }
        self.model.check_input(self.data.patch)?;
        self.loss.params()?;
        let o = &self.optim;
        if o.batch_size == 0 || o.epochs == 0 {
            return bad("optim.batch_size and optim.epochs must be positive".into());
        }
        if !(o.initial_lr > 0.0 && o.lr_floor > 0.0 && o.lr_decay > 0.0 && o.lr_decay <= 1.0) {
            return bad("need initial_lr > 0, lr_floor > 0 and 0 < lr_decay <= 1".into());
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps.is_nan() || o.eps <= 0.0 {
            return bad("Adam needs 0 <= beta1, beta2 < 1 and eps > 0".into());
        }
        if self.data.patches_per_volume == 0 {
            return bad("data.patches_per_volume must be positive".into());
        }
        self.data.window()?;
        let manifest = self.data.dir.join(MANIFEST_FILE);
        if !manifest.is_file() {
            return bad(format!("data.dir: {} not found", manifest.display()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Settings for `voxseg synth`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthFile {
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub synth: voxseg::data::SynthConfig,
}

impl SynthFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut f: Self = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(o) = &f.out {
            if o.is_relative() {
                f.out = Some(path.parent().unwrap_or(Path::new("")).join(o));
            }
        }
        Ok(f)
    }
}
