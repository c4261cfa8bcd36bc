//! Evaluation of a checkpoint on one split: per-volume CSV and a table.

use std::fs;
use std::path::{Path, PathBuf};

use voxseg::data::DatasetSplit;
use voxseg::{Metrics, Model};

use crate::checkpoint::Checkpoint;
use crate::dataset::{evaluate_volume, load_split, mean_metrics, pooled_metrics, VolumeEval};
use crate::error::CliError;

pub const EVAL_HEADER: &str = "id,dsc,f2,sens,spec,prec";

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub split: String,
    pub volumes: Vec<VolumeEval>,
    pub mean: Metrics,
    pub pooled: Metrics,
    pub csv_path: PathBuf,
}

fn csv_line(id: &str, m: &Metrics) -> String {
    format!("{id},{},{},{},{},{}", m.dsc, m.f2, m.sensitivity, m.specificity, m.precision)
}

fn table_line(id: &str, m: &Metrics) -> String {
    format!(
        "{id:<16} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
        m.dsc, m.f2, m.sensitivity, m.specificity, m.precision
    )
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut out = format!("{:<16} {:>8} {:>8} {:>8} {:>8} {:>8}\n", "volume", "DSC", "F2", "Sens.", "Spec.", "Prec.");
        for v in &self.volumes {
            out.push_str(&table_line(&v.id, &v.metrics));
            out.push('\n');
        }
        out.push_str(&table_line("mean", &self.mean));
        out.push('\n');
        out.push_str(&table_line("pooled", &self.pooled));
        out.push('\n');
        out
    }
}

/// Evaluates `ckpt` on `split`, writing `eval_<split>.csv` into `out` (the
/// checkpoint's directory by default).
pub fn evaluate(ckpt: &Path, split: &str, out: Option<&Path>) -> Result<EvalReport, CliError> {
    let ck = Checkpoint::load(ckpt)?;
    let cfg = &ck.header.config;
    let mut model = Model::build(cfg.model.clone())?;
    if model.params().names() != ck.params.names() {
        return Err(CliError::Checkpoint {
            path: ckpt.to_path_buf(),
            reason: "parameters do not match the echoed model config".into(),
        });
    }
    *model.params_mut() = ck.params;
    let manifest = DatasetSplit::read(&cfg.data.dir)?;
    let samples = load_split(cfg, &manifest, split)?;
    let params = cfg.loss.params()?;
    let volumes = samples
        .iter()
        .map(|s| evaluate_volume(&model, s, cfg.data.patch, cfg.optim.batch_size, ck.header.next_weights, &params))
        .collect::<Result<Vec<_>, _>>()?;
    let mean = mean_metrics(&volumes);
    let pooled = pooled_metrics(&volumes);

    let dir = match out {
        Some(o) => o.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let csv_path = dir.join(format!("eval_{split}.csv"));
    let mut text = format!("{EVAL_HEADER}\n");
    for v in &volumes {
        text.push_str(&csv_line(&v.id, &v.metrics));
        text.push('\n');
    }
    text.push_str(&csv_line("mean", &mean));
    text.push('\n');
    text.push_str(&csv_line("pooled", &pooled));
    text.push('\n');
    fs::write(&csv_path, text).map_err(|e| CliError::io(&csv_path, e))?;
    Ok(EvalReport {
        split: split.to_string(),
        volumes,
        mean,
        pooled,
        csv_path,
    })
}
