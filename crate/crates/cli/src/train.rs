//! Epoch loop: frozen fusion weights per epoch, Adam updates per batch,
//! validation, learning-rate schedule, CSV log and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use voxseg::data::{extract_patches, DatasetSplit, PatchMode, VolumeSample};
use voxseg::losses::{adaptive_weights, total_loss_with_grad};
use voxseg::optim::adam_step;
use voxseg::{AdamState, AdaptiveWeights, LossReport, LrSchedule, Metrics, Model, TverskyParams};

use crate::checkpoint::{Checkpoint, CheckpointHeader, RngState};
use crate::config::{ExperimentConfig, LossMode};
use crate::dataset::{evaluate_volume, load_split, make_batch, mean_metrics, pooled_metrics, VolumeEval};
use crate::error::CliError;

pub const CSV_HEADER: &str =
    "epoch,lr,w_tversky,w_bce,train_l_tversky,train_l_bce,train_l_total,val_dsc,val_f2,val_sens,val_spec,val_prec";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, Serialize)]
pub struct VolumeScore {
    pub id: String,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub mean: Metrics,
    pub pooled: Metrics,
    pub volumes: Vec<VolumeScore>,
}

impl EvalSummary {
    pub fn from_evals(evals: &[VolumeEval]) -> Self {
        Self {
            mean: mean_metrics(evals),
            pooled: pooled_metrics(evals),
            volumes: evals
                .iter()
                .map(|e| VolumeScore {
                    id: e.id.clone(),
                    metrics: e.metrics,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub epochs_completed: usize,
    pub best_epoch: Option<usize>,
    pub best_val_dsc: Option<f64>,
    /// Test-split scores of the final parameters.
    pub test_final: EvalSummary,
    /// Test-split scores of the best-validation parameters.
    pub test_best: EvalSummary,
}

pub fn csv_row(epoch: usize, lr: f64, train: &LossReport, val: &Metrics) -> String {
    let w = train.weights;
    format!(
        "{epoch},{lr},{},{},{},{},{},{},{},{},{},{}",
        w.w_tversky,
        w.w_bce,
        train.l_tversky,
        train.l_bce,
        train.l_total,
        val.dsc,
        val.f2,
        val.sensitivity,
        val.specificity,
        val.precision
    )
}

struct State {
    model: Model<f32>,
    adam: AdamState<f32>,
    schedule: LrSchedule,
    rng: ChaCha8Rng,
    weights: AdaptiveWeights,
    last_report: LossReport,
    best_val_dsc: Option<f64>,
    history: Vec<String>,
    next_epoch: usize,
}

impl State {
    fn fresh(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let mut model = Model::build(cfg.model.clone())?;
        model.init_params(cfg.seed());
        let adam = AdamState::new(model.params(), cfg.optim.adam());
        let weights = match cfg.loss.mode {
            LossMode::Tversky => AdaptiveWeights::tversky_only(0),
            LossMode::AdaptiveTverskyce => AdaptiveWeights::initial(),
        };
        Ok(Self {
            model,
            adam,
            schedule: cfg.optim.schedule(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed()),
            weights,
            last_report: LossReport::from_components(f64::NAN, f64::NAN, weights),
            best_val_dsc: None,
            history: Vec::new(),
            next_epoch: 0,
        })
    }

    fn resume(cfg: &ExperimentConfig, path: &Path) -> Result<Self, CliError> {
        let ck = Checkpoint::load(path)?;
        let h = ck.header;
        let echo = &h.config;
        if echo.model != cfg.model || echo.loss != cfg.loss || echo.data.patch != cfg.data.patch {
            return Err(CliError::Config(format!(
                "{}: model, loss or patch settings differ from the checkpoint",
                path.display()
            )));
        }
        let mut model = Model::build(cfg.model.clone())?;
        if ck.params.names() != model.params().names() {
            return Err(CliError::Checkpoint {
                path: path.to_path_buf(),
                reason: "parameter names do not match the configured model".into(),
            });
        }
        for (dst, src) in model.params_mut().values_mut().iter_mut().zip(ck.params.values()) {
            if dst.shape() != src.shape() {
                return Err(CliError::Checkpoint {
                    path: path.to_path_buf(),
                    reason: "parameter shapes do not match the configured model".into(),
                });
            }
            *dst = src.clone();
        }
        let rng = h.rng.restore().map_err(|reason| CliError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })?;
        Ok(Self {
            model,
            adam: ck.adam,
            schedule: h.lr_schedule,
            rng,
            weights: h.next_weights,
            last_report: h.last_report,
            best_val_dsc: h.best_val_dsc,
            history: h.history,
            next_epoch: h.epoch + 1,
        })
    }

    fn checkpoint(&self, cfg: &ExperimentConfig, epoch: usize) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                config: cfg.clone(),
                epoch,
                lr_schedule: self.schedule,
                next_weights: self.weights,
                last_report: self.last_report,
                adam_config: self.adam.config,
                adam_step: self.adam.step,
                rng: RngState::capture(&self.rng),
                best_val_dsc: self.best_val_dsc,
                history: self.history.clone(),
            },
            params: self.model.params().clone(),
            adam: self.adam.clone(),
        }
    }
}

fn write_csv(path: &Path, rows: &[String]) -> Result<(), CliError> {
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn evaluate_all(
    model: &Model<f32>,
    samples: &[VolumeSample],
    cfg: &ExperimentConfig,
    weights: AdaptiveWeights,
    params: &TverskyParams,
) -> Result<Vec<VolumeEval>, CliError> {
    samples
        .iter()
        .map(|s| evaluate_volume(model, s, cfg.data.patch, cfg.optim.batch_size, weights, params))
        .collect()
}

/// One pass over the shuffled training volumes. Returns the epoch-mean
/// component losses under the frozen `weights`.
fn train_epoch(
    state: &mut State,
    train: &[VolumeSample],
    cfg: &ExperimentConfig,
    params: &TverskyParams,
    epoch: usize,
    lr: f64,
) -> Result<LossReport, CliError> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut state.rng);
    let mode = PatchMode::RandomBalanced {
        count: cfg.data.patches_per_volume,
    };
    let mut patches = Vec::new();
    let mut ids = Vec::new();
    for &i in &order {
        for p in extract_patches(&train[i], cfg.data.patch, mode, &mut state.rng)? {
            patches.push(p);
            ids.push(train[i].id.clone());
        }
    }

    let (mut sum_t, mut sum_b, mut seen) = (0.0, 0.0, 0usize);
    let refs: Vec<_> = patches.iter().collect();
    for (b, chunk) in refs.chunks(cfg.optim.batch_size).enumerate() {
        let (input, labels) = make_batch(chunk)?;
        let field = state.model.forward(&input)?;
        let (report, grad) = total_loss_with_grad(&field, &labels, state.weights, params)?;
        if !report.is_finite() {
            let start = b * cfg.optim.batch_size;
            return Err(CliError::NonFiniteLoss {
                epoch,
                batch: b,
                ids: ids[start..start + chunk.len()].to_vec(),
            });
        }
        let grads = state.model.backward(&grad)?;
        adam_step(state.model.params_mut(), &grads, &mut state.adam, lr)?;
        sum_t += report.l_tversky * chunk.len() as f64;
        sum_b += report.l_bce * chunk.len() as f64;
        seen += chunk.len();
    }
    Ok(LossReport::from_components(sum_t / seen as f64, sum_b / seen as f64, state.weights))
}

/// Runs (or resumes) training as configured; writes `metrics.csv`,
/// `last.ckpt`, `best.ckpt`, optional periodic checkpoints and `summary.json`
/// into the output directory.
pub fn train(cfg: &ExperimentConfig, resume: Option<&Path>, verbose: bool) -> Result<TrainSummary, CliError> {
    let out = cfg.out_dir().to_path_buf();
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let split = DatasetSplit::read(&cfg.data.dir)?;
    let train = load_split(cfg, &split, "train")?;
    if train.is_empty() {
        return Err(CliError::Config("the training split is empty".into()));
    }
    let val = load_split(cfg, &split, "val")?;
    let test = load_split(cfg, &split, "test")?;
    // Tiny datasets can have an empty validation split; score training data then.
    let val_set = if val.is_empty() { &train } else { &val };
    let params = cfg.loss.params()?;

    let mut state = match resume {
        Some(p) => State::resume(cfg, p)?,
        None => State::fresh(cfg)?,
    };
    let csv = out.join(METRICS_FILE);
    write_csv(&csv, &state.history)?;

    for epoch in state.next_epoch..cfg.optim.epochs {
        let lr = state.schedule.current_lr;
        let report = train_epoch(&mut state, &train, cfg, &params, epoch, lr)?;
        let evals = evaluate_all(&state.model, val_set, cfg, state.weights, &params)?;
        let val_metrics = mean_metrics(&evals);
        let val_loss = evals.iter().map(|e| e.loss.l_total).sum::<f64>() / evals.len() as f64;
        state.schedule.update(val_loss);

        state.history.push(csv_row(epoch, lr, &report, &val_metrics));
        write_csv(&csv, &state.history)?;
        state.last_report = report;
        state.weights = match cfg.loss.mode {
            LossMode::Tversky => AdaptiveWeights::tversky_only(epoch + 1),
            LossMode::AdaptiveTverskyce => adaptive_weights(&report),
        };

        let improved = state.best_val_dsc.is_none_or(|b| val_metrics.dsc > b);
        if improved {
            state.best_val_dsc = Some(val_metrics.dsc);
        }
        let ck = state.checkpoint(cfg, epoch);
        ck.save(&out.join(LAST_CKPT))?;
        if improved {
            ck.save(&out.join(BEST_CKPT))?;
        }
        if cfg.checkpoint.every > 0 && (epoch + 1) % cfg.checkpoint.every == 0 {
            ck.save(&out.join(format!("epoch_{epoch:04}.ckpt")))?;
        }
        if verbose {
            let mut line = String::new();
            let _ = write!(
                line,
                "epoch {epoch:>3}  lr {lr:.2e}  w_t {:.3}  loss {:.4} (T {:.4}, BCE {:.4})  val dsc {:.4}  val loss {val_loss:.4}",
                report.weights.w_tversky, report.l_total, report.l_tversky, report.l_bce, val_metrics.dsc
            );
            if improved {
                line.push_str("  *");
            }
            println!("{line}");
        }
    }

    let test_final = EvalSummary::from_evals(&evaluate_all(&state.model, &test, cfg, state.weights, &params)?);
    let best_path = out.join(BEST_CKPT);
    let (test_best, best_epoch) = if best_path.is_file() {
        let best = Checkpoint::load(&best_path)?;
        let mut model = Model::build(cfg.model.clone())?;
        *model.params_mut() = best.params;
        let evals = evaluate_all(&model, &test, cfg, state.weights, &params)?;
        (EvalSummary::from_evals(&evals), Some(best.header.epoch))
    } else {
        (test_final.clone(), None)
    };
    let summary = TrainSummary {
        epochs_completed: state.history.len(),
        best_epoch,
        best_val_dsc: state.best_val_dsc,
        test_final,
        test_best,
    };
    let path: PathBuf = out.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    if verbose {
        println!(
            "test mean dsc: final {:.4}, best-val checkpoint {:.4}",
            summary.test_final.mean.dsc, summary.test_best.mean.dsc
        );
    }
    Ok(summary)
}
