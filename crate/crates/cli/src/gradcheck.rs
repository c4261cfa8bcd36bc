//! Finite-difference verification of the analytic gradients in double
//! precision: the Tversky field gradient on random small instances, and the
//! full model's parameter gradient under the fused loss.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use voxseg::losses::{self, tversky_grad, tversky_loss};
use voxseg::{AdaptiveWeights, BinaryField, Model, ModelConfig, SoftmaxField, Tensor, TensorError, TverskyParams};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossCheckConfig {
    pub instances: usize,
    pub max_extent: usize,
    /// `(alpha, beta)` pairs.
    pub params: Vec<[f64; 2]>,
    pub h: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
}

impl Default for LossCheckConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            max_extent: 6,
            params: vec![[0.7, 0.3], [0.5, 0.5], [1.0, 1.0]],
            h: 1e-5,
            tolerance: 1e-4,
            floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelCheckConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub extent: usize,
    pub alpha: f64,
    pub beta: f64,
    pub w_tversky: f64,
    pub h: f64,
    pub tolerance: f64,
    pub floor: f64,
}

impl Default for ModelCheckConfig {
    fn default() -> Self {
        Self {
            depth: 1,
            base_channels: 2,
            extent: 4,
            alpha: 0.7,
            beta: 0.3,
            w_tversky: 0.5,
            h: 1e-3,
            tolerance: 1e-3,
            floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub loss: LossCheckConfig,
    pub model: ModelCheckConfig,
}

impl GradcheckConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Worst coordinate of one comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Worst {
    pub rel_error: f64,
    pub seed: u64,
    pub label: String,
    pub coordinate: Vec<usize>,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub tolerance: f64,
    pub compared: usize,
    pub skipped: usize,
    pub worst: Option<Worst>,
}

impl CheckResult {
    fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            tolerance,
            compared: 0,
            skipped: 0,
            worst: None,
        }
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel_error)
    }

    pub fn passed(&self) -> bool {
        self.compared > 0 && self.max_rel_error() <= self.tolerance
    }

    fn record(&mut self, rel_error: f64, make: impl FnOnce() -> Worst) {
        self.compared += 1;
        if self.worst.as_ref().is_none_or(|w| rel_error > w.rel_error || rel_error.is_nan()) {
            let mut w = make();
            w.rel_error = rel_error;
            self.worst = Some(w);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn exit_code(&self) -> u8 {
        if self.passed() {
            0
        } else {
            1
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.passed() { "ok  " } else { "FAIL" };
            out.push_str(&format!(
                "{status} {:<34} max rel err {:.3e} (tol {:.0e}, {} compared, {} skipped)\n",
                c.name,
                c.max_rel_error(),
                c.tolerance,
                c.compared,
                c.skipped
            ));
            if !c.passed() {
                if let Some(w) = &c.worst {
                    out.push_str(&format!(
                        "     seed {} {} at {:?}: analytic {:e}, numeric {:e}\n",
                        w.seed, w.label, w.coordinate, w.analytic, w.numeric
                    ));
                }
            }
        }
        out
    }
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Signature of the field-gradient function under test.
pub type FieldGradFn =
    fn(&SoftmaxField<f64>, &BinaryField, &TverskyParams) -> Result<Tensor<f64>, TensorError>;

/// A random instance: softmax field of random logits and labels with at
/// least one foreground and one background voxel when possible.
pub fn random_instance(rng: &mut ChaCha8Rng, max_extent: usize) -> (SoftmaxField<f64>, BinaryField) {
    let n = rng.random_range(1..=2);
    let dims: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=max_extent));
    let voxels = n * dims.iter().product::<usize>();
    let logits = Tensor::from_fn(vec![n, 2, dims[0], dims[1], dims[2]], |_| rng.random_range(-3.0..3.0));
    let fraction = rng.random_range(0.1..0.6);
    let mut labels: Vec<u8> = (0..voxels).map(|_| u8::from(rng.random_bool(fraction))).collect();
    if voxels > 1 {
        labels[0] = 1;
        labels[voxels - 1] = 0;
    }
    (
        SoftmaxField::from_logits(&logits).expect("rank-5 logits"),
        BinaryField::new([n, dims[0], dims[1], dims[2]], labels).expect("sized labels"),
    )
}

/// Central differences of the Tversky loss against `-grad_fn` over every
/// field entry (both channels perturbed independently).
pub fn check_loss_gradient(cfg: &LossCheckConfig, seed: u64, grad_fn: FieldGradFn) -> Result<Vec<CheckResult>, CliError> {
    let mut results = Vec::new();
    for &[alpha, beta] in &cfg.params {
        let params = TverskyParams::new(alpha, beta, losses::DEFAULT_SMOOTH).map_err(|e| CliError::Config(e.to_string()))?;
        let mut res = CheckResult::new(format!("tversky grad (a={alpha}, b={beta})"), cfg.tolerance);
        for i in 0..cfg.instances {
            let inst_seed = seed.wrapping_add(i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(inst_seed);
            let (field, labels) = random_instance(&mut rng, cfg.max_extent.max(1));
            let analytic = grad_fn(&field, &labels, &params)?;
            let shape = field.tensor().shape().to_vec();
            for k in 0..field.tensor().len() {
                let eval = |delta: f64| -> Result<f64, CliError> {
                    let mut t = field.tensor().clone();
                    t.data_mut()[k] += delta;
                    Ok(tversky_loss(&SoftmaxField::new(t)?, &labels, &params)?)
                };
                let numeric = (eval(cfg.h)? - eval(-cfg.h)?) / (2.0 * cfg.h);
                // The field gradient is of the index; the loss is one minus it.
                let a = -analytic.data()[k];
                let err = rel_error(a, numeric, cfg.floor);
                res.record(err, || Worst {
                    rel_error: err,
                    seed: inst_seed,
                    label: format!("field shape {shape:?}"),
                    coordinate: unravel(k, &shape),
                    analytic: a,
                    numeric,
                });
            }
        }
        results.push(res);
    }
    Ok(results)
}

fn unravel(mut k: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for (a, &e) in shape.iter().enumerate().rev() {
        idx[a] = k % e;
        k /= e;
    }
    idx
}

/// Central differences of the fused loss against backpropagated parameter
/// gradients of a small UNet. Coordinates whose perturbation flips a ReLU or
/// max-pool decision are skipped.
pub fn check_model_gradient(cfg: &ModelCheckConfig, seed: u64) -> Result<CheckResult, CliError> {
    let mconf = ModelConfig {
        depth: cfg.depth,
        base_channels: cfg.base_channels,
        ..ModelConfig::default()
    };
    let mut model = Model::<f64>::build(mconf)?;
    model.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let e = cfg.extent;
    let input = Tensor::from_fn(vec![1, 1, e, e, e], |_| rng.random_range(0.0..1.0));
    let n = e * e * e;
    let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
    labels[0] = 1;
    labels[n - 1] = 0;
    let labels = BinaryField::new([1, e, e, e], labels)?;
    let params = TverskyParams::new(cfg.alpha, cfg.beta, losses::DEFAULT_SMOOTH).map_err(|e| CliError::Config(e.to_string()))?;
    let weights = AdaptiveWeights::with_tversky(cfg.w_tversky, 0);

    let field = model.forward(&input)?;
    let (_, grad) = losses::total_loss_with_grad(&field, &labels, weights, &params)?;
    let analytic = model.backward(&grad)?;
    let base_sig = model.activation_signature();

    let mut res = CheckResult::new(format!("model grad (depth {}, {e}^3)", cfg.depth), cfg.tolerance);
    for (pid, grad) in analytic.iter().enumerate() {
        let name = model.params().name(pid).to_string();
        let shape = model.params().get(pid).shape().to_vec();
        for k in 0..model.params().get(pid).len() {
            let orig = model.params().get(pid).data()[k];
            let mut eval = |v: f64| -> Result<(f64, Option<u64>), CliError> {
                model.params_mut().get_mut(pid).data_mut()[k] = v;
                let f = model.forward(&input)?;
                let l = losses::total_loss(&f, &labels, weights, &params)?.l_total;
                Ok((l, model.activation_signature()))
            };
            let (lp, sp) = eval(orig + cfg.h)?;
            let (lm, sm) = eval(orig - cfg.h)?;
            model.params_mut().get_mut(pid).data_mut()[k] = orig;
            if sp != base_sig || sm != base_sig {
                res.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * cfg.h);
            let a = grad.data()[k];
            let err = rel_error(a, numeric, cfg.floor);
            res.record(err, || Worst {
                rel_error: err,
                seed,
                label: name.clone(),
                coordinate: unravel(k, &shape),
                analytic: a,
                numeric,
            });
        }
    }
    Ok(res)
}

/// Both suites with an injectable field-gradient function.
pub fn run_with(cfg: &GradcheckConfig, grad_fn: FieldGradFn) -> Result<GradcheckReport, CliError> {
    let mut checks = check_loss_gradient(&cfg.loss, cfg.seed, grad_fn)?;
    checks.push(check_model_gradient(&cfg.model, cfg.seed)?);
    Ok(GradcheckReport { checks })
}

pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport, CliError> {
    run_with(cfg, tversky_grad::<f64>)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_error(1.0, 1.0, 1e-8), 0.0);
        assert_eq!(rel_error(2.0, 1.0, 1e-8), 0.5);
        assert!((rel_error(0.0, 1e-12, 1e-8) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn unravel_row_major() {
        assert_eq!(unravel(7, &[2, 2, 2]), vec![1, 1, 1]);
        assert_eq!(unravel(5, &[2, 3]), vec![1, 2]);
    }
}
