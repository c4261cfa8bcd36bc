//! Tversky, cross-entropy and the adaptive Tversky/cross-entropy fusion.
//!
//! With `p0`/`p1` the foreground/background probabilities and `g0`/`g1` the
//! matching one-hot labels, the Tversky index over all voxels is
//!
//! ```text
//! T = (Σ p0 g0 + s) / (Σ p0 g0 + α Σ p0 g1 + β Σ p1 g0 + s)
//! ```
//!
//! and the trained Tversky loss is `1 - T`. The fused objective is
//! `w_t · (1 - T) + w_b · BCE` where the weights for epoch `t` are the
//! shares of each component in the epoch `t - 1` losses.
//!
//! Reductions accumulate in `f64` in voxel order regardless of `T`.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::field::{BinaryField, SoftmaxField};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probability clamp applied before every logarithm.
pub const LOG_CLAMP: f64 = 1e-7;

/// Default additive smoothing for the Tversky ratio.
pub const DEFAULT_SMOOTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TverskyParams {
    /// False-positive penalty.
    pub alpha: f64,
    /// False-negative penalty.
    pub beta: f64,
    pub smooth: f64,
}

impl TverskyParams {
    /// α = 0.7, β = 0.3.
    pub const RECALL_WEIGHTED: Self = Self {
        alpha: 0.7,
        beta: 0.3,
        smooth: DEFAULT_SMOOTH,
    };
    /// α = β = 0.5 (Dice).
    pub const BALANCED: Self = Self {
        alpha: 0.5,
        beta: 0.5,
        smooth: DEFAULT_SMOOTH,
    };

    pub fn new(alpha: f64, beta: f64, smooth: f64) -> Result<Self, TensorError> {
        let ok = alpha >= 0.0 && beta >= 0.0 && smooth > 0.0 && alpha.is_finite() && beta.is_finite() && smooth.is_finite();
        if !ok {
            return Err(TensorError::Precondition {
                op: "TverskyParams",
                reason: format!("need alpha >= 0, beta >= 0, smooth > 0; got ({alpha}, {beta}, {smooth})"),
            });
        }
        Ok(Self { alpha, beta, smooth })
    }
}

/// Soft confusion sums of a two-channel field against binary labels.
#[derive(Clone, Copy, Debug, PartialEq)]
struct SoftCounts {
    tp: f64,
    fp: f64,
    fn_: f64,
}

fn check_pair<T: Scalar>(op: &'static str, p: &SoftmaxField<T>, g: &BinaryField) -> Result<(), TensorError> {
    if p.channels() != 2 {
        return Err(TensorError::AxisMismatch {
            op,
            axis: "C",
            expected: 2,
            actual: p.channels(),
        });
    }
    g.check_matches(op, p.label_shape())
}

fn soft_counts<T: Scalar>(p: &SoftmaxField<T>, g: &BinaryField) -> SoftCounts {
    let plane = p.voxels_per_sample();
    let mut c = SoftCounts {
        tp: 0.0,
        fp: 0.0,
        fn_: 0.0,
    };
    for n in 0..p.batch() {
        let labels = &g.data()[n * plane..(n + 1) * plane];
        for ((&p0, &p1), &g0) in p.channel(n, 0).iter().zip(p.channel(n, 1)).zip(labels) {
            let (p0, p1) = (p0.as_f64(), p1.as_f64());
            if g0 == 1 {
                c.tp += p0;
                c.fn_ += p1;
            } else {
                c.fp += p0;
            }
        }
    }
    c
}

fn ratio_parts(c: SoftCounts, params: &TverskyParams) -> (f64, f64) {
    let num = c.tp + params.smooth;
    let den = c.tp + params.alpha * c.fp + params.beta * c.fn_ + params.smooth;
    (num, den)
}

/// Tversky index in `(0, 1]` for probability-valued fields.
pub fn tversky_index<T: Scalar>(p: &SoftmaxField<T>, g: &BinaryField, params: &TverskyParams) -> Result<f64, TensorError> {
    check_pair("tversky_index", p, g)?;
    let (num, den) = ratio_parts(soft_counts(p, g), params);
    Ok(num / den)
}

/// `1 - tversky_index`.
pub fn tversky_loss<T: Scalar>(p: &SoftmaxField<T>, g: &BinaryField, params: &TverskyParams) -> Result<f64, TensorError> {
    Ok(1.0 - tversky_index(p, g, params)?)
}

/// Gradient of the Tversky **index** with respect to both channels, laid out
/// like the field. `p0` and `p1` are treated as independent variables:
///
/// ```text
/// ∂T/∂p0_i = (g0_i · den - (g0_i + α g1_i) · num) / den²
/// ∂T/∂p1_i = -β g0_i · num / den²
/// ```
pub fn tversky_grad<T: Scalar>(
    p: &SoftmaxField<T>,
    g: &BinaryField,
    params: &TverskyParams,
) -> Result<Tensor<T>, TensorError> {
    check_pair("tversky_grad", p, g)?;
    let (num, den) = ratio_parts(soft_counts(p, g), params);
    let den2 = den * den;
    let d_p0_fg = T::from_f64_lossy((den - num) / den2);
    let d_p0_bg = T::from_f64_lossy(-params.alpha * num / den2);
    let d_p1_fg = T::from_f64_lossy(-params.beta * num / den2);

    let plane = p.voxels_per_sample();
    let mut out = Tensor::zeros(p.tensor().shape().to_vec());
    let data = out.data_mut();
    for n in 0..p.batch() {
        let labels = &g.data()[n * plane..(n + 1) * plane];
        let base = n * 2 * plane;
        for (v, &g0) in labels.iter().enumerate() {
            if g0 == 1 {
                data[base + v] = d_p0_fg;
                data[base + plane + v] = d_p1_fg;
            } else {
                data[base + v] = d_p0_bg;
            }
        }
    }
    Ok(out)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP)
}

/// Mean binary cross-entropy of foreground probabilities against `{0,1}` truth.
pub fn bce_loss<T: Scalar>(p_fg: &[T], truth: &[u8]) -> Result<f64, TensorError> {
    if p_fg.len() != truth.len() || p_fg.is_empty() {
        return Err(TensorError::Precondition {
            op: "bce_loss",
            reason: format!("{} probabilities vs {} labels", p_fg.len(), truth.len()),
        });
    }
    let sum: f64 = p_fg
        .iter()
        .zip(truth)
        .map(|(&p, &t)| {
            let p = clamp_prob(p.as_f64());
            if t == 1 {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum();
    Ok(-sum / p_fg.len() as f64)
}

/// `∂BCE/∂p` per voxel; zero where the clamp is active.
pub fn bce_grad<T: Scalar>(p_fg: &[T], truth: &[u8]) -> Result<Vec<T>, TensorError> {
    if p_fg.len() != truth.len() || p_fg.is_empty() {
        return Err(TensorError::Precondition {
            op: "bce_grad",
            reason: format!("{} probabilities vs {} labels", p_fg.len(), truth.len()),
        });
    }
    let n = p_fg.len() as f64;
    Ok(p_fg
        .iter()
        .zip(truth)
        .map(|(&p, &t)| {
            let p = p.as_f64();
            if !(LOG_CLAMP..=1.0 - LOG_CLAMP).contains(&p) {
                return T::zero();
            }
            let g = if t == 1 { -1.0 / p } else { 1.0 / (1.0 - p) };
            T::from_f64_lossy(g / n)
        })
        .collect())
}

/// Multi-class cross-entropy. `probs` holds one row of `classes`
/// probabilities per sample; `targets` holds class indices.
pub fn ce_loss<T: Scalar>(probs: &[T], targets: &[usize], classes: usize) -> Result<f64, TensorError> {
    const OP: &str = "ce_loss";
    if classes < 2 {
        return Err(TensorError::Precondition {
            op: OP,
            reason: format!("need at least 2 classes, got {classes}"),
        });
    }
    if targets.is_empty() || probs.len() != targets.len() * classes {
        return Err(TensorError::Precondition {
            op: OP,
            reason: format!("{} probabilities for {} samples of {classes} classes", probs.len(), targets.len()),
        });
    }
    let mut sum = 0.0;
    for (row, &t) in probs.chunks(classes).zip(targets) {
        if t >= classes {
            return Err(TensorError::Precondition {
                op: OP,
                reason: format!("target class {t} out of range 0..{classes}"),
            });
        }
        sum += clamp_prob(row[t].as_f64()).ln();
    }
    Ok(-sum / targets.len() as f64)
}

/// Fusion weights in force for one epoch. `w_bce` is always `1 - w_tversky`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveWeights {
    pub w_tversky: f64,
    pub w_bce: f64,
    pub epoch: usize,
}

impl AdaptiveWeights {
    /// `(0.5, 0.5)` at epoch 0, before any loss has been observed.
    pub fn initial() -> Self {
        Self::with_tversky(0.5, 0)
    }

    /// Pure Tversky training: `(1, 0)`.
    pub fn tversky_only(epoch: usize) -> Self {
        Self::with_tversky(1.0, epoch)
    }

    /// Panics unless `w_tversky` lies in `[0, 1]`.
    pub fn with_tversky(w_tversky: f64, epoch: usize) -> Self {
        assert!((0.0..=1.0).contains(&w_tversky), "weight {w_tversky} outside [0, 1]");
        Self {
            w_tversky,
            w_bce: 1.0 - w_tversky,
            epoch,
        }
    }

    /// Weights for `epoch` from the previous epoch's component losses.
    pub fn from_previous(l_tversky: f64, l_bce: f64, epoch: usize) -> Self {
        let total = l_tversky + l_bce;
        if !total.is_finite() || total <= 0.0 {
            return Self::with_tversky(0.5, epoch);
        }
        Self::with_tversky((l_tversky / total).clamp(0.0, 1.0), epoch)
    }
}

/// Component losses, their fusion, and the weights that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_tversky: f64,
    pub l_bce: f64,
    pub l_total: f64,
    pub weights: AdaptiveWeights,
}

impl LossReport {
    pub fn from_components(l_tversky: f64, l_bce: f64, weights: AdaptiveWeights) -> Self {
        Self {
            l_tversky,
            l_bce,
            l_total: weights.w_tversky * l_tversky + weights.w_bce * l_bce,
            weights,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_tversky.is_finite() && self.l_bce.is_finite() && self.l_total.is_finite()
    }
}

/// Weights for the epoch after `prev`; falls back to `(0.5, 0.5)` when both
/// previous losses are zero.
pub fn adaptive_weights(prev: &LossReport) -> AdaptiveWeights {
    AdaptiveWeights::from_previous(prev.l_tversky, prev.l_bce, prev.weights.epoch + 1)
}

/// Fused loss of a two-channel field; BCE uses the foreground channel.
pub fn total_loss<T: Scalar>(
    p: &SoftmaxField<T>,
    g: &BinaryField,
    weights: AdaptiveWeights,
    params: &TverskyParams,
) -> Result<LossReport, TensorError> {
    let l_tversky = tversky_loss(p, g, params)?;
    let l_bce = bce_loss(&p.foreground(), g.data())?;
    Ok(LossReport::from_components(l_tversky, l_bce, weights))
}

/// [`total_loss`] together with its gradient with respect to the field.
pub fn total_loss_with_grad<T: Scalar>(
    p: &SoftmaxField<T>,
    g: &BinaryField,
    weights: AdaptiveWeights,
    params: &TverskyParams,
) -> Result<(LossReport, Tensor<T>), TensorError> {
    let report = total_loss(p, g, weights, params)?;
    let w_t = T::from_f64_lossy(weights.w_tversky);
    let w_b = T::from_f64_lossy(weights.w_bce);
    // d(1 - T) = -dT
    let mut grad = tversky_grad(p, g, params)?.scale(-w_t);
    let dbce = bce_grad(&p.foreground(), g.data())?;
    let plane = p.voxels_per_sample();
    let data = grad.data_mut();
    for n in 0..p.batch() {
        let base = n * 2 * plane;
        for (v, &d) in dbce[n * plane..(n + 1) * plane].iter().enumerate() {
            data[base + v] += w_b * d;
        }
    }
    Ok((report, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(p0: &[f64], p1: &[f64]) -> SoftmaxField<f64> {
        let mut data = p0.to_vec();
        data.extend_from_slice(p1);
        SoftmaxField::new(Tensor::new(vec![1, 2, 1, 1, p0.len()], data).unwrap()).unwrap()
    }

    fn labels(g0: &[u8]) -> BinaryField {
        BinaryField::new([1, 1, 1, g0.len()], g0.to_vec()).unwrap()
    }

    fn tiny(alpha: f64, beta: f64) -> TverskyParams {
        TverskyParams::new(alpha, beta, 1e-14).unwrap()
    }

    #[test]
    fn perfect_hard_prediction_has_unit_index() {
        let g = [1, 0, 1, 1];
        let p0: Vec<f64> = g.iter().map(|&v| v as f64).collect();
        let p1: Vec<f64> = p0.iter().map(|v| 1.0 - v).collect();
        let t = tversky_index(&field(&p0, &p1), &labels(&g), &tiny(0.7, 0.3)).unwrap();
        assert!((t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confusion_arithmetic_example() {
        // TP = 1, FP = 1, FN = 1.
        let p = field(&[1.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 1.0]);
        let g = labels(&[1, 0, 1, 0]);
        let t = tversky_index(&p, &g, &tiny(0.7, 0.3)).unwrap();
        assert!((t - 0.5).abs() < 1e-12);
        assert!((tversky_loss(&p, &g, &tiny(0.7, 0.3)).unwrap() - 0.5).abs() < 1e-12);
        // α = β = 0.5 reproduces Dice 2·1/(2+1+1).
        let d = tversky_index(&p, &g, &tiny(0.5, 0.5)).unwrap();
        assert!((d - 0.5).abs() < 1e-12);
    }

    #[test]
    fn disjoint_prediction_has_unit_loss() {
        let g = [1u8, 0, 0, 1];
        let p0: Vec<f64> = g.iter().map(|&v| 1.0 - v as f64).collect();
        let p1: Vec<f64> = p0.iter().map(|v| 1.0 - v).collect();
        let l = tversky_loss(&field(&p0, &p1), &labels(&g), &tiny(0.5, 0.5)).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_example_values_match_finite_differences() {
        let params = TverskyParams {
            alpha: 0.5,
            beta: 0.5,
            smooth: 0.0,
        };
        let p0 = [0.5, 0.5];
        let p1 = [0.5, 0.5];
        let g = labels(&[1, 0]);
        let grad = tversky_grad(&field(&p0, &p1), &g, &params).unwrap();
        let h = 1e-5;
        let fd = |ch: usize, i: usize| {
            let bump = |delta: f64| {
                let (mut a, mut b) = (p0, p1);
                if ch == 0 {
                    a[i] += delta
                } else {
                    b[i] += delta
                }
                tversky_index(&field(&a, &b), &g, &params).unwrap()
            };
            (bump(h) - bump(-h)) / (2.0 * h)
        };
        // (channel, voxel, frozen value)
        for (ch, i, want) in [(0, 0, 0.5), (0, 1, -0.25), (1, 0, -0.25), (1, 1, 0.0)] {
            let got = grad.data()[ch * 2 + i];
            assert!((got - want).abs() < 1e-12, "analytic ({ch},{i}) = {got}");
            assert!((fd(ch, i) - want).abs() < 1e-9, "fd ({ch},{i}) = {}", fd(ch, i));
        }
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(&[0.5f64, 0.5, 0.5], &[1, 0, 1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let near_zero = bce_loss(&[1.0f64, 0.0], &[1, 0]).unwrap();
        assert!(near_zero >= 0.0 && near_zero <= -(1.0 - LOG_CLAMP).ln() + 1e-15);
        let v = bce_loss(&[0.9f64, 0.2], &[1, 0]).unwrap();
        assert!((v - 0.164_252_033_486_018_1).abs() < 1e-12, "{v}");
    }

    #[test]
    fn ce_examples() {
        let v = ce_loss(&[0.7f64, 0.2, 0.1], &[0], 3).unwrap();
        assert!((v - 0.356_674_943_938_732_4).abs() < 1e-12);
        let uniform = vec![0.25f64; 8];
        assert!((ce_loss(&uniform, &[0, 3], 4).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(ce_loss(&[1.0f64], &[0], 1).is_err());
        assert!(ce_loss(&[0.5f64, 0.5], &[2], 2).is_err());
    }

    #[test]
    fn ce_with_two_classes_is_bce() {
        let p_fg = [0.9f64, 0.2, 0.6, 1e-9];
        let t = [1u8, 0, 0, 1];
        let rows: Vec<f64> = p_fg.iter().flat_map(|&p| [p, 1.0 - p]).collect();
        let targets: Vec<usize> = t.iter().map(|&v| if v == 1 { 0 } else { 1 }).collect();
        let ce = ce_loss(&rows, &targets, 2).unwrap();
        let bce = bce_loss(&p_fg, &t).unwrap();
        assert!((ce - bce).abs() < 1e-12);
    }

    #[test]
    fn adaptive_weight_examples() {
        let prev = LossReport::from_components(0.3, 0.1, AdaptiveWeights::initial());
        let w = adaptive_weights(&prev);
        assert!((w.w_tversky - 0.75).abs() < 1e-15);
        assert_eq!(w.w_tversky + w.w_bce, 1.0);
        assert_eq!(w.epoch, 1);
        let eq = AdaptiveWeights::from_previous(0.2, 0.2, 4);
        assert_eq!((eq.w_tversky, eq.w_bce), (0.5, 0.5));
        assert_eq!(AdaptiveWeights::initial(), AdaptiveWeights::with_tversky(0.5, 0));
        let degenerate = AdaptiveWeights::from_previous(0.0, 0.0, 2);
        assert_eq!((degenerate.w_tversky, degenerate.w_bce), (0.5, 0.5));
    }

    #[test]
    fn total_loss_examples() {
        let p = field(&[1.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 1.0]);
        let g = labels(&[1, 0, 1, 0]);
        let params = tiny(0.5, 0.5);
        let r = total_loss(&p, &g, AdaptiveWeights::tversky_only(0), &params).unwrap();
        assert_eq!(r.l_total, r.l_tversky);

        // l_tversky = 0.5 and l_bce = ln 2.
        let half = field(&[0.5; 4], &[0.5; 4]);
        let lt = tversky_loss(&half, &g, &params).unwrap();
        assert!((lt - 0.5).abs() < 1e-12);
        let r = total_loss(&half, &g, AdaptiveWeights::initial(), &params).unwrap();
        assert!((r.l_total - 0.596_573_590_279_972_6).abs() < 1e-12, "{}", r.l_total);

        let r = total_loss(&p, &g, AdaptiveWeights::with_tversky(0.75, 3), &params).unwrap();
        assert!(r.l_total >= r.l_tversky.min(r.l_bce) && r.l_total <= r.l_tversky.max(r.l_bce));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = field(&[0.5; 4], &[0.5; 4]);
        let g = labels(&[1, 0, 1]);
        assert!(tversky_index(&p, &g, &TverskyParams::BALANCED).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(TverskyParams::new(-0.1, 0.3, 1e-6).is_err());
        assert!(TverskyParams::new(0.7, 0.3, 0.0).is_err());
        assert!(TverskyParams::new(0.7, 0.3, 1e-6).is_ok());
    }
}
