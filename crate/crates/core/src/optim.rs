//! Adam and a plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::OptimError;
use crate::graph::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || params.values().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified when any gradient is
/// non-finite or mis-shaped.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<(), OptimError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(OptimError::Count {
            expected: params.len(),
            actual: grads.len(),
        });
    }
    for (id, g) in grads.iter().enumerate() {
        let p = params.get(id);
        if g.shape() != p.shape() {
            return Err(OptimError::ShapeMismatch {
                name: params.name(id).to_string(),
                expected: p.shape().to_vec(),
                actual: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(OptimError::NonFiniteGradient {
                name: params.name(id).to_string(),
            });
        }
    }

    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let b1 = T::from_f64_lossy(beta1);
    let b2 = T::from_f64_lossy(beta2);
    let one = T::one();
    // lr · m̂ / (sqrt(v̂) + eps) with the corrections folded into two constants.
    let step_size = T::from_f64_lossy(lr / c1);
    let inv_sqrt_c2 = T::from_f64_lossy(1.0 / c2.sqrt());
    let eps = T::from_f64_lossy(eps);

    for (id, g) in grads.iter().enumerate() {
        let m = state.m[id].data_mut();
        let v = state.v[id].data_mut();
        let p = params.get_mut(id).data_mut();
        for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p -= step_size * *m / (v.sqrt() * inv_sqrt_c2 + eps);
        }
    }
    Ok(())
}

/// Multiplies the learning rate by `decay_factor` after `patience` epochs
/// without a strict validation-loss improvement, never below `floor_lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub current_lr: f64,
    pub decay_factor: f64,
    pub patience: usize,
    pub floor_lr: f64,
    pub best_val_loss: Option<f64>,
    pub epochs_since_improvement: usize,
}

impl LrSchedule {
    pub fn new(initial_lr: f64, decay_factor: f64, patience: usize, floor_lr: f64) -> Self {
        Self {
            initial_lr,
            current_lr: initial_lr,
            decay_factor,
            patience,
            floor_lr: floor_lr.min(initial_lr),
            best_val_loss: None,
            epochs_since_improvement: 0,
        }
    }

    /// Records one epoch's validation loss and returns the learning rate for
    /// the next epoch.
    pub fn update(&mut self, val_loss: f64) -> f64 {
        let improved = match self.best_val_loss {
            None => val_loss.is_finite(),
            Some(best) => val_loss < best,
        };
        if improved {
            self.best_val_loss = Some(val_loss);
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement >= self.patience {
                self.current_lr = (self.current_lr * self.decay_factor).max(self.floor_lr);
                self.epochs_since_improvement = 0;
            }
        }
        self.current_lr
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::new(0.005, 0.5, 10, 1e-5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[&[f32]]) -> ParamStore<f32> {
        let mut p = ParamStore::new();
        for (i, v) in values.iter().enumerate() {
            p.push(format!("p{i}"), Tensor::new(vec![v.len()], v.to_vec()).unwrap());
        }
        p
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = store(&[&[1.0, -2.0]]);
        let before = p.clone();
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &[Tensor::zeros(vec![2])], &mut s, 0.005).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let lr = 0.005;
        let mut p = store(&[&[0.0, 0.0]]);
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &[Tensor::new(vec![2], vec![3.0, -0.02]).unwrap()], &mut s, lr).unwrap();
        let d = p.get(0).data();
        assert!(d[0] < 0.0 && d[1] > 0.0);
        for v in d {
            let mag = v.abs() as f64;
            assert!(mag >= 0.9 * lr && mag <= lr * (1.0 + 1e-5), "{mag}");
        }
    }

    #[test]
    fn equal_gradients_equal_updates() {
        let mut p = store(&[&[0.5], &[0.5]]);
        let mut s = AdamState::new(&p, AdamConfig::default());
        let g = Tensor::new(vec![1], vec![0.3]).unwrap();
        for _ in 0..3 {
            adam_step(&mut p, &[g.clone(), g.clone()], &mut s, 0.01).unwrap();
        }
        assert_eq!(p.get(0), p.get(1));
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut p = store(&[&[1.0], &[2.0]]);
        let before = p.clone();
        let mut s = AdamState::new(&p, AdamConfig::default());
        let grads = [Tensor::new(vec![1], vec![0.1]).unwrap(), Tensor::new(vec![1], vec![f32::NAN]).unwrap()];
        let err = adam_step(&mut p, &grads, &mut s, 0.01).unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGradient { name: "p1".into() });
        assert_eq!(p, before);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn gradient_scale_invariance_in_large_limit() {
        let cfg = AdamConfig::default();
        let g = 1e3 * cfg.eps;
        let step = |scale: f64| {
            let mut p = ParamStore::<f64>::new();
            p.push("x", Tensor::zeros(vec![1]));
            let mut s = AdamState::new(&p, cfg);
            adam_step(&mut p, &[Tensor::full(vec![1], g * scale)], &mut s, 0.005).unwrap();
            p.get(0).data()[0].abs()
        };
        let (a, b) = (step(1.0), step(2.0));
        assert!((a - b).abs() / a < 0.01, "{a} vs {b}");
    }

    #[test]
    fn schedule_holds_while_improving() {
        let mut s = LrSchedule::default();
        for i in 0..30 {
            assert_eq!(s.update(1.0 - i as f64 * 0.01), 0.005);
        }
    }

    #[test]
    fn schedule_halves_after_ten_flat_epochs() {
        let mut s = LrSchedule::default();
        s.update(1.0);
        for _ in 0..9 {
            assert_eq!(s.update(1.0), 0.005);
        }
        assert_eq!(s.update(1.0), 0.0025);
    }

    #[test]
    fn schedule_clamps_at_floor() {
        let mut s = LrSchedule::default();
        s.update(1.0);
        for _ in 0..500 {
            s.update(2.0);
            assert!(s.current_lr >= s.floor_lr && s.current_lr <= s.initial_lr);
        }
        assert_eq!(s.current_lr, 1e-5);
    }
}
