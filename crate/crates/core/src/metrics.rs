//! Confusion counts and overlap metrics.
//!
//! Degenerate denominators: when neither prediction nor truth has any
//! foreground (`tp = fp = fn = 0`), DSC, F2, sensitivity and precision
//! are 1. Any other zero denominator scores 0. Specificity is 1 when there are
//! no negatives.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::field::{BinaryField, SoftmaxField};
use crate::scalar::Scalar;

/// Foreground iff `p0 >= 0.5`.
pub fn binarize<T: Scalar>(p: &SoftmaxField<T>) -> BinaryField {
    let half = T::from_f64_lossy(0.5);
    let data = p.foreground().into_iter().map(|v| u8::from(v >= half)).collect();
    BinaryField::new(p.label_shape(), data).expect("shape derived from the field")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Voxel tallies over two equally-shaped binary masks.
pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts, TensorError> {
    if pred.len() != truth.len() {
        return Err(TensorError::Precondition {
            op: "confusion",
            reason: format!("{} predicted voxels vs {} truth voxels", pred.len(), truth.len()),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn confusion_fields(pred: &BinaryField, truth: &BinaryField) -> Result<ConfusionCounts, TensorError> {
    truth.check_matches("confusion", pred.shape())?;
    confusion(pred.data(), truth.data())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub dsc: f64,
    pub f2: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
}

impl Metrics {
    /// Arithmetic mean of each metric; `None` for an empty slice.
    pub fn mean(items: &[Metrics]) -> Option<Metrics> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let avg = |f: fn(&Metrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(Metrics {
            dsc: avg(|m| m.dsc),
            f2: avg(|m| m.f2),
            sensitivity: avg(|m| m.sensitivity),
            specificity: avg(|m| m.specificity),
            precision: avg(|m| m.precision),
        })
    }
}

fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics_from_confusion(c: &ConfusionCounts) -> Metrics {
    let no_foreground = c.tp + c.fp + c.fn_ == 0;
    let empty = if no_foreground { 1.0 } else { 0.0 };
    Metrics {
        dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, empty),
        f2: ratio(5 * c.tp, 5 * c.tp + 4 * c.fn_ + c.fp, empty),
        sensitivity: ratio(c.tp, c.tp + c.fn_, empty),
        specificity: ratio(c.tn, c.tn + c.fp, 1.0),
        precision: ratio(c.tp, c.tp + c.fp, empty),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn binarize_threshold_and_tie() {
        let p = SoftmaxField::from_foreground([1, 1, 1, 3], &[0.51f32, 0.5, 0.49]).unwrap();
        assert_eq!(binarize(&p).data(), &[1, 1, 0]);
        let p = SoftmaxField::new(Tensor::new(vec![1, 2, 1, 1, 1], vec![0.5f64, 0.5]).unwrap()).unwrap();
        assert_eq!(binarize(&p).data(), &[1]);
    }

    #[test]
    fn confusion_extremes() {
        let t = [1u8, 0, 1, 1, 0];
        let c = confusion(&t, &t).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let inv: Vec<u8> = t.iter().map(|v| 1 - v).collect();
        let c = confusion(&inv, &t).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert!(confusion(&t, &t[..4]).is_err());
    }

    #[test]
    fn count_completion_on_4_cubed() {
        let mut truth = vec![0u8; 64];
        let mut pred = vec![0u8; 64];
        truth[..4].fill(1);
        pred[..3].fill(1);
        pred[10] = 1;
        let c = confusion(&pred, &truth).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 3, fp: 1, fn_: 1, tn: 59 });
    }

    #[test]
    fn worked_example() {
        let m = metrics_from_confusion(&ConfusionCounts { tp: 3, fp: 1, fn_: 1, tn: 59 });
        assert_eq!(m.sensitivity, 0.75);
        assert_eq!(m.precision, 0.75);
        assert_eq!(m.specificity, 59.0 / 60.0);
        assert_eq!(m.dsc, 0.75);
        assert_eq!(m.f2, 0.75);
    }

    #[test]
    fn perfect_and_empty_conventions() {
        let all_one = Metrics {
            dsc: 1.0,
            f2: 1.0,
            sensitivity: 1.0,
            specificity: 1.0,
            precision: 1.0,
        };
        assert_eq!(metrics_from_confusion(&ConfusionCounts { tp: 5, tn: 10, fp: 0, fn_: 0 }), all_one);
        assert_eq!(metrics_from_confusion(&ConfusionCounts { tp: 0, tn: 10, fp: 0, fn_: 0 }), all_one);
        let fp_only = metrics_from_confusion(&ConfusionCounts { tp: 0, tn: 8, fp: 2, fn_: 0 });
        assert_eq!((fp_only.dsc, fp_only.sensitivity, fp_only.precision), (0.0, 0.0, 0.0));
        let all_fg = metrics_from_confusion(&ConfusionCounts { tp: 4, tn: 0, fp: 0, fn_: 0 });
        assert_eq!(all_fg.specificity, 1.0);
    }

    #[test]
    fn counts_merge_additively() {
        let a = confusion(&[1, 0, 1], &[1, 1, 0]).unwrap();
        let b = confusion(&[0, 0], &[0, 1]).unwrap();
        assert_eq!(a + b, confusion(&[1, 0, 1, 0, 0], &[1, 1, 0, 0, 1]).unwrap());
    }
}
