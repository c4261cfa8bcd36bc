//! Per-voxel probability and label fields.

use crate::error::TensorError;
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Channel-wise probabilities `(N, C, D, H, W)`; channel 0 is foreground
/// (pancreas), channel 1 background.
///
/// Fields produced by [`SoftmaxField::from_logits`] sum to one per voxel.
/// [`SoftmaxField::new`] only checks the layout so that gradient checks can
/// perturb single channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxField<T> {
    probs: Tensor<T>,
}

impl<T: Scalar> SoftmaxField<T> {
    pub fn new(probs: Tensor<T>) -> Result<Self, TensorError> {
        let [_, c, ..] = probs.dims5("SoftmaxField")?;
        if c < 2 {
            return Err(TensorError::Precondition {
                op: "SoftmaxField",
                reason: format!("need at least 2 channels, got {c}"),
            });
        }
        Ok(Self { probs })
    }

    pub fn from_logits(logits: &Tensor<T>) -> Result<Self, TensorError> {
        Ok(Self {
            probs: ops::softmax_channels(logits)?,
        })
    }

    /// Two-channel field `(p, 1 - p)` from foreground probabilities laid out
    /// as `(N, D, H, W)`.
    pub fn from_foreground(shape: [usize; 4], fg: &[T]) -> Result<Self, TensorError> {
        let [n, d, h, w] = shape;
        let plane = d * h * w;
        if fg.len() != n * plane {
            return Err(TensorError::Precondition {
                op: "SoftmaxField::from_foreground",
                reason: format!("{} probabilities for shape {shape:?}", fg.len()),
            });
        }
        let mut data = Vec::with_capacity(2 * fg.len());
        for s in 0..n {
            let p = &fg[s * plane..(s + 1) * plane];
            data.extend_from_slice(p);
            data.extend(p.iter().map(|&v| T::one() - v));
        }
        Self::new(Tensor::new(vec![n, 2, d, h, w], data)?)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.probs
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.probs
    }

    pub fn batch(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        let s = self.probs.shape();
        [s[2], s[3], s[4]]
    }

    pub fn voxels_per_sample(&self) -> usize {
        self.spatial().iter().product()
    }

    /// Total voxel count over the batch.
    pub fn voxel_count(&self) -> usize {
        self.batch() * self.voxels_per_sample()
    }

    /// Channel `ch` of sample `n` as a contiguous slice.
    pub fn channel(&self, n: usize, ch: usize) -> &[T] {
        let plane = self.voxels_per_sample();
        let start = (n * self.channels() + ch) * plane;
        &self.probs.data()[start..start + plane]
    }

    /// Foreground probabilities of the whole batch in `(N, D, H, W)` order.
    pub fn foreground(&self) -> Vec<T> {
        (0..self.batch()).flat_map(|n| self.channel(n, 0).iter().copied()).collect()
    }

    /// Shape of the matching label field.
    pub fn label_shape(&self) -> [usize; 4] {
        let [d, h, w] = self.spatial();
        [self.batch(), d, h, w]
    }
}

/// Binary voxel field `(N, D, H, W)` with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryField {
    shape: [usize; 4],
    data: Vec<u8>,
}

impl BinaryField {
    pub fn new(shape: [usize; 4], data: Vec<u8>) -> Result<Self, TensorError> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("{} labels", data.len()),
            });
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(TensorError::Precondition {
                op: "BinaryField",
                reason: format!("value {} at voxel {i} is not binary", data[i]),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub(crate) fn check_matches(&self, op: &'static str, shape: [usize; 4]) -> Result<(), TensorError> {
        const AXES: [&str; 4] = ["N", "D", "H", "W"];
        for axis in 0..4 {
            if self.shape[axis] != shape[axis] {
                return Err(TensorError::AxisMismatch {
                    op,
                    axis: AXES[axis],
                    expected: shape[axis],
                    actual: self.shape[axis],
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_field_rejects_other_values() {
        assert!(BinaryField::new([1, 1, 1, 2], vec![0, 2]).is_err());
        assert!(BinaryField::new([1, 1, 1, 2], vec![0, 1]).is_ok());
        assert!(BinaryField::new([1, 1, 1, 2], vec![0]).is_err());
    }

    #[test]
    fn from_foreground_builds_complement() {
        let f = SoftmaxField::from_foreground([2, 1, 1, 2], &[0.25f64, 1.0, 0.0, 0.5]).unwrap();
        assert_eq!(f.channel(0, 1), &[0.75, 0.0]);
        assert_eq!(f.channel(1, 0), &[0.0, 0.5]);
        assert_eq!(f.foreground(), vec![0.25, 1.0, 0.0, 0.5]);
    }
}
