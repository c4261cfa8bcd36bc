//! Dense row-major tensors.

use crate::error::TensorError;
use crate::scalar::Scalar;

/// Dense N-dimensional array, last index fastest.
///
/// Volumetric activations use the `(N, C, D, H, W)` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "rank must be at least 1".into(),
        });
    }
    if shape.contains(&0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self, TensorError> {
        let shape = shape.into();
        let numel = check_shape(&shape)?;
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                reason: format!("data length {} != product of extents {numel}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    /// Panics on a zero or empty shape; use [`Tensor::new`] for fallible construction.
    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = check_shape(&shape).expect("valid tensor shape");
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel = check_shape(&shape).expect("valid tensor shape");
        Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        Self::new(shape, self.data)
    }

    /// Shape as `(N, C, D, H, W)`, rejecting any other rank.
    pub fn dims5(&self, op: &'static str) -> Result<[usize; 5], TensorError> {
        match self.shape.as_slice() {
            &[n, c, d, h, w] => Ok([n, c, d, h, w]),
            _ => Err(TensorError::Rank {
                op,
                expected: 5,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, a: T) -> Self {
        self.map(|v| v * a)
    }

    /// In-place `self += other`; shapes must match exactly.
    pub fn add_assign(&mut self, other: &Self) -> Result<(), TensorError> {
        self.expect_same_shape("add", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Inner product accumulated in `f64` in index order.
    pub fn dot(&self, other: &Self) -> Result<f64, TensorError> {
        self.expect_same_shape("dot", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.as_f64() * b.as_f64())
            .sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max)
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Self) -> Result<(), TensorError> {
        if self.shape.len() != other.shape.len() {
            return Err(TensorError::Rank {
                op,
                expected: self.shape.len(),
                shape: other.shape.clone(),
            });
        }
        for (i, (&a, &b)) in self.shape.iter().zip(&other.shape).enumerate() {
            if a != b {
                return Err(TensorError::AxisMismatch {
                    op,
                    axis: axis_name(self.shape.len(), i),
                    expected: a,
                    actual: b,
                });
            }
        }
        Ok(())
    }

    /// Copies channels `range` of an `(N, C, D, H, W)` tensor.
    pub fn slice_channels(&self, range: std::ops::Range<usize>) -> Result<Self, TensorError> {
        let [n, c, d, h, w] = self.dims5("slice_channels")?;
        if range.start >= range.end || range.end > c {
            return Err(TensorError::Precondition {
                op: "slice_channels",
                reason: format!("channel range {range:?} outside 0..{c}"),
            });
        }
        let plane = d * h * w;
        let mut data = Vec::with_capacity(n * range.len() * plane);
        for b in 0..n {
            let base = b * c * plane;
            data.extend_from_slice(&self.data[base + range.start * plane..base + range.end * plane]);
        }
        Ok(Self {
            shape: vec![n, range.len(), d, h, w],
            data,
        })
    }
}

/// Human-readable axis name for diagnostics.
pub(crate) fn axis_name(rank: usize, axis: usize) -> &'static str {
    const NCDHW: [&str; 5] = ["N", "C", "D", "H", "W"];
    if rank == 5 {
        NCDHW[axis]
    } else {
        const GENERIC: [&str; 8] = ["0", "1", "2", "3", "4", "5", "6", "7"];
        GENERIC.get(axis).copied().unwrap_or("?")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch_and_zero_extent() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn shape_mismatch_names_axis() {
        let a = Tensor::<f64>::zeros(vec![1, 2, 4, 4, 4]);
        let b = Tensor::<f64>::zeros(vec![1, 2, 4, 5, 4]);
        let err = a.dot(&b).unwrap_err();
        assert!(err.to_string().contains("axis H"), "{err}");
    }

    #[test]
    fn slice_channels_picks_planes_per_sample() {
        let t = Tensor::<f32>::from_fn(vec![2, 3, 1, 1, 2], |i| i as f32);
        let s = t.slice_channels(1..3).unwrap();
        assert_eq!(s.shape(), &[2, 2, 1, 1, 2]);
        assert_eq!(s.data(), &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn cast_round_trips_f32_through_f64() {
        let t = Tensor::<f32>::from_fn(vec![7], |i| (i as f32 * 0.3).exp());
        assert_eq!(t.cast::<f64>().cast::<f32>(), t);
    }
}
