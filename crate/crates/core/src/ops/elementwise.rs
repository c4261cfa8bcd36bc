//! ReLU, channel softmax, channel concatenation and addition.

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of [`relu`] from its cached output; the slope at 0 is 0.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    output.expect_same_shape("relu_backward", grad_out)?;
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(output.shape().to_vec(), data)
}

/// Per-voxel softmax over the channel axis of an `(N, C, D, H, W)` tensor,
/// with max subtraction.
pub fn softmax_channels<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    const OP: &str = "softmax_channels";
    let [n, c, d, h, w] = input.dims5(OP)?;
    if c < 2 {
        return Err(TensorError::Precondition {
            op: OP,
            reason: format!("need at least 2 channels, got {c}"),
        });
    }
    let plane = d * h * w;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        let base = b * c * plane;
        for v in 0..plane {
            let at = |ch: usize| base + ch * plane + v;
            let mut max = x[at(0)];
            for ch in 1..c {
                max = max.max(x[at(ch)]);
            }
            let mut sum = T::zero();
            for ch in 0..c {
                let e = (x[at(ch)] - max).exp();
                out[at(ch)] = e;
                sum += e;
            }
            for ch in 0..c {
                out[at(ch)] /= sum;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// `dx_c = y_c (g_c - Σ_j g_j y_j)` per voxel.
pub fn softmax_channels_backward<T: Scalar>(
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    const OP: &str = "softmax_channels_backward";
    output.expect_same_shape(OP, grad_out)?;
    let [n, c, d, h, w] = output.dims5(OP)?;
    let plane = d * h * w;
    let (y, g) = (output.data(), grad_out.data());
    let mut dx = vec![T::zero(); y.len()];
    for b in 0..n {
        let base = b * c * plane;
        for v in 0..plane {
            let mut inner = T::zero();
            for ch in 0..c {
                let i = base + ch * plane + v;
                inner += g[i] * y[i];
            }
            for ch in 0..c {
                let i = base + ch * plane + v;
                dx[i] = y[i] * (g[i] - inner);
            }
        }
    }
    Tensor::new(output.shape().to_vec(), dx)
}

/// Stacks `b`'s channels after `a`'s; batch and spatial extents must match.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    const OP: &str = "concat_channels";
    let [n, ca, d, h, w] = a.dims5(OP)?;
    let [nb, cb, db, hb, wb] = b.dims5(OP)?;
    for (axis, x, y) in [("N", n, nb), ("D", d, db), ("H", h, hb), ("W", w, wb)] {
        if x != y {
            return Err(TensorError::AxisMismatch {
                op: OP,
                axis,
                expected: x,
                actual: y,
            });
        }
    }
    let plane = d * h * w;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for s in 0..n {
        data.extend_from_slice(&a.data()[s * ca * plane..(s + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[s * cb * plane..(s + 1) * cb * plane]);
    }
    Tensor::new(vec![n, ca + cb, d, h, w], data)
}

/// Splits a concatenated gradient back into the two operand gradients.
pub fn concat_channels_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    channels_a: usize,
) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
    let [_, c, ..] = grad_out.dims5("concat_channels_backward")?;
    Ok((
        grad_out.slice_channels(0..channels_a)?,
        grad_out.slice_channels(channels_a..c)?,
    ))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}
