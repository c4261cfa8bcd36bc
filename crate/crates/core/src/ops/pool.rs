use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output of [`maxpool3d`]: pooled values plus the flat input index of the
/// winner of every window, used to route gradients.
#[derive(Clone, Debug)]
pub struct Pooled<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<u32>,
}

/// Max pooling over disjoint `window³` blocks (stride = window).
///
/// Ties resolve to the first element in `z, y, x` scan order.
pub fn maxpool3d<T: Scalar>(input: &Tensor<T>, window: usize) -> Result<Pooled<T>, TensorError> {
    const OP: &str = "maxpool3d";
    let [n, c, d, h, w] = input.dims5(OP)?;
    if window == 0 {
        return Err(TensorError::Precondition {
            op: OP,
            reason: "window must be at least 1".into(),
        });
    }
    for (axis, e) in [("D", d), ("H", h), ("W", w)] {
        if e % window != 0 {
            return Err(TensorError::Precondition {
                op: OP,
                reason: format!("axis {axis}: extent {e} is not divisible by window {window}"),
            });
        }
    }
    let (od, oh, ow) = (d / window, h / window, w / window);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * od * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + ((z * window) * h + y * window) * w + xx * window;
                    for dz in 0..window {
                        for dy in 0..window {
                            let row = base + ((z * window + dz) * h + y * window + dy) * w + xx * window;
                            for i in row..row + window {
                                if x[i] > x[best] {
                                    best = i;
                                }
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
    }
    Ok(Pooled {
        output: Tensor::new(vec![n, c, od, oh, ow], out)?,
        argmax,
    })
}

pub fn maxpool3d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[u32],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    if argmax.len() != grad_out.len() {
        return Err(TensorError::Precondition {
            op: "maxpool3d_backward",
            reason: "gradient does not match cached pooling indices".into(),
        });
    }
    let mut din = Tensor::zeros(input_shape.to_vec());
    let dx = din.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        dx[i as usize] += g;
    }
    Ok(din)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_block_maximum() {
        let x = Tensor::<f32>::from_fn(vec![1, 1, 2, 2, 2], |i| (i + 1) as f32);
        let p = maxpool3d(&x, 2).unwrap();
        assert_eq!(p.output.data(), &[8.0]);
        assert_eq!(p.argmax, vec![7]);
    }

    #[test]
    fn constant_in_constant_out_and_halved_extent() {
        let x = Tensor::full(vec![1, 2, 4, 4, 4], 3.5f64);
        let p = maxpool3d(&x, 2).unwrap();
        assert_eq!(p.output.shape(), &[1, 2, 2, 2, 2]);
        assert!(p.output.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn rejects_odd_extent() {
        let x = Tensor::<f32>::zeros(vec![1, 1, 4, 5, 4]);
        let err = maxpool3d(&x, 2).unwrap_err();
        assert!(err.to_string().contains("axis H"), "{err}");
    }

    #[test]
    fn backward_routes_to_winner() {
        let x = Tensor::<f64>::from_fn(vec![1, 1, 2, 2, 2], |i| if i == 3 { 9.0 } else { 0.0 });
        let p = maxpool3d(&x, 2).unwrap();
        let g = maxpool3d_backward(x.shape(), &p.argmax, &Tensor::full(vec![1, 1, 1, 1, 1], 2.0)).unwrap();
        assert_eq!(g.data()[3], 2.0);
        assert_eq!(g.sum(), 2.0);
    }
}
