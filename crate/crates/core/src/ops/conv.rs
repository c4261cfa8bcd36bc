//! 3-D convolution and transposed convolution over `(N, C, D, H, W)` tensors.
//!
//! Both directions lower to im2col/col2im plus a GEMM. The column matrix of a
//! sample has one row per `(channel, kz, ky, kx)` tap and one column per
//! output voxel. Every output element is produced by a single GEMM call in a
//! fixed order, so results do not depend on scheduling.

use std::ops::Range;

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stride, zero-padding and dilation shared by all three spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1, padding = dilation: a 3³ kernel keeps the extent.
    pub const fn same3(dilation: usize) -> Self {
        Self::new(1, dilation, dilation)
    }

    /// Output extent along one axis, or `None` when no kernel placement fits.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        let span = self.dilation * (kernel - 1) + 1;
        if self.stride == 0 || padded < span {
            None
        } else {
            Some((padded - span) / self.stride + 1)
        }
    }
}

const SPATIAL: [&str; 3] = ["D", "H", "W"];

/// Conv geometry resolved against concrete extents.
#[derive(Clone, Copy, Debug)]
struct Plan {
    channels: usize,
    kernel: usize,
    geom: ConvGeom,
    input: [usize; 3],
    output: [usize; 3],
}

impl Plan {
    fn rows(&self) -> usize {
        self.channels * self.kernel.pow(3)
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.geom.stride == 1 && self.geom.padding == 0
    }
}

/// `[lo, hi)` of output positions `o` with `0 <= o*stride + offset < input`.
fn valid_range(out: usize, input: usize, offset: isize, stride: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let room = input as isize - offset;
    let hi = if room <= 0 { 0 } else { (room + s - 1) / s };
    let lo = (lo as usize).min(out);
    let hi = (hi as usize).min(out);
    (lo, hi.max(lo))
}

/// Walks every `(row, oz, oy)` line of a column block together with the
/// matching input line, handing the valid `ox` span to `f`.
///
/// The block holds output lines `lines` (flattened `oz * oh + oy`), so a row
/// of the block is `lines.len() * ow` columns wide.
/// `f(row_base, in_line_base, lo, hi, in_x0)` where output column `ox`
/// reads input x `in_x0 + ox*stride`.
fn for_each_line(plan: &Plan, lines: Range<usize>, mut f: impl FnMut(usize, usize, usize, usize, isize)) {
    let Plan {
        channels,
        kernel: k,
        geom,
        input: [id, ih, iw],
        output: [od, oh, ow],
    } = *plan;
    let p = geom.padding as isize;
    let s = geom.stride;
    let dil = geom.dilation as isize;
    let block_cols = lines.len() * ow;
    for c in 0..channels {
        for kz in 0..k {
            let zoff = kz as isize * dil - p;
            let (zlo, zhi) = valid_range(od, id, zoff, s);
            for ky in 0..k {
                let yoff = ky as isize * dil - p;
                let (ylo, yhi) = valid_range(oh, ih, yoff, s);
                for kx in 0..k {
                    let xoff = kx as isize * dil - p;
                    let (xlo, xhi) = valid_range(ow, iw, xoff, s);
                    let row = ((c * k + kz) * k + ky) * k + kx;
                    if xlo >= xhi {
                        continue;
                    }
                    for line in lines.clone() {
                        let (oz, oy) = (line / oh, line % oh);
                        if oz < zlo || oz >= zhi || oy < ylo || oy >= yhi {
                            continue;
                        }
                        let iz = (oz * s) as isize + zoff;
                        let iy = (oy * s) as isize + yoff;
                        let in_base = ((c * id + iz as usize) * ih + iy as usize) * iw;
                        let row_base = row * block_cols + (line - lines.start) * ow;
                        f(row_base, in_base, xlo, xhi, xoff);
                    }
                }
            }
        }
    }
}

fn im2col<T: Scalar>(plan: &Plan, lines: Range<usize>, input: &[T], cols: &mut [T]) {
    cols.fill(T::zero());
    let s = plan.geom.stride;
    for_each_line(plan, lines, |row_base, in_base, lo, hi, xoff| {
        let dst = &mut cols[row_base + lo..row_base + hi];
        let start = in_base as isize + (lo * s) as isize + xoff;
        if s == 1 {
            let start = start as usize;
            dst.copy_from_slice(&input[start..start + (hi - lo)]);
        } else {
            for (j, d) in dst.iter_mut().enumerate() {
                *d = input[start as usize + j * s];
            }
        }
    });
}

fn col2im<T: Scalar>(plan: &Plan, lines: Range<usize>, cols: &[T], out: &mut [T]) {
    let s = plan.geom.stride;
    for_each_line(plan, lines, |row_base, in_base, lo, hi, xoff| {
        let src = &cols[row_base + lo..row_base + hi];
        let start = (in_base as isize + (lo * s) as isize + xoff) as usize;
        if s == 1 {
            for (d, &v) in out[start..start + (hi - lo)].iter_mut().zip(src) {
                *d += v;
            }
        } else {
            for (j, &v) in src.iter().enumerate() {
                out[start + j * s] += v;
            }
        }
    });
}

/// Target size of one column block, in elements; small enough to stay
/// cache-resident between im2col and the GEMM that consumes it.
const BLOCK_ELEMS: usize = 1 << 17;

fn all_lines(plan: &Plan) -> Range<usize> {
    0..plan.output[0] * plan.output[1]
}

/// Output-line ranges that partition a plan into cache-sized column blocks.
fn line_blocks(plan: &Plan) -> impl Iterator<Item = Range<usize>> {
    let [od, oh, ow] = plan.output;
    let total = od * oh;
    let per = (BLOCK_ELEMS / (plan.rows() * ow).max(1)).max(1);
    (0..total).step_by(per).map(move |l| l..(l + per).min(total))
}

fn cubic_kernel(op: &'static str, weight: &Tensor<impl Scalar>) -> Result<[usize; 3], TensorError> {
    let [a, b, kd, kh, kw] = weight.dims5(op)?;
    if kd != kh || kd != kw {
        return Err(TensorError::Precondition {
            op,
            reason: format!("kernel must be cubic, got {kd}x{kh}x{kw}"),
        });
    }
    Ok([a, b, kd])
}

fn check_bias<T: Scalar>(op: &'static str, bias: Option<&Tensor<T>>, channels: usize) -> Result<(), TensorError> {
    if let Some(b) = bias {
        if b.len() != channels {
            return Err(TensorError::AxisMismatch {
                op,
                axis: "C",
                expected: channels,
                actual: b.len(),
            });
        }
    }
    Ok(())
}

fn conv_plan(
    op: &'static str,
    channels: usize,
    kernel: usize,
    input: [usize; 3],
    geom: ConvGeom,
) -> Result<Plan, TensorError> {
    if geom.stride == 0 || geom.dilation == 0 {
        return Err(TensorError::Precondition {
            op,
            reason: "stride and dilation must be at least 1".into(),
        });
    }
    let mut output = [0; 3];
    for axis in 0..3 {
        output[axis] = geom.output_extent(input[axis], kernel).ok_or_else(|| {
            TensorError::Precondition {
                op,
                reason: format!(
                    "axis {}: extent {} with padding {} admits no placement of a {}-tap kernel at dilation {}",
                    SPATIAL[axis], input[axis], geom.padding, kernel, geom.dilation
                ),
            }
        })?;
    }
    Ok(Plan {
        channels,
        kernel,
        geom,
        input,
        output,
    })
}

/// Gradients of a convolution-like op with respect to its three operands.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        for v in chunk {
            *v += b;
        }
    }
}

fn bias_grad<T: Scalar>(grad_out: &[T], n: usize, channels: usize, plane: usize) -> Tensor<T> {
    let mut db = vec![T::zero(); channels];
    for b in 0..n {
        for (c, g) in db.iter_mut().enumerate() {
            let start = (b * channels + c) * plane;
            *g += grad_out[start..start + plane].iter().fold(T::zero(), |a, &v| a + v);
        }
    }
    Tensor::new(vec![channels], db).expect("bias shape")
}

/// Zero-padded 3-D cross-correlation.
///
/// `weight` is `(Cout, Cin, k, k, k)`, `bias` is `(Cout)`.
pub fn conv3d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>, TensorError> {
    const OP: &str = "conv3d";
    let [n, cin, d, h, w] = input.dims5(OP)?;
    let [cout, wcin, k] = cubic_kernel(OP, weight)?;
    if wcin != cin {
        return Err(TensorError::AxisMismatch {
            op: OP,
            axis: "C",
            expected: wcin,
            actual: cin,
        });
    }
    check_bias(OP, bias, cout)?;
    let plan = conv_plan(OP, cin, k, [d, h, w], geom)?;
    let (rows, pin, pout) = (plan.rows(), plan.in_voxels(), plan.out_voxels());
    let ow = plan.output[2];
    let mut out = vec![T::zero(); n * cout * pout];
    let mut cols = Vec::new();
    for b in 0..n {
        let x = &input.data()[b * cin * pin..(b + 1) * cin * pin];
        let y = &mut out[b * cout * pout..(b + 1) * cout * pout];
        if plan.is_pointwise() {
            T::gemm(cout, rows, pout, weight.data(), false, x, false, y, false);
            continue;
        }
        for lines in line_blocks(&plan) {
            let bc = lines.len() * ow;
            let col0 = lines.start * ow;
            cols.resize(rows * bc, T::zero());
            im2col(&plan, lines, x, &mut cols);
            T::gemm_strided(cout, rows, bc, weight.data(), (rows, 1), &cols, (bc, 1), &mut y[col0..], (pout, 1), false);
        }
    }
    if let Some(bias) = bias {
        add_bias(&mut out, bias.data(), pout);
    }
    let [od, oh, ow] = plan.output;
    Tensor::new(vec![n, cout, od, oh, ow], out)
}

/// Dot product with 16 independent partial sums, combined in a fixed order.
fn dot_lanes<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 16];
    let ca = a.chunks_exact(16);
    let cb = b.chunks_exact(16);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..16 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = acc.iter().fold(T::zero(), |s, &v| s + v);
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `c[i][j] += Σ_l a[i][l] · b[j][l]` for `m` rows of `a` (stride `lda`) and
/// `n` rows of `b` (stride `ldb`), each `k` long; `c` is `m×n` row-major.
///
/// Weight gradients have this shape with a long `k`, where GEMM packing of
/// the transposed operand dominates.
#[allow(clippy::too_many_arguments)]
fn accumulate_abt<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], lda: usize, b: &[T], ldb: usize, c: &mut [T]) {
    for j in 0..n {
        let bj = &b[j * ldb..j * ldb + k];
        for i in 0..m {
            c[i * n + j] += dot_lanes(&a[i * lda..i * lda + k], bj);
        }
    }
}

/// `(Cout, Cin, k³)` to `(Cin, Cout, k³)` with every tap mirrored.
fn flip_kernel<T: Scalar>(weight: &Tensor<T>, cout: usize, cin: usize, k: usize) -> Tensor<T> {
    let taps = k * k * k;
    let src = weight.data();
    let mut out = vec![T::zero(); src.len()];
    for co in 0..cout {
        for ci in 0..cin {
            let from = (co * cin + ci) * taps;
            let to = (ci * cout + co) * taps;
            for t in 0..taps {
                out[to + taps - 1 - t] = src[from + t];
            }
        }
    }
    Tensor::new(vec![cin, cout, k, k, k], out).expect("flipped kernel shape")
}

/// Backward pass of [`conv3d`] given the upstream gradient.
pub fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: ConvGeom,
) -> Result<ConvGrads<T>, TensorError> {
    const OP: &str = "conv3d_backward";
    let [n, cin, d, h, w] = input.dims5(OP)?;
    let [cout, _, k] = cubic_kernel(OP, weight)?;
    let plan = conv_plan(OP, cin, k, [d, h, w], geom)?;
    let [od, oh, ow] = plan.output;
    grad_out.expect_same_shape(OP, &Tensor::<T>::zeros(vec![n, cout, od, oh, ow]))?;
    let (rows, pin, pout) = (plan.rows(), plan.in_voxels(), plan.out_voxels());

    let ow = plan.output[2];
    let same_extent = geom.stride == 1 && 2 * geom.padding == geom.dilation * (k - 1);
    let flipped = (same_extent && !plan.is_pointwise()).then(|| flip_kernel(weight, cout, cin, k));
    let mut din = vec![T::zero(); n * cin * pin];
    let mut dw = vec![T::zero(); weight.len()];
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    for b in 0..n {
        let x = &input.data()[b * cin * pin..(b + 1) * cin * pin];
        let gy = &grad_out.data()[b * cout * pout..(b + 1) * cout * pout];
        let dx = &mut din[b * cin * pin..(b + 1) * cin * pin];
        if plan.is_pointwise() {
            accumulate_abt(cout, rows, pout, gy, pout, x, pout, &mut dw);
            T::gemm(rows, cout, pout, weight.data(), true, gy, false, dx, false);
            continue;
        }
        for lines in line_blocks(&plan) {
            let bc = lines.len() * ow;
            let col0 = lines.start * ow;
            cols.resize(rows * bc, T::zero());
            im2col(&plan, lines.clone(), x, &mut cols);
            // dW += gy_block · colsᵀ
            accumulate_abt(cout, rows, bc, &gy[col0..], pout, &cols, bc, &mut dw);
            if flipped.is_none() {
                // dcols = Wᵀ · gy_block
                dcols.resize(rows * bc, T::zero());
                T::gemm_strided(rows, cout, bc, weight.data(), (1, rows), &gy[col0..], (pout, 1), &mut dcols, (bc, 1), false);
                col2im(&plan, lines, &dcols, dx);
            }
        }
    }
    // A stride-1 conv that keeps the extent has, as its input gradient, the
    // same conv of the upstream gradient with the flipped, channel-swapped
    // kernel.
    if let Some(wf) = &flipped {
        let din_t = conv3d(grad_out, wf, None, geom)?;
        din.copy_from_slice(din_t.data());
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), din)?,
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
        bias: bias_grad(grad_out.data(), n, cout, pout),
    })
}

fn transposed_plan(
    op: &'static str,
    input: &Tensor<impl Scalar>,
    weight: &Tensor<impl Scalar>,
    stride: usize,
) -> Result<(usize, usize, usize, Plan), TensorError> {
    let [n, cin, d, h, w] = input.dims5(op)?;
    let [wcin, cout, k] = cubic_kernel(op, weight)?;
    if wcin != cin {
        return Err(TensorError::AxisMismatch {
            op,
            axis: "C",
            expected: wcin,
            actual: cin,
        });
    }
    if stride == 0 {
        return Err(TensorError::Precondition {
            op,
            reason: "stride must be at least 1".into(),
        });
    }
    let out = [d, h, w].map(|e| (e - 1) * stride + k);
    // The column layout is that of the adjoint convolution, which maps the
    // upsampled extent back onto the input extent.
    let plan = Plan {
        channels: cout,
        kernel: k,
        geom: ConvGeom::new(stride, 0, 1),
        input: out,
        output: [d, h, w],
    };
    Ok((n, cin, cout, plan))
}

/// Transposed 3-D convolution (the adjoint of a strided, unpadded [`conv3d`]).
///
/// `weight` is `(Cin, Cout, k, k, k)`; output extent per axis is
/// `(D - 1) * stride + k`.
pub fn conv_transpose3d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<Tensor<T>, TensorError> {
    const OP: &str = "conv_transpose3d";
    let (n, cin, cout, plan) = transposed_plan(OP, input, weight, stride)?;
    check_bias(OP, bias, cout)?;
    let (rows, pin, pout) = (plan.rows(), plan.out_voxels(), plan.in_voxels());
    let mut out = vec![T::zero(); n * cout * pout];
    let mut cols = vec![T::zero(); rows * pin];
    for b in 0..n {
        let x = &input.data()[b * cin * pin..(b + 1) * cin * pin];
        T::gemm(rows, cin, pin, weight.data(), true, x, false, &mut cols, false);
        col2im(&plan, all_lines(&plan), &cols, &mut out[b * cout * pout..(b + 1) * cout * pout]);
    }
    if let Some(bias) = bias {
        add_bias(&mut out, bias.data(), pout);
    }
    let [od, oh, ow] = plan.input;
    Tensor::new(vec![n, cout, od, oh, ow], out)
}

/// Backward pass of [`conv_transpose3d`].
pub fn conv_transpose3d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
) -> Result<ConvGrads<T>, TensorError> {
    const OP: &str = "conv_transpose3d_backward";
    let (n, cin, cout, plan) = transposed_plan(OP, input, weight, stride)?;
    let [od, oh, ow] = plan.input;
    grad_out.expect_same_shape(OP, &Tensor::<T>::zeros(vec![n, cout, od, oh, ow]))?;
    let (rows, pin, pout) = (plan.rows(), plan.out_voxels(), plan.in_voxels());
    let mut din = vec![T::zero(); input.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut cols = vec![T::zero(); rows * pin];
    for b in 0..n {
        let x = &input.data()[b * cin * pin..(b + 1) * cin * pin];
        let gy = &grad_out.data()[b * cout * pout..(b + 1) * cout * pout];
        im2col(&plan, all_lines(&plan), gy, &mut cols);
        T::gemm(cin, rows, pin, weight.data(), false, &cols, false, &mut din[b * cin * pin..(b + 1) * cin * pin], false);
        accumulate_abt(cin, rows, pin, x, pin, &cols, pin, &mut dw);
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), din)?,
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
        bias: bias_grad(grad_out.data(), n, cout, pout),
    })
}
