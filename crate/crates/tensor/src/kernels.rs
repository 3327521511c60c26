//! Raw numeric kernels over row-major `f64` slices. The differentiable ops in
//! [`crate::ops`] call these for both the forward and the backward pass.

use crate::error::{Result, TensorError};

/// `c = op(a) · op(b) (+ c if accumulate)`, where `op(a)` is `m × k` and
/// `op(b)` is `k × n`. A transposed operand is read from its row-major
/// `[k, m]` (resp. `[n, k]`) storage.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: lhs buffer too small");
    assert!(b.len() >= k * n, "gemm: rhs buffer too small");
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every index reached through the
    // given strides lies inside the three slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Strided gemm for operands living inside larger buffers (attention heads).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    let reach = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= reach(m, k, rsa, csa));
    assert!(b.len() >= reach(k, n, rsb, csb));
    assert!(c.len() >= reach(m, n, rsc, csc));
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: bounds checked by the `reach` asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of a 3D cross-correlation over a channels-last `[T, H, W, Cin]`
/// input with a `[kt, kh, kw, Cin, Cout]` kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
    pub cin: usize,
    pub cout: usize,
}

impl Conv3dGeometry {
    pub fn new(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(TensorError::shape(
                "conv3d",
                format!("input must be [T, H, W, Cin], got {input_shape:?}"),
            ));
        }
        if weight_shape.len() != 5 {
            return Err(TensorError::shape(
                "conv3d",
                format!("kernel must be [kt, kh, kw, Cin, Cout], got {weight_shape:?}"),
            ));
        }
        if input_shape[3] != weight_shape[3] {
            return Err(TensorError::mismatch("conv3d", input_shape, weight_shape));
        }
        let mut output = [0; 3];
        for axis in 0..3 {
            let (size, k, s, p) = (
                input_shape[axis],
                weight_shape[axis],
                stride[axis],
                pad[axis],
            );
            if s == 0 {
                return Err(TensorError::Config("conv3d stride must be positive".into()));
            }
            let padded = size + 2 * p;
            if k > padded {
                return Err(TensorError::Config(format!(
                    "conv3d kernel {k} does not fit padded extent {padded} on axis {axis}"
                )));
            }
            if (padded - k) % s != 0 {
                return Err(TensorError::Config(format!(
                    "conv3d output extent ({padded} - {k}) / {s} + 1 is not integral on axis {axis}"
                )));
            }
            output[axis] = (padded - k) / s + 1;
        }
        Ok(Conv3dGeometry {
            input: [input_shape[0], input_shape[1], input_shape[2]],
            kernel: [weight_shape[0], weight_shape[1], weight_shape[2]],
            stride,
            pad,
            output,
            cin: input_shape[3],
            cout: weight_shape[4],
        })
    }

    pub fn positions(&self) -> usize {
        self.output.iter().product()
    }

    /// Length of one unrolled receptive field.
    pub fn patch_len(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.cin
    }

    /// Unrolls every receptive field into one row of a
    /// `[positions, kt*kh*kw*Cin]` matrix; padding reads as zero.
    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let patch = self.patch_len();
        let mut cols = vec![0.0; self.positions() * patch];
        self.for_each_tap(|row, col, src| {
            let dst = row * patch + col;
            cols[dst..dst + self.cin].copy_from_slice(&x[src..src + self.cin]);
        });
        cols
    }

    /// Adjoint of [`Conv3dGeometry::im2col`]: scatters-adds columns back into
    /// an input-shaped buffer.
    pub fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let patch = self.patch_len();
        let mut x = vec![0.0; self.input.iter().product::<usize>() * self.cin];
        self.for_each_tap(|row, col, src| {
            let s = row * patch + col;
            for c in 0..self.cin {
                x[src + c] += cols[s + c];
            }
        });
        x
    }

    /// Calls `f(output_row, column_offset, input_offset)` for every kernel tap
    /// that lands inside the (unpadded) input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [ti, hi, wi] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [to, ho, wo] = self.output;
        let cin = self.cin;
        let mut row = 0;
        for ot in 0..to {
            for oh in 0..ho {
                for ow in 0..wo {
                    for dt in 0..kt {
                        let it = (ot * self.stride[0] + dt) as isize - self.pad[0] as isize;
                        if it < 0 || it >= ti as isize {
                            continue;
                        }
                        for dh in 0..kh {
                            let ih = (oh * self.stride[1] + dh) as isize - self.pad[1] as isize;
                            if ih < 0 || ih >= hi as isize {
                                continue;
                            }
                            for dw in 0..kw {
                                let iw =
                                    (ow * self.stride[2] + dw) as isize - self.pad[2] as isize;
                                if iw < 0 || iw >= wi as isize {
                                    continue;
                                }
                                let col = ((dt * kh + dh) * kw + dw) * cin;
                                let src = ((it as usize * hi + ih as usize) * wi + iw as usize)
                                    * cin;
                                f(row, col, src);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adds `bias` to every row of a `[rows, n]` buffer.
pub fn add_row_bias(out: &mut [f64], bias: &[f64]) {
    let n = bias.len();
    for row in out.chunks_exact_mut(n) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// Column sums of a `[rows, n]` buffer.
pub fn column_sums(x: &[f64], n: usize) -> Vec<f64> {
    let mut acc = vec![0.0; n];
    for row in x.chunks_exact(n) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    acc
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU (smooth everywhere).
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Scaled dot-product attention probabilities for packed `[B, S, 3C]`
/// query/key/value rows. Returns `[B, heads, S, S]` row-stochastic weights.
pub fn attention_probs(qkv: &[f64], batch: usize, seq: usize, channels: usize, heads: usize) -> Vec<f64> {
    let dh = channels / heads;
    let row = 3 * channels;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; batch * heads * seq * seq];
    for b in 0..batch {
        let base = b * seq * row;
        for h in 0..heads {
            let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
            let q = &qkv[base + h * dh..];
            let k = &qkv[base + channels + h * dh..];
            gemm_strided(seq, dh, seq, scale, q, (row, 1), k, (1, row), 0.0, p, (seq, 1));
            for r in p.chunks_exact_mut(seq) {
                softmax_in_place(r);
            }
        }
    }
    probs
}
