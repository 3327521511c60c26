use crate::error::{Result, TensorError};
use crate::kernels::{add_row_bias, column_sums, gemm, Conv3dGeometry};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Stride and zero padding per axis of a 3D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvSpec {
    pub fn new(stride: [usize; 3], pad: [usize; 3]) -> Self {
        ConvSpec { stride, pad }
    }

    /// Unit stride, no padding.
    pub fn valid() -> Self {
        ConvSpec::new([1; 3], [0; 3])
    }
}

fn check_bias(op: &'static str, b: Option<&Var>, cout: usize) -> Result<()> {
    match b {
        Some(b) if b.shape() != [cout] => Err(TensorError::mismatch(op, &[cout], b.shape())),
        _ => Ok(()),
    }
}

/// Splits `[T, rest.., C]` into `(T, prod(rest), C)`.
fn time_major(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(TensorError::shape(op, format!("expected [T, ..., C], got {shape:?}")));
    }
    let t = shape[0];
    let c = shape[shape.len() - 1];
    let m = shape[1..shape.len() - 1].iter().product();
    Ok((t, m, c))
}

impl Tape {
    /// 3D cross-correlation of a channels-last `[T, H, W, Cin]` input with a
    /// `[kt, kh, kw, Cin, Cout]` kernel.
    pub fn conv3d(&self, x: &Var, w: &Var, b: Option<&Var>, spec: ConvSpec) -> Result<Var> {
        let geo = Conv3dGeometry::new(x.shape(), w.shape(), spec.stride, spec.pad)?;
        check_bias("conv3d", b, geo.cout)?;
        let (rows, patch, cout) = (geo.positions(), geo.patch_len(), geo.cout);
        let cols = geo.im2col(x.data());
        let mut data = vec![0.0; rows * cout];
        gemm(false, false, rows, patch, cout, &cols, w.data(), &mut data, false);
        let mut dtype = x.dtype().promote(w.dtype());
        if let Some(b) = b {
            add_row_bias(&mut data, b.data());
            dtype = dtype.promote(b.dtype());
        }
        let [to, ho, wo] = geo.output;
        let out = Tensor::from_parts(vec![to, ho, wo, cout], data, dtype);
        let inputs: Vec<&Var> = [x, w].into_iter().chain(b).collect();
        let Some(need) = Tape::needs(&inputs) else {
            return Ok(Var::constant(out));
        };
        let wv = w.shared();
        Ok(self.record(
            out,
            &inputs,
            Box::new(move |g| {
                let gx = need[0].then(|| {
                    let mut gcols = vec![0.0; rows * patch];
                    gemm(false, true, rows, cout, patch, g, wv.data(), &mut gcols, false);
                    geo.col2im(&gcols)
                });
                let gw = need[1].then(|| {
                    let mut gw = vec![0.0; patch * cout];
                    gemm(true, false, patch, rows, cout, &cols, g, &mut gw, false);
                    gw
                });
                let mut grads = vec![gx, gw];
                if need.len() == 3 {
                    grads.push(need[2].then(|| column_sums(g, cout)));
                }
                grads
            }),
        ))
    }

    /// Convolution along the leading (time) axis only, independently for
    /// every position of the middle axes. `x` is `[T, ..., Cin]`, `w` is
    /// `[k, Cin, Cout]`.
    pub fn conv1d_time(
        &self,
        x: &Var,
        w: &Var,
        b: Option<&Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (t, m, cin) = time_major("conv1d_time", x.shape())?;
        let ws = w.shape();
        if ws.len() != 3 {
            return Err(TensorError::shape(
                "conv1d_time",
                format!("kernel must be [k, Cin, Cout], got {ws:?}"),
            ));
        }
        let x4 = self.reshape(x, &[t, m, 1, cin])?;
        let w5 = self.reshape(w, &[ws[0], 1, 1, ws[1], ws[2]])?;
        let y = self.conv3d(&x4, &w5, b, ConvSpec::new([stride, 1, 1], [pad, 0, 0]))?;
        let mut shape = x.shape().to_vec();
        shape[0] = y.shape()[0];
        *shape.last_mut().unwrap() = ws[2];
        self.reshape(&y, &shape)
    }

    /// Per-channel convolution along time: `x` is `[T, ..., C]`, `w` is
    /// `[k, C]`, `b` is `[C]`.
    pub fn depthwise_conv1d_time(
        &self,
        x: &Var,
        w: &Var,
        b: Option<&Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (t, m, c) = time_major("depthwise_conv1d_time", x.shape())?;
        let ws = w.shape();
        if ws.len() != 2 || ws[1] != c {
            return Err(TensorError::mismatch("depthwise_conv1d_time", x.shape(), ws));
        }
        check_bias("depthwise_conv1d_time", b, c)?;
        let k = ws[0];
        let geo = Conv3dGeometry::new(&[t, 1, 1, 1], &[k, 1, 1, 1, 1], [stride, 1, 1], [pad, 0, 0])?;
        let to = geo.output[0];
        // Input frame feeding output frame `o` through tap `j`, if any.
        let src = move |o: usize, j: usize| -> Option<usize> {
            (o * stride + j).checked_sub(pad).filter(|&i| i < t)
        };
        let (xd, wd) = (x.data(), w.data());
        let mut data = vec![0.0; to * m * c];
        for o in 0..to {
            for j in 0..k {
                let Some(i) = src(o, j) else { continue };
                for p in 0..m {
                    let (dst, s) = ((o * m + p) * c, (i * m + p) * c);
                    for ch in 0..c {
                        data[dst + ch] += wd[j * c + ch] * xd[s + ch];
                    }
                }
            }
        }
        let mut dtype = x.dtype().promote(w.dtype());
        if let Some(b) = b {
            add_row_bias(&mut data, b.data());
            dtype = dtype.promote(b.dtype());
        }
        let mut shape = x.shape().to_vec();
        shape[0] = to;
        let out = Tensor::from_parts(shape, data, dtype);
        let inputs: Vec<&Var> = [x, w].into_iter().chain(b).collect();
        let Some(need) = Tape::needs(&inputs) else {
            return Ok(Var::constant(out));
        };
        let (xv, wv) = (x.shared(), w.shared());
        Ok(self.record(
            out,
            &inputs,
            Box::new(move |g| {
                let (xd, wd) = (xv.data(), wv.data());
                let mut gx = need[0].then(|| vec![0.0; t * m * c]);
                let mut gw = need[1].then(|| vec![0.0; k * c]);
                for o in 0..to {
                    for j in 0..k {
                        let Some(i) = src(o, j) else { continue };
                        for p in 0..m {
                            let (go, s) = ((o * m + p) * c, (i * m + p) * c);
                            for ch in 0..c {
                                if let Some(gx) = gx.as_mut() {
                                    gx[s + ch] += wd[j * c + ch] * g[go + ch];
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[j * c + ch] += xd[s + ch] * g[go + ch];
                                }
                            }
                        }
                    }
                }
                let mut grads = vec![gx, gw];
                if need.len() == 3 {
                    grads.push(need[2].then(|| column_sums(g, c)));
                }
                grads
            }),
        ))
    }

    /// Transposed convolution along time without padding: input frame `t`
    /// contributes `x[t] · w[j]` to output frame `t * stride + j`. `x` is
    /// `[T, ..., Cin]`, `w` is `[k, Cin, Cout]`; the output has
    /// `(T - 1) * stride + k` frames.
    pub fn conv_transpose_time(
        &self,
        x: &Var,
        w: &Var,
        b: Option<&Var>,
        stride: usize,
    ) -> Result<Var> {
        let (t, m, cin) = time_major("conv_transpose_time", x.shape())?;
        let ws = w.shape();
        if ws.len() != 3 || ws[1] != cin {
            return Err(TensorError::mismatch("conv_transpose_time", x.shape(), ws));
        }
        if stride == 0 {
            return Err(TensorError::Config("conv_transpose_time stride must be positive".into()));
        }
        let (k, cout) = (ws[0], ws[2]);
        check_bias("conv_transpose_time", b, cout)?;
        let to = (t - 1) * stride + k;
        let (xd, wd) = (x.data(), w.data());
        let mut data = vec![0.0; to * m * cout];
        for ti in 0..t {
            let xs = &xd[ti * m * cin..(ti + 1) * m * cin];
            for j in 0..k {
                let o = ti * stride + j;
                let dst = &mut data[o * m * cout..(o + 1) * m * cout];
                gemm(false, false, m, cin, cout, xs, &wd[j * cin * cout..], dst, true);
            }
        }
        let mut dtype = x.dtype().promote(w.dtype());
        if let Some(b) = b {
            add_row_bias(&mut data, b.data());
            dtype = dtype.promote(b.dtype());
        }
        let mut shape = x.shape().to_vec();
        shape[0] = to;
        *shape.last_mut().unwrap() = cout;
        let out = Tensor::from_parts(shape, data, dtype);
        let inputs: Vec<&Var> = [x, w].into_iter().chain(b).collect();
        let Some(need) = Tape::needs(&inputs) else {
            return Ok(Var::constant(out));
        };
        let (xv, wv) = (x.shared(), w.shared());
        Ok(self.record(
            out,
            &inputs,
            Box::new(move |g| {
                let (xd, wd) = (xv.data(), wv.data());
                let mut gx = need[0].then(|| vec![0.0; t * m * cin]);
                let mut gw = need[1].then(|| vec![0.0; k * cin * cout]);
                for ti in 0..t {
                    for j in 0..k {
                        let o = ti * stride + j;
                        let go = &g[o * m * cout..(o + 1) * m * cout];
                        if let Some(gx) = gx.as_mut() {
                            let dst = &mut gx[ti * m * cin..(ti + 1) * m * cin];
                            gemm(false, true, m, cout, cin, go, &wd[j * cin * cout..], dst, true);
                        }
                        if let Some(gw) = gw.as_mut() {
                            let xs = &xd[ti * m * cin..(ti + 1) * m * cin];
                            let dst = &mut gw[j * cin * cout..(j + 1) * cin * cout];
                            gemm(true, false, cin, m, cout, xs, go, dst, true);
                        }
                    }
                }
                let mut grads = vec![gx, gw];
                if need.len() == 3 {
                    grads.push(need[2].then(|| column_sums(g, cout)));
                }
                grads
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_counts_inputs() {
        let tape = Tape::new();
        let x = Var::constant(Tensor::ones(&[2, 2, 2, 3]));
        let w = Var::constant(Tensor::ones(&[2, 2, 2, 3, 1]));
        let y = tape.conv3d(&x, &w, None, ConvSpec::valid()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[24.0]);
    }

    #[test]
    fn pairwise_average_downsample() {
        let tape = Tape::new();
        let x = Var::constant(Tensor::new(&[4, 1], vec![2.0, 4.0, 6.0, 8.0]).unwrap());
        let w = Var::constant(Tensor::new(&[2, 1, 1], vec![0.5, 0.5]).unwrap());
        let y = tape.conv1d_time(&x, &w, None, 2, 0).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn transpose_with_unit_kernel_repeats_frames() {
        let tape = Tape::new();
        let x = Var::constant(Tensor::new(&[2, 1], vec![1.0, 5.0]).unwrap());
        let w = Var::constant(Tensor::ones(&[2, 1, 1]));
        let y = tape.conv_transpose_time(&x, &w, None, 2).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 5.0, 5.0]);
    }
}
