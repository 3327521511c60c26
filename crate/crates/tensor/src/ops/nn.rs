use crate::error::{Result, TensorError};
use crate::kernels::{add_row_bias, attention_probs, column_sums, gelu, gelu_grad, gemm, gemm_strided};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// `x · w + b` over the last axis: `[..., in] × [in, out] -> [..., out]`.
    pub fn linear(&self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let (sx, sw) = (x.shape(), w.shape());
        let k = *sx.last().expect("rank >= 1");
        if sw.len() != 2 || sw[0] != k {
            return Err(TensorError::mismatch("linear", sx, sw));
        }
        let n = sw[1];
        if let Some(b) = b {
            if b.shape() != [n] {
                return Err(TensorError::mismatch("linear bias", sw, b.shape()));
            }
        }
        let m = x.value().len() / k;
        let mut data = vec![0.0; m * n];
        gemm(false, false, m, k, n, x.data(), w.data(), &mut data, false);
        let mut dtype = x.dtype().promote(w.dtype());
        if let Some(b) = b {
            add_row_bias(&mut data, b.data());
            dtype = dtype.promote(b.dtype());
        }
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::from_parts(shape, data, dtype);
        let inputs: Vec<&Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        let Some(need) = Tape::needs(&inputs) else {
            return Ok(Var::constant(out));
        };
        let (xv, wv) = (x.shared(), w.shared());
        Ok(self.record(
            out,
            &inputs,
            Box::new(move |g| {
                let gx = need[0].then(|| {
                    let mut gx = vec![0.0; m * k];
                    gemm(false, true, m, n, k, g, wv.data(), &mut gx, false);
                    gx
                });
                let gw = need[1].then(|| {
                    let mut gw = vec![0.0; k * n];
                    gemm(true, false, k, m, n, xv.data(), g, &mut gw, false);
                    gw
                });
                let mut grads = vec![gx, gw];
                if need.len() == 3 {
                    grads.push(need[2].then(|| column_sums(g, n)));
                }
                grads
            }),
        ))
    }

    pub fn gelu(&self, x: &Var) -> Var {
        let out = x.value().map(gelu);
        if !x.tracked() {
            return Var::constant(out);
        }
        let xv = x.shared();
        self.record(
            out,
            &[x],
            Box::new(move |g| {
                vec![Some(
                    g.iter().zip(xv.data()).map(|(g, &x)| g * gelu_grad(x)).collect(),
                )]
            }),
        )
    }

    /// Normalizes over the last axis, then applies the per-channel affine
    /// `gain`, `bias`.
    pub fn layer_norm(&self, x: &Var, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let c = *x.shape().last().expect("rank >= 1");
        if gain.shape() != [c] || bias.shape() != [c] {
            return Err(TensorError::mismatch("layer_norm", x.shape(), gain.shape()));
        }
        let rows = x.value().len() / c;
        let mut xhat = Vec::with_capacity(rows * c);
        let mut rstd = Vec::with_capacity(rows);
        for row in x.data().chunks_exact(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            xhat.extend(row.iter().map(|v| (v - mean) * r));
            rstd.push(r);
        }
        let mut data = xhat.clone();
        for row in data.chunks_exact_mut(c) {
            for ((v, g), b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
                *v = *v * g + b;
            }
        }
        let dtype = x.dtype().promote(gain.dtype()).promote(bias.dtype());
        let out = Tensor::from_parts(x.shape().to_vec(), data, dtype);
        let Some(need) = Tape::needs(&[x, gain, bias]) else {
            return Ok(Var::constant(out));
        };
        let gv = gain.shared();
        Ok(self.record(
            out,
            &[x, gain, bias],
            Box::new(move |g| {
                let gx = need[0].then(|| {
                    let mut gx = vec![0.0; rows * c];
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let xr = &xhat[r * c..(r + 1) * c];
                        let gh: Vec<f64> = gr.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                        let mean_gh = gh.iter().sum::<f64>() / c as f64;
                        let mean_ghx = gh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for i in 0..c {
                            gx[r * c + i] = rstd[r] * (gh[i] - mean_gh - xr[i] * mean_ghx);
                        }
                    }
                    gx
                });
                let ggain = need[1].then(|| {
                    let mut acc = vec![0.0; c];
                    for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for i in 0..c {
                            acc[i] += gr[i] * xr[i];
                        }
                    }
                    acc
                });
                let gbias = need[2].then(|| column_sums(g, c));
                vec![gx, ggain, gbias]
            }),
        ))
    }

    /// Multi-head scaled dot-product attention over packed projections.
    ///
    /// `qkv` is `[B, S, 3C]` holding queries, keys and values side by side;
    /// the result is `[B, S, C]` with heads concatenated along channels.
    pub fn attention(&self, qkv: &Var, heads: usize) -> Result<Var> {
        let s = qkv.shape();
        if s.len() != 3 || !s[2].is_multiple_of(3) {
            return Err(TensorError::shape(
                "attention",
                format!("expected packed [B, S, 3C], got {s:?}"),
            ));
        }
        let (batch, seq, c) = (s[0], s[1], s[2] / 3);
        if heads == 0 || c % heads != 0 {
            return Err(TensorError::Config(format!(
                "attention width {c} is not divisible by {heads} heads"
            )));
        }
        let dh = c / heads;
        let row = 3 * c;
        let probs = attention_probs(qkv.data(), batch, seq, c, heads);
        let mut data = vec![0.0; batch * seq * c];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                let v = &qkv.data()[b * seq * row + 2 * c + h * dh..];
                let o = &mut data[b * seq * c + h * dh..];
                gemm_strided(seq, seq, dh, 1.0, p, (seq, 1), v, (row, 1), 0.0, o, (c, 1));
            }
        }
        let out = Tensor::from_parts(vec![batch, seq, c], data, qkv.dtype());
        if !qkv.tracked() {
            return Ok(Var::constant(out));
        }
        let qv = qkv.shared();
        let scale = 1.0 / (dh as f64).sqrt();
        Ok(self.record(
            out,
            &[qkv],
            Box::new(move |g| {
                let x = qv.data();
                let mut gx = vec![0.0; x.len()];
                let mut gp = vec![0.0; seq * seq];
                for b in 0..batch {
                    let base = b * seq * row;
                    for h in 0..heads {
                        let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                        let go = &g[b * seq * c + h * dh..];
                        let (qo, ko, vo) = (base + h * dh, base + c + h * dh, base + 2 * c + h * dh);
                        gemm_strided(seq, dh, seq, 1.0, go, (c, 1), &x[vo..], (1, row), 0.0, &mut gp, (seq, 1));
                        gemm_strided(seq, seq, dh, 1.0, p, (1, seq), go, (c, 1), 0.0, &mut gx[vo..], (row, 1));
                        for (gr, pr) in gp.chunks_exact_mut(seq).zip(p.chunks_exact(seq)) {
                            let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                            for (gv, pv) in gr.iter_mut().zip(pr) {
                                *gv = pv * (*gv - dot);
                            }
                        }
                        gemm_strided(seq, seq, dh, scale, &gp, (seq, 1), &x[ko..], (row, 1), 0.0, &mut gx[qo..], (row, 1));
                        gemm_strided(seq, seq, dh, scale, &gp, (1, seq), &x[qo..], (row, 1), 0.0, &mut gx[ko..], (row, 1));
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::new();
        let ones = Var::constant(Tensor::ones(&[2]));
        let zeros = Var::constant(Tensor::zeros(&[2]));
        let x = Var::constant(Tensor::new(&[2], vec![1.0, 3.0]).unwrap());
        let y = tape.layer_norm(&x, &ones, &zeros, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
        let c = Var::constant(Tensor::full(&[2], 5.0));
        let y = tape.layer_norm(&c, &ones, &zeros, 1e-6).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let tape = Tape::new();
        let x = Var::constant(Tensor::zeros(&[1, 2, 9]));
        assert!(matches!(tape.attention(&x, 2), Err(TensorError::Config(_))));
    }

    #[test]
    fn single_token_attention_returns_values() {
        let tape = Tape::new();
        let x = Var::constant(Tensor::from_fn(&[1, 1, 6], |i| i as f64));
        let y = tape.attention(&x, 1).unwrap();
        assert_eq!(y.data(), &[4.0, 5.0]);
    }
}
