//! Differentiable operations. All of them are methods on [`Tape`]; an op
//! whose inputs are all untracked records nothing.

mod conv;
mod nn;
mod resample;

pub use conv::ConvSpec;
pub use resample::ResampleMode;

use crate::error::{Result, TensorError};
use crate::kernels::gemm;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `data` (of `shape`) into the axis order `perm`.
pub(crate) fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl Tape {
    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(TensorError::mismatch("add", a.shape(), b.shape()));
        }
        let dtype = a.dtype().promote(b.dtype());
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data, dtype);
        let Some(need) = Tape::needs(&[a, b]) else {
            return Ok(Var::constant(out));
        };
        Ok(self.record(
            out,
            &[a, b],
            Box::new(move |g| {
                vec![
                    need[0].then(|| g.to_vec()),
                    need[1].then(|| g.to_vec()),
                ]
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(TensorError::mismatch("mul", a.shape(), b.shape()));
        }
        let dtype = a.dtype().promote(b.dtype());
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data, dtype);
        let Some(need) = Tape::needs(&[a, b]) else {
            return Ok(Var::constant(out));
        };
        let (av, bv) = (a.shared(), b.shared());
        Ok(self.record(
            out,
            &[a, b],
            Box::new(move |g| {
                let prod = |o: &Tensor| g.iter().zip(o.data()).map(|(g, v)| g * v).collect();
                vec![need[0].then(|| prod(&bv)), need[1].then(|| prod(&av))]
            }),
        ))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape and is
    /// repeated over the leading axes.
    pub fn add_broadcast(&self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::mismatch("add_broadcast", sa, sb));
        }
        let n = b.value().len();
        let dtype = a.dtype().promote(b.dtype());
        let mut data = a.data().to_vec();
        for chunk in data.chunks_exact_mut(n) {
            for (x, y) in chunk.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        let out = Tensor::from_parts(sa.to_vec(), data, dtype);
        let Some(need) = Tape::needs(&[a, b]) else {
            return Ok(Var::constant(out));
        };
        Ok(self.record(
            out,
            &[a, b],
            Box::new(move |g| {
                let gb = need[1].then(|| {
                    let mut acc = vec![0.0; n];
                    for chunk in g.chunks_exact(n) {
                        for (s, v) in acc.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    acc
                });
                vec![need[0].then(|| g.to_vec()), gb]
            }),
        ))
    }

    pub fn scale(&self, a: &Var, factor: f64) -> Var {
        let out = a.value().map(|v| v * factor);
        if !a.tracked() {
            return Var::constant(out);
        }
        self.record(
            out,
            &[a],
            Box::new(move |g| vec![Some(g.iter().map(|v| v * factor).collect())]),
        )
    }

    pub fn sum_all(&self, a: &Var) -> Var {
        let out = Tensor::from_parts(vec![1], vec![a.value().sum()], a.dtype());
        if !a.tracked() {
            return Var::constant(out);
        }
        let n = a.value().len();
        self.record(out, &[a], Box::new(move |g| vec![Some(vec![g[0]; n])]))
    }

    /// Mean over every axis except the last: `[..., C] -> [C]`.
    pub fn mean_to_last(&self, a: &Var) -> Var {
        let c = *a.shape().last().expect("rank >= 1");
        let rows = a.value().len() / c;
        let mut acc = vec![0.0; c];
        for chunk in a.data().chunks_exact(c) {
            for (s, v) in acc.iter_mut().zip(chunk) {
                *s += v;
            }
        }
        let inv = 1.0 / rows as f64;
        acc.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::from_parts(vec![c], acc, a.dtype());
        if !a.tracked() {
            return Var::constant(out);
        }
        self.record(
            out,
            &[a],
            Box::new(move |g| {
                let mut gx = Vec::with_capacity(rows * c);
                for _ in 0..rows {
                    gx.extend(g.iter().map(|v| v * inv));
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn reshape(&self, a: &Var, shape: &[usize]) -> Result<Var> {
        let out = a.value().reshape(shape)?;
        if !a.tracked() {
            return Ok(Var::constant(out));
        }
        Ok(self.record(out, &[a], Box::new(|g| vec![Some(g.to_vec())])))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, a: &Var, perm: &[usize]) -> Result<Var> {
        let shape = a.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::shape(
                "permute",
                format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = Tensor::from_parts(out_shape.clone(), permute_data(a.data(), &shape, perm), a.dtype());
        if !a.tracked() {
            return Ok(Var::constant(out));
        }
        let inv = inverse_perm(perm);
        Ok(self.record(
            out,
            &[a],
            Box::new(move |g| vec![Some(permute_data(g, &out_shape, &inv))]),
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&self, parts: &[&Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(TensorError::shape("concat", format!("axis {axis} out of range")));
        }
        let mut dtype = first.dtype();
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != rank
                || s[..axis] != first.shape()[..axis]
                || s[axis + 1..] != first.shape()[axis + 1..]
            {
                return Err(TensorError::mismatch("concat", first.shape(), s));
            }
            total += s[axis];
            dtype = dtype.promote(p.dtype());
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let out = Tensor::from_parts(shape, data, dtype);
        let Some(need) = Tape::needs(parts) else {
            return Ok(Var::constant(out));
        };
        let row = total * inner;
        Ok(self.record(
            out,
            parts,
            Box::new(move |g| {
                let mut offset = 0;
                need.iter()
                    .zip(&widths)
                    .map(|(&n, &w)| {
                        let gi = n.then(|| {
                            let mut gi = Vec::with_capacity(outer * w);
                            for o in 0..outer {
                                gi.extend_from_slice(&g[o * row + offset..o * row + offset + w]);
                            }
                            gi
                        });
                        offset += w;
                        gi
                    })
                    .collect()
            }),
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, a: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = a.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::shape(
                "narrow",
                format!("cannot take [{start}, {}) of axis {axis} in {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis] * inner;
        let (off, w) = (start * inner, len * inner);
        let mut data = Vec::with_capacity(outer * w);
        for o in 0..outer {
            data.extend_from_slice(&a.data()[o * full + off..o * full + off + w]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = Tensor::from_parts(out_shape, data, a.dtype());
        if !a.tracked() {
            return Ok(Var::constant(out));
        }
        let n = a.value().len();
        Ok(self.record(
            out,
            &[a],
            Box::new(move |g| {
                let mut gx = vec![0.0; n];
                for o in 0..outer {
                    gx[o * full + off..o * full + off + w].copy_from_slice(&g[o * w..(o + 1) * w]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Repeats `a` along a new leading axis of size `n`.
    pub fn expand_leading(&self, a: &Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(TensorError::shape("expand_leading", "repeat count must be positive"));
        }
        let len = a.value().len();
        let mut data = Vec::with_capacity(n * len);
        for _ in 0..n {
            data.extend_from_slice(a.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(a.shape());
        let out = Tensor::from_parts(shape, data, a.dtype());
        if !a.tracked() {
            return Ok(Var::constant(out));
        }
        Ok(self.record(
            out,
            &[a],
            Box::new(move |g| {
                let mut acc = vec![0.0; len];
                for chunk in g.chunks_exact(len) {
                    for (s, v) in acc.iter_mut().zip(chunk) {
                        *s += v;
                    }
                }
                vec![Some(acc)]
            }),
        ))
    }

    /// Plain matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        gemm(false, false, m, k, n, a.data(), b.data(), &mut data, false);
        let out = Tensor::from_parts(vec![m, n], data, a.dtype().promote(b.dtype()));
        let Some(need) = Tape::needs(&[a, b]) else {
            return Ok(Var::constant(out));
        };
        let (av, bv) = (a.shared(), b.shared());
        Ok(self.record(
            out,
            &[a, b],
            Box::new(move |g| {
                let ga = need[0].then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm(false, true, m, n, k, g, bv.data(), &mut ga, false);
                    ga
                });
                let gb = need[1].then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm(true, false, k, m, n, av.data(), g, &mut gb, false);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Normalizes each row along the last axis to unit L2 norm.
    pub fn l2_normalize(&self, a: &Var) -> Result<Var> {
        let c = *a.shape().last().expect("rank >= 1");
        let mut data = a.data().to_vec();
        let mut norms = Vec::with_capacity(data.len() / c);
        for row in data.chunks_exact_mut(c) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(TensorError::Contract(
                    "l2_normalize of an all-zero vector".into(),
                ));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let out = Tensor::from_parts(a.shape().to_vec(), data.clone(), a.dtype());
        if !a.tracked() {
            return Ok(Var::constant(out));
        }
        Ok(self.record(
            out,
            &[a],
            Box::new(move |g| {
                let mut gx = vec![0.0; g.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let y = &data[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..c {
                        gx[r * c + i] = (gr[i] - y[i] * dot) / norm;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `-log softmax(logits)[target]` for a flat vector of logits.
    pub fn cross_entropy(&self, logits: &Var, target: usize) -> Result<Var> {
        let m = logits.value().len();
        if target >= m {
            return Err(TensorError::shape(
                "cross_entropy",
                format!("target index {target} out of range for {m} classes"),
            ));
        }
        let mut probs = logits.data().to_vec();
        crate::kernels::softmax_in_place(&mut probs);
        let max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - logits.data()[target];
        let out = Tensor::from_parts(vec![1], vec![loss], logits.dtype());
        if !logits.tracked() {
            return Ok(Var::constant(out));
        }
        Ok(self.record(
            out,
            &[logits],
            Box::new(move |g| {
                let mut gx: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                gx[target] -= g[0];
                vec![Some(gx)]
            }),
        ))
    }
}
