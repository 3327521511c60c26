//! Representation similarity, analytic cost accounting and per-token
//! feature magnitudes.

use std::fmt;
use std::fs;
use std::path::Path;

use dist_tensor::kernels::gemm;
use dist_tensor::Tensor;

use crate::config::{DistConfig, PhiUp, PsiDown, TBlockKind};
use crate::error::{CoreError, Result};

fn frobenius_sq(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum()
}

fn centered(x: &Tensor, name: &str) -> Result<(usize, usize, Vec<f64>)> {
    if x.rank() != 2 {
        return Err(CoreError::data(format!("{name} must be [n, d], got {:?}", x.shape())));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if n < 2 {
        return Err(CoreError::data(format!("{name} needs at least 2 rows, got {n}")));
    }
    if !x.is_finite() {
        return Err(CoreError::Degenerate(format!("{name} contains non-finite values")));
    }
    let mut data = x.data().to_vec();
    for j in 0..d {
        let mean = (0..n).map(|i| data[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            data[i * d + j] -= mean;
        }
    }
    Ok((n, d, data))
}

/// Linear CKA of two feature matrices over the same `n` samples:
/// `‖BᵀA‖²_F / (‖AᵀA‖_F ‖BᵀB‖_F)` on column-centred inputs.
pub fn linear_cka(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (n, da, a) = centered(a, "A")?;
    let (nb, db, b) = centered(b, "B")?;
    if n != nb {
        return Err(CoreError::data(format!("CKA inputs have {n} and {nb} rows")));
    }
    let mut ba = vec![0.0; db * da];
    gemm(true, false, db, n, da, &b, &a, &mut ba, false);
    let mut aa = vec![0.0; da * da];
    gemm(true, false, da, n, da, &a, &a, &mut aa, false);
    let mut bb = vec![0.0; db * db];
    gemm(true, false, db, n, db, &b, &b, &mut bb, false);
    let denom = frobenius_sq(&aa).sqrt() * frobenius_sq(&bb).sqrt();
    if denom == 0.0 {
        return Err(CoreError::Degenerate("CKA input has zero variance".into()));
    }
    Ok((frobenius_sq(&ba) / denom).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Spatial,
    Temporal,
    Integration,
    Head,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Spatial, Component::Temporal, Component::Integration, Component::Head];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Spatial => "spatial",
            Component::Temporal => "temporal",
            Component::Integration => "integration",
            Component::Head => "head",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Cost of one named layer: multiply-accumulates per clip and parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub component: Component,
    pub name: String,
    pub macs: u64,
    pub params: u64,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    fn push(&mut self, component: Component, name: impl Into<String>, macs: usize, params: usize, trainable: bool) {
        self.layers.push(LayerCost {
            component,
            name: name.into(),
            macs: macs as u64,
            params: params as u64,
            trainable,
        });
    }

    fn of(&self, c: Component) -> impl Iterator<Item = &LayerCost> {
        self.layers.iter().filter(move |l| l.component == c)
    }

    pub fn macs(&self, c: Component) -> u64 {
        self.of(c).map(|l| l.macs).sum()
    }

    pub fn params(&self, c: Component) -> u64 {
        self.of(c).map(|l| l.params).sum()
    }

    pub fn trainable_params_of(&self, c: Component) -> u64 {
        self.of(c).filter(|l| l.trainable).map(|l| l.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn trainable_params(&self) -> u64 {
        self.layers.iter().filter(|l| l.trainable).map(|l| l.params).sum()
    }

    pub fn frozen_params(&self) -> u64 {
        self.total_params() - self.trainable_params()
    }

    /// `component,macs,params,trainable` rows, one per component plus a total.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,macs,params,trainable\n");
        for c in Component::ALL {
            s.push_str(&format!("{c},{},{},{}\n", self.macs(c), self.params(c), self.trainable_params_of(c)));
        }
        s.push_str(&format!(
            "total,{},{},{}\n",
            self.total_macs(),
            self.total_params(),
            self.trainable_params()
        ));
        s
    }
}

/// Pre-norm transformer block over `s` tokens of width `c`:
/// `(macs, params)`.
fn transformer_block_cost(s: usize, c: usize, mlp_ratio: usize) -> (usize, usize) {
    let h = mlp_ratio * c;
    let macs = s * c * 3 * c // qkv
        + 2 * s * s * c // scores and weighted values
        + s * c * c // output projection
        + 2 * s * c * h; // mlp
    let params = 4 * c + (3 * c * c + 3 * c) + (c * c + c) + (c * h + h) + (h * c + c);
    (macs, params)
}

/// Analytic multiply-accumulate and parameter counts of one clip's forward
/// pass. Norms, activations, softmax and bias additions are not counted.
pub fn cost_report(cfg: &DistConfig) -> CostReport {
    let mut r = CostReport::default();
    let sp = &cfg.spatial;
    let (t, c, p, layers) = (sp.frames, sp.channels, sp.patch, sp.layers);
    let n = sp.tokens();
    let s = n + 1;
    let (gamma, beta) = (cfg.temporal.gamma, cfg.temporal.beta_c);
    let alpha = cfg.integration.alpha_c;
    let ab = cfg.ablation;
    use Component::*;

    r.push(Spatial, "patch_proj", t * n * p * p * 3 * c, p * p * 3 * c + c, false);
    r.push(Spatial, "cls+pos", 0, c + s * c, false);
    for l in 1..=layers {
        let (m, q) = transformer_block_cost(s, c, sp.mlp_ratio);
        r.push(Spatial, format!("block{l}"), t * m, q, false);
    }
    r.push(Spatial, "ln_post", 0, 2 * c, false);

    if ab.temporal {
        let pos = gamma * t * n;
        r.push(Temporal, "stem", pos * 3 * p * p * 3 * beta, 3 * p * p * 3 * beta + beta, true);
        for l in 1..=layers {
            let (m, q) = match cfg.temporal.kind {
                TBlockKind::R21d => (pos * 12 * beta * beta, 12 * beta * beta + 6 * beta),
                TBlockKind::C3d => (pos * 27 * beta * beta, 27 * beta * beta + 3 * beta),
                TBlockKind::JointAttention => transformer_block_cost(pos, beta, 4),
            };
            r.push(Temporal, format!("block{l}"), m, q, true);
        }
    }

    if ab.integration {
        let rows = t * s;
        let hidden = cfg.integration.ffn_ratio * alpha;
        for l in 1..=layers {
            let name = |part: &str| format!("block{l}.{part}");
            if cfg.layer_active(l) {
                r.push(Integration, name("fc_x"), rows * c * alpha, c * alpha + alpha, true);
                if ab.psi_active() {
                    r.push(Integration, name("z_cls"), 0, t * alpha, true);
                    match cfg.integration.psi {
                        PsiDown::DConv => r.push(
                            Integration,
                            name("dconv"),
                            t * n * gamma * beta * alpha,
                            gamma * beta * alpha + alpha,
                            true,
                        ),
                        PsiDown::AvgPool | PsiDown::MaxPool => {
                            r.push(Integration, name("psi_fc"), t * n * beta * alpha, beta * alpha + alpha, true)
                        }
                    }
                }
                r.push(
                    Integration,
                    name("ffn"),
                    2 * rows * alpha * hidden,
                    2 * alpha + (alpha * hidden + hidden) + (hidden * alpha + alpha),
                    true,
                );
                let (tm, tp) = if cfg.integration.tconv_depthwise {
                    (rows * 3 * alpha, 3 * alpha + alpha)
                } else {
                    (rows * 3 * alpha * alpha, 3 * alpha * alpha + alpha)
                };
                r.push(Integration, name("tconv"), tm, 2 * alpha + tp, true);
                r.push(Integration, name("tconv_fc"), rows * alpha * alpha, alpha * alpha + alpha, true);
            }
            if ab.phi_active() && l < layers {
                r.push(Integration, name("phi_fc"), t * n * alpha * beta, alpha * beta + beta, true);
                if cfg.integration.phi == PhiUp::Deconv {
                    r.push(Integration, name("deconv"), t * n * gamma * beta * beta, gamma * beta * beta + beta, true);
                }
            }
        }
    }

    let d = cfg.embed_dim();
    if ab.integration {
        r.push(Head, "proj", alpha * d, alpha * d + d, true);
    } else {
        r.push(Head, "proj_spatial", c * d, c * d + d, true);
        if ab.temporal {
            r.push(Head, "proj_temporal", beta * d, beta * d + d, true);
        }
    }
    r.push(Head, "labels", cfg.head.classes * d, cfg.head.classes * d, false);
    r
}

pub fn count_macs(cfg: &DistConfig) -> CostReport {
    cost_report(cfg)
}

pub fn count_params(cfg: &DistConfig) -> CostReport {
    cost_report(cfg)
}

/// Per-token L2 norms of a channels-last grid `[F, rows, cols, C]`,
/// returned as `[F, rows, cols]`.
pub fn feature_magnitude_map(grid: &Tensor) -> Result<Tensor> {
    let s = grid.shape();
    if s.len() != 4 {
        return Err(CoreError::data(format!("magnitude map needs [F, rows, cols, C], got {s:?}")));
    }
    let c = s[3];
    let norms: Vec<f64> = grid
        .data()
        .chunks_exact(c)
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    Ok(Tensor::new(&s[..3], norms)?)
}

/// Drops the class token of `[T, N+1, C]` tokens and restores the grid.
pub fn tokens_to_grid(tokens: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    let s = tokens.shape();
    if s.len() != 3 || s[1] != rows * cols + 1 {
        return Err(CoreError::data(format!(
            "expected [T, {}, C] tokens for a {rows}x{cols} grid, got {s:?}",
            rows * cols + 1
        )));
    }
    let (t, c) = (s[0], s[2]);
    let mut data = Vec::with_capacity(t * rows * cols * c);
    for f in 0..t {
        let start = (f * s[1] + 1) * c;
        data.extend_from_slice(&tokens.data()[start..start + rows * cols * c]);
    }
    Ok(Tensor::new(&[t, rows, cols, c], data)?)
}

pub fn magnitude_csv(map: &Tensor) -> String {
    let s = map.shape();
    let mut out = String::from("frame,row,col,magnitude\n");
    for f in 0..s[0] {
        for r in 0..s[1] {
            for c in 0..s[2] {
                out.push_str(&format!("{f},{r},{c},{}\n", map.get(&[f, r, c])));
            }
        }
    }
    out
}

pub fn write_magnitude_csv(path: &Path, map: &Tensor) -> Result<()> {
    fs::write(path, magnitude_csv(map))?;
    Ok(())
}

/// Probe-set features of the three streams, one row per clip.
#[derive(Debug, Clone)]
pub struct StreamFeatures {
    pub spatial: Tensor,
    pub integrated: Option<Tensor>,
    pub temporal: Option<Tensor>,
}

pub const MIN_PROBE_CLIPS: usize = 500;

/// `(pair, value)` rows comparing each stream with the final spatial
/// features. `baseline` is an optional extra stream (e.g. another model).
pub fn cka_report(f: &StreamFeatures, baseline: Option<&Tensor>) -> Result<Vec<(String, f64)>> {
    let n = f.spatial.shape()[0];
    if n < MIN_PROBE_CLIPS {
        return Err(CoreError::data(format!(
            "CKA probe set has {n} clips; at least {MIN_PROBE_CLIPS} are required"
        )));
    }
    let mut rows = Vec::new();
    if let Some(y) = &f.integrated {
        rows.push(("integrated_vs_spatial".to_string(), linear_cka(y, &f.spatial)?));
    }
    if let Some(z) = &f.temporal {
        rows.push(("temporal_vs_spatial".to_string(), linear_cka(z, &f.spatial)?));
    }
    rows.push(("spatial_vs_spatial".to_string(), linear_cka(&f.spatial, &f.spatial)?));
    if let Some(b) = baseline {
        rows.push(("baseline_vs_spatial".to_string(), linear_cka(b, &f.spatial)?));
    }
    Ok(rows)
}

pub fn cka_csv(rows: &[(String, f64)]) -> String {
    let mut s = String::from("pair,value\n");
    for (pair, v) in rows {
        s.push_str(&format!("{pair},{v}\n"));
    }
    s
}

/// Marks the tokens of `[F, H, W, 3]` frames whose patch changes relative to
/// the previous or next frame. Output layout is `[F, H/P, W/P]`, row-major.
pub fn motion_token_mask(frames: &Tensor, patch: usize) -> Result<Vec<bool>> {
    let s = frames.shape();
    if s.len() != 4 || patch == 0 || !s[1].is_multiple_of(patch) || !s[2].is_multiple_of(patch) {
        return Err(CoreError::data(format!("cannot cut {s:?} frames into {patch}-pixel patches")));
    }
    let (f, h, w) = (s[0], s[1], s[2]);
    let (gh, gw) = (h / patch, w / patch);
    let differs = |a: usize, b: usize, gy: usize, gx: usize| {
        (0..patch).any(|py| {
            (0..patch).any(|px| {
                (0..3).any(|c| {
                    let (y, x) = (gy * patch + py, gx * patch + px);
                    frames.get(&[a, y, x, c]) != frames.get(&[b, y, x, c])
                })
            })
        })
    };
    let mut mask = Vec::with_capacity(f * gh * gw);
    for t in 0..f {
        for gy in 0..gh {
            for gx in 0..gw {
                let prev = t > 0 && differs(t, t - 1, gy, gx);
                let next = t + 1 < f && differs(t, t + 1, gy, gx);
                mask.push(prev || next);
            }
        }
    }
    Ok(mask)
}

/// Mean of the marked cells of `map` over the mean of the unmarked ones.
pub fn masked_mean_ratio(map: &Tensor, mask: &[bool]) -> Result<f64> {
    if map.len() != mask.len() {
        return Err(CoreError::data(format!("mask of {} cells for a map of {}", mask.len(), map.len())));
    }
    let (mut on, mut off) = ((0.0, 0usize), (0.0, 0usize));
    for (v, &m) in map.data().iter().zip(mask) {
        let slot = if m { &mut on } else { &mut off };
        slot.0 += v;
        slot.1 += 1;
    }
    if on.1 == 0 || off.1 == 0 || off.0 == 0.0 {
        return Err(CoreError::Degenerate("ratio needs both marked and unmarked non-zero cells".into()));
    }
    Ok((on.0 / on.1 as f64) / (off.0 / off.1 as f64))
}
