//! Frozen image encoder: a pre-norm ViT applied to every sparse frame
//! independently, plus the supervised pretraining that stands in for a
//! large-scale image model.

use std::path::Path;

use dist_tensor::{archive, AdamW, ParamStore, Tape, Tensor, TensorError, Var};
use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{FeatureTap, SpatialConfig};
use crate::error::{CoreError, Result};
use crate::nn::{Builder, Ctx, INIT_STD};

pub const PREFIX: &str = "spatial.";
const HEAD: &str = "pretrain.head";

/// Per-layer token features `X^(l)`, each `[T, N+1, C]`, `l = 1..=L`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFeatures {
    pub layers: Vec<Tensor>,
}

impl SpatialFeatures {
    pub fn layer(&self, l: usize) -> &Tensor {
        &self.layers[l - 1]
    }

    pub fn last(&self) -> &Tensor {
        self.layers.last().expect("at least one layer")
    }

    /// Features of the given frames only, in the given order.
    pub fn select_frames(&self, frames: &[usize]) -> Result<SpatialFeatures> {
        let layers = self
            .layers
            .iter()
            .map(|x| x.select_leading(frames))
            .collect::<std::result::Result<_, _>>()?;
        Ok(SpatialFeatures { layers })
    }
}

pub fn init<R: Rng>(cfg: &SpatialConfig, store: &mut ParamStore, rng: &mut R, frozen: bool) -> Result<()> {
    cfg.validate()?;
    let (c, p) = (cfg.channels, cfg.patch);
    let mut b = Builder { store, rng, frozen };
    b.linear("spatial.patch_proj", p * p * 3, c)?;
    b.trunc_normal("spatial.cls", &[1, c], INIT_STD)?;
    b.trunc_normal("spatial.pos", &[cfg.tokens() + 1, c], INIT_STD)?;
    for l in 1..=cfg.layers {
        b.transformer_block(&format!("spatial.block{l}"), c, cfg.mlp_ratio, false)?;
    }
    b.norm("spatial.ln_post", c, 1.0)
}

pub fn freeze(store: &mut ParamStore) {
    store.freeze_prefix(PREFIX, true);
}

/// Cuts `[T, H, W, 3]` frames into `[T, N, P·P·3]` patch rows. Patches are
/// ordered row-major over the grid; each row is laid out as (py, px, c).
pub fn patchify(frames: &Tensor, cfg: &SpatialConfig) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 4 || s[1] != cfg.height || s[2] != cfg.width || s[3] != 3 {
        return Err(TensorError::mismatch("patchify", s, &[s[0], cfg.height, cfg.width, 3]).into());
    }
    let (t, p) = (s[0], cfg.patch);
    let (gh, gw) = cfg.grid();
    let row = p * p * 3;
    let src = frames.data();
    let mut out = Vec::with_capacity(t * gh * gw * row);
    for f in 0..t {
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..p {
                    let start = ((f * cfg.height + gy * p + py) * cfg.width + gx * p) * 3;
                    out.extend_from_slice(&src[start..start + p * 3]);
                }
            }
        }
    }
    Ok(Tensor::with_dtype(&[t, gh * gw, row], out, frames.dtype())?)
}

/// Patch projection, class token and position embedding: `[T, N+1, C]`.
pub fn embed_frames(ctx: &Ctx, cfg: &SpatialConfig, frames: &Tensor) -> Result<Var> {
    let t = ctx.tape;
    let patches = Var::constant(patchify(frames, cfg)?);
    let tokens = ctx.linear("spatial.patch_proj", &patches)?;
    let cls = t.expand_leading(&ctx.p("spatial.cls")?, frames.shape()[0])?;
    let x = t.concat(&[&cls, &tokens], 1)?;
    Ok(t.add_broadcast(&x, &ctx.p("spatial.pos")?)?)
}

/// Outputs of every block, `X^(1..=L)`, as tape values.
pub fn encode_vars(ctx: &Ctx, cfg: &SpatialConfig, frames: &Tensor) -> Result<Vec<Var>> {
    let mut x = embed_frames(ctx, cfg, frames)?;
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 1..=cfg.layers {
        x = ctx.transformer_block(&format!("spatial.block{l}"), &x, cfg.heads)?;
        layers.push(x.clone());
    }
    Ok(layers)
}

/// Per-layer features of `[T, H, W, 3]` frames. With [`FeatureTap::PostNorm`]
/// the last layer is replaced by its final-norm output.
pub fn encode(store: &ParamStore, cfg: &SpatialConfig, tap: FeatureTap, eps: f64, frames: &Tensor) -> Result<SpatialFeatures> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, eps);
    let mut vars = encode_vars(&ctx, cfg, frames)?;
    if tap == FeatureTap::PostNorm {
        let last = vars.pop().expect("at least one layer");
        vars.push(ctx.ln("spatial.ln_post", &last)?);
    }
    Ok(SpatialFeatures {
        layers: vars.into_iter().map(Var::into_tensor).collect(),
    })
}

pub fn named_weights(store: &ParamStore) -> Vec<(String, Tensor)> {
    store.named_values(PREFIX)
}

/// Content hash of every spatial parameter.
pub fn weights_hash(store: &ParamStore) -> String {
    archive::content_hash(&named_weights(store))
}

pub fn save_weights(store: &ParamStore, path: &Path) -> Result<()> {
    Ok(archive::save(path, &named_weights(store))?)
}

/// Descriptive alias used in load errors for the embedding parameters.
fn alias(name: &str) -> Option<&'static str> {
    match name {
        "spatial.pos" => Some("e_spatial"),
        "spatial.cls" => Some("x_cls"),
        _ => None,
    }
}

pub fn load_entries(store: &mut ParamStore, entries: &[(String, Tensor)]) -> Result<()> {
    store.load_named(PREFIX, entries).map_err(|e| match e {
        TensorError::Param { name, reason } => {
            let reason = match alias(&name) {
                Some(a) => format!("{reason} ({a})"),
                None => reason,
            };
            TensorError::Param { name, reason }.into()
        }
        other => other.into(),
    })
}

pub fn load_weights(store: &mut ParamStore, path: &Path) -> Result<()> {
    let entries = archive::load(path)?;
    load_entries(store, &entries)
}

#[derive(Debug, Clone)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub eps: f64,
    /// Required final training accuracy.
    pub min_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Logits `[B, K]` of the pretraining head on the final-norm class tokens.
fn classify(ctx: &Ctx, cfg: &SpatialConfig, images: &Tensor) -> Result<Var> {
    let t = ctx.tape;
    let x = encode_vars(ctx, cfg, images)?.pop().expect("at least one layer");
    let cls = t.narrow(&x, 1, 0, 1)?;
    let cls = t.reshape(&cls, &[images.shape()[0], cfg.channels])?;
    let cls = ctx.ln("spatial.ln_post", &cls)?;
    ctx.linear(HEAD, &cls)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains the spatial encoder and a linear head on single labelled images.
/// The head lives outside the spatial prefix and is removed afterwards.
pub fn pretrain(
    cfg: &SpatialConfig,
    store: &mut ParamStore,
    images: &[(Tensor, usize)],
    classes: usize,
    opts: &PretrainOptions,
) -> Result<Vec<PretrainEpoch>> {
    if images.is_empty() || classes == 0 || opts.batch == 0 {
        return Err(CoreError::data("pretraining needs images, classes and a positive batch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    if store.id(&format!("{HEAD}.w")).is_none() {
        Builder { store: &mut *store, rng: &mut rng, frozen: false }.linear(HEAD, cfg.channels, classes)?;
    }
    let mut opt = AdamW::new(opts.lr, (0.9, 0.999), opts.weight_decay);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::new();
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(opts.batch) {
            let batch = Tensor::stack(&chunk.iter().map(|&i| images[i].0.clone()).collect::<Vec<_>>())?;
            store.zero_grad();
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, store, opts.eps);
            let logits = classify(&ctx, cfg, &batch)?;
            let mut losses = Vec::with_capacity(chunk.len());
            for (r, &i) in chunk.iter().enumerate() {
                let row = tape.narrow(&logits, 0, r, 1)?;
                let row = tape.reshape(&row, &[classes])?;
                if argmax(row.data()) == images[i].1 {
                    correct += 1;
                }
                losses.push(tape.cross_entropy(&row, images[i].1)?);
            }
            let refs: Vec<&Var> = losses.iter().collect();
            let total = tape.sum_all(&tape.concat(&refs, 0)?);
            loss_sum += total.data()[0];
            let loss = tape.scale(&total, 1.0 / chunk.len() as f64);
            tape.backward(&loss, store)?;
            drop(tape);
            opt.step(store)?;
        }
        let n = images.len() as f64;
        let rec = PretrainEpoch {
            epoch,
            loss: loss_sum / n,
            accuracy: correct as f64 / n,
        };
        info!("pretrain epoch {epoch}: loss {:.4} acc {:.4}", rec.loss, rec.accuracy);
        history.push(rec);
    }
    let acc = evaluate_classifier(cfg, store, images, classes, opts.eps)?;
    if let Some(last) = history.last_mut() {
        last.accuracy = acc;
    }
    if acc < opts.min_accuracy {
        return Err(CoreError::Convergence(format!(
            "train accuracy {acc:.4} after {} epochs is below {}",
            opts.epochs, opts.min_accuracy
        )));
    }
    Ok(history)
}

/// Accuracy of the pretraining head over `images`, without recording.
pub fn evaluate_classifier(
    cfg: &SpatialConfig,
    store: &ParamStore,
    images: &[(Tensor, usize)],
    classes: usize,
    eps: f64,
) -> Result<f64> {
    let mut frozen = store.clone();
    frozen.freeze_prefix("", true);
    let mut correct = 0;
    for chunk in images.chunks(64) {
        let batch = Tensor::stack(&chunk.iter().map(|(x, _)| x.clone()).collect::<Vec<_>>())?;
        let tape = Tape::new();
        let logits = classify(&Ctx::new(&tape, &frozen, eps), cfg, &batch)?;
        for (row, (_, label)) in logits.data().chunks_exact(classes).zip(chunk) {
            if argmax(row) == *label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Drops the pretraining head from a store, keeping only spatial weights.
pub fn spatial_only(store: &ParamStore) -> Result<ParamStore> {
    let mut out = ParamStore::new();
    for (_, p) in store.iter() {
        if p.name.starts_with(PREFIX) {
            out.add(p.name.clone(), p.value().clone(), p.frozen())?;
        }
    }
    Ok(out)
}
