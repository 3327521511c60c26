//! Video-level pooling, projection into the label-embedding space and the
//! temperature-scaled similarity loss against a frozen label table.

use dist_tensor::{ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DistConfig, Pooling};
use crate::error::{CoreError, Result};
use crate::nn::Builder;

pub const LABELS: &str = "labels.u";

/// `M` seeded random unit vectors of width `dim`.
pub fn label_table(classes: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::randn(&[classes, dim], 1.0, &mut rng);
    for row in t.data_mut().chunks_exact_mut(dim) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

/// Registers the projection(s) and the frozen label table.
pub fn init<R: rand::Rng>(cfg: &DistConfig, store: &mut ParamStore, rng: &mut R, label_seed: u64) -> Result<()> {
    let d = cfg.embed_dim();
    let mut b = Builder { store: &mut *store, rng, frozen: false };
    if cfg.ablation.integration {
        b.linear("head.proj", cfg.integration.alpha_c, d)?;
    } else {
        b.linear("head.proj_spatial", cfg.spatial.channels, d)?;
        if cfg.ablation.temporal {
            b.linear("head.proj_temporal", cfg.temporal.beta_c, d)?;
        }
    }
    store.add(LABELS, label_table(cfg.head.classes, d, label_seed), true)?;
    Ok(())
}

/// Mean over frames of either every token or the class token only:
/// `[T, N+1, C] -> [C]`.
pub fn pool(tape: &Tape, x: &Var, pooling: Pooling) -> Result<Var> {
    Ok(match pooling {
        Pooling::AllTokens => tape.mean_to_last(x),
        Pooling::ClsToken => tape.mean_to_last(&tape.narrow(x, 1, 0, 1)?),
    })
}

/// Similarity logits `u · y / τ` for a unit `y` of width `D`.
pub fn logits(tape: &Tape, y: &Var, table: &Var, tau: f64) -> Result<Var> {
    let d = y.value().len();
    let col = tape.reshape(y, &[d, 1])?;
    let sims = tape.matmul(table, &col)?;
    let m = table.shape()[0];
    Ok(tape.scale(&tape.reshape(&sims, &[m])?, 1.0 / tau))
}

/// `-log softmax(u · y / τ)[label]`.
pub fn contrastive_loss(tape: &Tape, y: &Var, table: &Var, label: usize, tau: f64) -> Result<Var> {
    let m = table.shape()[0];
    if label >= m {
        return Err(CoreError::data(format!("label {label} out of range for {m} classes")));
    }
    Ok(tape.cross_entropy(&logits(tape, y, table, tau)?, label)?)
}

/// Index of the most similar label row; ties go to the lowest index.
pub fn predict(y: &[f64], table: &Tensor) -> Result<usize> {
    let s = table.shape();
    if s.len() != 2 || s[0] == 0 {
        return Err(CoreError::config("label table is empty"));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (k, row) in table.data().chunks_exact(s[1]).enumerate() {
        let sim: f64 = row.iter().zip(y).map(|(a, b)| a * b).sum();
        if sim > best.1 {
            best = (k, sim);
        }
    }
    Ok(best.0)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    dist_tensor::kernels::softmax_in_place(&mut p);
    p
}

/// Averages per-clip class probabilities and returns the argmax (lowest
/// index on ties) together with the averaged vector.
pub fn average_votes(clip_probs: &[Vec<f64>]) -> Result<(usize, Vec<f64>)> {
    let first = clip_probs.first().ok_or_else(|| CoreError::data("no clips to average"))?;
    let mut avg = vec![0.0; first.len()];
    for p in clip_probs {
        for (a, v) in avg.iter_mut().zip(p) {
            *a += v / clip_probs.len() as f64;
        }
    }
    let mut best = 0;
    for (k, v) in avg.iter().enumerate() {
        if *v > avg[best] {
            best = k;
        }
    }
    Ok((best, avg))
}
