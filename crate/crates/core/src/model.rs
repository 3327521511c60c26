//! The full model: frozen spatial encoder, temporal encoder, integration
//! branch and head, all parameters in one store.

use std::path::Path;

use dist_tensor::{archive, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::DistConfig;
use crate::error::{CoreError, Result};
use crate::head;
use crate::integration;
use crate::nn::Ctx;
use crate::spatial::{self, SpatialFeatures};
use crate::temporal;

/// Sub-seed offsets so that each component draws from its own stream.
const SPATIAL_STREAM: u64 = 0x5350;
const TRAINABLE_STREAM: u64 = 0x5452;
const LABEL_STREAM: u64 = 0x4c42;

/// One clip as seen by the model: cached sparse-frame features plus the
/// dense frames for the temporal encoder.
#[derive(Debug, Clone, Copy)]
pub struct ClipInput<'a> {
    pub spatial: &'a SpatialFeatures,
    pub dense: Option<&'a Tensor>,
}

/// Every stream of one forward pass.
#[derive(Debug, Clone)]
pub struct DistOutput {
    /// `Y^(1..=L)`; empty without the integration branch.
    pub integration: Vec<Var>,
    /// `Z^(1..=L)`; empty without the temporal encoder.
    pub temporal: Vec<Var>,
    /// `Ẑ` fed into each layer `2..=L`, where the map is active.
    pub guidance: Vec<Option<Var>>,
    /// Unit-norm video embedding.
    pub embedding: Var,
    /// `u · y / τ`.
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct DistModel {
    pub config: DistConfig,
    pub store: ParamStore,
}

impl DistModel {
    /// Fresh model with a randomly initialised (and frozen) spatial encoder.
    pub fn new(config: DistConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPATIAL_STREAM);
        spatial::init(&config.spatial, &mut store, &mut rng, true)?;
        Self::with_spatial_store(config, store, seed)
    }

    /// Model around pretrained spatial weights (any non-spatial entries of
    /// `spatial_entries` are ignored).
    pub fn with_spatial(config: DistConfig, spatial_entries: &[(String, Tensor)], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPATIAL_STREAM);
        spatial::init(&config.spatial, &mut store, &mut rng, true)?;
        spatial::load_entries(&mut store, spatial_entries)?;
        Self::with_spatial_store(config, store, seed)
    }

    fn with_spatial_store(config: DistConfig, mut store: ParamStore, seed: u64) -> Result<Self> {
        spatial::freeze(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ TRAINABLE_STREAM);
        if config.ablation.temporal {
            temporal::init(&config, &mut store, &mut rng)?;
        }
        if config.ablation.integration {
            integration::init(&config, &mut store, &mut rng)?;
        }
        head::init(&config, &mut store, &mut rng, seed ^ LABEL_STREAM)?;
        Ok(DistModel { config, store })
    }

    pub fn ctx<'a>(&'a self, tape: &'a Tape) -> Ctx<'a> {
        Ctx::new(tape, &self.store, self.config.ln_eps)
    }

    /// Spatial features of `[T, H, W, 3]` frames (never recorded).
    pub fn encode_spatial(&self, frames: &Tensor) -> Result<SpatialFeatures> {
        let c = &self.config;
        spatial::encode(&self.store, &c.spatial, c.feature_tap, c.ln_eps, frames)
    }

    pub fn forward(&self, tape: &Tape, input: ClipInput) -> Result<DistOutput> {
        let cfg = &self.config;
        let ctx = self.ctx(tape);
        let t = tape;
        let layers = cfg.spatial.layers;
        let ab = cfg.ablation;
        let x_shape = [cfg.spatial.frames, cfg.spatial.tokens() + 1, cfg.spatial.channels];
        if input.spatial.layers.len() != layers || input.spatial.layers.iter().any(|x| x.shape() != x_shape) {
            return Err(CoreError::config(format!(
                "spatial features do not match {layers} layers of {x_shape:?}"
            )));
        }

        let mut z = match (ab.temporal, input.dense) {
            (true, Some(frames)) => Some(temporal::stem(&ctx, cfg, frames)?),
            (true, None) => return Err(CoreError::data("temporal encoder needs dense frames")),
            (false, _) => None,
        };
        let mut y = Var::constant(Tensor::zeros(&[x_shape[0], x_shape[1], cfg.integration.alpha_c]));
        let mut guidance: Option<Var> = None;
        let mut out = DistOutput {
            integration: Vec::new(),
            temporal: Vec::new(),
            guidance: Vec::new(),
            embedding: Var::constant(Tensor::zeros(&[1])),
            logits: Var::constant(Tensor::zeros(&[1])),
        };

        for l in 1..=layers {
            // Layer l's temporal block consumes the guidance built at layer l-1.
            if let Some(zl) = &z {
                let next = temporal::step(&ctx, cfg, l, zl, guidance.as_ref())?;
                out.temporal.push(next.clone());
                z = Some(next);
            }
            if l > 1 {
                out.guidance.push(guidance.take());
            }
            if !ab.integration {
                continue;
            }
            let x = Var::constant(input.spatial.layer(l).clone());
            let s = if cfg.layer_active(l) {
                let s = t.add(&y, &ctx.linear(&format!("integ.block{l}.fc_x"), &x)?)?;
                let yhat = match (&z, ab.psi_active()) {
                    (Some(zl), true) => t.add(&s, &integration::psi(&ctx, cfg, l, zl)?)?,
                    _ => s.clone(),
                };
                y = integration::iblock(&ctx, cfg, l, &yhat)?;
                s
            } else {
                y.clone()
            };
            out.integration.push(y.clone());
            if ab.phi_active() && l < layers {
                guidance = Some(integration::phi(&ctx, cfg, l, &s)?);
            }
        }

        let pooling = cfg.head.pooling;
        let v = if ab.integration {
            ctx.linear("head.proj", &head::pool(t, &y, pooling)?)?
        } else {
            let xl = Var::constant(input.spatial.last().clone());
            let v = ctx.linear("head.proj_spatial", &head::pool(t, &xl, pooling)?)?;
            match &z {
                Some(zl) => t.add(&v, &ctx.linear("head.proj_temporal", &t.mean_to_last(zl))?)?,
                None => v,
            }
        };
        out.embedding = t.l2_normalize(&v)?;
        out.logits = head::logits(t, &out.embedding, &ctx.p(head::LABELS)?, cfg.head.tau)?;
        Ok(out)
    }

    /// Forward plus the similarity loss for `label`.
    pub fn loss(&self, tape: &Tape, input: ClipInput, label: usize) -> Result<(Var, DistOutput)> {
        let out = self.forward(tape, input)?;
        let m = out.logits.value().len();
        if label >= m {
            return Err(CoreError::data(format!("label {label} out of range for {m} classes")));
        }
        let loss = tape.cross_entropy(&out.logits, label)?;
        Ok((loss, out))
    }

    /// Class probabilities for one clip, without recording a graph.
    pub fn probabilities(&self, input: ClipInput) -> Result<Vec<f64>> {
        let frozen = self.frozen_view();
        let tape = Tape::new();
        let out = frozen.forward(&tape, input)?;
        Ok(head::softmax(out.logits.data()))
    }

    /// A copy with every parameter frozen, so forward passes record nothing.
    pub fn frozen_view(&self) -> DistModel {
        let mut m = self.clone();
        m.store.freeze_prefix("", true);
        m
    }

    /// Names and values of every non-spatial parameter.
    pub fn trainable_entries(&self) -> Vec<(String, Tensor)> {
        self.store
            .iter()
            .filter(|(_, p)| !p.name.starts_with(spatial::PREFIX))
            .map(|(_, p)| (p.name.clone(), p.value().clone()))
            .collect()
    }

    /// Hash of the full parameter set (spatial, trainable and labels).
    pub fn weights_hash(&self) -> String {
        archive::content_hash(&self.store.named_values(""))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(archive::save(path, &self.store.named_values(""))?)
    }

    /// Loads every parameter of this model's layout from an archive.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let entries = archive::load(path)?;
        Ok(self.store.load_named("", &entries)?)
    }

    pub fn trainable_count(&self) -> usize {
        self.store.count(Some(false))
    }
}
