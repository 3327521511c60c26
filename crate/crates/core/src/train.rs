//! Training and evaluation of the trainable parts of a [`DistModel`] on
//! cached spatial features.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use dist_tensor::{archive, AdamW, Tape, Tensor};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::StreamFeatures;
use crate::data::{self, ManifestEntry, SampleIndexPlan, SampleMode, SyntheticSpec};
use crate::error::{CoreError, Result};
use crate::head;
use crate::model::{ClipInput, DistModel};
use crate::spatial::{self, SpatialFeatures};

/// Per-frame spatial features keyed by (dataset id, sample id, frame),
/// valid for one set of spatial weights.
#[derive(Debug, Default)]
pub struct FeatureCache {
    weights_hash: String,
    frames: HashMap<(String, String, usize), Arc<Vec<Tensor>>>,
    dir: Option<PathBuf>,
    pub hits: usize,
    pub misses: usize,
}

impl FeatureCache {
    pub fn new(weights_hash: impl Into<String>) -> Self {
        FeatureCache {
            weights_hash: weights_hash.into(),
            ..Default::default()
        }
    }

    /// A cache that persists to `dir`, one archive per dataset.
    pub fn with_dir(weights_hash: impl Into<String>, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut cache = Self::new(weights_hash);
        cache.dir = Some(dir.to_path_buf());
        Ok(cache)
    }

    pub fn weights_hash(&self) -> &str {
        &self.weights_hash
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn archive_path(&self, dataset: &str) -> Option<PathBuf> {
        let short = &self.weights_hash[..self.weights_hash.len().min(16)];
        self.dir.as_ref().map(|d| d.join(format!("features-{dataset}-{short}.dtn")))
    }

    /// Loads a dataset's archive, if one exists for the current weights.
    pub fn load_dataset(&mut self, dataset: &str) -> Result<usize> {
        let Some(path) = self.archive_path(dataset) else { return Ok(0) };
        if !path.exists() {
            return Ok(0);
        }
        let mut grouped: BTreeMap<(String, usize), Vec<(usize, Tensor)>> = BTreeMap::new();
        for (name, t) in archive::load(&path)? {
            let bad = || CoreError::data(format!("{}: malformed cache entry `{name}`", path.display()));
            let mut parts = name.rsplitn(3, '/');
            let layer: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let frame: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let sample = parts.next().ok_or_else(bad)?.to_string();
            grouped.entry((sample, frame)).or_default().push((layer, t));
        }
        let n = grouped.len();
        for ((sample, frame), mut layers) in grouped {
            layers.sort_by_key(|(l, _)| *l);
            let layers = layers.into_iter().map(|(_, t)| t).collect();
            self.frames.insert((dataset.to_string(), sample, frame), Arc::new(layers));
        }
        Ok(n)
    }

    /// Writes every cached frame of `dataset` to its archive.
    pub fn save_dataset(&self, dataset: &str) -> Result<()> {
        let Some(path) = self.archive_path(dataset) else { return Ok(()) };
        let mut keys: Vec<_> = self.frames.keys().filter(|k| k.0 == dataset).collect();
        keys.sort();
        let mut entries = Vec::new();
        for key in keys {
            for (l, t) in self.frames[key].iter().enumerate() {
                entries.push((format!("{}/{}/{}", key.1, key.2, l + 1), t.clone()));
            }
        }
        Ok(archive::save(&path, &entries)?)
    }

    /// Features of `frames[indices]` (a `[F, H, W, 3]` clip), encoding only
    /// the frames not cached yet.
    pub fn features(
        &mut self,
        model: &DistModel,
        dataset: &str,
        sample: &str,
        frames: &Tensor,
        indices: &[usize],
    ) -> Result<SpatialFeatures> {
        let missing: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|&f| !self.frames.contains_key(&(dataset.to_string(), sample.to_string(), f)))
            .collect();
        self.hits += indices.len() - missing.len();
        self.misses += missing.len();
        if !missing.is_empty() {
            let fresh = model.encode_spatial(&frames.select_leading(&missing)?)?;
            for (i, &f) in missing.iter().enumerate() {
                let layers = fresh.layers.iter().map(|x| x.index_leading(i)).collect::<Vec<_>>();
                let layers = layers
                    .into_iter()
                    .map(|x| {
                        let mut shape = vec![1];
                        shape.extend_from_slice(x.shape());
                        x.reshape(&shape)
                    })
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                self.frames.insert((dataset.to_string(), sample.to_string(), f), Arc::new(layers));
            }
        }
        let per_frame: Vec<Arc<Vec<Tensor>>> = indices
            .iter()
            .map(|&f| Arc::clone(&self.frames[&(dataset.to_string(), sample.to_string(), f)]))
            .collect();
        let layers = (0..model.config.spatial.layers)
            .map(|l| {
                let parts: Vec<Tensor> = per_frame.iter().map(|fr| fr[l].index_leading(0)).collect();
                Tensor::stack(&parts)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(SpatialFeatures { layers })
    }
}

/// Clips rendered on demand from a synthetic spec and a manifest.
#[derive(Debug, Clone)]
pub struct ParityDataset {
    pub id: String,
    pub spec: SyntheticSpec,
    pub entries: Vec<ManifestEntry>,
}

impl ParityDataset {
    pub fn new(name: &str, spec: SyntheticSpec, entries: Vec<ManifestEntry>) -> Self {
        let id = format!(
            "{name}-{}-s{}-{}x{}-f{}",
            spec.task, spec.seed, spec.height, spec.width, spec.frames
        );
        ParityDataset { id, spec, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn sample_id(&self, i: usize) -> String {
        let e = &self.entries[i];
        format!("{}-{}", e.seed, e.label)
    }

    /// `[F, H, W, 3]` frames and label of entry `i`.
    pub fn clip(&self, i: usize) -> (Tensor, usize) {
        let e = &self.entries[i];
        let clip = data::gen_motion_parity_video(&self.spec, e.seed, e.label);
        (clip.frames, clip.label)
    }
}

/// A clip ready for the model.
#[derive(Debug, Clone)]
pub struct Sample {
    pub spatial: SpatialFeatures,
    pub dense: Option<Tensor>,
    pub label: usize,
}

impl Sample {
    pub fn input(&self) -> ClipInput<'_> {
        ClipInput {
            spatial: &self.spatial,
            dense: self.dense.as_ref(),
        }
    }
}

/// Builds the model input for entry `i` of `ds` under `plan`.
pub fn prepare(
    model: &DistModel,
    cache: &mut FeatureCache,
    ds: &ParityDataset,
    i: usize,
    plan: &SampleIndexPlan,
) -> Result<Sample> {
    let (frames, label) = ds.clip(i);
    let spatial = cache.features(model, &ds.id, &ds.sample_id(i), &frames, &plan.spatial)?;
    let dense = if model.config.ablation.temporal {
        Some(frames.select_leading(&plan.temporal)?)
    } else {
        None
    };
    Ok(Sample { spatial, dense, label })
}

/// Linear warmup to `base`, then cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    /// Learning rate of the 0-based optimizer step `step`.
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / decay as f64).min(1.0);
        0.5 * self.base * (1.0 + (PI * progress).cos())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub seed: u64,
    /// Temporal views per clip at evaluation.
    pub eval_clips: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 36,
            warmup_epochs: 6,
            batch: 16,
            lr: 1e-3,
            betas: (0.9, 0.999),
            weight_decay: 1e-4,
            seed: 0,
            eval_clips: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub acc: f64,
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,split,loss,acc\n");
    for m in metrics {
        s.push_str(&format!("{},{},{},{}\n", m.epoch, m.split, m.loss, m.acc));
    }
    s
}

/// One optimizer step over `samples`: the mean loss is back-propagated
/// sample by sample. Returns the summed loss and the number of correct
/// predictions before the update.
pub fn train_step(model: &mut DistModel, opt: &mut AdamW, samples: &[Sample]) -> Result<(f64, usize)> {
    if samples.is_empty() {
        return Err(CoreError::data("empty batch"));
    }
    model.store.zero_grad();
    model.store.ensure_grads();
    let scale = 1.0 / samples.len() as f64;
    let (mut loss_sum, mut correct) = (0.0, 0);
    for s in samples {
        let tape = Tape::new();
        let (loss, out) = model.loss(&tape, s.input(), s.label)?;
        loss_sum += loss.data()[0];
        if argmax(out.logits.data()) == s.label {
            correct += 1;
        }
        tape.backward(&tape.scale(&loss, scale), &mut model.store)?;
    }
    opt.step(&mut model.store)?;
    Ok((loss_sum, correct))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Fails with a contract error if the spatial weights no longer hash to
/// `expected`.
pub fn check_frozen(model: &DistModel, expected: &str) -> Result<()> {
    let now = spatial::weights_hash(&model.store);
    if now != expected {
        return Err(CoreError::Contract(format!(
            "spatial weights changed during training: {expected} -> {now}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub steps: usize,
}

/// Trains `model` on `train`, evaluating on `val` after every epoch. The
/// spatial weights are checked against their starting hash on every exit.
pub fn train(
    model: &mut DistModel,
    train: &ParityDataset,
    val: Option<&ParityDataset>,
    cache: &mut FeatureCache,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    let frozen_hash = spatial::weights_hash(&model.store);
    let result = train_inner(model, train, val, cache, opts, &frozen_hash);
    let check = check_frozen(model, &frozen_hash);
    match (result, check) {
        (_, Err(e)) => Err(e),
        (r, Ok(())) => r,
    }
}

fn train_inner(
    model: &mut DistModel,
    train: &ParityDataset,
    val: Option<&ParityDataset>,
    cache: &mut FeatureCache,
    opts: &TrainOptions,
    frozen_hash: &str,
) -> Result<TrainReport> {
    if train.is_empty() || opts.batch == 0 {
        return Err(CoreError::data("training needs samples and a positive batch size"));
    }
    if cache.weights_hash() != frozen_hash {
        return Err(CoreError::Contract("feature cache belongs to different spatial weights".into()));
    }
    let (t, gamma) = (model.config.spatial.frames, model.config.temporal.gamma);
    let steps_per_epoch = train.len().div_ceil(opts.batch);
    let schedule = LrSchedule {
        base: opts.lr,
        warmup_steps: opts.warmup_epochs * steps_per_epoch,
        total_steps: opts.epochs * steps_per_epoch,
    };
    let mut opt = AdamW::new(opts.lr, opts.betas, opts.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::new();
    let mut step = 0;
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(opts.batch) {
            let mut samples = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let sample_seed = opts.seed ^ ((epoch as u64) << 32) ^ i as u64;
                let plan = data::tsn_sample(train.spec.frames, t, gamma, SampleMode::Train, sample_seed)?;
                samples.push(prepare(model, cache, train, i, &plan)?);
            }
            opt.lr = schedule.at(step);
            let (l, c) = train_step(model, &mut opt, &samples)?;
            loss_sum += l;
            correct += c;
            step += 1;
        }
        let n = train.len() as f64;
        let m = EpochMetrics {
            epoch,
            split: "train".into(),
            loss: loss_sum / n,
            acc: correct as f64 / n,
        };
        info!("epoch {epoch} train loss {:.4} acc {:.4}", m.loss, m.acc);
        metrics.push(m);
        if let Some(val) = val {
            let (loss, acc) = evaluate(model, val, cache, opts.eval_clips)?;
            info!("epoch {epoch} val loss {loss:.4} acc {acc:.4}");
            metrics.push(EpochMetrics { epoch, split: "val".into(), loss, acc });
        }
        check_frozen(model, frozen_hash)?;
    }
    Ok(TrainReport { metrics, steps: step })
}

/// Multi-view evaluation: class probabilities are averaged over `clips`
/// temporal views. Returns mean negative log-likelihood and accuracy.
pub fn evaluate(model: &DistModel, ds: &ParityDataset, cache: &mut FeatureCache, clips: usize) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(CoreError::data("evaluation set is empty"));
    }
    let (t, gamma) = (model.config.spatial.frames, model.config.temporal.gamma);
    let (plans, warning) = data::multi_clip_plans(ds.spec.frames, t, gamma, clips)?;
    if let Some(w) = warning {
        warn!("{w}");
    }
    let frozen = model.frozen_view();
    let (mut nll, mut correct) = (0.0, 0);
    for i in 0..ds.len() {
        let mut probs = Vec::with_capacity(plans.len());
        let mut label = 0;
        for plan in &plans {
            let s = prepare(&frozen, cache, ds, i, plan)?;
            label = s.label;
            let out = frozen.forward(&Tape::new(), s.input())?;
            probs.push(head::softmax(out.logits.data()));
        }
        let (pred, avg) = head::average_votes(&probs)?;
        nll -= avg[label].max(f64::MIN_POSITIVE).ln();
        if pred == label {
            correct += 1;
        }
    }
    let n = ds.len() as f64;
    Ok((nll / n, correct as f64 / n))
}

/// Full-batch training on fixed samples until every one is classified
/// correctly. Returns the number of steps taken, or `None` if `max_steps`
/// was not enough.
pub fn memorize(model: &mut DistModel, samples: &[Sample], lr: f64, max_steps: usize) -> Result<Option<usize>> {
    let mut opt = AdamW::new(lr, (0.9, 0.999), 0.0);
    for step in 0..max_steps {
        let (_, correct) = train_step(model, &mut opt, samples)?;
        if correct == samples.len() {
            return Ok(Some(step));
        }
    }
    let frozen = model.frozen_view();
    let mut correct = 0;
    for s in samples {
        let out = frozen.forward(&Tape::new(), s.input())?;
        if argmax(out.logits.data()) == s.label {
            correct += 1;
        }
    }
    Ok((correct == samples.len()).then_some(max_steps))
}

fn mean_rows(x: &Tensor, width: usize) -> Vec<f64> {
    let rows = x.len() / width;
    let mut out = vec![0.0; width];
    for row in x.data().chunks_exact(width) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v / rows as f64;
        }
    }
    out
}

/// Token-averaged final-layer features of every clip in `ds` under the
/// centred evaluation view: the last spatial layer, `Y^L` and `Z^L`.
pub fn collect_stream_features(model: &DistModel, ds: &ParityDataset, cache: &mut FeatureCache) -> Result<StreamFeatures> {
    let cfg = &model.config;
    let plan = data::tsn_sample(ds.spec.frames, cfg.spatial.frames, cfg.temporal.gamma, SampleMode::Eval, 0)?;
    let frozen = model.frozen_view();
    let (mut xs, mut ys, mut zs) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..ds.len() {
        let s = prepare(&frozen, cache, ds, i, &plan)?;
        let out = frozen.forward(&Tape::new(), s.input())?;
        xs.extend(mean_rows(s.spatial.last(), cfg.spatial.channels));
        if let Some(y) = out.integration.last() {
            ys.extend(mean_rows(y.value(), cfg.integration.alpha_c));
        }
        if let Some(z) = out.temporal.last() {
            zs.extend(mean_rows(z.value(), cfg.temporal.beta_c));
        }
    }
    let n = ds.len();
    let matrix = |v: Vec<f64>| -> Result<Option<Tensor>> {
        if v.is_empty() {
            return Ok(None);
        }
        let d = v.len() / n;
        Ok(Some(Tensor::new(&[n, d], v)?))
    };
    Ok(StreamFeatures {
        spatial: matrix(xs)?.ok_or_else(|| CoreError::data("probe set is empty"))?,
        integrated: matrix(ys)?,
        temporal: matrix(zs)?,
    })
}
