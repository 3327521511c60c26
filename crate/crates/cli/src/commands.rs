//! The five experiment commands. Each is a pure function of a resolved
//! [`ExperimentConfig`] (plus input weights) and writes its artifacts under
//! `run.out`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dist_core::analysis::{self, CostReport};
use dist_core::data::{self, SampleMode};
use dist_core::spatial::{self, PretrainOptions};
use dist_core::train::{self, EpochMetrics, FeatureCache, ParityDataset, TrainOptions};
use dist_core::{CoreError, DistConfig, DistModel, FeatureTap};
use dist_tensor::{archive, ParamStore, Tape, Tensor, TensorError};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::record::{MetricRow, RunRecord};

pub const SPATIAL_ARCHIVE: &str = "spatial.dtn";
pub const MODEL_ARCHIVE: &str = "model.dtn";
pub const METRICS_CSV: &str = "metrics.csv";
pub const RUN_JSON: &str = "run.json";
/// Validation clips scanned for the motion-sensitivity ratios.
const MOTION_PROBE_CLIPS: usize = 32;

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let out = cfg.run.out.clone();
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn record(
    command: &str,
    cfg: &ExperimentConfig,
    weights_hash: String,
    spatial_hash: String,
    metrics: &[EpochMetrics],
    start: Instant,
) -> RunRecord {
    RunRecord {
        command: command.into(),
        config: cfg.to_ini(),
        seed: cfg.run.seed,
        weights_hash,
        spatial_hash,
        metrics: metrics.iter().map(MetricRow::from).collect(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    }
}

/// Trains the spatial encoder on labelled shape images and writes
/// `spatial.dtn`, `metrics.csv` and `run.json`.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<RunRecord, CliError> {
    let start = Instant::now();
    let p = cfg
        .pretrain
        .as_ref()
        .ok_or_else(|| CliError::config("pretraining needs a [pretrain] section"))?;
    let model = &cfg.model.config;
    let images = data::shape_dataset(&cfg.image_spec(), p.images);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    spatial::init(&model.spatial, &mut store, &mut rng, false)?;
    let opts = PretrainOptions {
        epochs: p.epochs,
        batch: p.batch,
        lr: p.lr,
        weight_decay: p.weight_decay,
        seed: cfg.run.seed,
        eps: model.ln_eps,
        min_accuracy: p.min_accuracy,
    };
    let history = spatial::pretrain(&model.spatial, &mut store, &images, cfg.data.shapes.len(), &opts)?;
    let store = spatial::spatial_only(&store)?;

    let out = out_dir(cfg)?;
    spatial::save_weights(&store, &out.join(SPATIAL_ARCHIVE))?;
    let metrics: Vec<EpochMetrics> = history
        .iter()
        .map(|h| EpochMetrics { epoch: h.epoch, split: "train".into(), loss: h.loss, acc: h.accuracy })
        .collect();
    write(&out.join(METRICS_CSV), &train::metrics_csv(&metrics))?;
    let hash = spatial::weights_hash(&store);
    let rec = record("pretrain", cfg, hash.clone(), hash, &metrics, start);
    rec.write(&out.join(RUN_JSON))?;
    Ok(rec)
}

/// Spatial entries of an archive and their content hash.
fn load_spatial(path: &Path) -> Result<(Vec<(String, Tensor)>, String), CliError> {
    let entries: Vec<(String, Tensor)> = archive::load(path)?
        .into_iter()
        .filter(|(name, _)| name.starts_with(spatial::PREFIX))
        .collect();
    if entries.is_empty() {
        return Err(CoreError::data(format!("{} holds no spatial weights", path.display())).into());
    }
    let hash = archive::content_hash(&entries);
    Ok((entries, hash))
}

fn build_model(config: &DistConfig, entries: &[(String, Tensor)], expected: &str, seed: u64) -> Result<DistModel, CliError> {
    let model = DistModel::with_spatial(config.clone(), entries, seed)?;
    train::check_frozen(&model, expected)?;
    Ok(model)
}

/// The train and validation splits, optionally written as manifests.
pub fn datasets(cfg: &ExperimentConfig, manifests: Option<&Path>) -> Result<(ParityDataset, ParityDataset), CliError> {
    let d = &cfg.data;
    let splits = data::make_splits(d.seed, d.pairs, d.train_ratio, d.val_ratio, d.split_seed)?;
    if let Some(dir) = manifests {
        data::write_manifest(&dir.join("train.tsv"), &splits.train)?;
        data::write_manifest(&dir.join("val.tsv"), &splits.val)?;
    }
    let spec = cfg.data_spec();
    Ok((
        ParityDataset::new("train", spec.clone(), splits.train),
        ParityDataset::new("val", spec, splits.val),
    ))
}

fn open_cache(cfg: &ExperimentConfig, hash: &str, tap: FeatureTap, datasets: &[&ParityDataset]) -> Result<FeatureCache, CliError> {
    let Some(dir) = &cfg.run.cache else { return Ok(FeatureCache::new(hash)) };
    let dir = dir.join(tap.as_str());
    let mut cache = FeatureCache::with_dir(hash, &dir)?;
    for ds in datasets {
        let n = cache.load_dataset(&ds.id)?;
        info!("feature cache: {n} frames of {} from {}", ds.id, dir.display());
    }
    Ok(cache)
}

fn save_cache(cache: &FeatureCache, datasets: &[&ParityDataset]) -> Result<(), CliError> {
    for ds in datasets {
        cache.save_dataset(&ds.id)?;
    }
    Ok(())
}

fn train_options(cfg: &ExperimentConfig) -> TrainOptions {
    let o = &cfg.optim;
    TrainOptions {
        epochs: o.epochs,
        warmup_epochs: o.warmup,
        batch: o.batch,
        lr: o.lr,
        betas: o.betas,
        weight_decay: o.weight_decay,
        seed: cfg.run.seed,
        eval_clips: o.eval_clips,
    }
}

/// Trains the temporal encoder, integration branch and head around frozen
/// spatial weights. Writes the split manifests, `model.dtn`, `metrics.csv`
/// and `run.json`. The spatial weights must hash to the archive's value at
/// the end, otherwise nothing is written and a contract error is returned.
pub fn cmd_train(cfg: &ExperimentConfig, spatial_weights: &Path) -> Result<RunRecord, CliError> {
    let start = Instant::now();
    let (entries, spatial_hash) = load_spatial(spatial_weights)?;
    let mut model = build_model(&cfg.model.config, &entries, &spatial_hash, cfg.run.seed)?;
    let out = out_dir(cfg)?;
    let (train_ds, val_ds) = datasets(cfg, Some(&out))?;
    let mut cache = open_cache(cfg, &spatial_hash, model.config.feature_tap, &[&train_ds, &val_ds])?;
    let report = train::train(&mut model, &train_ds, Some(&val_ds), &mut cache, &train_options(cfg));
    // The contract is checked against the archive whatever the outcome.
    train::check_frozen(&model, &spatial_hash)?;
    let report = report?;
    save_cache(&cache, &[&train_ds, &val_ds])?;

    model.save(&out.join(MODEL_ARCHIVE))?;
    write(&out.join(METRICS_CSV), &train::metrics_csv(&report.metrics))?;
    let rec = record("train", cfg, model.weights_hash(), spatial_hash, &report.metrics, start);
    rec.write(&out.join(RUN_JSON))?;
    Ok(rec)
}

/// A model of `cfg`'s layout with every parameter read from `weights`.
/// Missing or mis-shaped parameters are reported by name.
pub fn load_model(cfg: &ExperimentConfig, weights: &Path) -> Result<DistModel, CliError> {
    let mut model = DistModel::new(cfg.model.config.clone(), cfg.run.seed)?;
    model.load(weights).map_err(|e| match e {
        CoreError::Tensor(t @ (TensorError::Param { .. } | TensorError::ShapeMismatch { .. })) => {
            CliError::config(format!("{} does not match the configured model: {t}", weights.display()))
        }
        other => other.into(),
    })?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub acc: f64,
}

/// Multi-view accuracy of trained weights on the validation split; writes
/// `eval.csv`.
pub fn cmd_eval(cfg: &ExperimentConfig, weights: &Path) -> Result<EvalResult, CliError> {
    let model = load_model(cfg, weights)?;
    let (_, val) = datasets(cfg, None)?;
    let hash = spatial::weights_hash(&model.store);
    let mut cache = open_cache(cfg, &hash, model.config.feature_tap, &[&val])?;
    let (loss, acc) = train::evaluate(&model, &val, &mut cache, cfg.optim.eval_clips)?;
    save_cache(&cache, &[&val])?;
    let out = out_dir(cfg)?;
    write(&out.join("eval.csv"), &format!("split,loss,acc\nval,{loss},{acc}\n"))?;
    Ok(EvalResult { loss, acc })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateRow {
    pub variant: String,
    pub acc: f64,
    pub macs: u64,
    pub trainable: usize,
}

pub fn ablate_csv(rows: &[AblateRow]) -> String {
    let mut s = String::from("variant,acc,macs,trainable\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.variant, r.acc, r.macs, r.trainable));
    }
    s
}

/// Trains every grid variant with the shared seed and budget and writes
/// `ablate.csv`. The accuracy column is the final validation accuracy.
pub fn cmd_ablate(cfg: &ExperimentConfig, spatial_weights: &Path) -> Result<Vec<AblateRow>, CliError> {
    let variants = cfg.variants()?;
    let (entries, spatial_hash) = load_spatial(spatial_weights)?;
    let out = out_dir(cfg)?;
    let (train_ds, val_ds) = datasets(cfg, Some(&out))?;
    let sets = [&train_ds, &val_ds];
    // Cached features depend on the feature tap, so variants share per tap.
    let mut caches: HashMap<FeatureTap, FeatureCache> = HashMap::new();
    let mut rows = Vec::with_capacity(variants.len());
    for v in &variants {
        info!("ablation variant `{}`", v.name);
        let mut model = build_model(&v.model.config, &entries, &spatial_hash, cfg.run.seed)?;
        let tap = v.model.config.feature_tap;
        if let std::collections::hash_map::Entry::Vacant(e) = caches.entry(tap) {
            e.insert(open_cache(cfg, &spatial_hash, tap, &sets)?);
        }
        let cache = caches.get_mut(&tap).expect("inserted above");
        let report = train::train(&mut model, &train_ds, Some(&val_ds), cache, &train_options(cfg))?;
        let acc = report.metrics.iter().rev().find(|m| m.split == "val").map_or(f64::NAN, |m| m.acc);
        rows.push(AblateRow {
            variant: v.name.clone(),
            acc,
            macs: analysis::count_macs(&v.model.config).total_macs(),
            trainable: model.trainable_count(),
        });
    }
    for cache in caches.values() {
        save_cache(cache, &sets)?;
    }
    write(&out.join("ablate.csv"), &ablate_csv(&rows))?;
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct AnalyzeResult {
    pub cost: CostReport,
    pub cka: Vec<(String, f64)>,
    /// `(stream, layer, ratio)`: mean magnitude on moving tokens over the
    /// mean on static ones.
    pub motion: Vec<(String, usize, f64)>,
}

pub fn motion_csv(rows: &[(String, usize, f64)]) -> String {
    let mut s = String::from("stream,layer,ratio\n");
    for (stream, layer, r) in rows {
        s.push_str(&format!("{stream},{layer},{r}\n"));
    }
    s
}

/// Cost report, CKA over the validation split, per-layer magnitude maps of
/// the first validation clip, and motion-sensitivity ratios.
pub fn cmd_analyze(cfg: &ExperimentConfig, weights: &Path) -> Result<AnalyzeResult, CliError> {
    let model = load_model(cfg, weights)?;
    let mc = &model.config;
    let out = out_dir(cfg)?;
    let cost = analysis::count_macs(mc);
    write(&out.join("cost_report.csv"), &cost.to_csv())?;

    let (_, val) = datasets(cfg, None)?;
    let hash = spatial::weights_hash(&model.store);
    let mut cache = open_cache(cfg, &hash, mc.feature_tap, &[&val])?;
    let streams = train::collect_stream_features(&model, &val, &mut cache)?;
    let cka = analysis::cka_report(&streams, None)?;
    write(&out.join("cka_report.csv"), &analysis::cka_csv(&cka))?;

    let (gh, gw) = mc.spatial.grid();
    let plan = data::tsn_sample(val.spec.frames, mc.spatial.frames, mc.temporal.gamma, SampleMode::Eval, 0)?;
    // Position of each sparse frame within the dense ones.
    let sparse_pos: Vec<usize> = plan
        .spatial
        .iter()
        .map(|s| plan.temporal.iter().position(|t| t == s).expect("sparse frames are dense frames"))
        .collect();
    let frozen = model.frozen_view();
    let layers = mc.spatial.layers;
    let mut sums: HashMap<(&str, usize), (f64, usize)> = HashMap::new();
    for i in 0..val.len().min(MOTION_PROBE_CLIPS) {
        let sample = train::prepare(&frozen, &mut cache, &val, i, &plan)?;
        let fwd = frozen.forward(&Tape::new(), sample.input())?;
        let mut maps: Vec<(&str, usize, Tensor)> = Vec::new();
        for l in 1..=layers {
            let x = analysis::tokens_to_grid(sample.spatial.layer(l), gh, gw)?;
            maps.push(("spatial", l, analysis::feature_magnitude_map(&x)?));
            if let Some(y) = fwd.integration.get(l - 1) {
                let y = analysis::tokens_to_grid(y.value(), gh, gw)?;
                maps.push(("integrated", l, analysis::feature_magnitude_map(&y)?));
            }
            if let Some(z) = fwd.temporal.get(l - 1) {
                maps.push(("temporal", l, analysis::feature_magnitude_map(z.value())?));
            }
        }
        if i == 0 {
            for (stream, l, map) in &maps {
                analysis::write_magnitude_csv(&out.join(format!("magnitude_{stream}_{l}.csv")), map)?;
            }
        }
        let Some(dense) = &sample.dense else { continue };
        let dense_mask = analysis::motion_token_mask(dense, mc.spatial.patch)?;
        let per_frame = gh * gw;
        let sparse_mask: Vec<bool> = sparse_pos
            .iter()
            .flat_map(|&p| dense_mask[p * per_frame..(p + 1) * per_frame].iter().copied())
            .collect();
        for (stream, l, map) in &maps {
            let mask = if *stream == "temporal" { &dense_mask } else { &sparse_mask };
            // Clips without static or moving tokens carry no ratio.
            if let Ok(r) = analysis::masked_mean_ratio(map, mask) {
                let e = sums.entry((stream, *l)).or_insert((0.0, 0));
                e.0 += r;
                e.1 += 1;
            }
        }
    }
    let mut motion: Vec<(String, usize, f64)> = sums
        .into_iter()
        .map(|((s, l), (sum, n))| (s.to_string(), l, sum / n as f64))
        .collect();
    motion.sort_by(|a, b| (a.0.as_str(), a.1).cmp(&(b.0.as_str(), b.1)));
    write(&out.join("motion_ratio.csv"), &motion_csv(&motion))?;
    save_cache(&cache, &[&val])?;
    Ok(AnalyzeResult { cost, cka, motion })
}
