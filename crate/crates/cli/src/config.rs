//! Typed experiment configuration read from INI text.
//!
//! Sections: `[model]`, `[data]`, `[pretrain]`, `[optim]`, `[run]` and
//! `[ablate]`. Every key is optional; unknown sections and keys are errors.
//! [`ExperimentConfig::to_ini`] writes a snapshot that parses back to the
//! same configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use dist_core::config::{HeadConfig, IntegrationConfig, SpatialConfig, TemporalConfig};
use dist_core::data::{Shape, SyntheticSpec, Task};
use dist_core::{Ablation, DistConfig, FeatureTap, PhiUp, Pooling, PsiDown, TBlockKind};

use crate::error::CliError;
use crate::ini::{self, Entry, Section};

/// Batch size the reference learning rate is quoted for.
pub const REFERENCE_BATCH: usize = 256;
pub const REFERENCE_LR: f64 = 3.2e-4;

/// Named branch layouts accepted by the `branches` key.
pub const BRANCHES: &[(&str, Ablation)] = &[
    ("full", Ablation { temporal: true, integration: true, integ_to_temp: true, temp_to_integ: true }),
    ("spatial_only", Ablation { temporal: false, integration: false, integ_to_temp: false, temp_to_integ: false }),
    ("no_temporal", Ablation { temporal: false, integration: true, integ_to_temp: false, temp_to_integ: false }),
    ("no_integration", Ablation { temporal: true, integration: false, integ_to_temp: false, temp_to_integ: false }),
    ("no_interaction", Ablation { temporal: true, integration: true, integ_to_temp: false, temp_to_integ: false }),
    ("temp_to_integ_only", Ablation { temporal: true, integration: true, integ_to_temp: false, temp_to_integ: true }),
    ("integ_to_temp_only", Ablation { temporal: true, integration: true, integ_to_temp: true, temp_to_integ: false }),
];

/// The model plus whether its layer mask tracks the layer count.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub config: DistConfig,
    /// `layer_mask = all`: every layer, whatever `layers` ends up being.
    pub all_layers: bool,
}

impl Default for ModelSection {
    /// Desk-scale model: 16x16 canvas, 4-pixel patches, 2 layers of width 32.
    fn default() -> Self {
        let config = DistConfig {
            spatial: SpatialConfig {
                frames: 4,
                height: 16,
                width: 16,
                patch: 4,
                channels: 32,
                layers: 2,
                heads: 4,
                mlp_ratio: 4,
            },
            temporal: TemporalConfig { gamma: 2, beta_c: 8, kind: TBlockKind::R21d, heads: 2 },
            integration: IntegrationConfig {
                alpha_c: 16,
                psi: PsiDown::DConv,
                phi: PhiUp::Nearest,
                layer_mask: vec![1, 2],
                ffn_ratio: 1,
                tconv_depthwise: true,
                residual: false,
            },
            head: HeadConfig { classes: 2, embed_dim: None, tau: 0.07, pooling: Pooling::AllTokens },
            ablation: Ablation::default(),
            feature_tap: FeatureTap::PostBlock,
            ln_eps: 1e-5,
        };
        ModelSection { config, all_layers: true }
    }
}

impl ModelSection {
    fn resolve(&mut self) {
        if self.all_layers {
            self.config.integration.layer_mask = (1..=self.config.spatial.layers).collect();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub shapes: Vec<Shape>,
    /// Frames per synthetic video.
    pub frames: usize,
    pub step_degrees: f64,
    pub seed: u64,
    pub pairs: usize,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            shapes: Shape::ALL.to_vec(),
            frames: 24,
            step_degrees: 30.0,
            seed: 2,
            pairs: 2000,
            train_ratio: 0.8,
            val_ratio: 0.2,
            split_seed: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub images: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Required final training accuracy.
    pub min_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            images: 1024,
            epochs: 80,
            batch: 32,
            lr: 2e-3,
            weight_decay: 1e-4,
            min_accuracy: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub warmup: usize,
    /// Temporal views per clip at evaluation.
    pub eval_clips: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let batch = 16;
        OptimConfig {
            lr: scaled_lr(batch),
            betas: (0.9, 0.999),
            weight_decay: 1e-4,
            batch,
            epochs: 36,
            warmup: 6,
            eval_clips: 3,
        }
    }
}

/// The reference learning rate rescaled linearly to `batch`.
pub fn scaled_lr(batch: usize) -> f64 {
    REFERENCE_LR * batch as f64 / REFERENCE_BATCH as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub cache: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { seed: 0, out: PathBuf::from("runs/default"), cache: None }
    }
}

/// One grid axis: a `[model]` key (or `branches`) and its alternatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    /// `key=value` pairs joined by spaces.
    pub name: String,
    pub model: ModelSection,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub data: DataConfig,
    pub pretrain: Option<PretrainConfig>,
    pub optim: OptimConfig,
    pub run: RunConfig,
    /// `None` when the file has no `[ablate]` section.
    pub ablate: Option<Vec<Axis>>,
}

enum SetError {
    Unknown,
    Invalid(String),
}

type SetResult = Result<(), SetError>;

fn invalid(e: impl std::fmt::Display) -> SetError {
    SetError::Invalid(e.to_string())
}

fn num<T: FromStr>(v: &str, what: &str) -> Result<T, SetError> {
    v.parse().map_err(|_| SetError::Invalid(format!("expected {what}, got `{v}`")))
}

fn uint(v: &str) -> Result<usize, SetError> {
    num(v, "a non-negative integer")
}

fn float(v: &str) -> Result<f64, SetError> {
    let x: f64 = num(v, "a number")?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(SetError::Invalid(format!("expected a finite number, got `{v}`")))
    }
}

fn boolean(v: &str) -> Result<bool, SetError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(SetError::Invalid(format!("expected true or false, got `{v}`"))),
    }
}

fn list(v: &str) -> Vec<&str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn set_model(m: &mut ModelSection, key: &str, v: &str) -> SetResult {
    let c = &mut m.config;
    match key {
        "frames" => c.spatial.frames = uint(v)?,
        "height" => c.spatial.height = uint(v)?,
        "width" => c.spatial.width = uint(v)?,
        "patch" => c.spatial.patch = uint(v)?,
        "channels" => c.spatial.channels = uint(v)?,
        "layers" => c.spatial.layers = uint(v)?,
        "heads" => c.spatial.heads = uint(v)?,
        "mlp_ratio" => c.spatial.mlp_ratio = uint(v)?,
        "gamma" => c.temporal.gamma = uint(v)?,
        "beta_c" => c.temporal.beta_c = uint(v)?,
        "tblock" => c.temporal.kind = v.parse().map_err(invalid)?,
        "temporal_heads" => c.temporal.heads = uint(v)?,
        "alpha_c" => c.integration.alpha_c = uint(v)?,
        "psi" => c.integration.psi = v.parse().map_err(invalid)?,
        "phi" => c.integration.phi = v.parse().map_err(invalid)?,
        "layer_mask" => {
            if v == "all" {
                m.all_layers = true;
            } else {
                m.all_layers = false;
                c.integration.layer_mask = list(v).into_iter().map(uint).collect::<Result<_, _>>()?;
            }
        }
        "ffn_ratio" => c.integration.ffn_ratio = uint(v)?,
        "tconv_depthwise" => c.integration.tconv_depthwise = boolean(v)?,
        "residual" => c.integration.residual = boolean(v)?,
        "classes" => c.head.classes = uint(v)?,
        "embed_dim" => c.head.embed_dim = if v == "auto" { None } else { Some(uint(v)?) },
        "tau" => c.head.tau = float(v)?,
        "pooling" => c.head.pooling = v.parse().map_err(invalid)?,
        "temporal" => c.ablation.temporal = boolean(v)?,
        "integration" => c.ablation.integration = boolean(v)?,
        "integ_to_temp" => c.ablation.integ_to_temp = boolean(v)?,
        "temp_to_integ" => c.ablation.temp_to_integ = boolean(v)?,
        "branches" => {
            c.ablation = BRANCHES.iter().find(|(n, _)| *n == v).map(|(_, a)| *a).ok_or_else(|| {
                let names: Vec<_> = BRANCHES.iter().map(|(n, _)| *n).collect();
                SetError::Invalid(format!("unknown branch layout `{v}` (expected one of: {})", names.join(", ")))
            })?
        }
        "feature_tap" => c.feature_tap = v.parse().map_err(invalid)?,
        "ln_eps" => c.ln_eps = float(v)?,
        _ => return Err(SetError::Unknown),
    }
    Ok(())
}

fn set_data(d: &mut DataConfig, key: &str, v: &str) -> SetResult {
    match key {
        "shapes" => d.shapes = list(v).into_iter().map(|s| s.parse().map_err(invalid)).collect::<Result<_, _>>()?,
        "frames" => d.frames = uint(v)?,
        "step_degrees" => d.step_degrees = float(v)?,
        "seed" => d.seed = num(v, "an unsigned integer")?,
        "pairs" => d.pairs = uint(v)?,
        "train_ratio" => d.train_ratio = float(v)?,
        "val_ratio" => d.val_ratio = float(v)?,
        "split_seed" => d.split_seed = num(v, "an unsigned integer")?,
        _ => return Err(SetError::Unknown),
    }
    Ok(())
}

fn set_pretrain(p: &mut PretrainConfig, key: &str, v: &str) -> SetResult {
    match key {
        "images" => p.images = uint(v)?,
        "epochs" => p.epochs = uint(v)?,
        "batch" => p.batch = uint(v)?,
        "lr" => p.lr = float(v)?,
        "weight_decay" => p.weight_decay = float(v)?,
        "min_accuracy" => p.min_accuracy = float(v)?,
        _ => return Err(SetError::Unknown),
    }
    Ok(())
}

/// `lr` is optional here: when absent it is rescaled from the batch size.
fn set_optim(o: &mut OptimConfig, lr: &mut Option<f64>, key: &str, v: &str) -> SetResult {
    match key {
        "lr" => *lr = Some(float(v)?),
        "betas" => {
            let parts = list(v);
            if parts.len() != 2 {
                return Err(SetError::Invalid(format!("expected two comma-separated numbers, got `{v}`")));
            }
            o.betas = (float(parts[0])?, float(parts[1])?);
        }
        "weight_decay" => o.weight_decay = float(v)?,
        "batch" => o.batch = uint(v)?,
        "epochs" => o.epochs = uint(v)?,
        "warmup" => o.warmup = uint(v)?,
        "eval_clips" => o.eval_clips = uint(v)?,
        _ => return Err(SetError::Unknown),
    }
    Ok(())
}

fn set_run(r: &mut RunConfig, key: &str, v: &str) -> SetResult {
    match key {
        "seed" => r.seed = num(v, "an unsigned integer")?,
        "out" => r.out = PathBuf::from(v),
        "cache" => r.cache = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
        _ => return Err(SetError::Unknown),
    }
    Ok(())
}

fn apply(origin: &str, section: &str, e: &Entry, r: SetResult) -> Result<(), CliError> {
    match r {
        Ok(()) => Ok(()),
        Err(SetError::Unknown) => Err(CliError::config_at(origin, e.line, format!("unknown key `{}` in [{section}]", e.key))),
        Err(SetError::Invalid(msg)) => Err(CliError::config_at(
            origin,
            e.line,
            format!("invalid value for [{section}] {}: {msg}", e.key),
        )),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let sections = ini::parse(text, origin)?;
        let mut cfg = ExperimentConfig::default();
        let mut lr = None;
        let mut grid_section: Option<&Section> = None;
        for s in &sections {
            let name = s.name.as_str();
            for e in &s.entries {
                let (k, v) = (e.key.as_str(), e.value.as_str());
                match name {
                    "model" => apply(origin, name, e, set_model(&mut cfg.model, k, v))?,
                    "data" => apply(origin, name, e, set_data(&mut cfg.data, k, v))?,
                    "pretrain" => {
                        let p = cfg.pretrain.get_or_insert_with(PretrainConfig::default);
                        apply(origin, name, e, set_pretrain(p, k, v))?
                    }
                    "optim" => apply(origin, name, e, set_optim(&mut cfg.optim, &mut lr, k, v))?,
                    "run" => apply(origin, name, e, set_run(&mut cfg.run, k, v))?,
                    "ablate" => {}
                    _ => {}
                }
            }
            match name {
                "model" | "data" | "optim" | "run" => {}
                "pretrain" => {
                    cfg.pretrain.get_or_insert_with(PretrainConfig::default);
                }
                "ablate" => grid_section = Some(s),
                _ => {
                    return Err(CliError::config_at(
                        origin,
                        s.line,
                        format!("unknown section [{name}] (expected model, data, pretrain, optim, run or ablate)"),
                    ))
                }
            }
        }
        cfg.optim.lr = lr.unwrap_or_else(|| scaled_lr(cfg.optim.batch));
        cfg.model.resolve();
        cfg.model.config.validate()?;
        cfg.validate()?;
        if let Some(s) = grid_section {
            cfg.ablate = Some(cfg.parse_grid(s, origin)?);
        }
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Each grid value must produce a valid model on its own.
    fn parse_grid(&self, s: &Section, origin: &str) -> Result<Vec<Axis>, CliError> {
        let mut axes = Vec::new();
        for e in &s.entries {
            let values: Vec<String> = e.value.split('|').map(|v| v.trim().to_string()).collect();
            if values.iter().any(String::is_empty) {
                return Err(CliError::config_at(origin, e.line, format!("empty alternative in [ablate] {}", e.key)));
            }
            for v in &values {
                let mut m = self.model.clone();
                apply(origin, "ablate", e, set_model(&mut m, &e.key, v))?;
                m.resolve();
                m.config
                    .validate()
                    .map_err(|err| CliError::config_at(origin, e.line, format!("[ablate] {} = {v}: {err}", e.key)))?;
            }
            axes.push(Axis { key: e.key.clone(), values });
        }
        Ok(axes)
    }

    fn validate(&self) -> Result<(), CliError> {
        let m = &self.model.config;
        self.data_spec().validate()?;
        let d = &self.data;
        // Ratio checks only; no pairs are drawn.
        dist_core::data::make_splits(d.seed, 0, d.train_ratio, d.val_ratio, d.split_seed)?;
        if self.data.frames < m.dense_frames() {
            return Err(CliError::config(format!(
                "[data] frames = {} cannot supply {} dense frames (frames x gamma)",
                self.data.frames,
                m.dense_frames()
            )));
        }
        let o = &self.optim;
        if o.batch == 0 || o.epochs == 0 || o.eval_clips == 0 {
            return Err(CliError::config("[optim] batch, epochs and eval_clips must be positive"));
        }
        if o.warmup > o.epochs {
            return Err(CliError::config(format!("[optim] warmup {} exceeds epochs {}", o.warmup, o.epochs)));
        }
        if !(o.lr > 0.0) {
            return Err(CliError::config("[optim] lr must be positive"));
        }
        if let Some(p) = &self.pretrain {
            if p.images == 0 || p.epochs == 0 || p.batch == 0 || !(p.lr > 0.0) {
                return Err(CliError::config("[pretrain] images, epochs, batch and lr must be positive"));
            }
        }
        Ok(())
    }

    /// Motion-parity videos on the model's canvas.
    pub fn data_spec(&self) -> SyntheticSpec {
        let s = &self.model.config.spatial;
        SyntheticSpec {
            task: Task::MotionParity,
            height: s.height,
            width: s.width,
            shapes: self.data.shapes.clone(),
            frames: self.data.frames,
            step_degrees: self.data.step_degrees,
            seed: self.data.seed,
        }
    }

    /// Labelled still images on the model's canvas.
    pub fn image_spec(&self) -> SyntheticSpec {
        SyntheticSpec { task: Task::ShapeCls, ..self.data_spec() }
    }

    /// Cartesian product of the grid axes, first axis outermost.
    pub fn variants(&self) -> Result<Vec<Variant>, CliError> {
        let axes = match &self.ablate {
            Some(a) if !a.is_empty() => a,
            _ => return Err(CliError::config("ablation grid is empty: add at least one axis under [ablate]")),
        };
        let mut out = vec![Variant { name: String::new(), model: self.model.clone() }];
        for axis in axes {
            let mut next = Vec::with_capacity(out.len() * axis.values.len());
            for base in &out {
                for v in &axis.values {
                    let mut model = base.model.clone();
                    if set_model(&mut model, &axis.key, v).is_err() {
                        return Err(CliError::config(format!("[ablate] {} = {v} is invalid", axis.key)));
                    }
                    let sep = if base.name.is_empty() { "" } else { " " };
                    next.push(Variant { name: format!("{}{sep}{}={v}", base.name, axis.key), model });
                }
            }
            out = next;
        }
        for v in &mut out {
            v.model.resolve();
        }
        Ok(out)
    }

    /// A complete snapshot that parses back to `self`.
    pub fn to_ini(&self) -> String {
        let c = &self.model.config;
        let mut s = String::new();
        let mask = if self.model.all_layers {
            "all".to_string()
        } else {
            join(&c.integration.layer_mask)
        };
        let embed = c.head.embed_dim.map_or("auto".to_string(), |d| d.to_string());
        let _ = writeln!(s, "[model]");
        for (k, v) in [
            ("frames", c.spatial.frames.to_string()),
            ("height", c.spatial.height.to_string()),
            ("width", c.spatial.width.to_string()),
            ("patch", c.spatial.patch.to_string()),
            ("channels", c.spatial.channels.to_string()),
            ("layers", c.spatial.layers.to_string()),
            ("heads", c.spatial.heads.to_string()),
            ("mlp_ratio", c.spatial.mlp_ratio.to_string()),
            ("gamma", c.temporal.gamma.to_string()),
            ("beta_c", c.temporal.beta_c.to_string()),
            ("tblock", c.temporal.kind.to_string()),
            ("temporal_heads", c.temporal.heads.to_string()),
            ("alpha_c", c.integration.alpha_c.to_string()),
            ("psi", c.integration.psi.to_string()),
            ("phi", c.integration.phi.to_string()),
            ("layer_mask", mask),
            ("ffn_ratio", c.integration.ffn_ratio.to_string()),
            ("tconv_depthwise", c.integration.tconv_depthwise.to_string()),
            ("residual", c.integration.residual.to_string()),
            ("classes", c.head.classes.to_string()),
            ("embed_dim", embed),
            ("tau", c.head.tau.to_string()),
            ("pooling", c.head.pooling.to_string()),
            ("temporal", c.ablation.temporal.to_string()),
            ("integration", c.ablation.integration.to_string()),
            ("integ_to_temp", c.ablation.integ_to_temp.to_string()),
            ("temp_to_integ", c.ablation.temp_to_integ.to_string()),
            ("feature_tap", c.feature_tap.to_string()),
            ("ln_eps", c.ln_eps.to_string()),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let d = &self.data;
        let shapes: Vec<&str> = d.shapes.iter().map(|x| x.as_str()).collect();
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "shapes = {}", shapes.join(", "));
        let _ = writeln!(s, "frames = {}\nstep_degrees = {}\nseed = {}", d.frames, d.step_degrees, d.seed);
        let _ = writeln!(s, "pairs = {}\ntrain_ratio = {}\nval_ratio = {}", d.pairs, d.train_ratio, d.val_ratio);
        let _ = writeln!(s, "split_seed = {}", d.split_seed);
        if let Some(p) = &self.pretrain {
            let _ = writeln!(s, "\n[pretrain]");
            let _ = writeln!(s, "images = {}\nepochs = {}\nbatch = {}", p.images, p.epochs, p.batch);
            let _ = writeln!(s, "lr = {}\nweight_decay = {}\nmin_accuracy = {}", p.lr, p.weight_decay, p.min_accuracy);
        }
        let o = &self.optim;
        let _ = writeln!(s, "\n[optim]");
        let _ = writeln!(s, "lr = {}\nbetas = {}, {}\nweight_decay = {}", o.lr, o.betas.0, o.betas.1, o.weight_decay);
        let _ = writeln!(s, "batch = {}\nepochs = {}\nwarmup = {}", o.batch, o.epochs, o.warmup);
        let _ = writeln!(s, "eval_clips = {}", o.eval_clips);
        let r = &self.run;
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(s, "seed = {}\nout = {}", r.seed, r.out.display());
        if let Some(cache) = &r.cache {
            let _ = writeln!(s, "cache = {}", cache.display());
        }
        if let Some(axes) = &self.ablate {
            let _ = writeln!(s, "\n[ablate]");
            for a in axes {
                let _ = writeln!(s, "{} = {}", a.key, a.values.join(" | "));
            }
        }
        s
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}
