//! Deterministic synthetic data: labelled shape images for pretraining the
//! spatial encoder, and orbiting-shape videos whose label is the playback
//! direction. Everything is a pure function of a spec and a seed.

use std::f64::consts::TAU;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use dist_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Square,
    Disk,
    Cross,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Square, Shape::Disk, Shape::Cross, Shape::Triangle];

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of
    /// half-extent `s`.
    pub fn contains(self, dx: f64, dy: f64, s: f64) -> bool {
        match self {
            Shape::Square => dx.abs() <= s && dy.abs() <= s,
            Shape::Disk => dx * dx + dy * dy <= s * s,
            Shape::Cross => {
                let arm = s / 3.0;
                (dx.abs() <= arm && dy.abs() <= s) || (dy.abs() <= arm && dx.abs() <= s)
            }
            // Apex up, base down.
            Shape::Triangle => dy.abs() <= s && dx.abs() <= (dy + s) / 2.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Disk => "disk",
            Shape::Cross => "cross",
            Shape::Triangle => "triangle",
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Shape {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|shape| shape.as_str() == s)
            .ok_or_else(|| CoreError::config(format!("unknown shape `{s}` (expected square, disk, cross or triangle)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    ShapeCls,
    MotionParity,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::ShapeCls => "shape_cls",
            Task::MotionParity => "motion_parity",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shape_cls" => Ok(Task::ShapeCls),
            "motion_parity" => Ok(Task::MotionParity),
            _ => Err(CoreError::config(format!(
                "unknown task `{s}` (expected shape_cls or motion_parity)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub task: Task,
    pub height: usize,
    pub width: usize,
    pub shapes: Vec<Shape>,
    /// Frames per video.
    pub frames: usize,
    /// Orbit step between consecutive frames, in degrees.
    pub step_degrees: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            task: Task::MotionParity,
            height: 32,
            width: 32,
            shapes: Shape::ALL.to_vec(),
            frames: 24,
            step_degrees: 30.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(CoreError::config("canvas must be at least 8x8"));
        }
        if self.shapes.is_empty() {
            return Err(CoreError::config("shape set is empty"));
        }
        if self.task == Task::MotionParity && (self.frames == 0 || !self.frames.is_multiple_of(2)) {
            return Err(CoreError::config(format!(
                "motion parity needs an even, positive frame count, got {}",
                self.frames
            )));
        }
        Ok(())
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Paints `shape` centred at `(cx, cy)` (pixel units) onto an `[H, W, 3]`
/// canvas; pixels are sampled at their centres.
fn paint(canvas: &mut Tensor, shape: Shape, cx: f64, cy: f64, s: f64, color: [f64; 3]) {
    let (h, w) = (canvas.shape()[0], canvas.shape()[1]);
    let data = canvas.data_mut();
    for y in 0..h {
        for x in 0..w {
            if shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, s) {
                data[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
            }
        }
    }
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random_range(0.4..1.0), rng.random_range(0.4..1.0), rng.random_range(0.4..1.0)]
}

/// One shape at a random position and scale; the label is the shape's
/// index in `spec.shapes`.
pub fn gen_shape_image(spec: &SyntheticSpec, seed: u64) -> (Tensor, usize) {
    let mut rng = rng_for(seed, 1);
    let label = rng.random_range(0..spec.shapes.len());
    let min_side = spec.height.min(spec.width) as f64;
    let s = rng.random_range(0.2 * min_side..0.35 * min_side);
    let cx = rng.random_range(s..spec.width as f64 - s);
    let cy = rng.random_range(s..spec.height as f64 - s);
    let mut img = Tensor::zeros(&[spec.height, spec.width, 3]);
    paint(&mut img, spec.shapes[label], cx, cy, s, random_color(&mut rng));
    (img, label)
}

/// `n` labelled images with seeds derived from `spec.seed`.
pub fn shape_dataset(spec: &SyntheticSpec, n: usize) -> Vec<(Tensor, usize)> {
    let mut rng = rng_for(spec.seed, 2);
    (0..n).map(|_| gen_shape_image(spec, rng.random())).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipMeta {
    pub seed: u64,
    pub shape: Shape,
    /// Starting orbit angle of the forward rendering, in radians.
    pub phase: f64,
    pub reversed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    /// `[F, H, W, 3]` in `[0, 1]`.
    pub frames: Tensor,
    pub label: usize,
    pub meta: ClipMeta,
}

/// Frames of a shape orbiting the canvas centre counter-clockwise, before
/// any reversal.
fn render_orbit(spec: &SyntheticSpec, seed: u64) -> (Tensor, Shape, f64) {
    let mut rng = rng_for(seed, 3);
    let shape = spec.shapes[rng.random_range(0..spec.shapes.len())];
    let phase = rng.random_range(0.0..TAU);
    let color = random_color(&mut rng);
    let (h, w) = (spec.height as f64, spec.width as f64);
    let radius = 0.25 * h.min(w);
    let s = 0.15 * h.min(w);
    let step = spec.step_degrees.to_radians();
    let frame_len = spec.height * spec.width * 3;
    let mut data = Vec::with_capacity(spec.frames * frame_len);
    for i in 0..spec.frames {
        let a = phase + step * i as f64;
        let mut img = Tensor::zeros(&[spec.height, spec.width, 3]);
        // Image y grows downwards, so subtracting sin turns counter-clockwise.
        paint(&mut img, shape, w / 2.0 + radius * a.cos(), h / 2.0 - radius * a.sin(), s, color);
        data.extend_from_slice(img.data());
    }
    let frames = Tensor::new(&[spec.frames, spec.height, spec.width, 3], data).expect("consistent frame size");
    (frames, shape, phase)
}

/// Reverses the leading (time) axis.
pub fn reverse_time(frames: &Tensor) -> Tensor {
    let n = frames.shape()[0];
    let order: Vec<usize> = (0..n).rev().collect();
    frames.select_leading(&order).expect("indices in range")
}

/// The label-0 (forward) and label-1 (reversed) clips of one pair.
pub fn gen_motion_parity_pair(spec: &SyntheticSpec, seed: u64) -> (VideoClip, VideoClip) {
    let (frames, shape, phase) = render_orbit(spec, seed);
    let meta = ClipMeta { seed, shape, phase, reversed: false };
    let reversed = VideoClip {
        frames: reverse_time(&frames),
        label: 1,
        meta: ClipMeta { reversed: true, ..meta.clone() },
    };
    (VideoClip { frames, label: 0, meta }, reversed)
}

/// One clip of a pair: label 0 is forward playback, label 1 reversed.
pub fn gen_motion_parity_video(spec: &SyntheticSpec, seed: u64, label: usize) -> VideoClip {
    let (fwd, rev) = gen_motion_parity_pair(spec, seed);
    if label == 0 {
        fwd
    } else {
        rev
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Eval,
}

/// Dense indices for the temporal encoder and the sparse subset shown to
/// the spatial encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleIndexPlan {
    pub temporal: Vec<usize>,
    pub spatial: Vec<usize>,
}

/// Boundaries of `k` near-equal segments of `[0, total)`.
fn segments(total: usize, k: usize) -> Vec<(usize, usize)> {
    (0..k).map(|i| (i * total / k, (i + 1) * total / k)).collect()
}

fn spatial_subset(temporal: &[usize], frames: usize, gamma: usize) -> Vec<usize> {
    (0..frames).map(|j| temporal[gamma / 2 + j * gamma]).collect()
}

/// Segment sampling: `γT` segments, one frame each (the centre in eval
/// mode, a seeded uniform pick in train mode).
pub fn tsn_sample(total: usize, frames: usize, gamma: usize, mode: SampleMode, seed: u64) -> Result<SampleIndexPlan> {
    let dense = frames * gamma;
    if dense == 0 || total < dense {
        return Err(CoreError::data(format!(
            "{total} frames cannot supply {dense} samples (T = {frames}, gamma = {gamma})"
        )));
    }
    let mut rng = rng_for(seed, 4);
    let temporal: Vec<usize> = segments(total, dense)
        .into_iter()
        .map(|(a, b)| match mode {
            SampleMode::Eval => a + (b - a) / 2,
            SampleMode::Train => rng.random_range(a..b),
        })
        .collect();
    let spatial = spatial_subset(&temporal, frames, gamma);
    Ok(SampleIndexPlan { temporal, spatial })
}

/// Plans for `clips` evaluation views: clip `k` takes offset
/// `floor((2k + 1) · len / (2 · clips))` within every segment. Falls back to a
/// single centred clip (with a warning) when the shortest segment is too
/// short to separate the views.
pub fn multi_clip_plans(total: usize, frames: usize, gamma: usize, clips: usize) -> Result<(Vec<SampleIndexPlan>, Option<String>)> {
    let dense = frames * gamma;
    let centre = tsn_sample(total, frames, gamma, SampleMode::Eval, 0)?;
    let segs = segments(total, dense);
    let shortest = segs.iter().map(|(a, b)| b - a).min().unwrap_or(0);
    if clips <= 1 {
        return Ok((vec![centre], None));
    }
    if shortest < clips {
        let warning = format!(
            "segments of {shortest} frames cannot hold {clips} distinct clips; using 1 centred clip"
        );
        return Ok((vec![centre], Some(warning)));
    }
    let plans = (0..clips)
        .map(|k| {
            let temporal: Vec<usize> = segs
                .iter()
                .map(|&(a, b)| a + (2 * k + 1) * (b - a) / (2 * clips))
                .collect();
            let spatial = spatial_subset(&temporal, frames, gamma);
            SampleIndexPlan { temporal, spatial }
        })
        .collect();
    Ok((plans, None))
}

/// One manifest line: a clip is identified by its pair seed and label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ManifestEntry {
    pub seed: u64,
    pub label: usize,
    pub task: Task,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
}

/// Pair seeds of a dataset, derived from its seed.
pub fn pair_seeds(dataset_seed: u64, pairs: usize) -> Vec<u64> {
    let mut rng = rng_for(dataset_seed, 5);
    (0..pairs).map(|_| rng.random()).collect()
}

/// Seeded train/val split over reversal pairs; both clips of a pair always
/// land in the same split.
pub fn make_splits(dataset_seed: u64, pairs: usize, train_ratio: f64, val_ratio: f64, split_seed: u64) -> Result<Splits> {
    if train_ratio < 0.0 || val_ratio < 0.0 || (train_ratio + val_ratio - 1.0).abs() > 1e-9 {
        return Err(CoreError::config(format!(
            "split ratios {train_ratio} + {val_ratio} must be non-negative and sum to 1"
        )));
    }
    let mut seeds = pair_seeds(dataset_seed, pairs);
    seeds.shuffle(&mut rng_for(split_seed, 6));
    let n_train = (train_ratio * pairs as f64).round() as usize;
    let expand = |s: &[u64]| {
        s.iter()
            .flat_map(|&seed| {
                (0..2).map(move |label| ManifestEntry { seed, label, task: Task::MotionParity })
            })
            .collect::<Vec<_>>()
    };
    Ok(Splits {
        train: expand(&seeds[..n_train]),
        val: expand(&seeds[n_train..]),
    })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!("{}\t{}\t{}\n", e.seed, e.label, e.task));
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || CoreError::data(format!("{}:{}: malformed manifest line `{line}`", path.display(), i + 1));
            let mut parts = line.split('\t');
            let seed = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let label = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let task = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if parts.next().is_some() {
                return Err(bad());
            }
            Ok(ManifestEntry { seed, label, task })
        })
        .collect()
}
