#![allow(dead_code)]

use std::path::Path;

use dist_cli::ExperimentConfig;

/// Smallest model the commands accept, with a budget of seconds.
pub const TINY: &str = "\
[model]
frames = 2
height = 8
width = 8
patch = 4
channels = 8
layers = 2
heads = 2
gamma = 2
beta_c = 2
temporal_heads = 1
alpha_c = 4
classes = 2

[data]
shapes = square, disk
frames = 8
step_degrees = 45
seed = 11
pairs = 12
train_ratio = 0.5
val_ratio = 0.5
split_seed = 12

[pretrain]
images = 16
epochs = 2
batch = 8
lr = 0.002
min_accuracy = 0

[optim]
lr = 0.01
batch = 4
epochs = 2
warmup = 1

[run]
seed = 5
";

/// `TINY` plus extra lines, with outputs under `out`.
pub fn tiny(extra: &str, out: &Path) -> ExperimentConfig {
    let text = format!("{TINY}out = {}\n{extra}", out.display());
    ExperimentConfig::parse(&text, "tiny.ini").unwrap()
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
