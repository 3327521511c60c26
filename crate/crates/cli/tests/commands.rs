mod common;

use std::path::Path;
use std::process::Command;

use common::{read, tiny};
use dist_cli::commands::{self, MODEL_ARCHIVE, SPATIAL_ARCHIVE};
use dist_cli::record::RunRecord;
use dist_core::analysis;
use dist_core::train::metrics_csv;
use dist_core::DistModel;
use dist_tensor::archive;
use tempfile::tempdir;

fn pretrained(dir: &Path) -> std::path::PathBuf {
    let cfg = tiny("", &dir.join("pretrain"));
    commands::cmd_pretrain(&cfg).unwrap();
    dir.join("pretrain").join(SPATIAL_ARCHIVE)
}

#[test]
fn pretrain_is_deterministic_and_writes_its_artifacts() {
    let dir = tempdir().unwrap();
    let a = commands::cmd_pretrain(&tiny("", &dir.path().join("a"))).unwrap();
    let b = commands::cmd_pretrain(&tiny("", &dir.path().join("b"))).unwrap();
    assert_eq!(a.weights_hash, b.weights_hash);
    assert_eq!(read(&dir.path().join("a/metrics.csv")), read(&dir.path().join("b/metrics.csv")));
    assert!(read(&dir.path().join("a/metrics.csv")).starts_with("epoch,split,loss,acc\n"));

    let entries = archive::load(&dir.path().join("a").join(SPATIAL_ARCHIVE)).unwrap();
    assert!(entries.iter().all(|(n, _)| n.starts_with("spatial.")));
    assert_eq!(archive::content_hash(&entries), a.weights_hash);
    let rec = RunRecord::read(&dir.path().join("a/run.json")).unwrap();
    assert_eq!(rec.weights_hash, a.weights_hash);
    assert_eq!(rec.metrics.len(), 2);

    let other = {
        let mut cfg = tiny("", &dir.path().join("d"));
        cfg.run.seed = 6;
        commands::cmd_pretrain(&cfg).unwrap()
    };
    assert_ne!(other.weights_hash, a.weights_hash);
}

#[test]
fn pretrain_requires_its_section_and_accuracy() {
    let dir = tempdir().unwrap();
    let mut cfg = tiny("", dir.path());
    cfg.pretrain = None;
    assert_eq!(commands::cmd_pretrain(&cfg).unwrap_err().exit_code(), 1);
    let mut cfg = tiny("", dir.path());
    cfg.pretrain.as_mut().unwrap().min_accuracy = 1.1;
    let err = commands::cmd_pretrain(&cfg).unwrap_err();
    assert!(err.to_string().contains("below"), "{err}");
}

#[test]
fn train_is_reproducible_and_keeps_the_encoder_frozen() {
    let dir = tempdir().unwrap();
    let spatial = pretrained(dir.path());
    let spatial_hash = archive::content_hash(&archive::load(&spatial).unwrap());
    let a = commands::cmd_train(&tiny("", &dir.path().join("a")), &spatial).unwrap();
    let b = commands::cmd_train(&tiny("", &dir.path().join("b")), &spatial).unwrap();
    assert_eq!(a.weights_hash, b.weights_hash);
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(read(&dir.path().join("a/metrics.csv")), read(&dir.path().join("b/metrics.csv")));
    assert_eq!(a.spatial_hash, spatial_hash);

    // The trained archive carries the pretrained encoder bit for bit.
    let trained = archive::load(&dir.path().join("a").join(MODEL_ARCHIVE)).unwrap();
    let trained_spatial: Vec<_> = trained.into_iter().filter(|(n, _)| n.starts_with("spatial.")).collect();
    assert_eq!(archive::content_hash(&trained_spatial), spatial_hash);

    let train_tsv = read(&dir.path().join("a/train.tsv"));
    let val_tsv = read(&dir.path().join("a/val.tsv"));
    assert_eq!((train_tsv.lines().count(), val_tsv.lines().count()), (12, 12));
    let rows: Vec<_> = a.metrics.iter().map(|m| (m.epoch, m.split.as_str())).collect();
    assert_eq!(rows, vec![(1, "train"), (1, "val"), (2, "train"), (2, "val")]);
}

#[test]
fn disk_cache_does_not_change_results() {
    let dir = tempdir().unwrap();
    let spatial = pretrained(dir.path());
    let cache = format!("cache = {}\n", dir.path().join("cache").display());
    let plain = commands::cmd_train(&tiny("", &dir.path().join("plain")), &spatial).unwrap();
    let cold = commands::cmd_train(&tiny(&cache, &dir.path().join("cold")), &spatial).unwrap();
    let warm = commands::cmd_train(&tiny(&cache, &dir.path().join("warm")), &spatial).unwrap();
    assert!(std::fs::read_dir(dir.path().join("cache/post_block")).unwrap().count() >= 2);
    assert_eq!(plain.weights_hash, cold.weights_hash);
    assert_eq!(cold.weights_hash, warm.weights_hash);
    assert_eq!(cold.metrics, warm.metrics);
}

#[test]
fn train_rejects_weights_for_another_encoder() {
    let dir = tempdir().unwrap();
    let spatial = pretrained(dir.path());
    let text = format!("{}out = {}\n", common::TINY.replace("channels = 8", "channels = 12"), dir.path().join("x").display());
    let cfg = dist_cli::ExperimentConfig::parse(&text, "wide.ini").unwrap();
    let err = commands::cmd_train(&cfg, &spatial).unwrap_err();
    assert!(err.to_string().contains("spatial."), "{err}");
    assert_eq!(err.exit_code(), 1);
    let err = commands::cmd_train(&cfg, &dir.path().join("missing.dtn")).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn eval_reproduces_the_final_validation_accuracy() {
    let dir = tempdir().unwrap();
    let spatial = pretrained(dir.path());
    let cfg = tiny("", &dir.path().join("t"));
    let rec = commands::cmd_train(&cfg, &spatial).unwrap();
    let r = commands::cmd_eval(&cfg, &dir.path().join("t").join(MODEL_ARCHIVE)).unwrap();
    let last = rec.metrics.last().unwrap();
    assert_eq!((r.loss, r.acc), (last.loss, last.acc));
    assert!(read(&dir.path().join("t/eval.csv")).starts_with("split,loss,acc\nval,"));
}

#[test]
fn ablate_covers_every_mode_pair_and_reports_costs() {
    let dir = tempdir().unwrap();
    let spatial = pretrained(dir.path());
    let grid = "[ablate]\npsi = dconv | avg_pool | max_pool\nphi = nearest | trilinear | deconv\n";
    let mut cfg = tiny(grid, &dir.path().join("grid"));
    cfg.optim.epochs = 1;
    cfg.optim.warmup = 0;
    let rows = commands::cmd_ablate(&cfg, &spatial).unwrap();
    assert_eq!(rows.len(), 9);
    for (row, v) in rows.iter().zip(cfg.variants().unwrap()) {
        assert_eq!(row.variant, v.name);
        assert_eq!(row.macs, analysis::count_macs(&v.model.config).total_macs());
        assert!((0.0..=1.0).contains(&row.acc));
    }
    let csv = read(&dir.path().join("grid/ablate.csv"));
    assert!(csv.starts_with("variant,acc,macs,trainable\n"));
    assert_eq!(csv.lines().count(), 10);
}

#[test]
fn ablate_gamma_grid_costs_increase() {
    let dir = tempdir().unwrap();
    let spatial = pretrained(dir.path());
    let mut cfg = tiny("[ablate]\ngamma = 1 | 2 | 4\n", &dir.path().join("g"));
    cfg.optim.epochs = 1;
    cfg.optim.warmup = 0;
    let rows = commands::cmd_ablate(&cfg, &spatial).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.windows(2).all(|w| w[0].macs < w[1].macs), "{rows:?}");

    let cfg = tiny("[ablate]\n", &dir.path().join("empty"));
    let err = commands::cmd_ablate(&cfg, &spatial).unwrap_err();
    assert_eq!(err.exit_code(), 1, "{err}");
}

/// 500 validation clips (the CKA minimum) with an untrained model.
fn analysis_setup(dir: &Path) -> (dist_cli::ExperimentConfig, std::path::PathBuf) {
    let mut cfg = tiny("", &dir.join("an"));
    cfg.data.pairs = 250;
    cfg.data.train_ratio = 0.0;
    cfg.data.val_ratio = 1.0;
    let model = DistModel::new(cfg.model.config.clone(), 3).unwrap();
    let weights = dir.join("fresh.dtn");
    model.save(&weights).unwrap();
    (cfg, weights)
}

#[test]
fn analyze_writes_reports_that_match_the_library() {
    let dir = tempdir().unwrap();
    let (cfg, weights) = analysis_setup(dir.path());
    let r = commands::cmd_analyze(&cfg, &weights).unwrap();
    let out = dir.path().join("an");
    let cost = analysis::count_macs(&cfg.model.config);
    assert_eq!(read(&out.join("cost_report.csv")), cost.to_csv());
    assert_eq!(r.cost.total_macs(), cost.total_macs());
    assert_eq!(r.cost.total_params(), analysis::count_params(&cfg.model.config).total_params());

    let cka = read(&out.join("cka_report.csv"));
    let pairs: Vec<&str> = cka.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(pairs, vec!["integrated_vs_spatial", "temporal_vs_spatial", "spatial_vs_spatial"]);
    assert_eq!(r.cka[2].1, 1.0);

    for stream in ["spatial", "integrated", "temporal"] {
        for l in 1..=2 {
            let csv = read(&out.join(format!("magnitude_{stream}_{l}.csv")));
            assert!(csv.starts_with("frame,row,col,magnitude\n"), "{stream} {l}");
        }
    }
    // Sparse maps hold T frames of a 2x2 grid, dense maps gamma*T.
    assert_eq!(read(&out.join("magnitude_spatial_1.csv")).lines().count(), 1 + 2 * 4);
    assert_eq!(read(&out.join("magnitude_temporal_1.csv")).lines().count(), 1 + 4 * 4);
    assert!(read(&out.join("motion_ratio.csv")).starts_with("stream,layer,ratio\n"));

    let first = std::fs::read_dir(&out).unwrap().count();
    let snapshot: Vec<(String, String)> = ["cka_report.csv", "motion_ratio.csv", "magnitude_temporal_2.csv"]
        .iter()
        .map(|f| (f.to_string(), read(&out.join(f))))
        .collect();
    commands::cmd_analyze(&cfg, &weights).unwrap();
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), first);
    for (f, text) in snapshot {
        assert_eq!(read(&out.join(&f)), text, "{f}");
    }
}

#[test]
fn analyze_rejects_small_probe_sets_and_mismatched_weights() {
    let dir = tempdir().unwrap();
    let (mut cfg, weights) = analysis_setup(dir.path());
    cfg.data.pairs = 100;
    let err = commands::cmd_analyze(&cfg, &weights).unwrap_err();
    assert!(err.to_string().contains("500"), "{err}");
    assert_eq!(err.exit_code(), 3);

    let (mut cfg, weights) = analysis_setup(dir.path());
    cfg.model.config.integration.alpha_c = 6;
    let err = commands::cmd_analyze(&cfg, &weights).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("fresh.dtn") && msg.contains("`integ."), "{msg}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn metrics_csv_layout() {
    assert_eq!(metrics_csv(&[]), "epoch,split,loss,acc\n");
}

#[test]
fn binary_maps_failures_to_exit_codes() {
    let dir = tempdir().unwrap();
    let bad = dir.path().join("bad.ini");
    std::fs::write(&bad, "[model]\nmodle = 2\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dist"))
        .args(["train", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("modle"));

    let good = dir.path().join("tiny.ini");
    std::fs::write(&good, common::TINY).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dist"))
        .args(["train", "--config"])
        .arg(&good)
        .arg("--spatial-weights")
        .arg(dir.path().join("missing.dtn"))
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let out = Command::new(env!("CARGO_BIN_EXE_dist"))
        .args(["pretrain", "--seed", "9", "--config"])
        .arg(&good)
        .arg("--out")
        .arg(dir.path().join("p"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rec = RunRecord::read(&dir.path().join("p/run.json")).unwrap();
    assert_eq!(rec.seed, 9);
    assert!(rec.config.contains("seed = 9"));
}
