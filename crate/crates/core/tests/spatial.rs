use dist_core::config::SpatialConfig;
use dist_core::data::{shape_dataset, SyntheticSpec};
use dist_core::spatial::{self, PretrainOptions};
use dist_core::{CoreError, FeatureTap};
use dist_tensor::{archive, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg(frames: usize) -> SpatialConfig {
    SpatialConfig {
        frames,
        height: 8,
        width: 8,
        patch: 4,
        channels: 8,
        layers: 2,
        heads: 2,
        mlp_ratio: 4,
    }
}

fn store(c: &SpatialConfig, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    spatial::init(c, &mut s, &mut ChaCha8Rng::seed_from_u64(seed), true).unwrap();
    s
}

fn frames(t: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[t, 8, 8, 3], 1.0, &mut rng)
}

#[test]
fn one_frame_gives_n_plus_one_tokens() {
    let c = cfg(1);
    let f = spatial::encode(&store(&c, 0), &c, FeatureTap::PostBlock, 1e-5, &frames(1, 1)).unwrap();
    assert_eq!(f.layers.len(), 2);
    assert_eq!(f.last().shape(), &[1, 5, 8]);
}

#[test]
fn patchify_matches_pixel_indexing() {
    let c = cfg(2);
    let x = frames(2, 3);
    let p = spatial::patchify(&x, &c).unwrap();
    assert_eq!(p.shape(), &[2, 4, 48]);
    for t in 0..2 {
        for gy in 0..2 {
            for gx in 0..2 {
                for py in 0..4 {
                    for px in 0..4 {
                        for ch in 0..3 {
                            let want = x.get(&[t, gy * 4 + py, gx * 4 + px, ch]);
                            let got = p.get(&[t, gy * 2 + gx, (py * 4 + px) * 3 + ch]);
                            assert_eq!(got.to_bits(), want.to_bits());
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn zero_input_embeds_to_position_table() {
    let c = cfg(1);
    let mut s = store(&c, 0);
    for name in ["spatial.cls", "spatial.patch_proj.b"] {
        let id = s.id(name).unwrap();
        let shape = s.value(id).shape().to_vec();
        s.set_value(id, Tensor::zeros(&shape)).unwrap();
    }
    let tape = dist_tensor::Tape::new();
    let ctx = dist_core::nn::Ctx::new(&tape, &s, 1e-5);
    let x = spatial::embed_frames(&ctx, &c, &Tensor::zeros(&[1, 8, 8, 3])).unwrap();
    let pos = s.by_name("spatial.pos").unwrap().value();
    assert_eq!(x.data(), pos.data());
}

#[test]
fn frames_are_encoded_independently() {
    let c = cfg(3);
    let s = store(&c, 5);
    let x = frames(3, 6);
    let joint = spatial::encode(&s, &c, FeatureTap::PostBlock, 1e-5, &x).unwrap();
    for t in 0..3 {
        let one = x.select_leading(&[t]).unwrap();
        let alone = spatial::encode(&s, &c, FeatureTap::PostBlock, 1e-5, &one).unwrap();
        for l in 1..=2 {
            let a = joint.layer(l).index_leading(t);
            let b = alone.layer(l).index_leading(0);
            assert!(a.bit_eq(&b), "frame {t} layer {l}");
        }
    }
    let perm = [2, 0, 1];
    let permuted = spatial::encode(&s, &c, FeatureTap::PostBlock, 1e-5, &x.select_leading(&perm).unwrap()).unwrap();
    assert_eq!(permuted, joint.select_frames(&perm).unwrap());
}

#[test]
fn identical_frames_give_identical_features() {
    let c = cfg(2);
    let one = frames(1, 9);
    let x = Tensor::stack(&[one.index_leading(0), one.index_leading(0)]).unwrap();
    let f = spatial::encode(&store(&c, 1), &c, FeatureTap::PostNorm, 1e-5, &x).unwrap();
    assert!(f.last().index_leading(0).bit_eq(&f.last().index_leading(1)));
}

#[test]
fn save_load_round_trip_is_bit_exact() {
    let c = cfg(1);
    let s = store(&c, 11);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("spatial.dtn");
    spatial::save_weights(&s, &path).unwrap();
    let mut other = store(&c, 12);
    assert_ne!(spatial::weights_hash(&s), spatial::weights_hash(&other));
    spatial::load_weights(&mut other, &path).unwrap();
    assert_eq!(spatial::weights_hash(&s), spatial::weights_hash(&other));
}

#[test]
fn missing_position_table_is_named() {
    let c = cfg(1);
    let s = store(&c, 0);
    let entries: Vec<_> = spatial::named_weights(&s)
        .into_iter()
        .filter(|(n, _)| n != "spatial.pos")
        .collect();
    let err = spatial::load_entries(&mut store(&c, 1), &entries).unwrap_err().to_string();
    assert!(err.contains("e_spatial"), "{err}");
}

#[test]
fn wrong_patch_projection_shape_reports_both_shapes() {
    let c = cfg(1);
    let mut entries = spatial::named_weights(&store(&c, 0));
    for (n, t) in &mut entries {
        if n == "spatial.patch_proj.w" {
            *t = Tensor::zeros(&[47, 8]);
        }
    }
    let err = spatial::load_entries(&mut store(&c, 1), &entries).unwrap_err().to_string();
    assert!(err.contains("47") && err.contains("48"), "{err}");
}

fn pretrain_small(seed: u64, shapes: usize) -> (ParamStore, f64) {
    let c = cfg(1);
    let mut s = store(&c, seed);
    s.freeze_prefix("spatial.", false);
    let mut spec = SyntheticSpec { height: 8, width: 8, seed, ..SyntheticSpec::default() };
    spec.shapes.truncate(shapes);
    let images = shape_dataset(&spec, 24);
    let opts = PretrainOptions {
        epochs: 2,
        batch: 8,
        lr: 1e-3,
        weight_decay: 0.0,
        seed,
        eps: 1e-5,
        min_accuracy: 0.0,
    };
    let hist = spatial::pretrain(&c, &mut s, &images, shapes, &opts).unwrap();
    (s, hist.last().unwrap().accuracy)
}

#[test]
fn one_class_pretraining_is_trivially_perfect() {
    let (_, acc) = pretrain_small(3, 1);
    assert_eq!(acc, 1.0);
}

#[test]
fn pretraining_is_deterministic() {
    let (a, _) = pretrain_small(4, 4);
    let (b, _) = pretrain_small(4, 4);
    assert_eq!(
        archive::content_hash(&a.named_values("")),
        archive::content_hash(&b.named_values(""))
    );
    let only = spatial::spatial_only(&a).unwrap();
    assert!(only.iter().all(|(_, p)| p.name.starts_with("spatial.")));
}

#[test]
fn unmet_accuracy_is_a_convergence_error() {
    let c = cfg(1);
    let mut s = store(&c, 0);
    s.freeze_prefix("spatial.", false);
    let spec = SyntheticSpec { height: 8, width: 8, ..SyntheticSpec::default() };
    let images = shape_dataset(&spec, 8);
    let opts = PretrainOptions {
        epochs: 1,
        batch: 8,
        lr: 0.0,
        weight_decay: 0.0,
        seed: 0,
        eps: 1e-5,
        min_accuracy: 1.01,
    };
    let err = spatial::pretrain(&c, &mut s, &images, 4, &opts).unwrap_err();
    assert!(matches!(err, CoreError::Convergence(_)));
}
