use dist_core::spatial::SpatialFeatures;
use dist_core::{Ablation, ClipInput, DistConfig, DistModel, PhiUp, PsiDown, TBlockKind};
use dist_tensor::{grad_check, GradCheckOptions, Tape, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Replaces every trainable parameter with small random values so that no
/// path starts at an exact zero.
fn randomize(m: &mut DistModel, seed: u64) {
    let ids: Vec<_> = m.store.iter().filter(|(_, p)| !p.frozen()).map(|(id, _)| id).collect();
    for (i, id) in ids.into_iter().enumerate() {
        let shape = m.store.value(id).shape().to_vec();
        m.store.set_value(id, randn(&shape, seed + i as u64).map(|v| 0.5 * v)).unwrap();
    }
}

struct Clip {
    spatial: SpatialFeatures,
    dense: Tensor,
}

impl Clip {
    fn new(m: &DistModel, seed: u64) -> Self {
        let c = &m.config;
        let dense = randn(&[c.dense_frames(), c.spatial.height, c.spatial.width, 3], seed).map(|v| v.abs().min(1.0));
        let sparse: Vec<usize> = (0..c.spatial.frames).map(|j| c.temporal.gamma / 2 + j * c.temporal.gamma).collect();
        let spatial = m.encode_spatial(&dense.select_leading(&sparse).unwrap()).unwrap();
        Clip { spatial, dense }
    }

    fn input(&self) -> ClipInput<'_> {
        ClipInput { spatial: &self.spatial, dense: Some(&self.dense) }
    }
}

#[test]
fn tiny_forward_shapes() {
    let m = DistModel::new(DistConfig::tiny(), 1).unwrap();
    let clip = Clip::new(&m, 2);
    let out = m.forward(&Tape::new(), clip.input()).unwrap();
    assert_eq!(out.integration.len(), 2);
    assert_eq!(out.integration[1].shape(), &[2, 5, 4]);
    assert_eq!(out.temporal[1].shape(), &[4, 2, 2, 2]);
    assert_eq!(out.guidance.len(), 1);
    assert_eq!(out.guidance[0].as_ref().unwrap().shape(), &[4, 2, 2, 2]);
    assert_eq!(out.logits.shape(), &[3]);
}

#[test]
fn without_temporal_encoder_the_forward_is_defined() {
    let mut c = DistConfig::tiny();
    c.ablation.temporal = false;
    let m = DistModel::new(c, 1).unwrap();
    assert!(m.store.id("temporal.stem.w").is_none());
    assert!(m.store.id("integ.block1.dconv.w").is_none());
    let clip = Clip::new(&m, 3);
    let no_dense = ClipInput { spatial: &clip.spatial, dense: None };
    let out = m.forward(&Tape::new(), no_dense).unwrap();
    assert!(out.temporal.is_empty());
    assert_eq!(out.integration.len(), 2);
}

#[test]
fn interaction_cells_are_all_constructible() {
    for (i2t, t2i) in [(true, true), (true, false), (false, true), (false, false)] {
        let mut c = DistConfig::tiny();
        c.ablation.integ_to_temp = i2t;
        c.ablation.temp_to_integ = t2i;
        let mut m = DistModel::new(c, 4).unwrap();
        randomize(&mut m, 50);
        let clip = Clip::new(&m, 5);
        let out = m.forward(&Tape::new(), clip.input()).unwrap();
        assert_eq!(out.guidance[0].is_some(), i2t);
        assert_eq!(m.store.id("integ.block1.phi_fc.w").is_some(), i2t);
        assert_eq!(m.store.id("integ.block1.dconv.w").is_some(), t2i);
        if !i2t {
            // Without guidance the temporal stream ignores the integration branch.
            let mut alone = m.config.clone();
            alone.ablation.integration = false;
            let t = Tape::new();
            let ctx = m.ctx(&t);
            let z0 = dist_core::temporal::stem(&ctx, &alone, &clip.dense).unwrap();
            let z1 = dist_core::temporal::step(&ctx, &alone, 1, &z0, None).unwrap();
            let z2 = dist_core::temporal::step(&ctx, &alone, 2, &z1, None).unwrap();
            assert!(z2.value().bit_eq(out.temporal[1].value()));
        }
        if !t2i {
            // Without psi, layer 1 sees only fc_x of the spatial features.
            let t = Tape::new();
            let ctx = m.ctx(&t);
            let x = dist_tensor::Var::constant(clip.spatial.layer(1).clone());
            let s = ctx.linear("integ.block1.fc_x", &x).unwrap();
            let y = dist_core::integration::iblock(&ctx, &m.config, 1, &s).unwrap();
            assert!(y.value().max_abs_diff(out.integration[0].value()) < 1e-12);
        }
    }
}

#[test]
fn masked_layers_pass_the_stream_through() {
    let mut c = DistConfig::tiny();
    c.integration.layer_mask = vec![1];
    let mut m = DistModel::new(c, 6).unwrap();
    randomize(&mut m, 60);
    assert!(m.store.id("integ.block2.fc_x.w").is_none());
    let clip = Clip::new(&m, 7);
    let out = m.forward(&Tape::new(), clip.input()).unwrap();
    assert!(out.integration[0].value().bit_eq(out.integration[1].value()));
}

fn combos() -> Vec<DistConfig> {
    let mut out = Vec::new();
    for kind in TBlockKind::ALL {
        for psi in PsiDown::ALL {
            for phi in PhiUp::ALL {
                let mut c = DistConfig::tiny();
                c.temporal.kind = *kind;
                c.integration.psi = *psi;
                c.integration.phi = *phi;
                out.push(c);
            }
        }
    }
    out
}

#[test]
fn end_to_end_gradients_for_every_block_and_map() {
    let combos = combos();
    assert_eq!(combos.len(), 27);
    for (i, cfg) in combos.into_iter().enumerate() {
        let name = format!("{}/{}/{}", cfg.temporal.kind, cfg.integration.psi, cfg.integration.phi);
        let mut m = DistModel::new(cfg, 10 + i as u64).unwrap();
        randomize(&mut m, 1000 * i as u64);
        let clip = Clip::new(&m, 20 + i as u64);
        let model = m.clone();
        let report = grad_check(
            &mut m.store,
            |tape, store| {
                let view = DistModel { config: model.config.clone(), store: store.clone() };
                let (loss, _) = view.loss(tape, clip.input(), 1).map_err(|e| TensorError::Oracle(e.to_string()))?;
                Ok(loss)
            },
            // Max-pool ties lie within 1e-4 of some coordinates; a smaller
            // step keeps every probe on one side of the kink.
            GradCheckOptions { h: 1e-5, ..GradCheckOptions::default() },
        )
        .unwrap();
        assert!(report.passed, "{name}: {report:?}");
    }
}

#[test]
fn tape_never_touches_the_spatial_encoder() {
    let mut m = DistModel::new(DistConfig::tiny(), 8).unwrap();
    randomize(&mut m, 80);
    let clip = Clip::new(&m, 9);
    let tape = Tape::new();
    let (loss, _) = m.loss(&tape, clip.input(), 0).unwrap();
    for (id, p) in m.store.iter() {
        if p.name.starts_with("spatial.") {
            assert!(!tape.has_leaf(id), "{} recorded", p.name);
        }
    }
    let recorded = tape.len();
    assert!(recorded > 0);

    // Replacing the spatial features by unrelated constants of the same
    // shape records exactly the same graph.
    let other = SpatialFeatures {
        layers: clip.spatial.layers.iter().enumerate().map(|(i, x)| randn(x.shape(), 90 + i as u64)).collect(),
    };
    let tape2 = Tape::new();
    m.loss(&tape2, ClipInput { spatial: &other, dense: Some(&clip.dense) }, 0).unwrap();
    assert_eq!(tape2.len(), recorded);

    let before = dist_core::spatial::weights_hash(&m.store);
    tape.backward(&loss, &mut m.store).unwrap();
    for (_, p) in m.store.iter() {
        if p.name.starts_with("spatial.") || p.name == "labels.u" {
            assert!(p.grad().is_none(), "{} has a gradient", p.name);
        }
    }
    assert_eq!(before, dist_core::spatial::weights_hash(&m.store));
}

#[test]
fn frozen_view_records_nothing() {
    let m = DistModel::new(DistConfig::tiny(), 11).unwrap();
    let clip = Clip::new(&m, 12);
    let tape = Tape::new();
    m.frozen_view().forward(&tape, clip.input()).unwrap();
    assert_eq!(tape.len(), 0);
}

#[test]
fn spatial_only_and_no_interaction_models_run() {
    for ab in [Ablation::spatial_only(), Ablation::no_interaction()] {
        let mut c = DistConfig::tiny();
        c.ablation = ab;
        let m = DistModel::new(c, 13).unwrap();
        let clip = Clip::new(&m, 14);
        let p = m.probabilities(clip.input()).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn weights_round_trip_through_archive() {
    let mut m = DistModel::new(DistConfig::tiny(), 15).unwrap();
    randomize(&mut m, 150);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.dtn");
    m.save(&path).unwrap();
    let mut other = DistModel::new(DistConfig::tiny(), 16).unwrap();
    other.load(&path).unwrap();
    assert_eq!(m.weights_hash(), other.weights_hash());

    let mut wider = DistConfig::tiny();
    wider.integration.alpha_c = 8;
    let err = DistModel::new(wider, 1).unwrap().load(&path).unwrap_err().to_string();
    assert!(err.contains("integ.block1"), "{err}");
}
