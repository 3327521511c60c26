use dist_core::nn::Ctx;
use dist_core::{head, integration, temporal, DistConfig, DistModel, PsiDown, TBlockKind};
use dist_tensor::{grad_check, GradCheckOptions, ParamStore, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn oracle(e: dist_core::CoreError) -> TensorError {
    TensorError::Oracle(e.to_string())
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn set(store: &mut ParamStore, name: &str, value: Tensor) {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.set_value(id, value).unwrap();
}

fn fill(store: &mut ParamStore, prefix: &str, f: impl Fn(&[usize], u64) -> Tensor) {
    let names: Vec<(String, Vec<usize>)> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(_, p)| (p.name.clone(), p.value().shape().to_vec()))
        .collect();
    for (i, (n, s)) in names.iter().enumerate() {
        set(store, n, f(s, 100 + i as u64));
    }
}

fn only_trainable(store: &mut ParamStore, prefix: &str) {
    store.freeze_prefix("", true);
    store.freeze_prefix(prefix, false);
}

fn model(cfg: DistConfig) -> DistModel {
    DistModel::new(cfg, 7).unwrap()
}

// ---- temporal encoder ----

#[test]
fn stem_output_shape() {
    let mut cfg = DistConfig::tiny();
    cfg.temporal.beta_c = 2;
    let m = model(cfg);
    let tape = Tape::new();
    let z = temporal::stem(&m.ctx(&tape), &m.config, &randn(&[4, 8, 8, 3], 1)).unwrap();
    assert_eq!(z.shape(), &[4, 2, 2, 2]);
}

#[test]
fn stem_matches_direct_convolution() {
    let m = model(DistConfig::tiny());
    let x = randn(&[4, 8, 8, 3], 2);
    let tape = Tape::new();
    let z = temporal::stem(&m.ctx(&tape), &m.config, &x).unwrap();
    let w = m.store.by_name("temporal.stem.w").unwrap().value();
    let b = m.store.by_name("temporal.stem.b").unwrap().value();
    let beta = 2;
    let mut max_err: f64 = 0.0;
    for t in 0..4 {
        for gy in 0..2 {
            for gx in 0..2 {
                for o in 0..beta {
                    let mut acc = b.data()[o];
                    for kt in 0..3 {
                        let src = t as isize + kt as isize - 1;
                        if !(0..4).contains(&src) {
                            continue;
                        }
                        for ky in 0..4 {
                            for kx in 0..4 {
                                for c in 0..3 {
                                    acc += x.get(&[src as usize, gy * 4 + ky, gx * 4 + kx, c])
                                        * w.get(&[kt, ky, kx, c, o]);
                                }
                            }
                        }
                    }
                    max_err = max_err.max((acc - z.value().get(&[t, gy, gx, o])).abs());
                }
            }
        }
    }
    assert!(max_err < 1e-6, "{max_err}");
}

#[test]
fn constant_video_gives_constant_interior_states() {
    let m = model(DistConfig::tiny());
    let frame = randn(&[1, 8, 8, 3], 3).index_leading(0);
    let x = Tensor::stack(&[frame.clone(), frame.clone(), frame.clone(), frame]).unwrap();
    let tape = Tape::new();
    let z = temporal::stem(&m.ctx(&tape), &m.config, &x).unwrap().into_tensor();
    assert!(z.index_leading(1).max_abs_diff(&z.index_leading(2)) < 1e-12);
}

fn kinds() -> Vec<DistConfig> {
    TBlockKind::ALL
        .iter()
        .map(|&k| {
            let mut c = DistConfig::tiny();
            c.temporal.kind = k;
            c.temporal.beta_c = 4;
            c.temporal.heads = 2;
            c
        })
        .collect()
}

#[test]
fn zero_weight_blocks_are_identities() {
    for cfg in kinds() {
        let mut m = model(cfg);
        fill(&mut m.store, "temporal.block1.", |s, _| Tensor::zeros(s));
        let z = randn(&[4, 2, 2, 4], 4);
        let tape = Tape::new();
        let out = temporal::tblock(&m.ctx(&tape), &m.config, 1, &Var::constant(z.clone())).unwrap();
        assert!(out.value().bit_eq(&z), "{}", m.config.temporal.kind);
    }
}

#[test]
fn blocks_preserve_shape_over_gamma_and_beta() {
    for kind in TBlockKind::ALL {
        for gamma in [1, 2, 4] {
            for beta in [2, 4] {
                let mut c = DistConfig::tiny();
                c.temporal.kind = *kind;
                c.temporal.gamma = gamma;
                c.temporal.beta_c = beta;
                c.temporal.heads = 2;
                let m = model(c);
                let z = Var::constant(randn(&[2 * gamma, 2, 2, beta], 5));
                let tape = Tape::new();
                let ctx = m.ctx(&tape);
                for l in 1..=2 {
                    let out = temporal::step(&ctx, &m.config, l, &z, None).unwrap();
                    assert_eq!(out.shape(), z.shape());
                }
            }
        }
    }
}

#[test]
fn joint_attention_on_one_token_reduces_to_value_path() {
    let mut c = DistConfig::tiny();
    c.spatial.frames = 1;
    c.spatial.height = 4;
    c.spatial.width = 4;
    c.temporal.gamma = 1;
    c.temporal.kind = TBlockKind::JointAttention;
    c.temporal.beta_c = 4;
    c.temporal.heads = 2;
    c.integration.layer_mask = vec![1, 2];
    let mut m = model(c);
    fill(&mut m.store, "temporal.block1.", randn);
    let z = Var::constant(randn(&[1, 1, 1, 4], 6));
    let tape = Tape::new();
    let ctx = m.ctx(&tape);
    let out = temporal::tblock(&ctx, &m.config, 1, &z).unwrap();

    let p = "temporal.block1";
    let x = tape.reshape(&z, &[1, 4]).unwrap();
    let h = ctx.ln(&format!("{p}.ln1"), &x).unwrap();
    let qkv = ctx.linear(&format!("{p}.attn.qkv"), &h).unwrap();
    let v = tape.narrow(&qkv, 1, 8, 4).unwrap();
    let x = tape.add(&x, &ctx.linear(&format!("{p}.attn.proj"), &v).unwrap()).unwrap();
    let h = ctx.ln(&format!("{p}.ln2"), &x).unwrap();
    let h = tape.gelu(&ctx.linear(&format!("{p}.mlp.fc1"), &h).unwrap());
    let x = tape.add(&x, &ctx.linear(&format!("{p}.mlp.fc2"), &h).unwrap()).unwrap();
    assert!(out.value().reshape(&[1, 4]).unwrap().max_abs_diff(x.value()) < 1e-12);
}

#[test]
fn step_without_guidance_is_the_block() {
    for cfg in kinds() {
        let mut m = model(cfg);
        fill(&mut m.store, "temporal.block1.", randn);
        let z = Var::constant(randn(&[4, 2, 2, 4], 8));
        let tape = Tape::new();
        let ctx = m.ctx(&tape);
        let zero = Var::constant(Tensor::zeros(&[4, 2, 2, 4]));
        let a = temporal::step(&ctx, &m.config, 1, &z, Some(&zero)).unwrap();
        let b = temporal::tblock(&ctx, &m.config, 1, &z).unwrap();
        assert!(a.value().bit_eq(b.value()));
    }
}

#[test]
fn fresh_blocks_pass_guidance_through_from_zero_state() {
    for cfg in kinds() {
        let m = model(cfg);
        let g = Var::constant(randn(&[4, 2, 2, 4], 9));
        let tape = Tape::new();
        let zero = Var::constant(Tensor::zeros(&[4, 2, 2, 4]));
        let out = temporal::step(&m.ctx(&tape), &m.config, 1, &zero, Some(&g)).unwrap();
        assert!(out.value().bit_eq(g.value()), "{}", m.config.temporal.kind);
    }
}

#[test]
fn block_gradients_match_finite_differences() {
    for cfg in kinds() {
        let mut m = model(cfg);
        fill(&mut m.store, "temporal.block1.", |s, seed| randn(s, seed).map(|v| 0.5 * v));
        only_trainable(&mut m.store, "temporal.block1.");
        let config = m.config.clone();
        let z = Var::constant(randn(&[4, 2, 2, 4], 10));
        let probe = randn(&[4, 2, 2, 4], 11);
        let report = grad_check(
            &mut m.store,
            |tape, store| {
                let ctx = Ctx::new(tape, store, config.ln_eps);
                let out = temporal::tblock(&ctx, &config, 1, &z).map_err(oracle)?;
                Ok(tape.sum_all(&tape.mul(&out, &Var::constant(probe.clone()))?))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{}: {report:?}", config.temporal.kind);
    }
}

// ---- integration branch ----

#[test]
fn psi_shape_contract() {
    let m = model(DistConfig::tiny());
    let tape = Tape::new();
    let z = Var::constant(randn(&[4, 2, 2, 2], 12));
    let y = integration::psi(&m.ctx(&tape), &m.config, 1, &z).unwrap();
    assert_eq!(y.shape(), &[2, 5, 4]);
}

#[test]
fn identity_dconv_copies_the_temporal_grid() {
    let mut c = DistConfig::tiny();
    c.temporal.gamma = 1;
    c.temporal.beta_c = 4;
    let mut m = model(c);
    let eye = Tensor::from_fn(&[1, 4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    set(&mut m.store, "integ.block1.dconv.w", eye);
    set(&mut m.store, "integ.block1.dconv.b", Tensor::zeros(&[4]));
    set(&mut m.store, "integ.block1.z_cls", Tensor::zeros(&[2, 1, 4]));
    let z = randn(&[2, 2, 2, 4], 13);
    let tape = Tape::new();
    let y = integration::psi(&m.ctx(&tape), &m.config, 1, &Var::constant(z.clone())).unwrap();
    for t in 0..2 {
        let frame = y.value().index_leading(t);
        assert!(frame.data()[..4].iter().all(|v| *v == 0.0));
        assert_eq!(&frame.data()[4..], z.index_leading(t).data());
    }
}

#[test]
fn avg_pool_psi_is_pool_then_linear() {
    let mut c = DistConfig::tiny();
    c.integration.psi = PsiDown::AvgPool;
    let mut m = model(c);
    fill(&mut m.store, "integ.block1.", randn);
    let z = randn(&[4, 2, 2, 2], 14);
    let tape = Tape::new();
    let y = integration::psi(&m.ctx(&tape), &m.config, 1, &Var::constant(z.clone())).unwrap();
    let w = m.store.by_name("integ.block1.psi_fc.w").unwrap().value();
    let b = m.store.by_name("integ.block1.psi_fc.b").unwrap().value();
    let cls = m.store.by_name("integ.block1.z_cls").unwrap().value();
    for t in 0..2 {
        for k in 0..4 {
            assert_eq!(y.value().get(&[t, 0, k]), cls.get(&[t, 0, k]));
        }
        for n in 0..4 {
            let (gy, gx) = (n / 2, n % 2);
            for k in 0..4 {
                let mut acc = b.data()[k];
                for j in 0..2 {
                    let pooled = 0.5 * (z.get(&[2 * t, gy, gx, j]) + z.get(&[2 * t + 1, gy, gx, j]));
                    acc += pooled * w.get(&[j, k]);
                }
                assert!((y.value().get(&[t, n + 1, k]) - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn phi_of_zero_is_zero() {
    let m = model(DistConfig::tiny());
    let tape = Tape::new();
    let g = integration::phi(&m.ctx(&tape), &m.config, 1, &Var::constant(Tensor::zeros(&[2, 5, 4]))).unwrap();
    assert_eq!(g.shape(), &[4, 2, 2, 2]);
    assert!(g.data().iter().all(|v| *v == 0.0));
}

#[test]
fn nearest_phi_repeats_frames() {
    let mut m = model(DistConfig::tiny());
    fill(&mut m.store, "integ.block1.phi_fc", randn);
    let tape = Tape::new();
    let g = integration::phi(&m.ctx(&tape), &m.config, 1, &Var::constant(randn(&[2, 5, 4], 15))).unwrap();
    let g = g.value();
    assert!(g.index_leading(0).bit_eq(&g.index_leading(1)));
    assert!(g.index_leading(2).bit_eq(&g.index_leading(3)));
    assert!(!g.index_leading(1).bit_eq(&g.index_leading(2)));
}

#[test]
fn iblock_with_zero_parameters_outputs_zero() {
    let mut m = model(DistConfig::tiny());
    fill(&mut m.store, "integ.block1.", |s, _| Tensor::zeros(s));
    let tape = Tape::new();
    let y = integration::iblock(&m.ctx(&tape), &m.config, 1, &Var::constant(randn(&[2, 5, 4], 16))).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn zeroed_tconv_path_leaves_the_feed_forward_path() {
    let mut m = model(DistConfig::tiny());
    fill(&mut m.store, "integ.block1.", randn);
    set(&mut m.store, "integ.block1.tconv_fc.w", Tensor::zeros(&[4, 4]));
    set(&mut m.store, "integ.block1.tconv_fc.b", Tensor::zeros(&[4]));
    let x = Var::constant(randn(&[2, 5, 4], 17));
    let tape = Tape::new();
    let ctx = m.ctx(&tape);
    let y = integration::iblock(&ctx, &m.config, 1, &x).unwrap();
    let a = ctx.ln("integ.block1.ln_ffn", &x).unwrap();
    let a = tape.gelu(&ctx.linear("integ.block1.ffn1", &a).unwrap());
    let a = ctx.linear("integ.block1.ffn2", &a).unwrap();
    assert!(y.value().max_abs_diff(a.value()) < 1e-12);
}

#[test]
fn iblock_gradients_match_finite_differences() {
    for depthwise in [true, false] {
        let mut c = DistConfig::tiny();
        c.integration.tconv_depthwise = depthwise;
        let mut m = model(c);
        fill(&mut m.store, "integ.block1.", randn);
        only_trainable(&mut m.store, "integ.block1.");
        let config = m.config.clone();
        let x = Var::constant(randn(&[2, 5, 4], 18));
        let report = grad_check(
            &mut m.store,
            |tape, store| {
                let ctx = Ctx::new(tape, store, config.ln_eps);
                Ok(tape.sum_all(&integration::iblock(&ctx, &config, 1, &x).map_err(oracle)?))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "depthwise {depthwise}: {report:?}");
    }
}

// ---- head ----

fn unit_table(rows: &[&[f64]]) -> Tensor {
    let d = rows[0].len();
    Tensor::new(&[rows.len(), d], rows.concat()).unwrap()
}

#[test]
fn class_token_pooling() {
    let tape = Tape::new();
    let x = randn(&[1, 5, 4], 19);
    let pooled = head::pool(&tape, &Var::constant(x.clone()), dist_core::Pooling::ClsToken).unwrap();
    assert_eq!(pooled.data(), &x.data()[..4]);

    let frame = randn(&[1, 5, 4], 20).index_leading(0);
    let constant = Tensor::stack(&[frame.clone(), frame.clone(), frame.clone()]).unwrap();
    let pooled = head::pool(&tape, &Var::constant(constant), dist_core::Pooling::ClsToken).unwrap();
    for (a, b) in pooled.data().iter().zip(&frame.data()[..4]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn embeddings_have_unit_norm() {
    let m = model(DistConfig::tiny());
    let f = m.encode_spatial(&randn(&[2, 8, 8, 3], 21)).unwrap();
    let dense = randn(&[4, 8, 8, 3], 22);
    let out = m
        .forward(&Tape::new(), dist_core::ClipInput { spatial: &f, dense: Some(&dense) })
        .unwrap();
    let norm: f64 = out.embedding.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-6);
}

#[test]
fn uniform_similarity_loss_is_log_m() {
    let tape = Tape::new();
    let y = Var::constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
    let table = Var::constant(unit_table(&[&[0.0, 1.0], &[0.0, -1.0], &[0.0, 1.0]]));
    let loss = head::contrastive_loss(&tape, &y, &table, 1, 0.07).unwrap();
    assert!((loss.data()[0] - 3f64.ln()).abs() < 1e-9);
}

#[test]
fn confident_loss_matches_closed_form() {
    let tape = Tape::new();
    let y = Var::constant(Tensor::new(&[3], vec![1.0, 0.0, 0.0]).unwrap());
    let table = Var::constant(unit_table(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]));
    let loss = head::contrastive_loss(&tape, &y, &table, 0, 0.07).unwrap().data()[0];
    let want = (1.0 + 2.0 * (-1.0f64 / 0.07).exp()).ln();
    assert!((loss - want).abs() < 1e-15);
    assert!((loss - 1.25e-6).abs() < 0.01e-6);
}

#[test]
fn loss_gradient_wrt_embedding() {
    let mut store = ParamStore::new();
    let y = store.add("y", randn(&[4], 23), false).unwrap();
    let table = head::label_table(3, 4, 1);
    let report = grad_check(
        &mut store,
        |tape, s| {
            let yv = tape.param(s, y);
            head::contrastive_loss(tape, &yv, &Var::constant(table.clone()), 2, 0.07).map_err(oracle)
        },
        GradCheckOptions { tolerance: 1e-5, ..GradCheckOptions::default() },
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn predict_examples() {
    let table = head::label_table(4, 6, 3);
    let u2 = table.index_leading(2);
    assert_eq!(head::predict(u2.data(), &table).unwrap(), 2);
    let one = head::label_table(1, 6, 3);
    assert_eq!(head::predict(randn(&[6], 24).data(), &one).unwrap(), 0);
    let ties = unit_table(&[&[1.0, 0.0], &[1.0, 0.0]]);
    assert_eq!(head::predict(&[1.0, 0.0], &ties).unwrap(), 0);
    assert!(matches!(
        head::predict(&[1.0], &Tensor::zeros(&[0, 1])),
        Err(dist_core::CoreError::Config(_))
    ));
}

#[test]
fn vote_averaging() {
    let p = vec![0.2, 0.7, 0.1];
    let (k, avg) = head::average_votes(&[p.clone(), p.clone(), p.clone()]).unwrap();
    assert_eq!(k, 1);
    for (a, b) in avg.iter().zip(&p) {
        assert!((a - b).abs() < 1e-15);
    }
    let a = vec![0.8, 0.2];
    let b = vec![0.2, 0.8];
    assert_eq!(head::average_votes(&[a.clone(), b, a]).unwrap().0, 0);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-6);
        v.into_iter().map(|x| x / n).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn predict_ignores_temperature(
            y in prop::collection::vec(-1.0f64..1.0, 5),
            seed in 0u64..1000,
            tau in 0.001f64..10.0,
        ) {
            let y = unit(y);
            let table = head::label_table(4, 5, seed);
            let tape = Tape::new();
            let logits = head::logits(&tape, &Var::constant(Tensor::new(&[5], y.clone()).unwrap()), &Var::constant(table.clone()), tau).unwrap();
            let mut best = 0;
            for (i, v) in logits.data().iter().enumerate() {
                if *v > logits.data()[best] { best = i; }
            }
            prop_assert_eq!(best, head::predict(&y, &table).unwrap());
        }

        #[test]
        fn loss_respects_lower_bound(
            y in prop::collection::vec(-1.0f64..1.0, 5),
            seed in 0u64..1000,
            label in 0usize..4,
            tau in 0.05f64..2.0,
        ) {
            let y = unit(y);
            let table = head::label_table(4, 5, seed);
            let tape = Tape::new();
            let loss = head::contrastive_loss(&tape, &Var::constant(Tensor::new(&[5], y).unwrap()), &Var::constant(table), label, tau).unwrap();
            let bound = (1.0 + 3.0 * (-2.0 / tau).exp()).ln();
            prop_assert!(loss.data()[0] >= bound - 1e-12);
        }
    }
}
