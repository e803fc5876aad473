use super::*;
use crate::geometry::{PointCloud, Sampling};
use crate::tokenize::{joint_sample, make_mask, MaskMode};
use rand::Rng as _;

fn cloud(seed: u64, n: usize) -> PointCloud {
    let mut r = rng::seeded(seed);
    PointCloud::new((0..n).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect())
        .unwrap()
}

fn batch(seed: u64, cfg: &ModelConfig) -> PatchBatch {
    let n = (cfg.n_patches * cfg.patch_size).max(64);
    joint_sample(&cloud(seed, n), &cloud(seed + 1000, n), cfg.n_patches, cfg.patch_size, Sampling::Fps, 0).unwrap()
}

fn max_abs_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x - *y).abs().to_f64().unwrap()).fold(0.0, f64::max)
}

#[test]
fn param_count_matches_closed_form() {
    for variant in [Variant::Sep, Variant::Cat] {
        for cfg in [ModelConfig::tiny(variant), ModelConfig::desk(variant), ModelConfig { role_embedding: true, ..ModelConfig::desk(variant) }] {
            let m = Model::<f32>::new(cfg.clone(), 1).unwrap();
            assert_eq!(m.params().numel(), cfg.param_count());
            let again = Model::<f32>::new(cfg.clone(), 2).unwrap();
            for id in m.params().ids() {
                assert_eq!(m.params().shape(id), again.params().shape(id));
                assert_eq!(m.params().name(id), again.params().name(id));
            }
        }
    }
    assert_eq!(ModelConfig::full(Variant::Sep).param_count(), Model::<f32>::new(ModelConfig::full(Variant::Sep), 0).unwrap().params().numel());
}

#[test]
fn config_validation() {
    let mut c = ModelConfig::desk(Variant::Sep);
    c.merge_block = 4;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::desk(Variant::Sep);
    c.heads = 3;
    assert!(c.validate().is_err());
    assert!(Model::<f32>::new(c, 0).is_err());
}

#[test]
fn with_params_checks_layout() {
    let cfg = ModelConfig::tiny(Variant::Cat);
    let m = Model::<f64>::new(cfg.clone(), 3).unwrap();
    let again = Model::with_params(cfg.clone(), m.params().clone()).unwrap();
    assert_eq!(again.params(), m.params());
    let other = Model::<f64>::new(ModelConfig { role_embedding: true, ..cfg.clone() }, 3).unwrap();
    assert!(Model::with_params(cfg, other.into_params()).is_err());
}

#[test]
fn patch_embedding_properties() {
    let cfg = ModelConfig::desk(Variant::Sep);
    let m = Model::<f64>::new(cfg.clone(), 5).unwrap();
    let b = batch(1, &cfg);
    let patch = b.input_patch(3).to_vec();
    let mut shuffled = patch.clone();
    shuffled.reverse();
    shuffled.swap(0, 7);
    let e1 = m.embed_patch(&patch).unwrap();
    let e2 = m.embed_patch(&shuffled).unwrap();
    assert!(max_abs_diff(&e1, &e2) < 1e-6);
    let zero = m.embed_patch(&vec![[0.0; 3]; cfg.patch_size]).unwrap();
    assert!(zero.iter().all(|x| x.is_finite()));
    let other = m.embed_patch(b.input_patch(10)).unwrap();
    assert!(max_abs_diff(&e1, &other) > 1e-4);
    assert!(m.embed_patch(&patch[..5]).is_err());
}

#[test]
fn position_embedding_properties() {
    let m = Model::<f64>::new(ModelConfig::desk(Variant::Cat), 6).unwrap();
    let c = [0.1, -0.2, 0.3];
    assert_eq!(m.embed_position(c), m.embed_position(c));
    let h = 1e-4;
    let plus = m.embed_position([c[0] + h, c[1], c[2]]);
    let minus = m.embed_position([c[0] - h, c[1], c[2]]);
    let sens: f64 = plus.iter().zip(&minus).map(|(a, b)| ((a - b) / (2.0 * h)).abs()).sum();
    assert!(sens > 1e-3, "positional embedding is insensitive: {sens}");
}

#[test]
fn head_properties() {
    let cfg = ModelConfig::tiny(Variant::Sep);
    let mut m = Model::<f64>::new(cfg.clone(), 7).unwrap();
    let center = [0.5, -0.25, 1.0];
    let f: Vec<f64> = (0..cfg.dim).map(|i| (i as f64 * 0.37).sin()).collect();
    let out = m.decode_head(&f, center).unwrap();
    assert_eq!(out.len(), cfg.patch_size);
    let zero = m.decode_head(&vec![0.0; cfg.dim], center).unwrap();
    let scaled: Vec<f64> = f.iter().map(|x| 2.5 * x).collect();
    let out_scaled = m.decode_head(&scaled, center).unwrap();
    for j in 0..cfg.patch_size {
        for k in 0..3 {
            assert!(((out_scaled[j][k] - zero[j][k]) - 2.5 * (out[j][k] - zero[j][k])).abs() < 1e-12);
        }
    }
    let head_w = m.params().find("head.weight").unwrap();
    let len = m.params().get(head_w).len();
    m.params_mut().set(head_w, vec![0.0; len]).unwrap();
    let copies = m.decode_head(&vec![0.0; cfg.dim], center).unwrap();
    assert!(copies.iter().all(|p| *p == center));
    assert!(m.decode_head(&[0.0; 3], center).is_err());
}

fn leakage_check(variant: Variant, mode: MaskMode) {
    let cfg = ModelConfig::tiny(variant);
    let m = Model::<f64>::new(cfg.clone(), 11).unwrap();
    let (prompt, query) = (batch(20, &cfg), batch(30, &cfg));
    let mask = make_mask(variant, cfg.n_patches, cfg.mask_ratio, mode, 4).unwrap();
    let base = m.forward(&prompt, &query, &mask).unwrap();
    assert_eq!(base.slots, mask.masked_slots());
    let n = cfg.n_patches;
    let mut r = rng::seeded(99);
    for _ in 0..20 {
        let (mut p2, mut q2) = (prompt.clone(), query.clone());
        for s in mask.masked_slots() {
            let seg = Segment::of_slot(s, n);
            if !seg.is_target() {
                continue;
            }
            let b = if seg.is_prompt() { &mut p2 } else { &mut q2 };
            let p = s % n;
            b.target_centers[p] = [r.random(), r.random(), r.random()];
            for q in &mut b.target_patches[p * cfg.patch_size..(p + 1) * cfg.patch_size] {
                *q = [r.random_range(-5.0..5.0), r.random(), r.random()];
            }
        }
        let out = m.forward(&p2, &q2, &mask).unwrap();
        assert!(max_abs_diff(&base.points, &out.points) < 1e-12);
    }
}

#[test]
fn masked_targets_do_not_leak() {
    leakage_check(Variant::Sep, MaskMode::Train);
    leakage_check(Variant::Sep, MaskMode::Infer);
    leakage_check(Variant::Cat, MaskMode::Train);
    leakage_check(Variant::Cat, MaskMode::Infer);
}

#[test]
fn prompt_conditions_output() {
    for variant in [Variant::Sep, Variant::Cat] {
        let cfg = ModelConfig::tiny(variant);
        let m = Model::<f64>::new(cfg.clone(), 12).unwrap();
        let query = batch(40, &cfg);
        let mask = make_mask(variant, cfg.n_patches, 0.0, MaskMode::Infer, 0).unwrap();
        let a = m.forward(&batch(41, &cfg), &query, &mask).unwrap();
        let b = m.forward(&batch(42, &cfg), &query, &mask).unwrap();
        assert_eq!(a.slots, (3 * cfg.n_patches..4 * cfg.n_patches).collect::<Vec<_>>());
        assert_eq!(a.points.len(), cfg.n_patches * cfg.patch_size * 3);
        assert!(max_abs_diff(&a.points, &b.points) > 1e-9);
    }
}

#[test]
fn shape_errors() {
    let cfg = ModelConfig::tiny(Variant::Sep);
    let m = Model::<f64>::new(cfg.clone(), 1).unwrap();
    let good = batch(1, &cfg);
    let other = ModelConfig { n_patches: 5, ..cfg.clone() };
    let bad = batch(1, &other);
    let mask = make_mask(Variant::Sep, 4, 0.5, MaskMode::Train, 0).unwrap();
    assert!(m.forward(&good, &bad, &mask).is_err());
    // a cat-style mask that hides input tokens is rejected by sep
    let cat_mask = MaskPlan { n_patches: 4, mode: MaskMode::Train, masked: (0..16).map(|i| i == 0).collect() };
    assert!(m.forward(&good, &good, &cat_mask).is_err());
    assert!(m.forward_cat(&good, &good, &mask).is_err());
    assert!(m.forward_sep(&good, &good, &mask).is_ok());
}

/// Central finite differences on a linear functional of the predictions.
fn gradient_check(variant: Variant, role: bool) {
    let cfg = ModelConfig { role_embedding: role, ..ModelConfig::tiny(variant) };
    let mut m = Model::<f64>::new(cfg.clone(), 21).unwrap();
    let (prompt, query) = (batch(50, &cfg), batch(60, &cfg));
    let mask = make_mask(variant, cfg.n_patches, 0.5, MaskMode::Train, 8).unwrap();
    let (preds, cache) = m.forward_train(&prompt, &query, &mask).unwrap();
    let mut r = rng::seeded(5);
    let w: Vec<f64> = (0..preds.points.len()).map(|_| r.random_range(-1.0..1.0)).collect();
    let objective = |m: &Model<f64>| -> f64 { m.forward(&prompt, &query, &mask).unwrap().points.iter().zip(&w).map(|(a, b)| a * b).sum() };
    let mut grads = m.params().zeros_like();
    m.backward(&cache, &w, &mut grads).unwrap();
    let h = 1e-5;
    let ids: Vec<_> = m.params().ids().collect();
    let mut worst = 0.0f64;
    for id in ids {
        let len = m.params().get(id).len();
        for k in (0..len).step_by((len / 3).max(1)) {
            let orig = m.params().get(id)[k];
            m.params_mut().get_mut(id)[k] = orig + h;
            let up = objective(&m);
            m.params_mut().get_mut(id)[k] = orig - h;
            let down = objective(&m);
            m.params_mut().get_mut(id)[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads.get(id)[k];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(err);
            assert!(err < 1e-4, "{} [{k}]: fd {fd} vs analytic {an}", m.params().name(id));
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn gradients_match_finite_differences() {
    gradient_check(Variant::Sep, false);
    gradient_check(Variant::Cat, false);
    gradient_check(Variant::Sep, true);
    gradient_check(Variant::Cat, true);
}

#[test]
fn gelu_matches_the_tanh_form() {
    let xs: Vec<f64> = (-400..=400).map(|i| i as f64 / 40.0).collect();
    let ys = layers::gelu(&xs);
    let dys = layers::gelu_backward(&xs, &vec![1.0; xs.len()]);
    let c = (2.0 / core::f64::consts::PI).sqrt();
    let reference = |x: f64| 0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh());
    for ((&x, &y), &dy) in xs.iter().zip(&ys).zip(&dys) {
        assert!((y - reference(x)).abs() < 1e-14, "gelu({x})");
        let h = 1e-6;
        let fd = (reference(x + h) - reference(x - h)) / (2.0 * h);
        assert!((dy - fd).abs() < 1e-8, "gelu'({x}): {dy} vs {fd}");
    }
    // saturated tails stay finite
    assert_eq!(layers::gelu(&[-1e4f32])[0], 0.0);
    assert!(layers::gelu_backward(&[-1e4f32, 1e4], &[1.0, 1.0]).iter().all(|d| d.is_finite()));
}
