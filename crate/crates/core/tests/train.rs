use pic_core::geometry::{PointCloud, Sampling};
use pic_core::tokenize::{joint_sample, make_mask, MaskMode};
use pic_core::train::{self, LossKind, PairBatch, Schedule, TrainOptions, TrainState};
use pic_core::{rng, Model, ModelConfig, Variant};
use proptest::prelude::*;
use rand::Rng as _;

fn cloud(seed: u64) -> PointCloud {
    let mut r = rng::seeded(seed);
    PointCloud::new((0..64).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect()).unwrap()
}

fn batch(cfg: &ModelConfig, seed: u64, len: usize) -> Vec<PairBatch> {
    let js = |a, b| joint_sample(&cloud(a), &cloud(b), cfg.n_patches, cfg.patch_size, Sampling::Fps, 0).unwrap();
    (0..len as u64)
        .map(|i| {
            let s = seed * 100 + 4 * i;
            PairBatch { prompt: js(s, s + 1), query: js(s + 2, s + 3) }
        })
        .collect()
}

fn state(variant: Variant, lr: f64, seed: u64) -> TrainState<f32> {
    let model = Model::<f32>::new(ModelConfig::tiny(variant), seed).unwrap();
    TrainState::new(model, TrainOptions::new(Schedule::new(lr, 40)), seed)
}

proptest! {
    #[test]
    fn schedule_matches_closed_form(base in 1e-5f64..1e-2, total in 1u64..5000, frac in 0.0f64..1.2) {
        let s = Schedule::new(base, total);
        let step = (frac * total as f64) as u64;
        let warm = (0.05 * total as f64).floor() as u64;
        let want = if step < warm {
            base * step as f64 / warm as f64
        } else if total == warm {
            base
        } else {
            let t = (step.min(total) - warm) as f64 / (total - warm) as f64;
            base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        };
        prop_assert!((s.lr_at(step) - want).abs() <= 1e-15 * base);
        prop_assert!(s.lr_at(step) <= base * (1.0 + 1e-12));
    }

    #[test]
    fn masked_loss_is_the_mean_over_included_patches(m in 1usize..6, flags in prop::collection::vec(any::<bool>(), 1..6), seed: u64) {
        prop_assume!(flags.iter().any(|f| *f));
        let mut r = rng::seeded(seed);
        let len = flags.len() * m * 3;
        let pred: Vec<f64> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
        let gt: Vec<f64> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
        let (loss, grad) = train::masked_loss_with_grad(&pred, &gt, m, &flags, LossKind::L2).unwrap();
        let w = m * 3;
        let pts = |v: &[f64]| v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
        let mut want = 0.0;
        for (k, _) in flags.iter().enumerate().filter(|(_, f)| **f) {
            want += pic_core::geometry::chamfer(&pts(&pred[k * w..(k + 1) * w]), &pts(&gt[k * w..(k + 1) * w]), pic_core::geometry::ChamferNorm::L2).unwrap();
        }
        want /= flags.iter().filter(|f| **f).count() as f64;
        prop_assert!((loss - want).abs() <= 1e-12 * want.max(1.0));
        for (k, f) in flags.iter().enumerate() {
            if !*f {
                prop_assert!(grad[k * w..(k + 1) * w].iter().all(|g| *g == 0.0));
            }
        }
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let mut s = state(Variant::Sep, 0.0, 1);
    let before = s.model.params().clone();
    s.train_step(&batch(s.model.config(), 1, 2)).unwrap();
    assert_eq!(s.model.params(), &before);
    assert_eq!(s.step, 1);
}

#[test]
fn training_is_deterministic() {
    for variant in [Variant::Sep, Variant::Cat] {
        let run = || {
            let mut s = state(variant, 1e-3, 2);
            let losses: Vec<u64> = (0..3).map(|k| s.train_step(&batch(s.model.config(), k, 2)).unwrap().to_bits()).collect();
            (losses, s.model.params().clone())
        };
        assert_eq!(run(), run());
    }
}

#[test]
fn repeated_steps_reduce_the_loss() {
    for variant in [Variant::Sep, Variant::Cat] {
        let mut s = state(variant, 5e-3, 3);
        let cfg = s.model.config().clone();
        let b = batch(&cfg, 9, 2);
        let masks: Vec<_> =
            (0..2).map(|i| make_mask(variant, cfg.n_patches, cfg.mask_ratio, MaskMode::Train, i).unwrap()).collect();
        let eval = |s: &TrainState<f32>| -> f32 { b.iter().zip(&masks).map(|(p, m)| s.pair_loss(p, m, 1.0, None).unwrap()).sum() };
        let first = eval(&s);
        for _ in 0..30 {
            s.train_step(&b).unwrap();
        }
        let last = eval(&s);
        assert!(last < 0.7 * first, "{variant:?}: {first} -> {last}");
    }
}

#[test]
fn empty_batch_is_rejected() {
    let mut s = state(Variant::Sep, 1e-3, 0);
    assert!(s.train_step(&[]).is_err());
    assert_eq!(s.step, 0);
}
