//! Times training steps for the desk configuration.

use std::time::Instant;

use pic_core::geometry::{PointCloud, Sampling};
use pic_core::rng;
use pic_core::tokenize::joint_sample;
use pic_core::train::{PairBatch, Schedule, TrainOptions, TrainState};
use pic_core::{Model, ModelConfig, Variant};
use rand::Rng as _;

fn cloud(seed: u64) -> PointCloud {
    let mut r = rng::seeded(seed);
    PointCloud::new((0..1024).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect()).unwrap()
}

fn main() {
    for variant in [Variant::Sep, Variant::Cat] {
        let cfg = ModelConfig::desk(variant);
        let model = Model::<f32>::new(cfg.clone(), 0).unwrap();
        let opts = TrainOptions::new(Schedule::new(1e-3, 100));
        let mut state = TrainState::new(model, opts, 0);
        let pair = |s| PairBatch {
            prompt: joint_sample(&cloud(s), &cloud(s + 1), cfg.n_patches, cfg.patch_size, Sampling::Fps, 0).unwrap(),
            query: joint_sample(&cloud(s + 2), &cloud(s + 3), cfg.n_patches, cfg.patch_size, Sampling::Fps, 0).unwrap(),
        };
        let batch: Vec<_> = (0..8).map(|i| pair(i * 10)).collect();
        let t = Instant::now();
        let steps = 3;
        for _ in 0..steps {
            state.train_step(&batch).unwrap();
        }
        let per = t.elapsed().as_secs_f64() / (steps * batch.len()) as f64;
        println!("{}: {:.1} ms per pair, {} params", variant.name(), per * 1e3, cfg.param_count());
    }
}
