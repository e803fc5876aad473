//! Shared fixtures: a tiny corpus and a fast config.

use std::path::Path;

use pic::config::{parse_config, RunConfig};
use pic::synth;

/// Dims small enough for a debug-speed step.
pub const SMALL_CONFIG: &str = r#"{
  "n_points": 512,
  "n_patches": 8,
  "patch_size": 16,
  "model": {"dim": 16, "enc_depth": 1, "dec_depth": 1, "heads": 2, "merge_block": 1,
            "mlp_ratio": 2, "embed_hidden": 8, "pos_hidden": 8},
  "optimizer": {"epochs": 2, "batch_size": 4},
  "checkpoint_every": 1
}"#;

pub fn small_config(seed: u64) -> RunConfig {
    parse_config(SMALL_CONFIG).unwrap().resolve(Some(seed)).unwrap()
}

/// Two shapes per category, ten sources in total.
pub fn corpus(dir: &Path) {
    synth::write_corpus(dir, 2, 1024, 3).unwrap();
}
