//! File formats, dataset construction, checkpoints, the training loop, the
//! benchmark harness and plots for the point-cloud in-context learner. The
//! numerical core lives in `pic_core`.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod io;
pub mod plot;
pub mod synth;
pub mod trainer;

pub use pic_core as core;
