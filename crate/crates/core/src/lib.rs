//! Point-cloud in-context learning core.
//!
//! Everything in this crate is a pure function of its arguments plus explicit
//! seeds: point-set geometry, the four-task sample generators, the joint
//! patch sampler and masking, a small pre-norm transformer with hand-written
//! backward passes, the masked Chamfer objective with AdamW, and the
//! evaluation metrics. File formats, dataset layout and the command line live
//! in the `pic` crate.
//!
//! The crate is `no_std` and only needs `alloc`. Enable the `std` feature to
//! let the GEMM backend detect SIMD support at runtime.
#![no_std]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

mod error;
pub mod eval;
pub mod geometry;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod taskgen;
pub mod tokenize;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{Point, PointCloud, Rotation, Sampling};
pub use model::{Model, ModelConfig, Variant};
pub use taskgen::{LabelCodebook, PromptPair, Task, TaskSample};
pub use tokenize::{MaskMode, MaskPlan, PatchBatch};
