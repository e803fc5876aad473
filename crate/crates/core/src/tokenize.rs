//! Joint sampling and token masking.
//!
//! Centers are sampled once, from the input cloud, and the same index list
//! patches the target. Token `p` of the input sequence and token `p` of the
//! target sequence therefore describe the same surface region, and a masked
//! target token can borrow its input partner's center for its position.

use alloc::vec::Vec;

use crate::geometry::{self, sub, Point, PointCloud, Sampling};
use crate::model::Variant;
use crate::rng;
use crate::{Error, Result};
#[allow(unused_imports)]
use num_traits::Float as _;

/// Aligned patch sequences for one (input, target) pair.
///
/// Patch points are stored relative to their own center.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    pub n_patches: usize,
    pub patch_size: usize,
    /// Shared by both clouds.
    pub center_indices: Vec<usize>,
    /// `n_patches * patch_size` source indices into the input cloud, patch-major.
    pub input_neighbors: Vec<usize>,
    pub input_patches: Vec<Point>,
    pub target_patches: Vec<Point>,
    pub input_centers: Vec<Point>,
    pub target_centers: Vec<Point>,
}

impl PatchBatch {
    fn patch(data: &[Point], m: usize, p: usize) -> &[Point] {
        &data[p * m..(p + 1) * m]
    }

    pub fn input_patch(&self, p: usize) -> &[Point] {
        Self::patch(&self.input_patches, self.patch_size, p)
    }

    pub fn target_patch(&self, p: usize) -> &[Point] {
        Self::patch(&self.target_patches, self.patch_size, p)
    }

    /// Target patch `p` in absolute coordinates.
    pub fn target_patch_abs(&self, p: usize) -> Vec<Point> {
        let c = self.target_centers[p];
        self.target_patch(p).iter().map(|q| geometry::add(*q, c)).collect()
    }

    pub fn input_patch_abs(&self, p: usize) -> Vec<Point> {
        let c = self.input_centers[p];
        self.input_patch(p).iter().map(|q| geometry::add(*q, c)).collect()
    }
}

fn group(pc: &PointCloud, centers: &[usize], m: usize) -> Result<(Vec<usize>, Vec<Point>, Vec<Point>)> {
    let neighbors = geometry::knn_indices(pc, centers, m)?;
    let mut flat = Vec::with_capacity(centers.len() * m);
    let mut rel = Vec::with_capacity(centers.len() * m);
    let mut ctr = Vec::with_capacity(centers.len());
    for (&c, idx) in centers.iter().zip(&neighbors) {
        let center = pc[c];
        ctr.push(center);
        for &i in idx {
            flat.push(i);
            rel.push(sub(pc[i], center));
        }
    }
    Ok((flat, rel, ctr))
}

/// Samples `n` centers from `input` and groups `m`-point neighbourhoods in
/// both clouds around the shared indices.
pub fn joint_sample(
    input: &PointCloud,
    target: &PointCloud,
    n: usize,
    m: usize,
    strategy: Sampling,
    seed: u64,
) -> Result<PatchBatch> {
    if input.len() != target.len() {
        return Err(Error::LengthMismatch { what: "input vs target", left: input.len(), right: target.len() });
    }
    if m == 0 || m > input.len() {
        return Err(Error::TooMany { requested: m, available: input.len() });
    }
    let centers = geometry::sample_centers(input, n, strategy, seed)?;
    let (input_neighbors, input_patches, input_centers) = group(input, &centers, m)?;
    let (_, target_patches, target_centers) = group(target, &centers, m)?;
    Ok(PatchBatch {
        n_patches: n,
        patch_size: m,
        center_indices: centers,
        input_neighbors,
        input_patches,
        target_patches,
        input_centers,
        target_centers,
    })
}

/// Patches a query whose target is unknown. The target slots mirror the
/// input; they are always masked at inference and never read.
pub fn query_only(input: &PointCloud, n: usize, m: usize, strategy: Sampling, seed: u64) -> Result<PatchBatch> {
    joint_sample(input, input, n, m, strategy, seed)
}

/// The four token segments, in sequence order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    PromptInput = 0,
    PromptTarget = 1,
    QueryInput = 2,
    QueryTarget = 3,
}

impl Segment {
    pub const ALL: [Segment; 4] = [Segment::PromptInput, Segment::PromptTarget, Segment::QueryInput, Segment::QueryTarget];

    pub fn of_slot(slot: usize, n: usize) -> Self {
        Self::ALL[slot / n]
    }

    pub fn is_target(self) -> bool {
        matches!(self, Segment::PromptTarget | Segment::QueryTarget)
    }

    pub fn is_prompt(self) -> bool {
        matches!(self, Segment::PromptInput | Segment::PromptTarget)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Train,
    Infer,
}

/// Masked flags over the canonical `4N` token order
/// `[prompt input | prompt target | query input | query target]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub n_patches: usize,
    pub mode: MaskMode,
    pub masked: Vec<bool>,
}

impl MaskPlan {
    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|m| **m).count()
    }

    pub fn masked_slots(&self) -> Vec<usize> {
        self.masked.iter().enumerate().filter_map(|(i, m)| m.then_some(i)).collect()
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }
}

/// Number of positions masked for `ratio` over `maskable` tokens.
pub fn mask_count(ratio: f64, maskable: usize) -> usize {
    // the epsilon absorbs representation error such as 0.29 * 100 = 28.999…
    (((ratio * maskable as f64) + 1e-9).floor() as usize).min(maskable)
}

/// Builds a mask over the `4n` token sequence.
///
/// Training masks `⌊ratio · 2n⌋` target tokens for [`Variant::Sep`] and
/// `⌊ratio · 4n⌋` tokens anywhere for [`Variant::Cat`]. Inference masks the
/// query-target block for both.
pub fn make_mask(variant: Variant, n: usize, ratio: f64, mode: MaskMode, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument("mask ratio must lie in [0, 1)".into()));
    }
    let mut masked = alloc::vec![false; 4 * n];
    match mode {
        MaskMode::Infer => masked[3 * n..].iter_mut().for_each(|m| *m = true),
        MaskMode::Train => {
            let pool: Vec<usize> = match variant {
                Variant::Sep => (n..2 * n).chain(3 * n..4 * n).collect(),
                Variant::Cat => (0..4 * n).collect(),
            };
            let k = mask_count(ratio, pool.len());
            let mut r = rng::seeded(seed);
            for i in rand::seq::index::sample(&mut r, pool.len(), k) {
                masked[pool[i]] = true;
            }
        }
    }
    Ok(MaskPlan { n_patches: n, mode, masked })
}
