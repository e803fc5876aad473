//! In-context inference and the benchmark metrics.

use alloc::vec::Vec;

use crate::geometry::{self, ChamferNorm, PointCloud, Sampling};
use crate::linalg::Real;
use crate::model::Model;
use crate::taskgen::{LabelCodebook, TaskSample};
use crate::tokenize::{self, MaskMode, PatchBatch};
use crate::{Error, Result};

/// Chamfer-ℓ2 scaled by 1000.
pub fn metric_cd(pred: &PointCloud, gt: &PointCloud) -> Result<f64> {
    Ok(geometry::chamfer(pred.points(), gt.points(), ChamferNorm::L2)? * 1000.0)
}

/// The prompt's own target, unchanged.
pub fn copy_baseline(prompt: &TaskSample) -> PointCloud {
    prompt.target.clone()
}

/// Intersection-over-union averaged over the parts present in the ground
/// truth, as a percentage. Slot `i` of `pred` is compared with
/// `gt_labels[i]`; any extra predicted slots are ignored.
pub fn metric_miou(pred: &PointCloud, gt_labels: &[u32], codebook: &LabelCodebook) -> Result<f64> {
    if gt_labels.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if pred.len() < gt_labels.len() {
        return Err(Error::LengthMismatch { what: "predicted slots vs labels", left: pred.len(), right: gt_labels.len() });
    }
    if let Some(&label) = gt_labels.iter().find(|&&l| l as usize >= codebook.size()) {
        return Err(Error::LabelOutOfRange { label, size: codebook.size() });
    }
    let size = codebook.size();
    let mut inter = alloc::vec![0usize; size];
    let mut union = alloc::vec![0usize; size];
    let mut present = alloc::vec![false; size];
    for (p, &g) in pred.iter().zip(gt_labels) {
        let guess = codebook.decode(*p) as usize;
        let g = g as usize;
        present[g] = true;
        if guess == g {
            inter[g] += 1;
            union[g] += 1;
        } else {
            union[g] += 1;
            union[guess] += 1;
        }
    }
    let parts: Vec<usize> = (0..size).filter(|&l| present[l]).collect();
    let sum: f64 = parts.iter().map(|&l| inter[l] as f64 / union[l] as f64).sum();
    Ok(100.0 * sum / parts.len() as f64)
}

/// Ground-truth labels rearranged into prediction-slot order: slot
/// `p * M + j` holds the label of the `j`-th neighbour of center `p`.
pub fn slot_labels(query: &PatchBatch, labels: &[u32]) -> Result<Vec<u32>> {
    query
        .input_neighbors
        .iter()
        .map(|&i| labels.get(i).copied().ok_or(Error::IndexOutOfRange { index: i, len: labels.len() }))
        .collect()
}

/// Output of [`infer_detailed`].
#[derive(Debug, Clone)]
pub struct Inference {
    /// Union of the `N x M` decoded query-target patches, patch-major.
    pub prediction: PointCloud,
    pub query: PatchBatch,
}

/// Predicts the query's target under the prompt pair. The output is the raw
/// union of all decoded patches (`N * M` points, overlapping).
pub fn infer<T: Real>(model: &Model<T>, prompt: &TaskSample, query_input: &PointCloud, sampling: Sampling, seed: u64) -> Result<PointCloud> {
    Ok(infer_detailed(model, prompt, query_input, sampling, seed)?.prediction)
}

pub fn infer_detailed<T: Real>(
    model: &Model<T>,
    prompt: &TaskSample,
    query_input: &PointCloud,
    sampling: Sampling,
    seed: u64,
) -> Result<Inference> {
    let cfg = model.config();
    let (n, m) = (cfg.n_patches, cfg.patch_size);
    let prompt_batch = tokenize::joint_sample(&prompt.input, &prompt.target, n, m, sampling, seed)?;
    let query = tokenize::query_only(query_input, n, m, sampling, seed)?;
    let mask = tokenize::make_mask(cfg.variant, n, 0.0, MaskMode::Infer, seed)?;
    let preds = model.forward(&prompt_batch, &query, &mask)?;
    let mut points = Vec::with_capacity(n * m);
    for k in 0..preds.len() {
        points.extend(preds.patch_points(k));
    }
    Ok(Inference { prediction: PointCloud::new(points)?, query })
}
