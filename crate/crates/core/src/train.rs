//! Masked-patch Chamfer objective, learning-rate schedule, AdamW and the
//! single-writer training step.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::Point;
use crate::linalg::Real;
use crate::model::{Model, ParamStore, Predictions};
use crate::tokenize::{self, MaskMode, PatchBatch, Segment};
use crate::{rng, Error, Result};
#[allow(unused_imports)]
use num_traits::Float as _;

/// Which Chamfer form the objective uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LossKind {
    #[default]
    L2,
    L1,
    L1L2,
}

/// Chamfer distance between two flat `k x 3` point buffers and its gradient
/// with respect to `pred`. Reduced by `|pred| + |gt|` like
/// [`crate::geometry::chamfer`].
pub fn patch_chamfer<T: Real>(pred: &[T], gt: &[T], kind: LossKind) -> (T, Vec<T>) {
    let (np, ng) = (pred.len() / 3, gt.len() / 3);
    let mut d2 = vec![T::zero(); np * ng];
    for i in 0..np {
        for j in 0..ng {
            let mut s = T::zero();
            for a in 0..3 {
                let t = pred[i * 3 + a] - gt[j * 3 + a];
                s += t * t;
            }
            d2[i * ng + j] = s;
        }
    }
    let argmin = |vals: &mut dyn Iterator<Item = (usize, T)>| {
        let mut best = (0usize, T::infinity());
        for (k, v) in vals {
            if v < best.1 {
                best = (k, v);
            }
        }
        best
    };
    let nearest_g: Vec<(usize, T)> = (0..np).map(|i| argmin(&mut (0..ng).map(|j| (j, d2[i * ng + j])))).collect();
    let nearest_p: Vec<(usize, T)> = (0..ng).map(|j| argmin(&mut (0..np).map(|i| (i, d2[i * ng + j])))).collect();
    let z = T::from_usize(np + ng).unwrap();
    let two = T::lit(2.0);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); pred.len()];
    let mut add = |i: usize, j: usize, dist2: T| {
        let (use_l2, use_l1) = match kind {
            LossKind::L2 => (true, false),
            LossKind::L1 => (false, true),
            LossKind::L1L2 => (true, true),
        };
        let mut coef = T::zero();
        if use_l2 {
            loss += dist2;
            coef += two;
        }
        if use_l1 {
            let dist = dist2.sqrt();
            loss += dist;
            if dist > T::zero() {
                coef += T::one() / dist;
            }
        }
        for a in 0..3 {
            grad[i * 3 + a] += coef * (pred[i * 3 + a] - gt[j * 3 + a]) / z;
        }
    };
    for (i, &(j, d)) in nearest_g.iter().enumerate() {
        add(i, j, d);
    }
    for (j, &(i, d)) in nearest_p.iter().enumerate() {
        add(i, j, d);
    }
    (loss / z, grad)
}

/// Absolute ground-truth patches for the given slots, flattened.
pub fn ground_truth<T: Real>(prompt: &PatchBatch, query: &PatchBatch, slots: &[usize]) -> Vec<T> {
    let n = prompt.n_patches;
    let mut out = Vec::with_capacity(slots.len() * prompt.patch_size * 3);
    for &s in slots {
        let seg = Segment::of_slot(s, n);
        let b = if seg.is_prompt() { prompt } else { query };
        let patch: Vec<Point> = if seg.is_target() { b.target_patch_abs(s % n) } else { b.input_patch_abs(s % n) };
        out.extend(patch.iter().flatten().map(|&x| T::from_f64(x).unwrap_or_else(T::nan)));
    }
    out
}

/// Mean per-token Chamfer between predicted and ground-truth patches, with
/// the gradient with respect to the predictions. Tokens whose `include`
/// flag is false contribute nothing.
pub fn masked_loss_with_grad<T: Real>(
    pred: &[T],
    gt: &[T],
    patch_size: usize,
    include: &[bool],
    kind: LossKind,
) -> Result<(T, Vec<T>)> {
    let w = patch_size * 3;
    if pred.len() != gt.len() || pred.len() != include.len() * w {
        return Err(Error::LengthMismatch { what: "predictions vs ground truth", left: pred.len(), right: gt.len() });
    }
    let count = include.iter().filter(|x| **x).count();
    if count == 0 {
        return Err(Error::NoMaskedTokens);
    }
    let inv = T::one() / T::from_usize(count).unwrap();
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); pred.len()];
    for (k, _) in include.iter().enumerate().filter(|(_, x)| **x) {
        let (l, g) = patch_chamfer(&pred[k * w..(k + 1) * w], &gt[k * w..(k + 1) * w], kind);
        loss += l * inv;
        for (a, b) in grad[k * w..(k + 1) * w].iter_mut().zip(g) {
            *a = b * inv;
        }
    }
    Ok((loss, grad))
}

/// Mean Chamfer over all masked tokens.
pub fn masked_loss<T: Real>(pred: &Predictions<T>, gt: &[T], kind: LossKind) -> Result<T> {
    let include = vec![true; pred.len()];
    Ok(masked_loss_with_grad(&pred.points, gt, pred.patch_size, &include, kind)?.0)
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_frac: f64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(base_lr: f64, total_steps: u64) -> Self {
        Self { base_lr, warmup_frac: 0.05, total_steps }
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_frac * self.total_steps as f64).floor() as u64
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let total = self.total_steps;
        let step = step.min(total);
        let warm = self.warmup_steps();
        if step < warm {
            return self.base_lr * step as f64 / warm as f64;
        }
        if total == warm {
            return self.base_lr;
        }
        let progress = (step - warm) as f64 / (total - warm) as f64;
        0.5 * self.base_lr * (1.0 + (core::f64::consts::PI * progress).cos())
    }
}

pub fn lr_at(step: u64, total_steps: u64, schedule: &Schedule) -> f64 {
    Schedule { total_steps, ..*schedule }.lr_at(step)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only (not biases, norms or
    /// embeddings vectors).
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Which masked tokens feed the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LossScope {
    /// Every masked token, including masked input tokens of the cat variant.
    #[default]
    AllMasked,
    /// Only masked query-target tokens.
    QueryTarget,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainOptions {
    pub schedule: Schedule,
    pub optimizer: AdamW,
    pub loss: LossKind,
    pub scope: LossScope,
}

impl TrainOptions {
    /// Default optimizer, loss and scope under `schedule`.
    pub fn new(schedule: Schedule) -> Self {
        Self { schedule, optimizer: AdamW::default(), loss: LossKind::default(), scope: LossScope::default() }
    }
}

/// Parameters, optimizer moments and counters.
///
/// Mask randomness is a function of `(seed, step, batch position)`, so the
/// state carries no hidden RNG position.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub first_moment: ParamStore<T>,
    pub second_moment: ParamStore<T>,
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
    pub options: TrainOptions,
}

/// One training pair, already joint-sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub prompt: PatchBatch,
    pub query: PatchBatch,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: Model<T>, options: TrainOptions, seed: u64) -> Self {
        let zeros = model.params().zeros_like();
        Self { first_moment: zeros.clone(), second_moment: zeros, model, step: 0, epoch: 0, seed, options }
    }

    /// Mask seed for batch element `index` at the current step.
    pub fn mask_seed(&self, index: usize) -> u64 {
        rng::derive(rng::derive(self.seed, self.step), index as u64)
    }

    /// Loss on one pair under an explicit mask, plus parameter gradients
    /// accumulated into `grads` scaled by `weight`.
    pub fn pair_loss(
        &self,
        pair: &PairBatch,
        mask: &tokenize::MaskPlan,
        weight: T,
        grads: Option<&mut ParamStore<T>>,
    ) -> Result<T> {
        let model = &self.model;
        let (preds, cache) = model.forward_train(&pair.prompt, &pair.query, mask)?;
        let n = model.config().n_patches;
        let include: Vec<bool> = preds
            .slots
            .iter()
            .map(|&s| match self.options.scope {
                LossScope::AllMasked => true,
                LossScope::QueryTarget => Segment::of_slot(s, n) == Segment::QueryTarget,
            })
            .collect();
        let gt = ground_truth::<T>(&pair.prompt, &pair.query, &preds.slots);
        let (loss, mut dpred) = masked_loss_with_grad(&preds.points, &gt, preds.patch_size, &include, self.options.loss)?;
        if let Some(grads) = grads {
            dpred.iter_mut().for_each(|g| *g *= weight);
            model.backward(&cache, &dpred, grads)?;
        }
        Ok(loss)
    }

    /// Forward, masked loss, backward and one AdamW update. Returns the mean
    /// loss over the batch before the update.
    pub fn train_step(&mut self, batch: &[PairBatch]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let cfg = self.model.config().clone();
        let mut grads = self.model.params().zeros_like();
        let weight = T::one() / T::from_usize(batch.len()).unwrap();
        let mut total = 0.0;
        for (i, pair) in batch.iter().enumerate() {
            let mask = tokenize::make_mask(cfg.variant, cfg.n_patches, cfg.mask_ratio, MaskMode::Train, self.mask_seed(i))?;
            let loss = self.pair_loss(pair, &mask, weight, Some(&mut grads))?;
            total += loss.to_f64().unwrap_or(f64::NAN);
        }
        let loss = total / batch.len() as f64;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("loss {loss}, finite grads: {}, lr {}", grads.all_finite(), self.lr()),
            });
        }
        self.apply_gradients(&grads);
        Ok(loss)
    }

    pub fn lr(&self) -> f64 {
        self.options.schedule.lr_at(self.step)
    }

    /// AdamW update at the current step's learning rate, then advances the
    /// step counter.
    pub fn apply_gradients(&mut self, grads: &ParamStore<T>) {
        let lr = self.lr();
        let opt = self.options.optimizer;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - num_traits::Float::powi(opt.beta1, t);
        let bc2 = 1.0 - num_traits::Float::powi(opt.beta2, t);
        let (b1, b2) = (T::lit(opt.beta1), T::lit(opt.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(opt.eps);
        let decay_factor = T::lit(1.0 - lr * opt.weight_decay);
        let ids: Vec<_> = self.model.params().ids().collect();
        for id in ids {
            let decay = self.model.params().shape(id).len() >= 2;
            let g = grads.get(id);
            let m = self.first_moment.get_mut(id);
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + one_b1 * *gi;
            }
            let v = self.second_moment.get_mut(id);
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + one_b2 * *gi * *gi;
            }
            let (m, v) = (self.first_moment.get(id).to_vec(), self.second_moment.get(id));
            let p = self.model.params_mut().get_mut(id);
            for ((pi, mi), vi) in p.iter_mut().zip(&m).zip(v) {
                if lr == 0.0 {
                    continue;
                }
                if decay {
                    *pi *= decay_factor;
                }
                *pi -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        self.step += 1;
    }
}
