//! The four in-context tasks: sample generators, the part-label codebook,
//! augmentation and prompt selection.
//!
//! Every generator keeps input and target at the same length with slot `i`
//! of the input describing the same surface point as slot `i` of the target.
//! The joint sampler relies on this.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::geometry::{self, dist2, mat_vec, ChamferNorm, Mat3, Point, PointCloud, Rotation, Sampling};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Task {
    Reconstruction,
    Denoising,
    Registration,
    Segmentation,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Reconstruction, Task::Denoising, Task::Registration, Task::Segmentation];

    pub fn name(self) -> &'static str {
        match self {
            Task::Reconstruction => "reconstruction",
            Task::Denoising => "denoising",
            Task::Registration => "registration",
            Task::Segmentation => "segmentation",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    /// Segmentation has a single level, 0; every other task uses 1..=5.
    pub fn levels(self) -> core::ops::RangeInclusive<u8> {
        match self {
            Task::Segmentation => 0..=0,
            _ => 1..=5,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An index-aligned (input, target) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    pub sample_id: String,
    pub task: Task,
    pub level: u8,
    pub class_label: String,
    pub input: PointCloud,
    pub target: PointCloud,
    /// Per-point part ids, segmentation only.
    pub labels: Option<Vec<u32>>,
    /// Rotation applied to the input, registration only.
    pub rotation: Option<Rotation>,
}

impl TaskSample {
    pub fn with_identity(mut self, sample_id: impl Into<String>, class_label: impl Into<String>) -> Self {
        self.sample_id = sample_id.into();
        self.class_label = class_label.into();
        self
    }

    fn bare(task: Task, level: u8, input: PointCloud, target: PointCloud) -> Self {
        Self {
            sample_id: String::new(),
            task,
            level,
            class_label: String::new(),
            input,
            target,
            labels: None,
            rotation: None,
        }
    }
}

/// Seed points kept by each reconstruction level.
pub const RECONSTRUCTION_SEEDS: [usize; 5] = [512, 256, 128, 64, 32];
/// Noise points per denoising level step.
pub const NOISE_PER_LEVEL: usize = 100;
pub const NOISE_STD: f64 = 0.5;
/// Maximum registration angle per level step, in degrees.
pub const DEGREES_PER_LEVEL: f64 = 36.0;

/// Fixed "upside-down" map applied to registration targets: 180° about x.
pub const FLIP: Mat3 = [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];

fn check_level(level: u8) -> Result<usize> {
    if (1..=5).contains(&level) {
        Ok(level as usize)
    } else {
        Err(Error::InvalidLevel(level))
    }
}

pub fn reconstruction_seed_count(level: u8) -> Result<usize> {
    Ok(RECONSTRUCTION_SEEDS[check_level(level)? - 1])
}

pub fn max_rotation_angle(level: u8) -> Result<f64> {
    Ok((DEGREES_PER_LEVEL * check_level(level)? as f64).to_radians())
}

fn nearest(points: &[Point], q: Point) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = dist2(*p, q);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Sparse-to-dense reconstruction. Every clean point is replaced by its
/// nearest FPS seed, which keeps the slot count while leaving only
/// `RECONSTRUCTION_SEEDS[level - 1]` distinct positions.
pub fn gen_reconstruction(clean: &PointCloud, level: u8, _seed: u64) -> Result<TaskSample> {
    let s = reconstruction_seed_count(level)?;
    let seeds = clean.select(&geometry::sample_centers(clean, s, Sampling::Fps, 0)?)?;
    let input = clean.iter().map(|p| seeds[nearest(seeds.points(), *p)]).collect();
    Ok(TaskSample::bare(Task::Reconstruction, level, PointCloud::from_points_unchecked(input), clean.clone()))
}

/// Replaces `100 * level` seeded slots with clipped Gaussian noise.
pub fn gen_denoising(clean: &PointCloud, level: u8, seed: u64) -> Result<TaskSample> {
    let k = NOISE_PER_LEVEL * check_level(level)?;
    if k > clean.len() {
        return Err(Error::TooMany { requested: k, available: clean.len() });
    }
    let mut r = rng::seeded(seed);
    let slots = rand::seq::index::sample(&mut r, clean.len(), k).into_vec();
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let mut input = clean.points().to_vec();
    for slot in slots {
        input[slot] = core::array::from_fn(|_| noise.sample(&mut r).clamp(-1.0, 1.0));
    }
    Ok(TaskSample::bare(Task::Denoising, level, PointCloud::from_points_unchecked(input), clean.clone()))
}

/// Input is the clean cloud under a random rotation whose angle grows with
/// the level; the target is the flipped canonical pose.
pub fn gen_registration(
    clean: &PointCloud,
    level: u8,
    seed: u64,
    rotation_override: Option<Rotation>,
) -> Result<TaskSample> {
    let max_angle = max_rotation_angle(level)?;
    let rotation = match rotation_override {
        Some(r) => r,
        None => Rotation::random(&mut rng::seeded(seed), max_angle),
    };
    let mut sample = TaskSample::bare(
        Task::Registration,
        level,
        geometry::rotate(clean, &rotation),
        geometry::transform(clean, &FLIP),
    );
    sample.rotation = Some(rotation);
    Ok(sample)
}

/// Maps each point's part label to a codebook coordinate.
pub fn gen_segmentation(points: &PointCloud, labels: &[u32], codebook: &LabelCodebook) -> Result<TaskSample> {
    if labels.len() != points.len() {
        return Err(Error::LengthMismatch { what: "labels vs points", left: labels.len(), right: points.len() });
    }
    let target = labels.iter().map(|&l| codebook.encode(l)).collect::<Result<Vec<_>>>()?;
    let mut sample =
        TaskSample::bare(Task::Segmentation, 0, points.clone(), PointCloud::from_points_unchecked(target));
    sample.labels = Some(labels.to_vec());
    Ok(sample)
}

/// Checks the per-task slot alignment of a generated sample.
pub fn alignment_holds(sample: &TaskSample, codebook: Option<&LabelCodebook>) -> bool {
    let (input, target) = (&sample.input, &sample.target);
    if input.len() != target.len() {
        return false;
    }
    match sample.task {
        Task::Reconstruction => {
            let Ok(s) = reconstruction_seed_count(sample.level) else { return false };
            let Ok(idx) = geometry::sample_centers(target, s, Sampling::Fps, 0) else { return false };
            let seeds: Vec<Point> = idx.iter().map(|&i| target[i]).collect();
            input.iter().zip(target.iter()).all(|(i, t)| {
                let best = seeds.iter().map(|s| dist2(*s, *t)).fold(f64::INFINITY, f64::min);
                dist2(*i, *t) == best && seeds.contains(i)
            })
        }
        Task::Denoising => {
            let changed = input.iter().zip(target.iter()).filter(|(a, b)| a != b).count();
            changed <= NOISE_PER_LEVEL * sample.level as usize
        }
        Task::Registration => {
            let Some(r) = sample.rotation else { return false };
            let m = r.matrix();
            // FLIP is its own inverse and exact under negation
            input.iter().zip(target.iter()).all(|(i, t)| *i == mat_vec(&m, mat_vec(&FLIP, *t)))
        }
        Task::Segmentation => {
            let (Some(labels), Some(cb)) = (&sample.labels, codebook) else { return false };
            labels.len() == target.len()
                && labels.iter().zip(target.iter()).all(|(&l, t)| cb.encode(l).map(|e| e == *t).unwrap_or(false))
        }
    }
}

pub const JITTER_STD: f64 = 0.01;
pub const AUGMENT_MAX_DEGREES: f64 = 15.0;
pub const AUGMENT_SCALE: (f64, f64) = (0.8, 1.2);

/// Jitter, small rotation and isotropic scaling. Slot order is kept so
/// per-point labels stay valid.
pub fn augment(pc: &PointCloud, seed: u64) -> PointCloud {
    let mut r = rng::seeded(seed);
    let rot = Rotation::random(&mut r, AUGMENT_MAX_DEGREES.to_radians()).matrix();
    let scale = r.random_range(AUGMENT_SCALE.0..AUGMENT_SCALE.1);
    let jitter = Normal::new(0.0, JITTER_STD).expect("positive std");
    PointCloud::from_points_unchecked(
        pc.iter()
            .map(|p| {
                let q = mat_vec(&rot, *p);
                core::array::from_fn(|k| scale * q[k] + jitter.sample(&mut r))
            })
            .collect(),
    )
}

/// Fixed map from part ids to lattice points inside `[-1, 1]³`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelCodebook {
    entries: Vec<Point>,
}

pub const CODEBOOK_SIDE: usize = 4;
pub const MAX_CODEBOOK: usize = CODEBOOK_SIDE * CODEBOOK_SIDE * CODEBOOK_SIDE;

/// First `size` sites of the 4×4×4 lattice, x-major.
pub fn build_codebook(size: usize) -> Result<LabelCodebook> {
    if size == 0 || size > MAX_CODEBOOK {
        return Err(Error::CodebookSize(size));
    }
    let coord = |i: usize| -1.0 + 2.0 * i as f64 / (CODEBOOK_SIDE - 1) as f64;
    let entries = (0..size)
        .map(|id| {
            let (x, y, z) = (id / 16, (id / 4) % 4, id % 4);
            [coord(x), coord(y), coord(z)]
        })
        .collect();
    Ok(LabelCodebook { entries })
}

impl LabelCodebook {
    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[Point] {
        &self.entries
    }

    pub fn encode(&self, label: u32) -> Result<Point> {
        self.entries
            .get(label as usize)
            .copied()
            .ok_or(Error::LabelOutOfRange { label, size: self.size() })
    }

    /// Nearest entry; ties go to the lowest id.
    pub fn decode(&self, p: Point) -> u32 {
        nearest(&self.entries, p) as u32
    }
}

/// A prompt pair and the query it conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPair {
    pub prompt: TaskSample,
    pub query: TaskSample,
}

impl PromptPair {
    pub fn new(prompt: TaskSample, query: TaskSample) -> Result<Self> {
        if prompt.task != query.task {
            return Err(Error::InvalidArgument("prompt and query tasks differ".into()));
        }
        if prompt.task == Task::Registration && prompt.rotation != query.rotation {
            return Err(Error::InvalidArgument("registration prompt rotation differs from query".into()));
        }
        Ok(Self { prompt, query })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PromptStrategy {
    #[default]
    Random,
    ClassAware,
    CdAware,
}

impl PromptStrategy {
    pub fn name(self) -> &'static str {
        match self {
            PromptStrategy::Random => "random",
            PromptStrategy::ClassAware => "class_aware",
            PromptStrategy::CdAware => "cd_aware",
        }
    }
}

/// Re-poses a registration prompt with another rotation. The clean shape is
/// recovered from the flipped target.
pub fn synchronize_registration(prompt: &TaskSample, rotation: Rotation) -> Result<TaskSample> {
    let clean = geometry::transform(&prompt.target, &FLIP);
    let mut regenerated = gen_registration(&clean, prompt.level, 0, Some(rotation))?;
    regenerated.sample_id = prompt.sample_id.clone();
    regenerated.class_label = prompt.class_label.clone();
    // keep the stored target bit-identical
    regenerated.target = prompt.target.clone();
    Ok(regenerated)
}

fn finish_pair(query: &TaskSample, chosen: &TaskSample) -> Result<PromptPair> {
    let prompt = match (query.task, query.rotation) {
        (Task::Registration, Some(r)) => synchronize_registration(chosen, r)?,
        (Task::Registration, None) => return Err(Error::InvalidArgument("registration query without rotation".into())),
        _ => chosen.clone(),
    };
    PromptPair::new(prompt, query.clone())
}

fn candidates<'a>(query: &TaskSample, pool: &'a [TaskSample]) -> Vec<&'a TaskSample> {
    pool.iter()
        .filter(|c| c.task == query.task && (query.sample_id.is_empty() || c.sample_id != query.sample_id))
        .collect()
}

/// Picks a same-task prompt from `pool` for `query`. The query itself (same
/// `sample_id`) is never chosen.
pub fn select_prompt(query: &TaskSample, pool: &[TaskSample], strategy: PromptStrategy, seed: u64) -> Result<PromptPair> {
    let mut cands = candidates(query, pool);
    if cands.is_empty() {
        return Err(Error::NoCandidate(query.task.name()));
    }
    let chosen = match strategy {
        PromptStrategy::Random => cands[rng::seeded(seed).random_range(0..cands.len())],
        PromptStrategy::ClassAware => {
            let same: Vec<&TaskSample> = cands.iter().copied().filter(|c| c.class_label == query.class_label).collect();
            if !same.is_empty() {
                cands = same;
            }
            cands[rng::seeded(seed).random_range(0..cands.len())]
        }
        PromptStrategy::CdAware => {
            let mut best = cands[0];
            let mut best_d = f64::INFINITY;
            for c in &cands {
                let d = geometry::chamfer(c.input.points(), query.input.points(), ChamferNorm::L2)?;
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        }
    };
    finish_pair(query, chosen)
}

/// Feature-similarity selection with a caller-supplied feature extractor:
/// picks the candidate whose input features are closest in Euclidean norm.
pub fn select_prompt_by_features<F>(query: &TaskSample, pool: &[TaskSample], features: F) -> Result<PromptPair>
where
    F: Fn(&PointCloud) -> Vec<f64>,
{
    let cands = candidates(query, pool);
    let q = features(&query.input);
    let mut best = None;
    let mut best_d = f64::INFINITY;
    for c in cands {
        let f = features(&c.input);
        let d: f64 = f.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d || best.is_none() {
            best_d = d;
            best = Some(c);
        }
    }
    finish_pair(query, best.ok_or(Error::NoCandidate(query.task.name()))?)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;
    use approx::assert_abs_diff_eq;

    pub(crate) fn clean_cloud(seed: u64, n: usize) -> PointCloud {
        let mut r = rng::seeded(seed);
        let pts: Vec<Point> = (0..n)
            .map(|_| [r.random_range(-1.0..1.0), r.random_range(-0.5..0.8), r.random_range(-0.3..0.3)])
            .collect();
        geometry::normalize(&PointCloud::new(pts).unwrap()).unwrap()
    }

    fn distinct(pc: &PointCloud) -> usize {
        let mut v: Vec<Point> = pc.points().to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v.dedup();
        v.len()
    }

    #[test]
    fn reconstruction_levels() {
        let clean = clean_cloud(1, 1024);
        assert_eq!(reconstruction_seed_count(1).unwrap(), 512);
        let s5 = gen_reconstruction(&clean, 5, 0).unwrap();
        assert_eq!(s5.input.len(), 1024);
        assert!(distinct(&s5.input) <= 32);
        let s1 = gen_reconstruction(&clean, 1, 0).unwrap();
        assert_eq!(distinct(&s1.input), 512);
        assert!(alignment_holds(&s5, None));
        assert!(gen_reconstruction(&clean, 6, 0).is_err());
        assert!(gen_reconstruction(&clean, 0, 0).is_err());
    }

    #[test]
    fn reconstruction_input_is_nearest_seed() {
        let clean = clean_cloud(2, 1024);
        let s = gen_reconstruction(&clean, 4, 0).unwrap();
        let idx = geometry::sample_centers(&clean, 64, Sampling::Fps, 0).unwrap();
        for (i, t) in s.input.iter().zip(s.target.iter()) {
            let best = idx.iter().map(|&j| dist2(clean[j], *t)).fold(f64::INFINITY, f64::min);
            assert_eq!(dist2(*i, *t), best);
        }
    }

    #[test]
    fn denoising_slots() {
        let clean = clean_cloud(3, 1024);
        let s = gen_denoising(&clean, 1, 11).unwrap();
        let diff = s.input.iter().zip(s.target.iter()).filter(|(a, b)| a != b).count();
        assert_eq!(diff, 100);
        assert_eq!(s.target, clean);
        assert!(s.input.iter().all(|p| p.iter().all(|c| (-1.0..=1.0).contains(c))));
        let s5 = gen_denoising(&clean, 5, 11).unwrap();
        assert_eq!(s5.input.iter().zip(s5.target.iter()).filter(|(a, b)| a != b).count(), 500);
        assert!(alignment_holds(&s5, None));
        assert!(gen_denoising(&clean, 9, 0).is_err());
    }

    #[test]
    fn registration_angle_bound() {
        let clean = clean_cloud(4, 64);
        for seed in 0..1000 {
            let s = gen_registration(&clean, 3, seed, None).unwrap();
            assert!(s.rotation.unwrap().angle() <= 108f64.to_radians() + 1e-12);
        }
    }

    #[test]
    fn registration_alignment_and_override() {
        let clean = clean_cloud(5, 256);
        let rot = Rotation::new([0.2, 1.0, -0.3], 1.1).unwrap();
        let s = gen_registration(&clean, 2, 0, Some(rot)).unwrap();
        assert_eq!(s.rotation, Some(rot));
        assert!(alignment_holds(&s, None));
        for (i, c) in s.input.iter().zip(clean.iter()) {
            assert_eq!(*i, mat_vec(&rot.matrix(), *c));
        }
        assert_eq!(s.target[0], [clean[0][0], -clean[0][1], -clean[0][2]]);
    }

    #[test]
    fn segmentation_targets_and_roundtrip() {
        let cb = build_codebook(4).unwrap();
        let pts = PointCloud::new(vec![[0.1, 0.0, 0.0], [0.2, 0.0, 0.0], [0.3, 0.0, 0.0]]).unwrap();
        let s = gen_segmentation(&pts, &[0, 0, 1], &cb).unwrap();
        assert_eq!(s.target.points(), &[cb.entries()[0], cb.entries()[0], cb.entries()[1]]);
        for (t, l) in s.target.iter().zip(s.labels.as_ref().unwrap()) {
            assert_eq!(cb.decode(*t), *l);
        }
        assert!(alignment_holds(&s, Some(&cb)));
        assert_eq!(gen_segmentation(&pts, &[0, 0, 9], &cb), Err(Error::LabelOutOfRange { label: 9, size: 4 }));
        assert!(gen_segmentation(&pts, &[0, 0], &cb).is_err());
    }

    #[test]
    fn augmentation_keeps_labels() {
        let cb = build_codebook(8).unwrap();
        let pts = clean_cloud(6, 100);
        let labels: Vec<u32> = (0..100).map(|i| (i % 3) as u32).collect();
        let aug = augment(&pts, 3);
        assert_eq!(aug.len(), pts.len());
        assert_ne!(aug, pts);
        let s = gen_segmentation(&aug, &labels, &cb).unwrap();
        assert_eq!(s.labels.unwrap(), labels);
    }

    #[test]
    fn codebook_lattice() {
        let cb = build_codebook(2).unwrap();
        assert_ne!(cb.entries()[0], cb.entries()[1]);
        assert!(cb.entries().iter().flatten().all(|c| (-1.0..=1.0).contains(c)));
        let full = build_codebook(64).unwrap();
        let mut min = f64::INFINITY;
        for i in 0..64 {
            for j in (i + 1)..64 {
                min = min.min(dist2(full.entries()[i], full.entries()[j]).sqrt());
            }
            assert_eq!(full.decode(full.encode(i as u32).unwrap()), i as u32);
        }
        assert_abs_diff_eq!(min, 2.0 / 3.0, epsilon = 1e-9);
        assert_eq!(full.entries()[1], [-1.0, -1.0, -1.0 + 2.0 / 3.0]);
        assert!(build_codebook(65).is_err());
        assert!(build_codebook(0).is_err());
    }

    fn pool() -> Vec<TaskSample> {
        (0..6)
            .map(|i| {
                let clean = clean_cloud(100 + i, 128);
                let task = if i % 2 == 0 { gen_denoising(&clean, 1, i) } else { gen_registration(&clean, 2, i, None) };
                task.unwrap().with_identity(format!("s{i}"), if i < 3 { "a" } else { "b" })
            })
            .collect()
    }

    #[test]
    fn single_candidate_any_strategy() {
        let pool = pool();
        let query = gen_denoising(&clean_cloud(7, 128), 1, 0).unwrap().with_identity("q", "a");
        let only = [pool[0].clone(), pool[1].clone()];
        for s in [PromptStrategy::Random, PromptStrategy::ClassAware, PromptStrategy::CdAware] {
            assert_eq!(select_prompt(&query, &only, s, 5).unwrap().prompt.sample_id, "s0");
        }
    }

    #[test]
    fn cd_aware_matches_linear_scan() {
        let pool = pool();
        let query = gen_denoising(&clean_cloud(8, 128), 1, 0).unwrap().with_identity("q", "b");
        let got = select_prompt(&query, &pool, PromptStrategy::CdAware, 0).unwrap();
        let mut best = ("", f64::INFINITY);
        for c in pool.iter().filter(|c| c.task == Task::Denoising) {
            let d = geometry::chamfer(c.input.points(), query.input.points(), ChamferNorm::L2).unwrap();
            if d < best.1 {
                best = (&c.sample_id, d);
            }
        }
        assert_eq!(got.prompt.sample_id, best.0);
    }

    #[test]
    fn class_aware_prefers_same_class() {
        let pool = pool();
        let query = gen_denoising(&clean_cloud(9, 128), 1, 0).unwrap().with_identity("q", "b");
        for seed in 0..20 {
            assert_eq!(select_prompt(&query, &pool, PromptStrategy::ClassAware, seed).unwrap().prompt.sample_id, "s4");
        }
    }

    #[test]
    fn registration_prompt_is_synchronized() {
        let pool = pool();
        let query = gen_registration(&clean_cloud(10, 128), 4, 77, None).unwrap().with_identity("q", "a");
        for s in [PromptStrategy::Random, PromptStrategy::ClassAware, PromptStrategy::CdAware] {
            let pair = select_prompt(&query, &pool, s, 1).unwrap();
            assert_eq!(pair.prompt.rotation, query.rotation);
            assert!(alignment_holds(&pair.prompt, None));
        }
    }

    #[test]
    fn query_never_prompts_itself() {
        let pool = pool();
        let err = select_prompt(&pool[0].clone().with_identity("s0", "a"), &pool[..1], PromptStrategy::Random, 0);
        assert_eq!(err, Err(Error::NoCandidate("denoising")));
    }

    #[test]
    fn feature_hook_selects_nearest() {
        let pool = pool();
        let query = pool[2].clone().with_identity("q", "a");
        let pair = select_prompt_by_features(&query, &pool, |pc| vec![pc.centroid()[0], pc.max_norm()]).unwrap();
        assert_eq!(pair.prompt.sample_id, "s2");
    }
}
