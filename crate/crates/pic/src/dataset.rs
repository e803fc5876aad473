//! Dataset construction from a folder of raw clouds, and the manifest.
//!
//! Source layout: `<source>/<class>/<name>.xyz` (or `.f32`), with an optional
//! `<name>.labels` next to it for segmentation. Every generated sample draws
//! its randomness from `sha256(seed ‖ sample_id)`, so the output is a pure
//! function of the source bytes, the config and the seed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::warn;
use pic_core::geometry::{self, PointCloud, Rotation, Sampling};
use pic_core::rng;
use pic_core::taskgen::{self, LabelCodebook, Task, TaskSample};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::io;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub task: Task,
    pub level: u8,
    pub class: String,
    pub input_path: String,
    pub target_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<Rotation>,
    pub split: Split,
}

/// Global part id of a (class, per-file label) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartId {
    pub class: String,
    pub part: u32,
    pub id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: RunConfig,
    pub codebook_size: usize,
    pub parts: Vec<PartId>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn codebook(&self) -> Result<LabelCodebook> {
        Ok(taskgen::build_codebook(self.codebook_size)?)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

pub fn sample_seed(seed: u64, sample_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(sample_id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

struct Source {
    class: String,
    name: String,
    cloud: PointCloud,
    labels: Option<Vec<u32>>,
}

fn is_cloud(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("xyz" | "f32"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

/// FPS-downsamples to `n_points` (keeping labels in step) and normalizes.
pub fn prepare(cloud: &PointCloud, labels: Option<&[u32]>, n_points: usize) -> Result<(PointCloud, Option<Vec<u32>>)> {
    if cloud.len() < n_points {
        bail!("cloud has {} points, need {n_points}", cloud.len());
    }
    let keep = geometry::sample_centers(cloud, n_points, Sampling::Fps, 0)?;
    let out = geometry::normalize(&cloud.select(&keep)?)?;
    Ok((out, labels.map(|l| keep.iter().map(|&i| l[i]).collect())))
}

fn load_source(path: &Path, class: &str, n_points: usize) -> Result<Source> {
    let cloud = io::read_points(path)?;
    let labels_path = path.with_extension("labels");
    let mut labels = if labels_path.exists() { Some(io::read_labels(&labels_path)?) } else { None };
    if let Some(l) = &labels {
        if l.len() != cloud.len() {
            warn!("{}: {} labels for {} points, ignoring labels", labels_path.display(), l.len(), cloud.len());
            labels = None;
        }
    }
    let (cloud, labels) = prepare(&cloud, labels.as_deref(), n_points).with_context(|| path.display().to_string())?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("cloud").to_string();
    Ok(Source { class: class.to_string(), name, cloud, labels })
}

fn scan(source_dir: &Path, n_points: usize) -> Result<Vec<Source>> {
    let mut files = Vec::new();
    for entry in sorted_entries(source_dir)? {
        if entry.is_dir() {
            let class = entry.file_name().and_then(|s| s.to_str()).unwrap_or("unknown").to_string();
            for f in sorted_entries(&entry)? {
                if is_cloud(&f) {
                    files.push((f, class.clone()));
                }
            }
        } else if is_cloud(&entry) {
            files.push((entry, "unknown".to_string()));
        }
    }
    let mut sources = Vec::new();
    for (path, class) in files {
        match load_source(&path, &class, n_points) {
            Ok(s) => sources.push(s),
            Err(e) => warn!("skipping {}: {e:#}", path.display()),
        }
    }
    if sources.is_empty() {
        bail!("no readable point clouds under {}", source_dir.display());
    }
    Ok(sources)
}

/// Deterministic split: sources are ordered by a seeded hash and cut into
/// test, val and train by the configured fractions.
fn assign_splits(keys: &[String], seed: u64, val: f64, test: f64) -> Vec<Split> {
    let n = keys.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (sample_seed(seed, &format!("split:{}", keys[i])), i));
    let n_test = ((test * n as f64).round() as usize).min(n.saturating_sub(1));
    let n_val = ((val * n as f64).round() as usize).min(n.saturating_sub(1 + n_test));
    let mut splits = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_test {
            Split::Test
        } else if rank < n_test + n_val {
            Split::Val
        } else {
            Split::Train
        };
    }
    splits
}

fn generate(task: Task, clean: &PointCloud, labels: Option<&[u32]>, level: u8, seed: u64, cb: &LabelCodebook) -> Result<TaskSample> {
    Ok(match task {
        Task::Reconstruction => taskgen::gen_reconstruction(clean, level, seed)?,
        Task::Denoising => taskgen::gen_denoising(clean, level, seed)?,
        Task::Registration => taskgen::gen_registration(clean, level, seed, None)?,
        Task::Segmentation => taskgen::gen_segmentation(clean, labels.expect("checked by caller"), cb)?,
    })
}

/// Builds the dataset under `out_dir` and writes `manifest.json`. The
/// config must be resolved; its seed drives everything.
pub fn build_dataset(source_dir: &Path, out_dir: &Path, config: &RunConfig) -> Result<Manifest> {
    let seed = config.seed();
    let dc = &config.data;
    if dc.tasks.is_empty() {
        bail!("no tasks configured");
    }
    let sources = scan(source_dir, config.n_points)?;

    let mut part_set = BTreeSet::new();
    for s in &sources {
        if let Some(l) = &s.labels {
            part_set.extend(l.iter().map(|&p| (s.class.clone(), p)));
        }
    }
    if part_set.len() > dc.codebook_size {
        bail!("{} distinct parts exceed the codebook size {}", part_set.len(), dc.codebook_size);
    }
    let parts: Vec<PartId> =
        part_set.into_iter().enumerate().map(|(id, (class, part))| PartId { class, part, id: id as u32 }).collect();
    let global: BTreeMap<(String, u32), u32> = parts.iter().map(|p| ((p.class.clone(), p.part), p.id)).collect();
    let codebook = taskgen::build_codebook(dc.codebook_size)?;

    let keys: Vec<String> = sources.iter().map(|s| format!("{}/{}", s.class, s.name)).collect();
    let splits = assign_splits(&keys, seed, dc.val_fraction, dc.test_fraction);

    let samples_dir = out_dir.join("samples");
    fs::create_dir_all(&samples_dir).with_context(|| format!("creating {}", samples_dir.display()))?;
    let mut entries = Vec::new();
    let mut skipped_seg = 0;
    for ((src, key), &split) in sources.iter().zip(&keys).zip(&splits) {
        let labels: Option<Vec<u32>> =
            src.labels.as_ref().map(|l| l.iter().map(|&p| global[&(src.class.clone(), p)]).collect());
        for &task in &dc.tasks {
            if task == Task::Segmentation && labels.is_none() {
                skipped_seg += 1;
                continue;
            }
            let draws = if task == Task::Segmentation { 1 } else { dc.levels_per_source.max(1) };
            for k in 0..draws {
                let sample_id = format!("{key}/{task}/{k}");
                let s = sample_seed(seed, &sample_id);
                let level = if task == Task::Segmentation { 0 } else { rng::seeded(s).random_range(1..=5u8) };
                let clean = if dc.augment && split == Split::Train {
                    taskgen::augment(&src.cloud, rng::derive(s, 1))
                } else {
                    src.cloud.clone()
                };
                let sample = generate(task, &clean, labels.as_deref(), level, rng::derive(s, 2), &codebook)?;
                let stem = sample_id.replace('/', "__");
                let input_path = format!("samples/{stem}.input.xyz");
                let target_path = format!("samples/{stem}.target.xyz");
                io::write_points(&out_dir.join(&input_path), sample.input.points())?;
                io::write_points(&out_dir.join(&target_path), sample.target.points())?;
                let labels_path = match &sample.labels {
                    Some(l) => {
                        let p = format!("samples/{stem}.labels");
                        io::write_labels(&out_dir.join(&p), l)?;
                        Some(p)
                    }
                    None => None,
                };
                entries.push(ManifestEntry {
                    sample_id,
                    task,
                    level,
                    class: src.class.clone(),
                    input_path,
                    target_path,
                    labels_path,
                    rotation: sample.rotation,
                    split,
                });
            }
        }
    }
    if skipped_seg > 0 {
        warn!("{skipped_seg} sources have no labels; no segmentation samples for them");
    }
    let manifest = Manifest { seed, config: config.clone(), codebook_size: dc.codebook_size, parts, entries };
    let path = out_dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(manifest)
}

pub fn load_sample(dir: &Path, e: &ManifestEntry) -> Result<TaskSample> {
    let labels = match &e.labels_path {
        Some(p) => Some(io::read_labels(&dir.join(p))?),
        None => None,
    };
    Ok(TaskSample {
        sample_id: e.sample_id.clone(),
        task: e.task,
        level: e.level,
        class_label: e.class.clone(),
        input: io::read_points(&dir.join(&e.input_path))?,
        target: io::read_points(&dir.join(&e.target_path))?,
        labels,
        rotation: e.rotation,
    })
}

pub fn load_split(dir: &Path, manifest: &Manifest, split: Split) -> Result<Vec<TaskSample>> {
    manifest.split(split).map(|e| load_sample(dir, e)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_follow_fractions() {
        let keys: Vec<String> = (0..20).map(|i| format!("c/{i}")).collect();
        let s = assign_splits(&keys, 3, 0.1, 0.2);
        assert_eq!(s.iter().filter(|&&x| x == Split::Test).count(), 4);
        assert_eq!(s.iter().filter(|&&x| x == Split::Val).count(), 2);
        assert_eq!(s, assign_splits(&keys, 3, 0.1, 0.2));
        assert_ne!(s, assign_splits(&keys, 4, 0.1, 0.2));
        assert_eq!(assign_splits(&keys[..1], 0, 0.5, 0.5), vec![Split::Train]);
    }

    #[test]
    fn sample_seed_depends_on_both_inputs() {
        assert_eq!(sample_seed(1, "a"), sample_seed(1, "a"));
        assert_ne!(sample_seed(1, "a"), sample_seed(2, "a"));
        assert_ne!(sample_seed(1, "a"), sample_seed(1, "b"));
    }
}
