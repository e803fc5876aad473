//! Benchmark harness: prompt selection, inference and per-(task, level)
//! metric aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use log::warn;
use pic_core::eval::{self, metric_cd, metric_miou};
use pic_core::taskgen::{self, LabelCodebook, PromptStrategy, Task, TaskSample};
use pic_core::{rng, Model, PointCloud, Sampling};
use serde::{Deserialize, Serialize};

/// Full-scale numbers reported in the original work, carried for context.
/// They are not expected at desk scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub sep_registration_avg_cd: f64,
    pub copy_avg_cd: f64,
    pub cat_segmentation_miou: f64,
}

impl Default for Reference {
    fn default() -> Self {
        Self { sep_registration_avg_cd: 10.3, copy_avg_cd: 154.0, cat_segmentation_miou: 78.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdRow {
    pub task: Task,
    pub level: u8,
    /// Mean CD×1000 over the level's samples; `None` when it has none.
    pub cd: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouRow {
    pub miou: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub predictor: String,
    pub strategy: String,
    pub seed: u64,
    pub samples: usize,
    pub config_hash: String,
    #[serde(default)]
    pub config: Option<serde_json::Value>,
    pub cd: Vec<CdRow>,
    pub segmentation: Option<MiouRow>,
    pub reference: Reference,
}

impl EvalReport {
    /// Mean CD×1000 over every sample of `task`.
    pub fn task_mean(&self, task: Task) -> Option<f64> {
        let rows: Vec<&CdRow> = self.cd.iter().filter(|r| r.task == task && r.cd.is_some()).collect();
        let n: usize = rows.iter().map(|r| r.count).sum();
        (n > 0).then(|| rows.iter().map(|r| r.cd.unwrap() * r.count as f64).sum::<f64>() / n as f64)
    }

    /// Mean CD×1000 over every CD sample.
    pub fn overall_cd(&self) -> Option<f64> {
        let n: usize = self.cd.iter().filter(|r| r.cd.is_some()).map(|r| r.count).sum();
        (n > 0).then(|| self.cd.iter().filter_map(|r| r.cd.map(|c| c * r.count as f64)).sum::<f64>() / n as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,level,metric,value,count\n");
        for r in &self.cd {
            let v = r.cd.map(|c| format!("{c:.6}")).unwrap_or_default();
            writeln!(s, "{},{},cd_x1000,{v},{}", r.task, r.level, r.count).unwrap();
        }
        if let Some(m) = &self.segmentation {
            writeln!(s, "segmentation,0,miou,{:.6},{}", m.miou, m.count).unwrap();
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", path.display()))?;
        fs::write(path.with_extension("csv"), self.to_csv()).with_context(|| format!("writing CSV next to {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// What produces predictions.
#[derive(Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a Model<f32>),
    /// The prompt's own target.
    Copy,
}

/// Prediction for one query, plus the slot-ordered labels it must be scored
/// against for segmentation.
pub fn predict(predictor: Predictor<'_>, prompt: &TaskSample, query: &TaskSample, sampling: Sampling, seed: u64) -> Result<(PointCloud, Option<Vec<u32>>)> {
    match predictor {
        Predictor::Copy => Ok((eval::copy_baseline(prompt), query.labels.clone())),
        Predictor::Model(model) => {
            let inf = eval::infer_detailed(model, prompt, &query.input, sampling, seed)?;
            let labels = match &query.labels {
                Some(l) => Some(eval::slot_labels(&inf.query, l)?),
                None => None,
            };
            Ok((inf.prediction, labels))
        }
    }
}

pub struct BenchOptions<'a> {
    pub strategy: PromptStrategy,
    pub sampling: Sampling,
    pub seed: u64,
    pub codebook: &'a LabelCodebook,
    pub config_hash: String,
    pub config: Option<serde_json::Value>,
}

/// Scores every query against a prompt drawn from `pool`. Deterministic in
/// `opts.seed`.
pub fn run_benchmark(predictor: Predictor<'_>, queries: &[TaskSample], pool: &[TaskSample], opts: &BenchOptions<'_>) -> Result<EvalReport> {
    let mut sums: BTreeMap<(Task, u8), (f64, usize)> = BTreeMap::new();
    let mut miou = (0.0, 0usize);
    for (i, q) in queries.iter().enumerate() {
        let s = rng::derive(opts.seed, i as u64);
        let pair = taskgen::select_prompt(q, pool, opts.strategy, s).with_context(|| format!("prompt for {}", q.sample_id))?;
        let (pred, labels) = predict(predictor, &pair.prompt, q, opts.sampling, s)?;
        if q.task == Task::Segmentation {
            let labels = labels.with_context(|| format!("{} has no labels", q.sample_id))?;
            miou.0 += metric_miou(&pred, &labels, opts.codebook)?;
            miou.1 += 1;
        } else {
            let e = sums.entry((q.task, q.level)).or_insert((0.0, 0));
            e.0 += metric_cd(&pred, &q.target)?;
            e.1 += 1;
        }
    }
    let mut cd = Vec::new();
    for task in [Task::Reconstruction, Task::Denoising, Task::Registration] {
        if !sums.keys().any(|(t, _)| *t == task) {
            warn!("no {task} samples in the evaluated split; omitted from the report");
            continue;
        }
        for level in task.levels() {
            let (sum, count) = sums.get(&(task, level)).copied().unwrap_or((0.0, 0));
            cd.push(CdRow { task, level, cd: (count > 0).then(|| sum / count as f64), count });
        }
    }
    let segmentation = (miou.1 > 0).then(|| MiouRow { miou: miou.0 / miou.1 as f64, count: miou.1 });
    Ok(EvalReport {
        predictor: match predictor {
            Predictor::Model(m) => m.config().variant.name().to_string(),
            Predictor::Copy => "copy".to_string(),
        },
        strategy: opts.strategy.name().to_string(),
        seed: opts.seed,
        samples: queries.len(),
        config_hash: opts.config_hash.clone(),
        config: opts.config.clone(),
        cd,
        segmentation,
        reference: Reference::default(),
    })
}
