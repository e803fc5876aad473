//! The training loop over a built dataset: batch assembly, logging and
//! periodic checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use pic_core::rng;
use pic_core::taskgen::{self, PromptStrategy, Task, TaskSample};
use pic_core::tokenize::joint_sample;
use pic_core::train::{PairBatch, TrainState};
use pic_core::{Model, Sampling};
use rand::Rng as _;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{self, Manifest, Split};

/// Same-task sample pools, keyed by task.
pub type Pools = BTreeMap<Task, Vec<TaskSample>>;

pub fn pools(samples: Vec<TaskSample>) -> Pools {
    let mut p = Pools::new();
    for s in samples {
        p.entry(s.task).or_default().push(s);
    }
    p
}

/// Tag mixed into the training seed for batch assembly, so it never shares
/// a stream with mask sampling.
const BATCH_TAG: u64 = 0xba7c4;

/// Builds batch `step`: each element picks a task uniformly, a query
/// uniformly within it, and a random same-task prompt (re-posed for
/// registration). Returns the pairs and the per-task counts.
pub fn assemble_batch(
    pools: &Pools,
    batch_size: usize,
    n: usize,
    m: usize,
    sampling: Sampling,
    seed: u64,
    step: u64,
) -> Result<(Vec<PairBatch>, BTreeMap<Task, usize>)> {
    let tasks: Vec<Task> = pools.iter().filter(|(_, v)| v.len() >= 2).map(|(t, _)| *t).collect();
    if tasks.is_empty() {
        bail!("every task needs at least two training samples (a query and a prompt)");
    }
    let mut batch = Vec::with_capacity(batch_size);
    let mut mix = BTreeMap::new();
    for i in 0..batch_size {
        let mut r = rng::seeded(rng::derive(rng::derive(seed ^ BATCH_TAG, step), i as u64));
        let task = tasks[r.random_range(0..tasks.len())];
        let pool = &pools[&task];
        let query = &pool[r.random_range(0..pool.len())];
        let pair = taskgen::select_prompt(query, pool, PromptStrategy::Random, r.random())?;
        let js_seed = r.random();
        batch.push(PairBatch {
            prompt: joint_sample(&pair.prompt.input, &pair.prompt.target, n, m, sampling, js_seed)?,
            query: joint_sample(&pair.query.input, &pair.query.target, n, m, sampling, js_seed)?,
        });
        *mix.entry(task).or_insert(0) += 1;
    }
    Ok((batch, mix))
}

pub fn format_mix(mix: &BTreeMap<Task, usize>) -> String {
    let mut s = String::new();
    for (t, c) in mix {
        if !s.is_empty() {
            s.push(' ');
        }
        write!(s, "{}:{c}", &t.name()[..3]).unwrap();
    }
    s
}

/// One training-log record: `step, epoch, task_mix, lr, loss`. Floats use
/// shortest round-trip formatting, so the loss is recoverable bit for bit.
pub fn log_line(step: u64, epoch: u64, mix: &BTreeMap<Task, usize>, lr: f64, loss: f64) -> String {
    format!("{step}, {epoch}, {}, {lr:e}, {loss}", format_mix(mix))
}

pub struct Trainer {
    pub config: RunConfig,
    pub pools: Pools,
    pub state: TrainState<f32>,
    pub steps_per_epoch: u64,
    pub total_steps: u64,
}

impl Trainer {
    /// Fresh parameters from the config seed.
    pub fn new(config: RunConfig, train: Vec<TaskSample>) -> Result<Self> {
        if train.is_empty() {
            bail!("training split is empty");
        }
        let steps_per_epoch = train.len().div_ceil(config.optimizer.batch_size.max(1)) as u64;
        let total_steps = steps_per_epoch * config.optimizer.epochs;
        let model = Model::<f32>::new(config.model_config(), config.seed())?;
        let state = TrainState::new(model, config.train_options(total_steps), config.seed());
        Ok(Self { config, pools: pools(train), state, steps_per_epoch, total_steps })
    }

    pub fn from_dataset(config: RunConfig, data_dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(data_dir)?;
        let train = dataset::load_split(data_dir, &manifest, Split::Train)?;
        Self::new(config, train)
    }

    /// Continues from a checkpoint; the model config and schedule come from it.
    pub fn resume(mut self, ckpt: &Path) -> Result<Self> {
        let (state, _) = checkpoint::load_state(ckpt)?;
        if state.model.config() != self.state.model.config() {
            bail!("checkpoint {} was trained with a different model config", ckpt.display());
        }
        self.state = state;
        Ok(self)
    }

    pub fn batch(&self, step: u64) -> Result<(Vec<PairBatch>, BTreeMap<Task, usize>)> {
        let c = &self.config;
        assemble_batch(&self.pools, c.optimizer.batch_size.max(1), c.n_patches, c.patch_size, c.sampling, c.seed(), step)
    }

    /// Runs one step and returns its log record.
    pub fn step(&mut self) -> Result<String> {
        let step = self.state.step;
        let (batch, mix) = self.batch(step)?;
        let lr = self.state.lr();
        let loss = self.state.train_step(&batch)?;
        self.state.epoch = self.state.step / self.steps_per_epoch;
        Ok(log_line(step, step / self.steps_per_epoch, &mix, lr, loss))
    }

    /// Trains to the end of the schedule. The log goes to `<out>.log`;
    /// checkpoints to `<out>` at the end and to `<out stem>.epochN.ckpt`
    /// every `checkpoint_every` epochs.
    pub fn run(&mut self, out: &Path) -> Result<()> {
        let log_path = PathBuf::from(format!("{}.log", out.display()));
        let mut log = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .with_context(|| format!("opening {}", log_path.display()))?;
        let every = self.config.checkpoint_every;
        while self.state.step < self.total_steps {
            let line = self.step()?;
            info!("{line}");
            writeln!(log, "{line}")?;
            let done_epoch = self.state.step % self.steps_per_epoch == 0;
            if done_epoch && every > 0 && self.state.epoch % every == 0 && self.state.step < self.total_steps {
                let p = out.with_extension(format!("epoch{}.ckpt", self.state.epoch));
                checkpoint::save(&p, &self.state, Some(self.config.to_json()))?;
            }
        }
        checkpoint::save(out, &self.state, Some(self.config.to_json()))
    }
}
