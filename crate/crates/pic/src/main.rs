use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use pic::bench::{self, BenchOptions, EvalReport, Predictor};
use pic::config::{load_config, RunConfig};
use pic::dataset::{self, Manifest, Split};
use pic::trainer::Trainer;
use pic::{checkpoint, io, plot, synth};
use pic_core::eval;
use pic_core::taskgen::{PromptStrategy, Task, TaskSample};
use pic_core::PointCloud;

#[derive(Parser)]
#[command(name = "pic", version, about = "Point-cloud in-context learning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Random,
    Class,
    Cd,
}

impl From<Strategy> for PromptStrategy {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::Random => PromptStrategy::Random,
            Strategy::Class => PromptStrategy::ClassAware,
            Strategy::Cd => PromptStrategy::CdAware,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural, part-labelled source corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 2048)]
        points: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build the four-task dataset and its manifest from a source folder.
    BuildData {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model on a built dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many steps (the schedule still spans all epochs).
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Benchmark a checkpoint (or the copy baseline) on a split.
    Eval {
        #[arg(long, required_unless_present = "copy_baseline")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "random")]
        strategy: Strategy,
        #[arg(long)]
        report: PathBuf,
        /// Score the prompt target as the prediction; no checkpoint needed.
        #[arg(long)]
        copy_baseline: bool,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict the target of one query under a prompt pair.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt_input: PathBuf,
        #[arg(long)]
        prompt_target: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a report as per-task SVG charts plus a CSV.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!("no such file or directory: {}", path.display());
    }
    Ok(())
}

fn resolved(config: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    if let Some(c) = config {
        require(c)?;
    }
    load_config(config)?.resolve(seed)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, per_class, points, seed } => {
            let seed = resolved(None, seed)?.seed();
            let n = synth::write_corpus(&out, per_class, points, seed)?;
            println!("wrote {n} shapes under {}", out.display());
        }
        Command::BuildData { source, out, seed, config } => {
            require(&source)?;
            let cfg = resolved(config.as_deref(), seed)?;
            let m = dataset::build_dataset(&source, &out, &cfg)?;
            println!("wrote {} samples to {}", m.entries.len(), out.join(dataset::MANIFEST).display());
        }
        Command::Train { config, data, out, seed, resume, max_steps } => {
            require(&data)?;
            let cfg = resolved(config.as_deref(), seed)?;
            let mut trainer = Trainer::from_dataset(cfg, &data)?;
            if let Some(r) = resume {
                require(&r)?;
                trainer = trainer.resume(&r)?;
            }
            info!(
                "{} parameters, {} steps ({} per epoch)",
                trainer.state.model.params().numel(),
                trainer.total_steps,
                trainer.steps_per_epoch
            );
            match max_steps {
                Some(k) => {
                    let stop = (trainer.state.step + k).min(trainer.total_steps);
                    while trainer.state.step < stop {
                        println!("{}", trainer.step()?);
                    }
                    checkpoint::save(&out, &trainer.state, Some(trainer.config.to_json()))?;
                }
                None => trainer.run(&out)?,
            }
        }
        Command::Eval { ckpt, data, strategy, report, copy_baseline, split, seed } => {
            require(&data)?;
            let manifest = Manifest::load(&data)?;
            let queries = dataset::load_split(&data, &manifest, split.into())?;
            if queries.is_empty() {
                bail!("the selected split of {} is empty", data.display());
            }
            let pool = dataset::load_split(&data, &manifest, Split::Train)?;
            let codebook = manifest.codebook()?;
            let (model, config) = match (&ckpt, copy_baseline) {
                (_, true) => (None, manifest.config.clone()),
                (Some(p), false) => {
                    require(p)?;
                    let (state, header) = checkpoint::load_state(p)?;
                    let cfg = match header.run_config {
                        Some(v) => serde_json::from_value(v).context("checkpoint run config")?,
                        None => manifest.config.clone(),
                    };
                    (Some(state.model), cfg)
                }
                (None, false) => bail!("--ckpt is required without --copy-baseline"),
            };
            let predictor = model.as_ref().map_or(Predictor::Copy, Predictor::Model);
            let opts = BenchOptions {
                strategy: strategy.into(),
                sampling: config.sampling,
                seed: seed.unwrap_or(manifest.seed),
                codebook: &codebook,
                config_hash: config.hash(),
                config: Some(config.to_json()),
            };
            let r = bench::run_benchmark(predictor, &queries, &pool, &opts)?;
            r.write(&report)?;
            print_summary(&r);
        }
        Command::Infer { ckpt, prompt_input, prompt_target, query, out, seed } => {
            for p in [&ckpt, &prompt_input, &prompt_target, &query] {
                require(p)?;
            }
            let model = checkpoint::load_model(&ckpt)?;
            let prompt = TaskSample {
                sample_id: "prompt".into(),
                task: Task::Reconstruction,
                level: 0,
                class_label: String::new(),
                input: io::read_points(&prompt_input)?,
                target: io::read_points(&prompt_target)?,
                labels: None,
                rotation: None,
            };
            let q: PointCloud = io::read_points(&query)?;
            let pred = eval::infer(&model, &prompt, &q, pic_core::Sampling::Fps, seed)?;
            io::write_points(&out, pred.points())?;
            println!("wrote {} points to {}", pred.len(), out.display());
        }
        Command::Plot { report, out } => {
            require(&report)?;
            let r = EvalReport::load(&report)?;
            for p in plot::write_plots(&r, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn print_summary(r: &EvalReport) {
    println!("predictor {} | strategy {} | {} samples", r.predictor, r.strategy, r.samples);
    for row in &r.cd {
        match row.cd {
            Some(c) => println!("  {:<15} L{}  CDx1000 {c:>9.3}  (n={})", row.task.name(), row.level, row.count),
            None => println!("  {:<15} L{}  -", row.task.name(), row.level),
        }
    }
    if let Some(m) = &r.segmentation {
        println!("  segmentation    mIoU {:.2}  (n={})", m.miou, m.count);
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
