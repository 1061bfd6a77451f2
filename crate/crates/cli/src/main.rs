//! `metaproto`: data generation, pretraining, target building, training,
//! evaluation, sweeps and exports for the sinusoid and Gaussian studies.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 missing prerequisite.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use metaproto::hardness::SelectionMode;
use metaproto::harness::{
    build_targets_stage, eval_stage, export_boundary, gen_data, pretrain_baseline, pretrain_stage, summary_csv, sweep,
    sweep_path, train_stage, BoundarySource, Layout, RunConfig, Study, SweepAxis,
};
use metaproto::protocols::{run_denoise_check, Algorithm, Protocol};
use metaproto::util::write_json;
use metaproto::{Error, Result, Split};

#[derive(Parser)]
#[command(name = "metaproto", version, about = "Support/query vs support/target meta-learning experiments")]
struct Cli {
    /// Log more (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the sinusoid task bank or the Gaussian dataset.
    GenData {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        force: bool,
    },
    /// Pretrain the Gaussian classification network.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        force: bool,
    },
    /// Rank meta-train tasks by hardness and fine-tune targets for the selected ones.
    BuildTargets {
        #[command(flatten)]
        run: RunArgs,
        /// Discard a cache built from different inputs.
        #[arg(long)]
        force: bool,
    },
    /// Meta-train and evaluate one configuration.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        force: bool,
    },
    /// Re-evaluate a trained run.
    Eval {
        /// Run directory; defaults to the one the other flags describe.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train (or evaluate) once per axis value and write a curve CSV.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// target_count, lambda or threshold.
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Pretrained-trunk ProtoNet accuracy on the test episodes.
    EvalPretrain {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Classify a grid over [-10, 10]² for one episode.
    ExportBoundary {
        #[command(flatten)]
        run: RunArgs,
        /// bayes, model or target.
        #[arg(long, default_value = "bayes")]
        source: BoundarySource,
        /// Embedding checkpoint for `--source model`; the pretrained trunk otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "meta-test", value_parser = parse_split)]
        split: Split,
        #[arg(long, default_value_t = 0)]
        episode: u64,
        #[arg(long, default_value_t = 200)]
        resolution: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Check the label-denoising bound on random quadruples.
    CheckDenoise {
        #[arg(long, default_value_t = 1_000_000)]
        samples: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Flags mirroring [`RunConfig`]. Unset flags keep the study defaults (or the
/// values from `--config`).
#[derive(Args, Clone, Debug)]
struct RunArgs {
    #[arg(long, default_value = "sinusoid")]
    study: Study,
    /// maml or protoreg (sinusoid), protonet (gaussian).
    #[arg(long)]
    algorithm: Option<Algorithm>,
    /// JSON RunConfig to start from.
    #[arg(long)]
    config: Option<PathBuf>,
    /// sq or st.
    #[arg(long)]
    protocol: Option<Protocol>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    target_ratio: Option<f64>,
    #[arg(long)]
    target_count: Option<usize>,
    /// hardness or random.
    #[arg(long)]
    selection: Option<SelectionMode>,
    /// Hardness metric: a_minus_b, a, neg_b, a_over_b (sinusoid); similarity_sum (gaussian).
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_grad_norm: Option<f64>,
    /// Relative-likelihood bound for Gaussian test episodes (1 = unbiased).
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Scale episode and task counts, e.g. 0.2 for 2,000 episodes.
    #[arg(long)]
    budget: Option<f64>,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "meta-train" | "meta_train" => Ok(Split::MetaTrain),
        "meta-val" | "meta_val" => Ok(Split::MetaVal),
        "meta-test" | "meta_test" => Ok(Split::MetaTest),
        other => Err(format!("unknown split `{other}`")),
    }
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => metaproto::util::read_json::<RunConfig>(path)?,
            None => {
                let algorithm = self.algorithm.unwrap_or(match self.study {
                    Study::Sinusoid => Algorithm::Maml,
                    Study::Gaussian => Algorithm::Protonet,
                });
                RunConfig::new(self.study, algorithm)
            }
        };
        if let Some(a) = self.algorithm {
            cfg.algorithm = a;
        }
        if let Some(f) = self.budget {
            if !(f > 0.0) {
                return Err(Error::Config(format!("budget factor must be positive, got {f}")));
            }
            cfg = cfg.scaled(f);
        }
        let p = &mut cfg.protocol;
        if let Some(v) = self.protocol {
            p.protocol = v;
        }
        if let Some(v) = self.lambda {
            p.lambda = v;
        }
        if let Some(v) = self.target_ratio {
            p.target_ratio = v;
        }
        if let Some(v) = self.target_count {
            p.target_count = Some(v);
        }
        if let Some(v) = self.selection {
            p.selection = v;
        }
        if let Some(v) = &self.metric {
            p.hardness_metric = v.clone();
        }
        if let Some(v) = self.episodes {
            p.episodes = v;
        }
        if let Some(v) = self.lr {
            p.learning_rate = v;
        }
        if let Some(v) = self.max_grad_norm {
            p.max_grad_norm = Some(v);
        }
        if let Some(v) = self.threshold {
            cfg.gaussian.eval_threshold = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.data_dir {
            cfg.data_dir = v.clone();
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenData { run, force } => {
            let cfg = run.config()?;
            for (path, hash) in gen_data(&cfg, force)? {
                println!("{}  {}", hash, path.display());
            }
        }
        Command::Pretrain { run, force } => {
            let cfg = run.config()?;
            let (path, hash, pre) = pretrain_stage(&cfg, force)?;
            info!("pretrained for {} epochs", pre.log.epoch_loss.len());
            println!("{}  {}", hash, path.display());
            println!("train accuracy {:.4}", pre.log.train_accuracy);
        }
        Command::BuildTargets { run, force } => {
            let cfg = run.config()?;
            let (report, _) = build_targets_stage(&cfg, force)?;
            print_json(&report)?;
            let collisions = report.selected_tasks - report.distinct_class_sets;
            if collisions > 0 {
                println!("{collisions} selected tasks share a class set with another selected task");
            }
            println!("ranking written to {}", Layout::new(&cfg).ranking_csv().display());
        }
        Command::Train { run, force } => {
            let cfg = run.config()?;
            let (dir, record) = train_stage(&cfg, force)?;
            print!("{}", summary_csv(std::slice::from_ref(&record.summary)));
            println!("run written to {}", dir.display());
        }
        Command::Eval { run_dir, run } => {
            let cfg = run.config()?;
            let dir = match run_dir {
                Some(d) => d,
                None => Layout::new(&cfg).run_dir(&cfg)?,
            };
            let row = eval_stage(&dir, run.threshold)?;
            print!("{}", summary_csv(&[row]));
        }
        Command::Sweep { run, axis, values } => {
            let cfg = run.config()?;
            let rows = sweep(&cfg, axis, &values)?;
            let path = sweep_path(&cfg, axis)?;
            metaproto::util::write_atomic(&path, summary_csv(&rows).as_bytes())?;
            print!("{}", summary_csv(&rows));
            println!("curve written to {}", path.display());
        }
        Command::EvalPretrain { run } => {
            let cfg = run.config()?;
            print_json(&pretrain_baseline(&cfg)?)?;
        }
        Command::ExportBoundary {
            run,
            source,
            checkpoint,
            split,
            episode,
            resolution,
            output,
        } => {
            let cfg = run.config()?;
            let grid = export_boundary(&cfg, source, split, episode, resolution, checkpoint.as_deref())?;
            let path = output.unwrap_or_else(|| {
                cfg.out_dir
                    .join(format!("boundary-{}-{split}-{episode}.json", grid.source.replace([':', '/', ' '], "_")))
            });
            #[derive(Serialize)]
            struct Export<'a> {
                config: &'a RunConfig,
                grid: &'a metaproto::harness::BoundaryGrid,
            }
            let hash = write_json(&path, &Export { config: &cfg, grid: &grid })?;
            println!("{}  {}", hash, path.display());
        }
        Command::CheckDenoise { samples, seed } => {
            let report = run_denoise_check(samples, seed)?;
            print_json(&report)?;
            if !report.passed() {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        e if e.is_numerical() => 3,
        Error::MissingPrerequisite { .. } | Error::CacheMiss(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
