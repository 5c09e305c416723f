//! Command-line driver behind the `margin-fsl` binary.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::datasets::{save_csv, DataFiles, Split};
use crate::episodes::{sample_episode, EpisodeConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_generalized_sweep, gfsl_csv, gfsl_table};
use crate::model::ModelParams;
use crate::oracle::run_oracle;
use crate::train::{gradcheck, init_params, train};

/// Relative tolerance of the `oracle` subcommand.
pub const ORACLE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Parser)]
#[command(
    name = "margin-fsl",
    version,
    about = "Few-shot learning with adaptive-margin losses"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
    /// Print the result as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct WithCheckpoint {
    #[command(flatten)]
    pub common: Common,
    /// Trained checkpoint; its config is used unless `--config` is given.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured dataset as features, semantics and split files.
    GenData(Common),
    /// Train a model; writes checkpoint.json and train_log.csv.
    Train(Common),
    /// Margin-free episodic evaluation on the novel split.
    Eval(WithCheckpoint),
    /// Joint base + novel evaluation over the configured shot sweep.
    GfslEval(WithCheckpoint),
    /// Compare tape gradients with central differences on one episode.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Check this checkpoint instead of a fresh model.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Recompute random tiny episode losses with the scalar oracle.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
    },
}

fn load_config(common: &Common, fallback: Option<&RunConfig>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, fallback) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(cfg)) => cfg.clone(),
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<&Path> {
    fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    Ok(&common.out)
}

fn write(path: PathBuf, contents: &str) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

fn emit<T: Serialize>(common: &Common, value: &T, table: &str) {
    if common.json {
        println!(
            "{}",
            serde_json::to_string_pretty(value).expect("report serializes")
        );
    } else {
        print!("{table}");
    }
}

fn load_model(ck_path: &Path, common: &Common) -> Result<(RunConfig, ModelParams)> {
    let ck = Checkpoint::load(ck_path)?;
    let params = ck.params()?;
    Ok((load_config(common, Some(&ck.config))?, params))
}

#[derive(Serialize)]
struct DataSummary {
    classes: usize,
    samples: usize,
    d_x: usize,
    d_s: usize,
    files: DataFiles,
}

#[derive(Serialize)]
struct TrainSummary {
    episodes: usize,
    loss: String,
    first_loss: Option<f64>,
    last_loss: Option<f64>,
    last_val_acc: Option<f64>,
    checkpoint: PathBuf,
    log: PathBuf,
}

fn run_command(cmd: Command) -> Result<bool> {
    match cmd {
        Command::GenData(common) => {
            let cfg = load_config(&common, None)?;
            let (ds, store) = cfg.load_data()?;
            let files = DataFiles::in_dir(out_dir(&common)?);
            save_csv(&ds, &store, &files)?;
            let s = DataSummary {
                classes: ds.n_classes(),
                samples: ds.samples().len(),
                d_x: ds.d_x(),
                d_s: store.d_s(),
                files,
            };
            let table = format!(
                "classes  {}\nsamples  {}\nd_x      {}\nd_s      {}\n",
                s.classes, s.samples, s.d_x, s.d_s
            );
            emit(&common, &s, &table);
            Ok(true)
        }
        Command::Train(common) => {
            let cfg = load_config(&common, None)?;
            let (ds, store) = cfg.load_data()?;
            let (params, log) = train(&cfg, &ds, &store)?;
            let dir = out_dir(&common)?;
            let summary = TrainSummary {
                episodes: log.records.len(),
                loss: cfg.loss.kind()?.name().to_string(),
                first_loss: log.records.first().map(|r| r.loss),
                last_loss: log.records.last().map(|r| r.loss),
                last_val_acc: log.records.iter().rev().find_map(|r| r.val_acc),
                checkpoint: dir.join("checkpoint.json"),
                log: dir.join("train_log.csv"),
            };
            Checkpoint::new(&cfg, &params).save(&summary.checkpoint)?;
            write(summary.log.clone(), &log.to_csv())?;
            let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
            let table = format!(
                "loss        {}\nepisodes    {}\nfirst loss  {}\nlast loss   {}\nval acc     {}\n",
                summary.loss,
                summary.episodes,
                opt(summary.first_loss),
                opt(summary.last_loss),
                opt(summary.last_val_acc)
            );
            emit(&common, &summary, &table);
            Ok(true)
        }
        Command::Eval(args) => {
            let (cfg, params) = load_model(&args.checkpoint, &args.common)?;
            let (ds, _) = cfg.load_data()?;
            let report = evaluate(
                &params,
                &ds,
                &cfg.eval.episode(),
                cfg.eval.episodes,
                cfg.seed,
            )?;
            let dir = out_dir(&args.common)?;
            write(dir.join("eval.csv"), &report.to_csv())?;
            write(dir.join("eval.txt"), &report.to_table())?;
            emit(&args.common, &report, &report.to_table());
            Ok(true)
        }
        Command::GfslEval(args) => {
            let (cfg, params) = load_model(&args.checkpoint, &args.common)?;
            let (ds, _) = cfg.load_data()?;
            let reports = evaluate_generalized_sweep(
                &params,
                &ds,
                &cfg.eval.gfsl_shots,
                cfg.eval.gfsl_queries,
                cfg.seed,
            )?;
            let dir = out_dir(&args.common)?;
            write(dir.join("gfsl.csv"), &gfsl_csv(&reports))?;
            write(dir.join("gfsl.txt"), &gfsl_table(&reports))?;
            emit(&args.common, &reports, &gfsl_table(&reports));
            Ok(true)
        }
        Command::Gradcheck { common, checkpoint } => {
            let (cfg, params) = match &checkpoint {
                Some(path) => load_model(path, &common)?,
                None => {
                    let cfg = load_config(&common, None)?;
                    let (ds, _) = cfg.load_data()?;
                    let params = init_params(&cfg, ds.d_x())?;
                    (cfg, params)
                }
            };
            let (ds, store) = cfg.load_data()?;
            let shape = EpisodeConfig {
                query: cfg.gradcheck.query,
                split: Split::Base,
                ..cfg.episode
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let episode = sample_episode(&ds, &shape, &mut rng)?;
            let report = gradcheck(
                cfg.loss.kind()?,
                &episode,
                &ds,
                &params,
                &store,
                &cfg.gradcheck,
            )?;
            write(
                out_dir(&common)?.join("gradcheck.json"),
                &serde_json::to_string_pretty(&report)?,
            )?;
            emit(&common, &report, &report.to_table());
            Ok(report.passed)
        }
        Command::Oracle { common, episodes } => {
            let cfg = load_config(&common, None)?;
            let summary = run_oracle(episodes, cfg.seed, ORACLE_TOLERANCE)?;
            let table = format!(
                "episodes     {}\ncomparisons  {}\nmax_rel_err  {:.3e}\nworst        {}\nresult       {}\n",
                summary.episodes,
                summary.comparisons,
                summary.max_rel_err,
                summary.worst,
                if summary.passed { "pass" } else { "FAIL" }
            );
            emit(&common, &summary, &table);
            Ok(summary.passed)
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code: 0 on success, 1 when a check fails, 2 on
/// usage or runtime errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_command(cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
