//! `aod` command-line front end.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 3 when a
//! run fails after it started.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use aod_core::config::RunConfig;
use aod_core::search::{
    derive_seed, format_top, run_random_search, run_search, score_split, train_final, SearchLog, SearchOutcome, SplitScores,
    SUMMARY_FILE, TOP5_FILE,
};
use aod_core::space::ModelSpec;
use aod_core::zoo::{load_child, save_child, ParamStore};
use aod_core::AodError;
use aod_substrate::checkpoint;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub const OUT_ENV: &str = "AUTOOD_OUT";
pub const CONFIG_ECHO: &str = "config.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const CONTROLLER_FILE: &str = "controller.ckpt";
pub const BEST_CHILD_DIR: &str = "best";
pub const FINAL_FILE: &str = "final.json";

const STREAM_FINAL: u64 = 6;

#[derive(Debug, Parser)]
#[command(name = "aod", version, about = "Search autoencoder outlier detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Controller-driven search.
    Search(RunArgs),
    /// Uniform random search with the same budget.
    RandomSearch(RunArgs),
    /// Train and score a single architecture.
    TrainOne {
        #[arg(long)]
        spec: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a saved child on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Summarize a search log.
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Optimizer steps per trained child.
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SplitName {
    Train,
    Valid,
    Test,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<AodError> for Failure {
    fn from(e: AodError) -> Self {
        match e {
            AodError::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

/// Runs the CLI with `AUTOOD_OUT` taken from the environment.
pub fn run(argv: &[OsString], stdout: &mut dyn Write) -> i32 {
    run_with_env(argv, std::env::var_os(OUT_ENV).map(PathBuf::from), stdout)
}

/// Same as [`run`] with the output override passed explicitly.
pub fn run_with_env(argv: &[OsString], env_out: Option<PathBuf>, stdout: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, env_out, stdout) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            3
        }
    }
}

fn dispatch(cmd: Command, env_out: Option<PathBuf>, stdout: &mut dyn Write) -> CliResult<()> {
    match cmd {
        Command::Search(args) => search(&resolve(&args, env_out.as_deref())?, false, stdout),
        Command::RandomSearch(args) => search(&resolve(&args, env_out.as_deref())?, true, stdout),
        Command::TrainOne { spec, run } => train_one(&spec, &resolve(&run, env_out.as_deref())?, stdout),
        Command::Evaluate { checkpoint, split, run } => {
            let explicit_out = run.out.clone().or(env_out.clone());
            let cfg = match &run.config {
                Some(_) => resolve(&run, env_out.as_deref())?,
                None => {
                    let mut cfg = find_run_config(&checkpoint)?;
                    apply_flags(&mut cfg, &run, env_out.as_deref());
                    cfg
                }
            };
            evaluate(&checkpoint, split, &cfg, explicit_out.is_some(), stdout)
        }
        Command::Report { log, out } => report(&log, out.or(env_out).as_deref(), stdout),
    }
}

/// Config file (or defaults), then `AUTOOD_OUT`, then command-line flags.
fn resolve(args: &RunArgs, env_out: Option<&Path>) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_flags(&mut cfg, args, env_out);
    cfg.validate()?;
    Ok(cfg)
}

fn apply_flags(cfg: &mut RunConfig, args: &RunArgs, env_out: Option<&Path>) {
    if let Some(p) = env_out {
        cfg.output_dir = p.to_path_buf();
    }
    if let Some(p) = &args.out {
        cfg.output_dir = p.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(w) = args.workers {
        cfg.search.workers = w;
    }
    if let Some(b) = args.budget {
        cfg.search.child_steps = b;
    }
}

/// Looks for the config echo next to a checkpoint or in the run above it.
fn find_run_config(checkpoint: &Path) -> CliResult<RunConfig> {
    for dir in checkpoint.ancestors().take(3) {
        let p = dir.join(CONFIG_ECHO);
        if p.is_file() {
            return Ok(RunConfig::load(&p)?);
        }
    }
    Err(Failure::Usage(format!(
        "no {CONFIG_ECHO} found near {}; pass --config",
        checkpoint.display()
    )))
}

fn write_config_echo(cfg: &RunConfig) -> CliResult<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join(CONFIG_ECHO), cfg.to_json()?)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct FinalReport {
    spec: ModelSpec,
    search_reward: f64,
    train_steps: usize,
    valid: SplitScores,
    test: SplitScores,
}

fn search(cfg: &RunConfig, random: bool, stdout: &mut dyn Write) -> CliResult<()> {
    write_config_echo(cfg)?;
    let splits = cfg.dataset.materialize()?;
    let outcome: SearchOutcome = if random {
        run_random_search(&cfg.search, &cfg.zoo, &splits, cfg.seed)?
    } else {
        run_search(&cfg.search, &cfg.zoo, &cfg.controller, &splits, cfg.seed)?
    };
    let out = &cfg.output_dir;
    outcome.log.write_all(out)?;
    let ckpt = out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt)?;
    if let Some(c) = &outcome.controller {
        checkpoint::save(&ckpt.join(CONTROLLER_FILE), &c.to_tensors()).map_err(AodError::from)?;
    }
    let top = outcome.log.top(5)?;
    writeln!(stdout, "{} children evaluated", outcome.log.len())?;
    write!(stdout, "{}", format_top(&top))?;

    let Some(best) = top.first() else { return Ok(()) };
    // The best child continues from the shared weights it left in the store.
    let mut store: ParamStore = outcome.store.clone();
    let steps = cfg.search.child_steps;
    let seed = derive_seed(cfg.seed, STREAM_FINAL, 0);
    match train_final(&best.spec, &mut store, &splits, steps, &cfg.zoo, &cfg.search.lr_drops, seed) {
        Ok(model) => {
            save_child(&ckpt.join(BEST_CHILD_DIR), &model, &store)?;
            let report = FinalReport {
                spec: best.spec.clone(),
                search_reward: best.reward,
                train_steps: steps,
                valid: score_split(&model, &store, &splits.valid, cfg.zoo.eval_chunk)?,
                test: score_split(&model, &store, &splits.test, cfg.zoo.eval_chunk)?,
            };
            fs::write(out.join(FINAL_FILE), serde_json::to_string_pretty(&report)?)?;
            writeln!(
                stdout,
                "best child retrained: valid auroc {:.4}, test auroc {:.4}",
                report.valid.auroc, report.test.auroc
            )?;
        }
        Err(e) => eprintln!("warning: best child could not be retrained: {e}"),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainReport {
    spec: ModelSpec,
    train_steps: usize,
    valid: SplitScores,
    test: SplitScores,
}

fn train_one(spec_path: &Path, cfg: &RunConfig, stdout: &mut dyn Write) -> CliResult<()> {
    let text = fs::read_to_string(spec_path).map_err(|e| Failure::Usage(format!("{}: {e}", spec_path.display())))?;
    let spec: ModelSpec =
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", spec_path.display())))?;
    if spec.layers.is_empty() {
        return Err(Failure::Usage("spec has no layers".into()));
    }
    aod_core::space::encode(&spec).map_err(|e| Failure::Usage(e.to_string()))?;
    write_config_echo(cfg)?;
    let splits = cfg.dataset.materialize()?;
    let mut store = ParamStore::new(cfg.zoo.optimizer_kind(), cfg.zoo.learning_rate, cfg.seed)?;
    let steps = cfg.search.child_steps;
    let model = train_final(&spec, &mut store, &splits, steps, &cfg.zoo, &cfg.search.lr_drops, derive_seed(cfg.seed, STREAM_FINAL, 0))?;
    let report = TrainReport {
        spec,
        train_steps: steps,
        valid: score_split(&model, &store, &splits.valid, cfg.zoo.eval_chunk)?,
        test: score_split(&model, &store, &splits.test, cfg.zoo.eval_chunk)?,
    };
    save_child(&cfg.output_dir.join(CHECKPOINT_DIR).join("child"), &model, &store)?;
    fs::write(cfg.output_dir.join(FINAL_FILE), serde_json::to_string_pretty(&report)?)?;
    writeln!(
        stdout,
        "valid auroc {:.4}, test auroc {:.4}",
        report.valid.auroc, report.test.auroc
    )?;
    Ok(())
}

fn evaluate(ckpt: &Path, split: SplitName, cfg: &RunConfig, write: bool, stdout: &mut dyn Write) -> CliResult<()> {
    let (model, store) = load_child(ckpt, &cfg.zoo).map_err(|e| match e {
        AodError::Io(io) => Failure::Usage(format!("{}: {io}", ckpt.display())),
        other => other.into(),
    })?;
    let splits = cfg.dataset.materialize()?;
    let data = match split {
        SplitName::Train => &splits.train,
        SplitName::Valid => &splits.valid,
        SplitName::Test => &splits.test,
    };
    if data.shape() != model.input_shape {
        return Err(Failure::Usage(format!(
            "checkpoint expects inputs {:?}, the dataset has {:?}",
            model.input_shape,
            data.shape()
        )));
    }
    let scores = score_split(&model, &store, data, cfg.zoo.eval_chunk)?;
    let json = serde_json::to_string_pretty(&scores)?;
    writeln!(stdout, "{json}")?;
    if write {
        fs::create_dir_all(&cfg.output_dir)?;
        let name = format!("evaluation_{}.json", serde_json::to_value(split)?.as_str().unwrap_or("split"));
        fs::write(cfg.output_dir.join(name), json)?;
    }
    Ok(())
}

fn report(log_dir: &Path, out: Option<&Path>, stdout: &mut dyn Write) -> CliResult<()> {
    let log = SearchLog::read(log_dir).map_err(|e| match e {
        AodError::Io(io) => Failure::Usage(format!("{}: {io}", log_dir.display())),
        other => other.into(),
    })?;
    let csv = log.summary_csv();
    let top = log.top(5)?;
    write!(stdout, "{csv}\n{}", format_top(&top))?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(SUMMARY_FILE), &csv)?;
        fs::write(dir.join(TOP5_FILE), serde_json::to_string_pretty(&top)?)?;
    }
    Ok(())
}
