//! Command-line driver: train, evaluate, benchmark and gradient-check.
//!
//! Exit codes: 0 success, 1 invalid input, 2 failure while running.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand};
use evidentia::diffcore::OpKind;
use evidentia::evaluation::{save_results, ResultRow};
use evidentia::evidence::save_diagnostics;
use evidentia::experiment::{self, DATA_ENV};
use evidentia::gradsuite;
use evidentia::training::save_log;
use evidentia::{Checkpoint, Dataset, Error, ExperimentConfig, Split, Task};

#[derive(Parser)]
#[command(name = "evidentia", version, about = "Hypothesis evaluation from many evidence sentences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its checkpoint and epoch log.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on one split.
    Eval(EvalArgs),
    /// Repeated train+test runs summarized as mean ± 95% interval.
    Benchmark(BenchArgs),
    /// Finite-difference check of every op and encoder.
    Gradcheck(GradArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Runs trained at once; defaults to the number of cores.
    #[arg(long)]
    jobs: Option<usize>,
    /// Overrides the config's run count.
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; defaults to `$EVIDENTIA_DATA/<task>`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Needed when the checkpoint does not record its task.
    #[arg(long)]
    task: Option<Task>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Write `eval.csv` and per-evidence `diagnostics.csv` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.downcast_ref::<Error>().is_some_and(Error::is_validation);
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}

/// Load, override and resolve an experiment config, then write the fully
/// materialized copy into the output directory.
fn prepare(common: &Common, runs: Option<usize>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(runs) = runs {
        cfg.runs = runs;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    let cfg = cfg.resolve_from_env()?;
    create_dir(&cfg.out_dir)?;
    write(&cfg.out_dir.join("config.json"), cfg.to_json())?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        context: format!("creating {}", dir.display()),
        source: e,
    })?;
    Ok(())
}

fn write(path: &Path, text: String) -> anyhow::Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        context: format!("writing {}", path.display()),
        source: e,
    })?;
    Ok(())
}

fn model_name(cfg: &evidentia::ModelConfig) -> String {
    format!("{}/{}", cfg.encoder.kind, cfg.scheme)
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = prepare(&args.common, None)?;
    let (dataset, vectors) = cfg.load_data()?;
    log::info!(
        "{}: {} train / {} val hypotheses, {} vectors",
        cfg.name,
        dataset.train.len(),
        dataset.val.len(),
        vectors.len()
    );
    let out = experiment::train_once(&dataset, &vectors, &cfg.model, &cfg.train, cfg.seed)?;
    let ck = out.checkpoint(&cfg.train, Some(cfg.task));
    let ck_path = cfg.out_dir.join("checkpoint.json");
    ck.save(&ck_path)?;
    save_log(&cfg.out_dir.join("train_log.csv"), &out.log)?;
    let best = out.best();
    println!(
        "epoch {} kept: train {:.4}, val {}",
        best.epoch,
        best.train_acc,
        best.val_acc.map_or("-".into(), |v| format!("{v:.4}"))
    );
    println!("checkpoint: {}", ck_path.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let task = match (args.task, ck.metadata.task) {
        (Some(t), _) | (None, Some(t)) => t,
        (None, None) => {
            return Err(Error::InvalidArgument("checkpoint has no task; pass --task".into()).into())
        }
    };
    let dir = match args.data {
        Some(d) => d,
        None => match std::env::var_os(DATA_ENV) {
            Some(root) => PathBuf::from(root).join(task.name()),
            None => {
                return Err(Error::InvalidArgument(format!(
                    "no --data given and {DATA_ENV} is unset"
                ))
                .into())
            }
        },
    };
    let model = ck.to_model()?;
    let dataset = Dataset::load(&dir, task)?;
    let split = dataset.split(args.split);
    let acc = experiment::evaluate(&model, split)?;
    let rows: Vec<ResultRow> = acc
        .iter()
        .map(|(class, &mean)| ResultRow {
            model: model_name(model.config()),
            dataset: task.name().into(),
            split: args.split.name().into(),
            class: class.clone(),
            mean,
            ci95: None,
            n: 1,
        })
        .collect();
    for r in &rows {
        println!("{} {} {}: {:.4}", r.dataset, r.split, r.class, r.mean);
    }
    if let Some(out) = args.out {
        create_dir(&out)?;
        save_results(&out.join("eval.csv"), &rows)?;
        let preds = model.predict_prepared(&model.prepare_split(split)?)?;
        save_diagnostics(&out.join("diagnostics.csv"), &preds)?;
    }
    Ok(())
}

fn cmd_benchmark(args: BenchArgs) -> anyhow::Result<()> {
    let cfg = prepare(&args.common, args.runs)?;
    let jobs = match args.jobs {
        Some(0) => return Err(Error::InvalidArgument("--jobs must be positive".into()).into()),
        Some(j) => j,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let (dataset, vectors) = cfg.load_data()?;
    let report = experiment::benchmark(&dataset, &vectors, &cfg.model, &cfg.train, cfg.runs, cfg.seed, jobs)?;
    for (i, msg) in &report.failures {
        log::warn!("run {i} excluded: {msg}");
    }
    let rows = experiment::result_rows(&model_name(&cfg.model), cfg.task, Split::Test, &report);
    for (class, s) in &report.stats {
        println!("{} test {class}: {} over {} runs", cfg.task.name(), s.display(), s.n());
    }
    save_results(&cfg.out_dir.join("results.csv"), &rows)?;
    Ok(())
}

fn cmd_gradcheck(args: GradArgs) -> anyhow::Result<()> {
    let fault = args
        .inject_fault
        .as_deref()
        .map(OpKind::from_name)
        .transpose()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let rows = gradsuite::check_all(args.seed, fault);
    println!("{:<8} {:<12} {:>6} {:>12}  result", "group", "name", "points", "max_rel_err");
    for r in &rows {
        println!(
            "{:<8} {:<12} {:>6} {:>12.3e}  {}",
            r.group,
            r.name,
            r.points,
            r.max_error,
            match (&r.failure, r.passed()) {
                (Some(f), _) => format!("ERROR {f}"),
                (None, true) => "pass".into(),
                (None, false) => "FAIL".into(),
            }
        );
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    println!(
        "all {} checks within {:e} (epsilon {:e})",
        rows.len(),
        gradsuite::TOLERANCE,
        gradsuite::EPSILON
    );
    Ok(())
}
