use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use almauc::alm::train;
use almauc::config::{Overrides, RunConfig, Task};
use almauc::data::{load_csv, save_csv, stratified_splits, Dataset};
use almauc::experiments::{
    batch_seed, ensemble_run, evaluate_logits, grid_search, markdown_table, model_seed, write_results_csv,
    Candidate, EvalMetrics, ExperimentResult, RunContext,
};
use almauc::losses::LossSpec;
use almauc::metrics::roc;
use almauc::netcore::{sigmoid, Checkpoint, Mlp};
use almauc::oracle::{run_verify, VerifyOptions};

/// Thread count for parallel runs; rayon's default when unset.
const THREADS_ENV: &str = "ALMAUC_THREADS";

#[derive(Parser)]
#[command(name = "almauc", version, about = "AUC-constrained training with an augmented Lagrangian")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model on a stratified split and evaluate it on the test set.
    Train(Common),
    /// Evaluate a checkpoint on a CSV dataset or on the test set of a config.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labelled CSV; the config's test set is used when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Staged grid search on the validation split.
    Grid(Common),
    /// Train k models on stratified splits and ensemble their logits.
    Ensemble(Common),
    /// Run the oracle checks and print a PASS/FAIL/REPORT table.
    Verify {
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for `verify.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1000)]
        instances: usize,
    },
    /// Markdown comparison table from the result files in a directory.
    Report {
        dir: PathBuf,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the configured training pool and test set as CSV.
    Generate(Common),
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = cfg.with_overrides(&Overrides {
        seed: c.seed,
        out: c.out.clone(),
    });
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    Ok(&cfg.out)
}

fn write_roc(path: &Path, logits: &almauc::netcore::Matrix, data: &Dataset) -> Result<()> {
    if logits.cols() != 1 {
        return Ok(());
    }
    let labels: Vec<bool> = data.labels().iter().map(|l| data.is_critical(*l)).collect();
    let scores: Vec<f64> = logits.as_slice().iter().map(|&z| sigmoid(z)).collect();
    roc(&scores, &labels)?.write_csv(fs::File::create(path)?)?;
    Ok(())
}

fn cmd_train(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let data = cfg.load_data()?;
    let split = stratified_splits(&data.pool, 1, cfg.train_fraction, cfg.seed)?.remove(0);
    let spec = LossSpec::new(cfg.loss, split.train.class_counts().to_vec())?;
    let model = cfg.model.build(&split.train, model_seed(cfg.seed, 0))?;
    let mut alm = cfg.alm.clone();
    alm.seed = batch_seed(cfg.seed, 0);
    let outcome = train(model, &split.train, &split.validation, &spec, &alm)?;

    let dir = out_dir(&cfg)?;
    outcome.trace.write_csv(fs::File::create(dir.join("trace.csv"))?)?;
    write_json(&dir.join("checkpoint.json"), &outcome.model.to_checkpoint())?;
    write_json(&dir.join("constraint_state.json"), &outcome.state)?;
    let logits = outcome.model.logits(&data.test.features())?;
    let metrics = evaluate_logits(&logits, &data.test)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    write_roc(&dir.join("roc.csv"), &logits, &data.test)?;
    print_metrics(&metrics);
    Ok(())
}

fn print_metrics(m: &EvalMetrics) {
    let name = match m {
        EvalMetrics::Binary { .. } => "AUC",
        EvalMetrics::Multiclass { .. } => "critical AUC",
    };
    println!("{name}: {:.4}  accuracy: {:.4}", m.auc(), m.accuracy());
    for r in m.rates() {
        println!("  @{:.0}% TPR: {:.4}", r.tpr * 100.0, r.value);
    }
}

fn cmd_evaluate(checkpoint: &Path, data: Option<&Path>, c: &Common) -> Result<()> {
    let ckpt: Checkpoint = serde_json::from_str(
        &fs::read_to_string(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?,
    )?;
    let model = Mlp::from_checkpoint(&ckpt)?;
    let dataset = match data {
        Some(p) => load_csv(p)?,
        None => load_config(c)?.load_data()?.test,
    };
    let logits = model.logits(&dataset.features())?;
    let metrics = evaluate_logits(&logits, &dataset)?;
    match &c.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            write_json(&dir.join("metrics.json"), &metrics)?;
            write_roc(&dir.join("roc.csv"), &logits, &dataset)?;
            print_metrics(&metrics);
        }
        None => println!("{}", serde_json::to_string_pretty(&metrics)?),
    }
    Ok(())
}

fn cmd_grid(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let data = cfg.load_data()?;
    let split = stratified_splits(&data.pool, 1, cfg.train_fraction, cfg.seed)?.remove(0);
    let grid = cfg.grid_or_default(&data.pool);
    let ctx = RunContext {
        model: &cfg.model,
        base: &cfg.alm,
        split: 0,
    };
    let outcome = grid_search(&split.train, &split.validation, &grid, ctx, cfg.budget)?;
    let dir = out_dir(&cfg)?;
    outcome.write_leaderboard_csv(fs::File::create(dir.join("leaderboard.csv"))?)?;
    let best = RunConfig {
        loss: outcome.best.loss,
        alm: outcome.best.apply(&cfg.alm),
        grid: None,
        ..cfg.clone()
    };
    write_json(&dir.join("best_config.json"), &best)?;
    println!(
        "best {} (mu0 {}, rho {}, delta {}): validation {:.4} over {} runs{}",
        outcome.best.method(),
        outcome.best.mu0,
        outcome.best.rho,
        outcome.best.delta,
        outcome.best_metric,
        outcome.leaderboard.len(),
        if outcome.exhausted { ", budget exhausted" } else { "" }
    );
    Ok(())
}

fn cmd_ensemble(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let data = cfg.load_data()?;
    let cand = Candidate::from_config(cfg.loss, &cfg.alm);
    let result = ensemble_run(
        &data.pool,
        &data.test,
        &cand,
        &cfg.model,
        &cfg.alm,
        cfg.ensemble_k,
        cfg.train_fraction,
    )?;
    let dir = out_dir(&cfg)?;
    let stem = format!("result-{}", result.method);
    write_json(&dir.join(format!("{stem}.json")), &result)?;
    write_results_csv(std::slice::from_ref(&result), fs::File::create(dir.join(format!("{stem}.csv")))?)?;
    println!(
        "{}: avg AUC {:.4} +- {:.4}, ensembled AUC {:.4}",
        result.method,
        result.mean_auc,
        result.std_auc,
        result.ensemble.auc()
    );
    Ok(())
}

fn cmd_verify(seed: Option<u64>, out: Option<&Path>, trials: usize, instances: usize) -> Result<bool> {
    let report = run_verify(&VerifyOptions {
        seed: seed.unwrap_or(0),
        gradient_trials: trials,
        random_instances: instances,
    })?;
    print!("{}", report.table());
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("verify.json"), &report)?;
    }
    Ok(!report.has_failure())
}

fn cmd_report(dir: &Path, out: Option<&Path>) -> Result<()> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut results = Vec::new();
    for p in paths {
        let text = fs::read_to_string(&p)?;
        if let Ok(r) = serde_json::from_str::<ExperimentResult>(&text) {
            results.push(r);
        }
    }
    if results.is_empty() {
        bail!("no result files in {}", dir.display());
    }
    let table = markdown_table(&results)?;
    match out {
        Some(p) => fs::write(p, table)?,
        None => print!("{table}"),
    }
    Ok(())
}

fn cmd_generate(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let data = cfg.load_data()?;
    let dir = out_dir(&cfg)?;
    save_csv(&data.pool, &dir.join("train.csv"))?;
    save_csv(&data.test, &dir.join("test.csv"))?;
    let task = if cfg.task == Task::Binary { "binary" } else { "multi-class" };
    println!(
        "{task}: train counts {:?}, test counts {:?}",
        data.pool.class_counts(),
        data.test.class_counts()
    );
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV}={v} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    match &cli.command {
        Command::Train(c) => cmd_train(c)?,
        Command::Evaluate { checkpoint, data, common } => cmd_evaluate(checkpoint, data.as_deref(), common)?,
        Command::Grid(c) => cmd_grid(c)?,
        Command::Ensemble(c) => cmd_ensemble(c)?,
        Command::Verify {
            seed,
            out,
            trials,
            instances,
        } => return cmd_verify(*seed, out.as_deref(), *trials, *instances),
        Command::Report { dir, out } => cmd_report(dir, out.as_deref())?,
        Command::Generate(c) => cmd_generate(c)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
