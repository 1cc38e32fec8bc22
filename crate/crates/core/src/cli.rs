//! Command-line front end: `simulate`, `run`, `evaluate`, `cost-model`.
//!
//! Run settings resolve as flags over `--config` JSON over built-in
//! defaults. Exit codes: 0 success, 2 validation, 3 numerical, 4 I/O.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::approx::LambdaPolicy;
use crate::cost::{cost_model_eval, CostModel};
use crate::data::{self, OrderScheme, SparseMatrix, StructuredWeighting, TripletFormat};
use crate::error::{validation, Error, Result};
use crate::eval::{self, MetricReport};
use crate::pipeline::{self, Method, RunConfig, RunOptions};
use crate::seed;

#[derive(Debug, Parser)]
#[command(name = "bmfpp", version, about = "Distributed Bayesian matrix factorization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a low-rank matrix with Gaussian noise and split it.
    Simulate(SimulateArgs),
    /// Fit a model and write a run directory.
    Run(RunArgs),
    /// Score a run directory against held-out data.
    Evaluate(EvaluateArgs),
    /// Print proportional compute and communication costs over worker counts.
    CostModel(CostArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Missing {
    Random,
    Structured,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Weights {
    Raw,
    Rescaled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Plain,
    Movielens,
}

impl From<Format> for TripletFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Plain => TripletFormat::Plain,
            Format::Movielens => TripletFormat::MovielensDat,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Missing::Random)]
    pub missing: Missing,
    /// Test fraction for random missingness.
    #[arg(long, default_value_t = 0.8)]
    pub test_frac: f64,
    /// Weight mode for structured missingness.
    #[arg(long, value_enum, default_value_t = Weights::Rescaled)]
    pub weights: Weights,
    /// Output directory for train.txt, test.txt and truth.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub train: PathBuf,
    /// Held-out entries; RMSE is printed when given.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Plain)]
    pub format: Format,
    /// Withhold this fraction of `--train` as the test set instead of `--test`.
    #[arg(long)]
    pub split: Option<f64>,
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<String>,
    /// Grid such as `5x5`.
    #[arg(long)]
    pub partition: Option<String>,
    #[arg(long)]
    pub order: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub top_n: Option<usize>,
    /// A positive number, or `median` for the median pairwise distance.
    #[arg(long)]
    pub lambda: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub replicates: usize,
    /// Root for run directories.
    #[arg(long, env = "BMFPP_OUTPUT", default_value = "runs")]
    pub out: PathBuf,
    /// Run directory name under `--out`; derived from the settings if absent.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run directory written by `run`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Plain)]
    pub format: Format,
    /// Same split fraction the run used when `--test` is absent.
    #[arg(long)]
    pub split: Option<f64>,
    /// Run directory of the full-data baseline for the speed-up.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Comma-separated training-count edges; `inf` closes the last bin.
    #[arg(long)]
    pub bins: Option<String>,
    /// Align latent dimensions before correlating (default: only for
    /// embarrassingly parallel runs).
    #[arg(long)]
    pub align: Option<bool>,
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub m: usize,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 1200)]
    pub t: usize,
    /// Mixture components per row.
    #[arg(long, default_value_t = 1)]
    pub c: usize,
    /// Comma-separated worker counts.
    #[arg(long, default_value = "1,4,9,16,25,36,49,64")]
    pub workers: String,
}

fn parse_partition(s: &str) -> Result<(usize, usize)> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| validation!("partition '{s}' is not of the form RxC"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| validation!("partition '{s}' is not of the form RxC"))
    };
    Ok((parse(r)?, parse(c)?))
}

fn parse_lambda(s: &str) -> Result<LambdaPolicy> {
    if s == "median" {
        return Ok(LambdaPolicy::MedianPairwise);
    }
    s.parse::<f64>()
        .ok()
        .filter(|v| *v > 0.0 && v.is_finite())
        .map(LambdaPolicy::Fixed)
        .ok_or_else(|| validation!("lambda must be a positive number or 'median', got '{s}'"))
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| match v.trim() {
            "inf" | "∞" => Ok(f64::INFINITY),
            t => t.parse::<f64>().map_err(|_| validation!("bad number '{t}' in '{s}'")),
        })
        .collect()
}

/// Defaults, then the JSON file, then explicit flags.
pub fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(m) = &args.method {
        cfg.method = m.parse()?;
    }
    if let Some(p) = &args.partition {
        (cfg.rows, cfg.cols) = parse_partition(p)?;
    }
    if let Some(o) = &args.order {
        cfg.order = o.parse::<OrderScheme>()?;
    }
    if let Some(l) = &args.lambda {
        cfg.lambda = parse_lambda(l)?;
    }
    macro_rules! take {
        ($($field:ident),*) => { $(if let Some(v) = args.$field { cfg.$field = v; })* };
    }
    take!(k, tau, iterations, burn_in, thin, seed, top_n, workers);
    if cfg.prior.as_ref().is_some_and(|p| p.k() != cfg.k) {
        return Err(validation!("prior in config has a different K than --k"));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Training and test matrices per the flags: explicit files, or a seeded
/// random split of the training file.
fn load_data(
    train: &Path,
    test: Option<&Path>,
    format: Format,
    split: Option<f64>,
    seed: u64,
) -> Result<(SparseMatrix, Option<SparseMatrix>)> {
    let all = data::load_triplets(train, format.into())?;
    match (test, split) {
        (Some(_), Some(_)) => Err(validation!("use either --test or --split, not both")),
        (Some(path), None) => {
            let t = data::load_triplets(path, format.into())?;
            Ok((all, Some(t)))
        }
        (None, Some(frac)) => {
            let (tr, te) = data::split_random(&all, frac, seed)?;
            Ok((tr, Some(te)))
        }
        (None, None) => Ok((all, None)),
    }
}

fn check_shapes(train: &SparseMatrix, test: &SparseMatrix) -> Result<()> {
    let outside = test
        .entries()
        .iter()
        .any(|e| e.row >= train.n_rows() || e.col >= train.n_cols());
    if outside {
        return Err(validation!(
            "test entries fall outside the {}x{} training matrix",
            train.n_rows(),
            train.n_cols()
        ));
    }
    Ok(())
}

#[derive(Serialize)]
struct SplitInfo {
    missing: &'static str,
    n_train: usize,
    n_test: usize,
    realized_test_fraction: f64,
    expected_test_fraction: Option<f64>,
    weight_scale: Option<f64>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let (full, truth) = data::simulate(a.n, a.d, a.k, a.tau, a.seed)?;
    let split_seed = seed::derive(a.seed, &[seed::tag::SPLIT]);
    let (train, test, info) = match a.missing {
        Missing::Random => {
            let (tr, te) = data::split_random(&full, a.test_frac, split_seed)?;
            let info = SplitInfo {
                missing: "random",
                n_train: tr.nnz(),
                n_test: te.nnz(),
                realized_test_fraction: te.nnz() as f64 / full.nnz() as f64,
                expected_test_fraction: Some(a.test_frac),
                weight_scale: None,
            };
            (tr, te, info)
        }
        Missing::Structured => {
            let weighting = match a.weights {
                Weights::Raw => StructuredWeighting::Raw,
                Weights::Rescaled => StructuredWeighting::Rescaled {
                    target: data::STRUCTURED_TARGET_FRACTION,
                },
            };
            let s = data::split_structured(&full, split_seed, weighting)?;
            let info = SplitInfo {
                missing: "structured",
                n_train: s.train.nnz(),
                n_test: s.test.nnz(),
                realized_test_fraction: s.realized_test_fraction,
                expected_test_fraction: Some(s.expected_test_fraction),
                weight_scale: Some(s.scale),
            };
            (s.train, s.test, info)
        }
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    train.write_triplets(a.out.join("train.txt"))?;
    test.write_triplets(a.out.join("test.txt"))?;
    write_json(&a.out.join("truth.json"), &truth)?;
    write_json(&a.out.join("split.json"), &info)?;
    println!(
        "wrote {}: {} train, {} test entries ({:.1}% test)",
        a.out.display(),
        info.n_train,
        info.n_test,
        100.0 * info.realized_test_fraction
    );
    Ok(())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

pub fn cmd_run(a: &RunArgs) -> Result<()> {
    if a.replicates == 0 {
        return Err(validation!("--replicates must be at least 1"));
    }
    let base = resolve_config(a)?;
    let (train, test) = load_data(&a.train, a.test.as_deref(), a.format, a.split, base.seed)?;
    if let Some(t) = &test {
        check_shapes(&train, t)?;
    }
    let mut rmses = Vec::new();
    let mut times = Vec::new();
    for r in 0..a.replicates {
        let cfg = RunConfig {
            seed: if a.replicates == 1 {
                base.seed
            } else {
                seed::derive(base.seed, &[r as u64])
            },
            ..base.clone()
        };
        let stem = a.name.clone().unwrap_or_else(|| {
            format!("{}_{}x{}_seed{}", cfg.method, cfg.rows, cfg.cols, base.seed)
        });
        let dir = if a.replicates == 1 {
            a.out.join(&stem)
        } else {
            a.out.join(&stem).join(format!("rep{r}"))
        };
        let result = pipeline::run(
            &train,
            &cfg,
            &RunOptions {
                run_dir: Some(dir.clone()),
                keep_chains: false,
            },
        )?;
        let t = result.timings.distributed_seconds;
        times.push(t);
        print!("{}: {} {}x{} seed {} time {:.2}s", dir.display(), cfg.method, cfg.rows, cfg.cols, cfg.seed, t);
        if let Some(test) = &test {
            let e = eval::rmse(&result.predict(test), &test.values())?;
            rmses.push(e);
            print!(" rmse {e:.4}");
        }
        println!();
        if !result.corrections.is_empty() {
            println!("  eigenvalue corrections: {}", result.corrections.len());
        }
    }
    if a.replicates > 1 {
        let (tm, ts) = mean_std(&times);
        print!("{} replicates: time {tm:.2} ± {ts:.2}s", a.replicates);
        if !rmses.is_empty() {
            let (m, s) = mean_std(&rmses);
            print!(", rmse {m:.4} ± {s:.4}");
        }
        println!();
    }
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let run = pipeline::load_run(&a.run)?;
    let (train, test) = load_data(&a.train, a.test.as_deref(), a.format, a.split, run.config.seed)?;
    let test = test.ok_or_else(|| validation!("evaluate needs --test or --split"))?;
    check_shapes(&train, &test)?;
    let (x, w) = (&run.factors.x_mean, &run.factors.w_mean);
    if x.n_rows() != train.n_rows() || w.n_rows() != train.n_cols() {
        return Err(validation!(
            "run factors are {}x{} but the data is {}x{}",
            x.n_rows(),
            w.n_rows(),
            train.n_rows(),
            train.n_cols()
        ));
    }
    let preds = crate::sampler::predict(x, w, &test.indices())?;
    let rmse = eval::rmse(&preds, &test.values())?;
    let edges = match &a.bins {
        Some(s) => parse_list(s)?,
        None => eval::DEFAULT_BIN_EDGES.to_vec(),
    };
    let bins = eval::rmse_by_frequency(&preds, &train, &test, &edges)?;
    let align = a.align.unwrap_or(run.config.method == Method::EpParametric);
    let correlations = eval::subset_mean_correlations(&run.block_means, &run.plan, align)?;
    let wts = match &a.baseline {
        Some(dir) => {
            let base = pipeline::load_run(dir)?;
            Some(eval::wts(
                base.timings.distributed_seconds,
                run.timings.distributed_seconds,
            )?)
        }
        None => None,
    };
    let report = MetricReport {
        method: run.config.method.to_string(),
        partition: format!("{}x{}", run.plan.n_row_blocks(), run.plan.n_col_blocks()),
        seed: run.config.seed,
        rmse,
        bins,
        mean_correlation: eval::mean_flattened(&correlations),
        correlations,
        distributed_seconds: run.timings.distributed_seconds,
        wts,
    };
    print!("{}", report.to_table());
    if let Some(p) = &a.json {
        std::fs::write(p, report.to_json()).map_err(|e| Error::io(p, e))?;
    }
    if let Some(p) = &a.csv {
        let f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
        eval::write_csv(f, &[report.csv_row()])?;
    }
    Ok(())
}

pub fn cmd_cost_model(a: &CostArgs) -> Result<()> {
    let workers: Vec<usize> = parse_list(&a.workers)?
        .into_iter()
        .map(|v| {
            if v >= 1.0 && v.fract() == 0.0 && v.is_finite() {
                Ok(v as usize)
            } else {
                Err(validation!("worker counts must be positive integers"))
            }
        })
        .collect::<Result<_>>()?;
    println!("{:>6} {:>14} {:>14} {:>14} {:>14}", "U", "t0", "t_a", "total", "comm");
    for u in workers {
        let e = cost_model_eval(&CostModel::new(a.n, a.d, a.m, a.k, a.t, u, a.c))?;
        println!(
            "{u:>6} {:>14.4e} {:>14.4e} {:>14.4e} {:>14.4e}",
            e.t0, e.t_a, e.total, e.communication
        );
    }
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Run(a) => cmd_run(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::CostModel(a) => cmd_cost_model(a),
    }
}

/// Parses `std::env::args`, runs, and returns the process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
