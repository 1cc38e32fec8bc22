//! Full-data, staged (posterior propagation) and embarrassingly parallel runs.
//!
//! A staged run over an `I x J` grid proceeds as:
//!
//! 1. block `(0,0)` with the hierarchical prior on both sides;
//! 2. blocks `(i,0)` with `W` primed by `(0,0)`, and blocks `(0,j)` with `X`
//!    primed by `(0,0)`;
//! 3. blocks `(i,j)`, `i, j >= 1`, with `X` primed by `(i,0)` and `W` by `(0,j)`;
//!
//! followed by a per-row aggregation. Blocks within a stage run concurrently;
//! stages are separated by barriers. Every block's per-row approximations are
//! written to a [`Store`] and read back by whoever consumes them, so the
//! posterior file is the only thing crossing a stage boundary.
//!
//! Run directory layout:
//!
//! ```text
//! run_config.json  plan.json  timings.json
//! stage1/ stage2/ stage3/   {x,w}_{i}_{j}.post, means_{i}_{j}.json
//! aggregate/                x.post, w.post (original index order),
//!                           factors.json, corrections.json
//! ```
//!
//! Embarrassingly parallel runs place all blocks under `stage1/`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{self, AggregationInput, Correction};
use crate::approx::{
    self, ApproxKind, FitSettings, GmmPosterior, LambdaPolicy, RowPosterior, SidePosteriors,
    DEFAULT_TOP_N,
};
use crate::data::{self, Block, OrderScheme, PartitionPlan, SparseMatrix};
use crate::error::{validation, Error, Result};
use crate::linalg::{self, dot, Factors};
use crate::posterior_io::{self, PosteriorFile};
use crate::sampler::{
    self, GibbsConfig, NormalWishartPrior, RowPriorSet, RowPriors, SampleChain, Side,
};
use crate::seed::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Full,
    PpMm,
    PpDm,
    PpGmm,
    EpParametric,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Full,
        Method::PpMm,
        Method::PpDm,
        Method::PpGmm,
        Method::EpParametric,
    ];

    /// Approximation fitted to each block's sample clouds.
    pub fn approx(self) -> ApproxKind {
        match self {
            Method::PpDm => ApproxKind::Dm,
            Method::PpGmm => ApproxKind::Gmm,
            Method::Full | Method::PpMm | Method::EpParametric => ApproxKind::Mm,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::PpMm => "pp-mm",
            Method::PpDm => "pp-dm",
            Method::PpGmm => "pp-gmm",
            Method::EpParametric => "ep-parametric",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| validation!("unknown method '{s}' (full|pp-mm|pp-dm|pp-gmm|ep-parametric)"))
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub k: usize,
    pub tau: f64,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub method: Method,
    pub order: OrderScheme,
    pub rows: usize,
    pub cols: usize,
    pub top_n: usize,
    pub lambda: LambdaPolicy,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    /// Eigenvalue-correction constant relative to `trace(Lambda_1) / K`.
    pub eps_ev_rel: f64,
    /// Normal-Wishart hyperprior; `None` means the defaults for `k`.
    pub prior: Option<NormalWishartPrior>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k: 10,
            tau: 1.0,
            iterations: 1200,
            burn_in: 800,
            thin: 2,
            seed: 0,
            method: Method::PpMm,
            order: OrderScheme::Decreasing,
            rows: 1,
            cols: 1,
            top_n: DEFAULT_TOP_N,
            lambda: LambdaPolicy::MedianPairwise,
            workers: 0,
            eps_ev_rel: aggregate::EPS_EV_REL,
            prior: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.gibbs_config(0).validate()?;
        if self.rows == 0 || self.cols == 0 {
            return Err(validation!("partition must be at least 1x1"));
        }
        if self.top_n == 0 {
            return Err(validation!("top_n must be at least 1"));
        }
        if let LambdaPolicy::Fixed(l) = self.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(validation!("lambda must be positive, got {l}"));
            }
        }
        if !(self.eps_ev_rel > 0.0) {
            return Err(validation!("eps_ev_rel must be positive"));
        }
        if let Some(p) = &self.prior {
            NormalWishartPrior::new(p.mu0.clone(), p.beta0, p.w0.clone(), p.nu0)?;
            if p.k() != self.k {
                return Err(validation!("prior has K = {}, config K = {}", p.k(), self.k));
            }
        }
        Ok(())
    }

    pub fn nw_prior(&self) -> NormalWishartPrior {
        self.prior
            .clone()
            .unwrap_or_else(|| NormalWishartPrior::default_for(self.k))
    }

    /// Seed of block `(i, j)`; independent of stage and scheduling order.
    pub fn block_seed(&self, i: usize, j: usize) -> u64 {
        seed::derive(self.seed, &[i as u64, j as u64])
    }

    pub fn gibbs_config(&self, seed: u64) -> GibbsConfig {
        GibbsConfig {
            k: self.k,
            tau: self.tau,
            iterations: self.iterations,
            burn_in: self.burn_in,
            thin: self.thin,
            seed,
            parallel_rows: true,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| validation!("run config: {e}"))
    }
}

/// Orders `train` per the config and cuts it into `rows x cols` blocks.
pub fn make_plan(train: &SparseMatrix, config: &RunConfig) -> Result<PartitionPlan> {
    let ordering = data::order_matrix(train, config.order, config.seed);
    data::partition(train, ordering, config.rows, config.cols)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
    Three,
}

impl Stage {
    pub fn of(i: usize, j: usize) -> Stage {
        match (i, j) {
            (0, 0) => Stage::One,
            (0, _) | (_, 0) => Stage::Two,
            _ => Stage::Three,
        }
    }

    pub fn dir(self) -> &'static str {
        match self {
            Stage::One => "stage1",
            Stage::Two => "stage2",
            Stage::Three => "stage3",
        }
    }

    /// Blocks scheduled in this stage, row-major.
    pub fn blocks(self, n_row_blocks: usize, n_col_blocks: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..n_row_blocks {
            for j in 0..n_col_blocks {
                if Stage::of(i, j) == self {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Where posterior files and run metadata live: a directory, or an
/// in-memory map holding the same bytes.
#[derive(Debug)]
pub enum Store {
    Dir(PathBuf),
    Memory(Mutex<HashMap<String, Vec<u8>>>),
}

impl Store {
    pub fn directory(root: impl Into<PathBuf>) -> Result<Store> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Store::Dir(root))
    }

    pub fn memory() -> Store {
        Store::Memory(Mutex::new(HashMap::new()))
    }

    pub fn root(&self) -> Option<&Path> {
        match self {
            Store::Dir(p) => Some(p),
            Store::Memory(_) => None,
        }
    }

    pub fn put(&self, name: &str, bytes: &[u8]) -> Result<()> {
        match self {
            Store::Dir(root) => {
                let path = root.join(name);
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                let tmp = path.with_extension("tmp");
                fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
                fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
            }
            Store::Memory(map) => {
                map.lock().unwrap().insert(name.to_string(), bytes.to_vec());
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<Vec<u8>> {
        match self {
            Store::Dir(root) => {
                let path = root.join(name);
                fs::read(&path).map_err(|e| Error::io(&path, e))
            }
            Store::Memory(map) => map.lock().unwrap().get(name).cloned().ok_or_else(|| {
                Error::io(
                    name,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "not in memory store"),
                )
            }),
        }
    }

    fn put_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).expect("serializable run artifact");
        self.put(name, text.as_bytes())
    }

    fn get_json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T> {
        let bytes = self.get(name)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: name.into(),
            msg: e.to_string(),
        })
    }

    fn path_of(&self, name: &str) -> PathBuf {
        match self {
            Store::Dir(root) => root.join(name),
            Store::Memory(_) => PathBuf::from(name),
        }
    }
}

pub fn posterior_name(stage: Stage, i: usize, j: usize, side: Side) -> String {
    format!("{}/{}_{i}_{j}.post", stage.dir(), side.name())
}

fn means_name(stage: Stage, i: usize, j: usize) -> String {
    format!("{}/means_{i}_{j}.json", stage.dir())
}

pub fn persist_posteriors(
    store: &Store,
    stage: Stage,
    i: usize,
    j: usize,
    file: &PosteriorFile,
) -> Result<()> {
    store
        .put(&posterior_name(stage, i, j, file.side), &posterior_io::encode(file))
        .map_err(|e| e.in_block(stage.dir(), i, j))
}

pub fn load_posteriors(
    store: &Store,
    stage: Stage,
    i: usize,
    j: usize,
    side: Side,
) -> Result<PosteriorFile> {
    let name = posterior_name(stage, i, j, side);
    store
        .get(&name)
        .and_then(|bytes| posterior_io::decode(&bytes, &store.path_of(&name)))
        .map_err(|e| e.in_block(stage.dir(), i, j))
}

/// Chain-averaged factors of one block, in block-local row order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMeans {
    pub i: usize,
    pub j: usize,
    /// Permuted row positions covered.
    pub rows: Range<usize>,
    pub cols: Range<usize>,
    pub x_mean: Factors,
    pub w_mean: Factors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockTiming {
    pub i: usize,
    pub j: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub blocks: Vec<BlockTiming>,
    pub max_seconds: f64,
}

/// Per-stage wall-clock maxima plus aggregation: the time a run would take
/// with one worker per block.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: Vec<StageTiming>,
    pub aggregation_seconds: f64,
    pub distributed_seconds: f64,
    /// Elapsed time on this host.
    pub wall_seconds: f64,
}

impl Timings {
    fn finish(&mut self, started: Instant) {
        self.distributed_seconds =
            self.stages.iter().map(|s| s.max_seconds).sum::<f64>() + self.aggregation_seconds;
        self.wall_seconds = started.elapsed().as_secs_f64();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub side: Side,
    /// Permuted row position.
    pub row: usize,
    pub correction: Correction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockChain {
    pub i: usize,
    pub j: usize,
    pub chain: SampleChain,
}

#[derive(Clone, Debug)]
pub struct FactorizationResult {
    pub config: RunConfig,
    pub plan: PartitionPlan,
    /// Aggregated row posteriors in original row order.
    pub x: Vec<RowPosterior>,
    pub w: Vec<RowPosterior>,
    pub x_mean: Factors,
    pub w_mean: Factors,
    pub timings: Timings,
    pub block_means: Vec<BlockMeans>,
    pub corrections: Vec<CorrectionRecord>,
    /// Retained chains, populated only with [`RunOptions::keep_chains`].
    pub chains: Vec<BlockChain>,
}

impl FactorizationResult {
    /// Posterior-mean predictions for every entry of `matrix` (original
    /// indices).
    pub fn predict(&self, matrix: &SparseMatrix) -> Vec<f64> {
        matrix
            .entries()
            .iter()
            .map(|e| dot(self.x_mean.row(e.row), self.w_mean.row(e.col)))
            .collect()
    }

    pub fn block_means(&self, i: usize, j: usize) -> Option<&BlockMeans> {
        self.block_means.iter().find(|b| b.i == i && b.j == j)
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Run directory; stage files stay in memory when `None`.
    pub run_dir: Option<PathBuf>,
    pub keep_chains: bool,
}

/// Builds the plan from the config and dispatches on `config.method`.
pub fn run(train: &SparseMatrix, config: &RunConfig, options: &RunOptions) -> Result<FactorizationResult> {
    config.validate()?;
    match config.method {
        Method::Full => run_full(train, config, options),
        Method::EpParametric => run_ep(train, &make_plan(train, config)?, config, options),
        _ => run_pp(train, &make_plan(train, config)?, config, options),
    }
}

fn in_pool<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| validation!("worker pool: {e}"))?;
    pool.install(f)
}

fn open_store(options: &RunOptions) -> Result<Store> {
    match &options.run_dir {
        Some(dir) => Store::directory(dir),
        None => Ok(Store::memory()),
    }
}

fn start_run(store: &Store, config: &RunConfig, plan: &PartitionPlan) -> Result<()> {
    store.put_json("run_config.json", config)?;
    store.put("plan.json", plan.to_json().as_bytes())
}

/// Output of one block: fitted approximations, chain means and hyper means.
struct BlockOutcome {
    i: usize,
    j: usize,
    x: SidePosteriors,
    w: SidePosteriors,
    hyper_x: RowPosterior,
    hyper_w: RowPosterior,
    means: BlockMeans,
    seconds: f64,
    chain: Option<SampleChain>,
}

fn prior_gaussian(nw: &NormalWishartPrior) -> RowPosterior {
    RowPosterior {
        mean: nw.mu0.clone(),
        precision: nw.w0.clone(),
    }
}

fn as_row_priors(p: SidePosteriors) -> RowPriors {
    match p {
        SidePosteriors::Gaussian(v) => RowPriors::Gaussian(v),
        SidePosteriors::Gmm(v) => RowPriors::Gmm(v),
    }
}

/// What an empty block reports for a side: propagated priors unchanged, or
/// the hierarchical prior's starting point for a shared side.
fn passthrough(prior: &RowPriors, n: usize, nw: &NormalWishartPrior, kind: ApproxKind) -> SidePosteriors {
    match prior {
        RowPriors::Gaussian(v) => SidePosteriors::Gaussian(v.clone()),
        RowPriors::Gmm(v) => SidePosteriors::Gmm(v.clone()),
        RowPriors::SharedHyper => {
            let g = prior_gaussian(nw);
            if kind == ApproxKind::Gmm {
                SidePosteriors::Gmm(vec![GmmPosterior::single(g); n])
            } else {
                SidePosteriors::Gaussian(vec![g; n])
            }
        }
    }
}

fn means_of(p: &SidePosteriors, k: usize) -> Factors {
    let rows: Vec<DVector<f64>> = p.pooled().into_iter().map(|r| r.mean).collect();
    Factors::from_rows(k, &rows)
}

fn run_block(
    block: &Block,
    priors: RowPriorSet,
    config: &RunConfig,
    kind: ApproxKind,
    keep_chain: bool,
) -> Result<BlockOutcome> {
    let started = Instant::now();
    let nw = config.nw_prior();
    let block_seed = config.block_seed(block.i, block.j);
    let (n, d) = (block.rows.len(), block.cols.len());
    let (x, w, hyper_x, hyper_w, chain) = if block.data.is_empty() {
        log::info!("block ({}, {}) has no observations; passing priors through", block.i, block.j);
        let x = passthrough(&priors.x, n, &nw, kind);
        let w = passthrough(&priors.w, d, &nw, kind);
        (x, w, prior_gaussian(&nw), prior_gaussian(&nw), None)
    } else {
        let chain = sampler::gibbs_run(&block.data, &priors, &nw, &config.gibbs_config(block_seed))?;
        let settings = |side: Side| FitSettings {
            kind,
            lambda: config.lambda,
            top_n: config.top_n,
            seed: seed::derive(block_seed, &[tag::FIT, side.tag()]),
        };
        let x = approx::fit_rows(&chain.row_clouds(Side::X), settings(Side::X))?;
        let w = approx::fit_rows(&chain.row_clouds(Side::W), settings(Side::W))?;
        let hx = chain.hyper_mean(Side::X)?;
        let hw = chain.hyper_mean(Side::W)?;
        (x, w, hx, hw, Some(chain))
    };
    let (x_mean, w_mean) = match &chain {
        Some(c) => sampler::chain_posterior_mean(c)?,
        None => (means_of(&x, config.k), means_of(&w, config.k)),
    };
    Ok(BlockOutcome {
        i: block.i,
        j: block.j,
        x,
        w,
        hyper_x,
        hyper_w,
        means: BlockMeans {
            i: block.i,
            j: block.j,
            rows: block.rows.clone(),
            cols: block.cols.clone(),
            x_mean,
            w_mean,
        },
        seconds: started.elapsed().as_secs_f64(),
        chain: chain.filter(|_| keep_chain),
    })
}

fn persist_outcome(store: &Store, stage: Stage, o: &BlockOutcome, kind: ApproxKind, config: &RunConfig, block: &Block) -> Result<()> {
    for (side, post, range) in [
        (Side::X, &o.x, block.rows.clone()),
        (Side::W, &o.w, block.cols.clone()),
    ] {
        let file = PosteriorFile::new(config.k, side, kind, range, post.clone())
            .map_err(|e| e.in_block(stage.dir(), o.i, o.j))?;
        persist_posteriors(store, stage, o.i, o.j, &file)?;
    }
    store
        .put_json(&means_name(stage, o.i, o.j), &o.means)
        .map_err(|e| e.in_block(stage.dir(), o.i, o.j))
}

fn stage_timing(name: &str, outcomes: &[BlockOutcome]) -> StageTiming {
    StageTiming {
        stage: name.to_string(),
        blocks: outcomes
            .iter()
            .map(|o| BlockTiming {
                i: o.i,
                j: o.j,
                seconds: o.seconds,
            })
            .collect(),
        max_seconds: outcomes.iter().map(|o| o.seconds).fold(0.0, f64::max),
    }
}

/// Maps rows held in permuted order back to original indices.
fn unpermute<T: Clone>(perm: &[usize], permuted: Vec<T>) -> Vec<T> {
    let mut slots: Vec<Option<T>> = vec![None; perm.len()];
    for (p, v) in permuted.into_iter().enumerate() {
        slots[perm[p]] = Some(v);
    }
    slots.into_iter().map(|v| v.expect("permutation covers every row")).collect()
}

fn finish_result(
    store: &Store,
    config: &RunConfig,
    plan: &PartitionPlan,
    x_perm: Vec<RowPosterior>,
    w_perm: Vec<RowPosterior>,
    point: Option<(Factors, Factors)>,
    mut timings: Timings,
    started: Instant,
    block_means: Vec<BlockMeans>,
    corrections: Vec<CorrectionRecord>,
    chains: Vec<BlockChain>,
) -> Result<FactorizationResult> {
    let x = unpermute(&plan.row_perm, x_perm);
    let w = unpermute(&plan.col_perm, w_perm);
    let (x_mean, w_mean) = match point {
        Some((xm, wm)) => (xm.scatter_rows(&plan.row_perm), wm.scatter_rows(&plan.col_perm)),
        None => {
            let xm: Vec<_> = x.iter().map(|p| p.mean.clone()).collect();
            let wm: Vec<_> = w.iter().map(|p| p.mean.clone()).collect();
            (Factors::from_rows(config.k, &xm), Factors::from_rows(config.k, &wm))
        }
    };
    for (side, rows) in [(Side::X, &x), (Side::W, &w)] {
        let file = PosteriorFile::new(
            config.k,
            side,
            ApproxKind::Mm,
            0..rows.len(),
            SidePosteriors::Gaussian(rows.clone()),
        )?;
        store.put(&format!("aggregate/{}.post", side.name()), &posterior_io::encode(&file))?;
    }
    store.put_json(
        "aggregate/factors.json",
        &PointFactors {
            x_mean: x_mean.clone(),
            w_mean: w_mean.clone(),
        },
    )?;
    store.put_json("aggregate/corrections.json", &corrections)?;
    timings.finish(started);
    store.put_json("timings.json", &timings)?;
    Ok(FactorizationResult {
        config: config.clone(),
        plan: plan.clone(),
        x,
        w,
        x_mean,
        w_mean,
        timings,
        block_means,
        corrections,
        chains,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointFactors {
    pub x_mean: Factors,
    pub w_mean: Factors,
}

/// One chain over the whole (ordered) matrix; reported posteriors are
/// moment-matched, point factors are chain means.
pub fn run_full(train: &SparseMatrix, config: &RunConfig, options: &RunOptions) -> Result<FactorizationResult> {
    config.validate()?;
    if train.is_empty() {
        return Err(validation!("training matrix has no observations"));
    }
    let started = Instant::now();
    let full = RunConfig {
        rows: 1,
        cols: 1,
        ..config.clone()
    };
    let plan = make_plan(train, &full)?;
    let store = open_store(options)?;
    start_run(&store, config, &plan)?;
    let block = plan.split(train)?.remove(0).remove(0);
    let outcome = in_pool(config.workers, || {
        run_block(&block, RowPriorSet::shared(), config, ApproxKind::Mm, options.keep_chains)
            .map_err(|e| e.in_block("full", 0, 0))
    })?;
    persist_outcome(&store, Stage::One, &outcome, ApproxKind::Mm, config, &block)?;
    let timings = Timings {
        stages: vec![stage_timing("full", std::slice::from_ref(&outcome))],
        ..Timings::default()
    };
    let chains = outcome
        .chain
        .map(|chain| vec![BlockChain { i: 0, j: 0, chain }])
        .unwrap_or_default();
    finish_result(
        &store,
        config,
        &plan,
        outcome.x.pooled(),
        outcome.w.pooled(),
        Some((outcome.means.x_mean.clone(), outcome.means.w_mean.clone())),
        timings,
        started,
        vec![outcome.means],
        Vec::new(),
        chains,
    )
}

/// A staged run that can be advanced one stage at a time.
pub struct StagedRun<'a> {
    config: &'a RunConfig,
    plan: &'a PartitionPlan,
    blocks: Vec<Vec<Block>>,
    store: Store,
    kind: ApproxKind,
    keep_chains: bool,
    started: Instant,
    timings: Timings,
    block_means: Vec<BlockMeans>,
    chains: Vec<BlockChain>,
    done: Vec<Stage>,
}

impl<'a> StagedRun<'a> {
    pub fn new(
        train: &SparseMatrix,
        plan: &'a PartitionPlan,
        config: &'a RunConfig,
        options: &RunOptions,
    ) -> Result<Self> {
        config.validate()?;
        let store = open_store(options)?;
        start_run(&store, config, plan)?;
        Ok(StagedRun {
            config,
            plan,
            blocks: plan.split(train)?,
            store,
            kind: config.method.approx(),
            keep_chains: options.keep_chains,
            started: Instant::now(),
            timings: Timings::default(),
            block_means: Vec::new(),
            chains: Vec::new(),
            done: Vec::new(),
        })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    fn priors_for(&self, i: usize, j: usize) -> Result<RowPriorSet> {
        let load = |stage, bi, bj, side| -> Result<RowPriors> {
            Ok(as_row_priors(load_posteriors(&self.store, stage, bi, bj, side)?.posteriors))
        };
        Ok(match Stage::of(i, j) {
            Stage::One => RowPriorSet::shared(),
            Stage::Two if j == 0 => RowPriorSet {
                x: RowPriors::SharedHyper,
                w: load(Stage::One, 0, 0, Side::W)?,
            },
            Stage::Two => RowPriorSet {
                x: load(Stage::One, 0, 0, Side::X)?,
                w: RowPriors::SharedHyper,
            },
            Stage::Three => RowPriorSet {
                x: load(Stage::Two, i, 0, Side::X)?,
                w: load(Stage::Two, 0, j, Side::W)?,
            },
        })
    }

    /// Runs every block of `stage` concurrently. Earlier stages must be done.
    pub fn run_stage(&mut self, stage: Stage) -> Result<&StageTiming> {
        let needed: &[Stage] = match stage {
            Stage::One => &[],
            Stage::Two => &[Stage::One],
            Stage::Three => &[Stage::One, Stage::Two],
        };
        if let Some(missing) = needed.iter().find(|s| !self.done.contains(s)) {
            return Err(validation!("{} requires {} to finish first", stage.dir(), missing.dir()));
        }
        let coords = Stage::blocks(stage, self.plan.n_row_blocks(), self.plan.n_col_blocks());
        let this = &*self;
        let outcomes: Vec<BlockOutcome> = in_pool(self.config.workers, || {
            coords
                .par_iter()
                .map(|&(i, j)| {
                    let block = &this.blocks[i][j];
                    let priors = this.priors_for(i, j)?;
                    let mut o = run_block(block, priors, this.config, this.kind, this.keep_chains)
                        .map_err(|e| e.in_block(stage.dir(), i, j))?;
                    let t = Instant::now();
                    persist_outcome(&this.store, stage, &o, this.kind, this.config, block)?;
                    o.seconds += t.elapsed().as_secs_f64();
                    Ok(o)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        self.timings.stages.push(stage_timing(stage.dir(), &outcomes));
        for o in outcomes {
            self.block_means.push(o.means);
            if let Some(chain) = o.chain {
                self.chains.push(BlockChain { i: o.i, j: o.j, chain });
            }
        }
        self.done.push(stage);
        Ok(self.timings.stages.last().unwrap())
    }

    fn aggregate_side(&self, side: Side) -> Result<(Vec<RowPosterior>, Vec<CorrectionRecord>)> {
        let (n_groups, n_members) = match side {
            Side::X => (self.plan.n_row_blocks(), self.plan.n_col_blocks()),
            Side::W => (self.plan.n_col_blocks(), self.plan.n_row_blocks()),
        };
        let eps_rel = self.config.eps_ev_rel;
        let mut rows = Vec::new();
        let mut log = Vec::new();
        for g in 0..n_groups {
            // Block coordinates of member m of group g; member 0 is the base.
            let coord = |m: usize| match side {
                Side::X => (g, m),
                Side::W => (m, g),
            };
            let load = |m: usize| -> Result<Vec<RowPosterior>> {
                let (i, j) = coord(m);
                Ok(load_posteriors(&self.store, Stage::of(i, j), i, j, side)?.posteriors.pooled())
            };
            let base = load(0)?;
            let others = (1..n_members).map(load).collect::<Result<Vec<_>>>()?;
            let offset = match side {
                Side::X => self.plan.row_cuts[g],
                Side::W => self.plan.col_cuts[g],
            };
            let aggregated: Vec<_> = base
                .par_iter()
                .enumerate()
                .map(|(r, b)| {
                    let row_others: Vec<RowPosterior> = others.iter().map(|o| o[r].clone()).collect();
                    let eps = eps_rel * b.precision.trace() / b.k() as f64;
                    aggregate::pp_aggregate_row(&AggregationInput { base: b, others: &row_others }, Some(eps))
                        .map_err(|e| {
                            Error::Numerical(format!("aggregating {} row {}: {e}", side.name(), offset + r))
                        })
                })
                .collect::<Result<_>>()?;
            for (r, a) in aggregated.into_iter().enumerate() {
                for c in a.corrections {
                    log.push(CorrectionRecord {
                        side,
                        row: offset + r,
                        correction: c,
                    });
                }
                rows.push(a.posterior);
            }
        }
        Ok((rows, log))
    }

    /// Aggregates per-row marginals across blocks and writes the result.
    pub fn aggregate(mut self) -> Result<FactorizationResult> {
        let (ni, nj) = (self.plan.n_row_blocks(), self.plan.n_col_blocks());
        for stage in [Stage::One, Stage::Two, Stage::Three] {
            if !Stage::blocks(stage, ni, nj).is_empty() && !self.done.contains(&stage) {
                return Err(validation!("{} has not run", stage.dir()));
            }
        }
        let t = Instant::now();
        let (x, w, log) = in_pool(self.config.workers, || {
            let (x, mut log) = self.aggregate_side(Side::X)?;
            let (w, wlog) = self.aggregate_side(Side::W)?;
            log.extend(wlog);
            Ok((x, w, log))
        })?;
        self.timings.aggregation_seconds = t.elapsed().as_secs_f64();
        if !log.is_empty() {
            log::info!("eigenvalue correction applied {} times", log.len());
        }
        let timings = std::mem::take(&mut self.timings);
        finish_result(
            &self.store,
            self.config,
            self.plan,
            x,
            w,
            None,
            timings,
            self.started,
            self.block_means,
            log,
            self.chains,
        )
    }
}

/// Staged run: stages one to three, then aggregation.
pub fn run_pp(
    train: &SparseMatrix,
    plan: &PartitionPlan,
    config: &RunConfig,
    options: &RunOptions,
) -> Result<FactorizationResult> {
    let mut run = StagedRun::new(train, plan, config, options)?;
    for stage in [Stage::One, Stage::Two, Stage::Three] {
        if !Stage::blocks(stage, plan.n_row_blocks(), plan.n_col_blocks()).is_empty() {
            run.run_stage(stage)?;
        }
    }
    run.aggregate()
}

/// Precision-averaged hyper prior of the blocks sharing a row group.
fn divided_prior(hypers: &[&RowPosterior]) -> Result<RowPosterior> {
    let k = hypers[0].k();
    let mut prec = DMatrix::zeros(k, k);
    let mut b = DVector::zeros(k);
    for h in hypers {
        prec += &h.precision;
        b += &h.precision * &h.mean;
    }
    let mean = linalg::cholesky_jittered(&prec, "divided prior")?.solve(&b);
    prec /= hypers.len() as f64;
    RowPosterior::new(mean, prec)
}

/// Every block sampled independently with the hierarchical prior, then
/// multiplied together with surplus prior copies divided out.
pub fn run_ep(
    train: &SparseMatrix,
    plan: &PartitionPlan,
    config: &RunConfig,
    options: &RunOptions,
) -> Result<FactorizationResult> {
    config.validate()?;
    let started = Instant::now();
    let store = open_store(options)?;
    start_run(&store, config, plan)?;
    let blocks = plan.split(train)?;
    let coords: Vec<(usize, usize)> = (0..plan.n_row_blocks())
        .flat_map(|i| (0..plan.n_col_blocks()).map(move |j| (i, j)))
        .collect();
    let outcomes: Vec<BlockOutcome> = in_pool(config.workers, || {
        coords
            .par_iter()
            .map(|&(i, j)| {
                let block = &blocks[i][j];
                let mut o = run_block(block, RowPriorSet::shared(), config, ApproxKind::Mm, options.keep_chains)
                    .map_err(|e| e.in_block("subsets", i, j))?;
                let t = Instant::now();
                persist_outcome(&store, Stage::One, &o, ApproxKind::Mm, config, block)?;
                o.seconds += t.elapsed().as_secs_f64();
                Ok(o)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut timings = Timings {
        stages: vec![stage_timing("subsets", &outcomes)],
        ..Timings::default()
    };

    let t = Instant::now();
    let at = |i: usize, j: usize| &outcomes[i * plan.n_col_blocks() + j];
    let (x, w, log) = in_pool(config.workers, || {
        let mut log = Vec::new();
        let mut sides = Vec::new();
        for side in [Side::X, Side::W] {
            let (n_groups, n_members) = match side {
                Side::X => (plan.n_row_blocks(), plan.n_col_blocks()),
                Side::W => (plan.n_col_blocks(), plan.n_row_blocks()),
            };
            let mut rows = Vec::new();
            for g in 0..n_groups {
                let members: Vec<&BlockOutcome> = (0..n_members)
                    .map(|m| match side {
                        Side::X => at(g, m),
                        Side::W => at(m, g),
                    })
                    .collect();
                let hypers: Vec<&RowPosterior> = members
                    .iter()
                    .map(|o| match side {
                        Side::X => &o.hyper_x,
                        Side::W => &o.hyper_w,
                    })
                    .collect();
                let prior = divided_prior(&hypers)?;
                let posts: Vec<Vec<RowPosterior>> = members
                    .iter()
                    .map(|o| match side {
                        Side::X => o.x.pooled(),
                        Side::W => o.w.pooled(),
                    })
                    .collect();
                let offset = match side {
                    Side::X => plan.row_cuts[g],
                    Side::W => plan.col_cuts[g],
                };
                let aggregated: Vec<_> = (0..posts[0].len())
                    .into_par_iter()
                    .map(|r| {
                        let subsets: Vec<RowPosterior> = posts.iter().map(|p| p[r].clone()).collect();
                        let eps = config.eps_ev_rel * subsets[0].precision.trace() / config.k as f64;
                        aggregate::ep_parametric_aggregate(&subsets, &prior, Some(eps)).map_err(|e| {
                            Error::Numerical(format!("aggregating {} row {}: {e}", side.name(), offset + r))
                        })
                    })
                    .collect::<Result<_>>()?;
                for (r, a) in aggregated.into_iter().enumerate() {
                    for c in a.corrections {
                        log.push(CorrectionRecord {
                            side,
                            row: offset + r,
                            correction: c,
                        });
                    }
                    rows.push(a.posterior);
                }
            }
            sides.push(rows);
        }
        let w = sides.pop().unwrap();
        let x = sides.pop().unwrap();
        Ok((x, w, log))
    })?;
    timings.aggregation_seconds = t.elapsed().as_secs_f64();

    let mut block_means = Vec::new();
    let mut chains = Vec::new();
    for o in outcomes {
        block_means.push(o.means);
        if let Some(chain) = o.chain {
            chains.push(BlockChain { i: o.i, j: o.j, chain });
        }
    }
    finish_result(&store, config, plan, x, w, None, timings, started, block_means, log, chains)
}

/// What `evaluate` needs from a finished run directory.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub config: RunConfig,
    pub plan: PartitionPlan,
    pub timings: Timings,
    pub factors: PointFactors,
    pub block_means: Vec<BlockMeans>,
}

pub fn load_run(dir: impl AsRef<Path>) -> Result<RunArtifacts> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "run directory does not exist"),
        ));
    }
    let store = Store::Dir(dir.to_path_buf());
    let config: RunConfig = store.get_json("run_config.json")?;
    let plan_bytes = store.get("plan.json")?;
    let plan = PartitionPlan::from_json(&String::from_utf8_lossy(&plan_bytes))?;
    let timings: Timings = store.get_json("timings.json")?;
    let factors: PointFactors = store.get_json("aggregate/factors.json")?;
    let mut block_means = Vec::new();
    for i in 0..plan.n_row_blocks() {
        for j in 0..plan.n_col_blocks() {
            let stage = if config.method == Method::PpMm
                || config.method == Method::PpDm
                || config.method == Method::PpGmm
            {
                Stage::of(i, j)
            } else {
                Stage::One
            };
            block_means.push(store.get_json(&means_name(stage, i, j))?);
        }
    }
    Ok(RunArtifacts {
        config,
        plan,
        timings,
        factors,
        block_means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Entry;

    fn tiny() -> SparseMatrix {
        let (m, _) = data::simulate(6, 5, 1, 4.0, 3).unwrap();
        m
    }

    fn quick(method: Method, rows: usize, cols: usize) -> RunConfig {
        RunConfig {
            k: 1,
            iterations: 40,
            burn_in: 20,
            thin: 1,
            seed: 9,
            method,
            rows,
            cols,
            ..RunConfig::default()
        }
    }

    #[test]
    fn stage_membership() {
        assert_eq!(Stage::blocks(Stage::One, 3, 4), vec![(0, 0)]);
        assert_eq!(Stage::blocks(Stage::Two, 3, 4).len(), 2 + 3);
        assert_eq!(Stage::blocks(Stage::Three, 3, 4).len(), 2 * 3);
        assert!(Stage::blocks(Stage::Three, 1, 2).is_empty());
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("pp".parse::<Method>().is_err());
    }

    #[test]
    fn config_json_roundtrip_and_defaults() {
        let c = quick(Method::PpGmm, 2, 3);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        let partial = RunConfig::from_json(r#"{"k": 5}"#).unwrap();
        assert_eq!(partial.k, 5);
        assert_eq!(partial.iterations, 1200);
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(RunConfig { burn_in: 1200, ..c }.validate().is_err());
    }

    #[test]
    fn one_by_two_skips_stage_three() {
        let m = tiny();
        let cfg = quick(Method::PpMm, 1, 2);
        let plan = make_plan(&m, &cfg).unwrap();
        let res = run_pp(&m, &plan, &cfg, &RunOptions::default()).unwrap();
        assert_eq!(res.timings.stages.len(), 2);
        assert_eq!(res.x.len(), 6);
        assert_eq!(res.w.len(), 5);
        assert!(res.x_mean.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn missing_stage_file_names_the_block() {
        let m = tiny();
        let cfg = quick(Method::PpMm, 2, 2);
        let plan = make_plan(&m, &cfg).unwrap();
        let mut run = StagedRun::new(&m, &plan, &cfg, &RunOptions::default()).unwrap();
        assert!(run.run_stage(Stage::Two).is_err());
        run.run_stage(Stage::One).unwrap();
        if let Store::Memory(map) = run.store() {
            map.lock().unwrap().remove(&posterior_name(Stage::One, 0, 0, Side::W));
        }
        let err = run.run_stage(Stage::Two).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("stage1") && text.contains("(0,0)"), "{text}");
    }

    #[test]
    fn empty_block_passes_priors_through() {
        // Observations only in the top-left 2x2 corner.
        let entries = vec![
            Entry { row: 0, col: 0, value: 1.0 },
            Entry { row: 0, col: 1, value: 0.5 },
            Entry { row: 1, col: 0, value: -0.2 },
            Entry { row: 1, col: 1, value: 0.3 },
        ];
        let m = SparseMatrix::new(4, 4, entries).unwrap();
        let cfg = RunConfig {
            order: OrderScheme::Decreasing,
            ..quick(Method::PpMm, 2, 2)
        };
        let plan = make_plan(&m, &cfg).unwrap();
        let res = run_pp(&m, &plan, &cfg, &RunOptions::default()).unwrap();
        let nw = cfg.nw_prior();
        // Rows 2 and 3 are never observed: their aggregate is the prior.
        for r in 2..4 {
            assert!((&res.x[r].mean - &nw.mu0).amax() < 1e-12);
            assert!((&res.x[r].precision - &nw.w0).amax() < 1e-9);
        }
    }
}
