//! Blocked Gibbs sampler for Gaussian matrix factorization.
//!
//! Each sweep draws the Normal-Wishart hyperparameters of every side that
//! uses the shared hierarchical prior, then every row of `X` given `W`, then
//! every row of `W` given `X`. A side can instead carry propagated per-row
//! priors (Gaussian or mixture), in which case its hyperparameters are not
//! sampled.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::{GmmPosterior, RowPosterior};
use crate::data::SparseMatrix;
use crate::error::{validation, Error, Result};
use crate::linalg::{self, cholesky_jittered, dot, symmetrize, Factors};
use crate::seed::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    X,
    W,
}

impl Side {
    pub fn tag(self) -> u64 {
        match self {
            Side::X => tag::SIDE_X,
            Side::W => tag::SIDE_W,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Side::X => "x",
            Side::W => "w",
        }
    }
}

/// Conjugate hyperprior over a side's row mean and precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalWishartPrior {
    pub mu0: DVector<f64>,
    pub beta0: f64,
    pub w0: DMatrix<f64>,
    pub nu0: f64,
}

impl NormalWishartPrior {
    pub fn new(mu0: DVector<f64>, beta0: f64, w0: DMatrix<f64>, nu0: f64) -> Result<Self> {
        let k = mu0.len();
        if w0.nrows() != k || !w0.is_square() {
            return Err(validation!("W0 must be {k}x{k}"));
        }
        if !(beta0 > 0.0) {
            return Err(validation!("beta0 must be positive"));
        }
        if !(nu0 >= k as f64) {
            return Err(validation!("nu0 must be at least K = {k}"));
        }
        if !linalg::is_symmetric(&w0) || !linalg::is_spd(&w0) {
            return Err(validation!("W0 must be symmetric positive definite"));
        }
        Ok(NormalWishartPrior { mu0, beta0, w0, nu0 })
    }

    /// `mu0 = 0, beta0 = 2, W0 = I, nu0 = K`.
    pub fn default_for(k: usize) -> Self {
        NormalWishartPrior {
            mu0: DVector::zeros(k),
            beta0: 2.0,
            w0: DMatrix::identity(k, k),
            nu0: k as f64,
        }
    }

    pub fn k(&self) -> usize {
        self.mu0.len()
    }

    /// Starting hyperparameters for a chain: mean `mu0`, precision `W0`.
    pub fn initial_state(&self) -> HyperState {
        HyperState {
            mu: self.mu0.clone(),
            lambda: self.w0.clone(),
        }
    }
}

/// Mean and precision of the Gaussian prior shared by the rows of one side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperState {
    pub mu: DVector<f64>,
    pub lambda: DMatrix<f64>,
}

/// Parameters of the Normal-Wishart posterior given a set of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalWishartPosterior {
    pub mu: DVector<f64>,
    pub beta: f64,
    /// Inverse of the Wishart scale matrix.
    pub scale_inv: DMatrix<f64>,
    pub nu: f64,
}

/// Conjugate update using the centered scatter matrix
/// `S = (1/N) sum (x_i - xbar)(x_i - xbar)^T`.
pub fn normal_wishart_posterior(
    rows: &Factors,
    prior: &NormalWishartPrior,
) -> Result<NormalWishartPosterior> {
    let n = rows.n_rows();
    let k = prior.k();
    if n == 0 {
        return Err(validation!("hyperparameter update needs at least one row"));
    }
    if rows.k() != k {
        return Err(validation!("rows have K = {}, prior has K = {k}", rows.k()));
    }
    let nf = n as f64;
    let mut xbar = DVector::zeros(k);
    for r in rows.rows() {
        for (a, v) in r.iter().enumerate() {
            xbar[a] += v;
        }
    }
    xbar /= nf;
    // N * S accumulated directly.
    let mut scatter = DMatrix::zeros(k, k);
    for r in rows.rows() {
        for a in 0..k {
            let da = r[a] - xbar[a];
            for b in 0..=a {
                scatter[(a, b)] += da * (r[b] - xbar[b]);
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            scatter[(b, a)] = scatter[(a, b)];
        }
    }
    let beta = prior.beta0 + nf;
    let mu = (&prior.mu0 * prior.beta0 + &xbar * nf) / beta;
    let dm = &prior.mu0 - &xbar;
    let w0_inv = linalg::spd_inverse(&prior.w0, "W0")?;
    let mut scale_inv = w0_inv + scatter + (&dm * dm.transpose()) * (prior.beta0 * nf / beta);
    symmetrize(&mut scale_inv);
    Ok(NormalWishartPosterior {
        mu,
        beta,
        scale_inv,
        nu: prior.nu0 + nf,
    })
}

/// Wishart draw by the Bartlett decomposition: `L A A^T L^T` with `L L^T`
/// the scale matrix.
pub fn sample_wishart<R: Rng + ?Sized>(
    scale: &DMatrix<f64>,
    nu: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let k = scale.nrows();
    if !(nu > k as f64 - 1.0) {
        return Err(validation!("Wishart degrees of freedom {nu} must exceed K - 1"));
    }
    let l = cholesky_jittered(scale, "Wishart scale")?.unpack();
    let mut a = DMatrix::zeros(k, k);
    for i in 0..k {
        let chi = ChiSquared::new(nu - i as f64).map_err(|e| Error::Numerical(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let la = l * a;
    let mut out = &la * la.transpose();
    symmetrize(&mut out);
    Ok(out)
}

/// Draws `Lambda ~ Wishart(W0*, nu0*)`, then `mu ~ N(mu0*, (beta0* Lambda)^-1)`.
pub fn sample_hyper_normal_wishart<R: Rng + ?Sized>(
    rows: &Factors,
    prior: &NormalWishartPrior,
    rng: &mut R,
) -> Result<HyperState> {
    let post = normal_wishart_posterior(rows, prior)?;
    let scale = linalg::spd_inverse(&post.scale_inv, "posterior Wishart scale")?;
    let lambda = sample_wishart(&scale, post.nu, rng)?;
    let mean_prec = &lambda * post.beta;
    let chol = cholesky_jittered(&mean_prec, "hyper mean precision")?;
    let mu = linalg::sample_mvn_precision(&post.mu, &chol, rng);
    Ok(HyperState { mu, lambda })
}

/// Posterior mean and precision of one row given its observed partners:
/// `P* = P + tau sum w w^T`, `mu* = P*^-1 (P mu + tau sum y w)`.
pub fn row_conditional_moments(
    partner_idx: &[usize],
    values: &[f64],
    partners: &Factors,
    tau: f64,
    prior_mean: &DVector<f64>,
    prior_precision: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let pm = prior_precision * prior_mean;
    let (mean, chol) = conditional(partner_idx, values, partners, tau, prior_precision, &pm, "row")?;
    let l = chol.unpack();
    Ok((mean, &l * l.transpose()))
}

fn conditional(
    partner_idx: &[usize],
    values: &[f64],
    partners: &Factors,
    tau: f64,
    prior_precision: &DMatrix<f64>,
    prior_pm: &DVector<f64>,
    what: &str,
) -> Result<(DVector<f64>, nalgebra::Cholesky<f64, nalgebra::Dyn>)> {
    let k = prior_pm.len();
    let mut prec = prior_precision.clone();
    let mut b = prior_pm.clone();
    for (&d, &y) in partner_idx.iter().zip(values) {
        let w = partners.row(d);
        for a in 0..k {
            let twa = tau * w[a];
            b[a] += twa * y;
            for c in 0..=a {
                prec[(a, c)] += twa * w[c];
            }
        }
    }
    for a in 0..k {
        for c in 0..a {
            prec[(c, a)] = prec[(a, c)];
        }
    }
    let chol = cholesky_jittered(&prec, what)?;
    let mean = chol.solve(&b);
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{what}: non-finite conditional mean")));
    }
    Ok((mean, chol))
}

/// One draw from the Gaussian full conditional of a row.
pub fn sample_row_conditional<R: Rng + ?Sized>(
    partner_idx: &[usize],
    values: &[f64],
    partners: &Factors,
    tau: f64,
    prior_mean: &DVector<f64>,
    prior_precision: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let pm = prior_precision * prior_mean;
    let (mean, chol) = conditional(partner_idx, values, partners, tau, prior_precision, &pm, "row")?;
    Ok(linalg::sample_mvn_precision(&mean, &chol, rng))
}

/// Index of the component with the largest `pi_c N(x; mu_c, Lambda_c^-1)`;
/// ties resolve to the lowest index.
pub fn gmm_component_assign(x: &[f64], gmm: &GmmPosterior) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (c, comp) in gmm.components.iter().enumerate() {
        let score = match linalg::cholesky(&comp.precision) {
            Some(chol) => comp.weight.ln() + linalg::log_mvn_density_chol(x, &comp.mean, &chol),
            None => f64::NEG_INFINITY,
        };
        if score > best.1 {
            best = (c, score);
        }
    }
    best.0
}

/// Row priors for one side.
#[derive(Clone, Debug, PartialEq)]
pub enum RowPriors {
    /// Rows share `N(mu, Lambda^-1)` with Normal-Wishart hyperparameters
    /// resampled every sweep.
    SharedHyper,
    /// Fixed per-row Gaussian priors propagated from an earlier stage.
    Gaussian(Vec<RowPosterior>),
    /// Per-row mixtures; the component best explaining the current value is
    /// reselected every sweep.
    Gmm(Vec<GmmPosterior>),
}

impl RowPriors {
    pub fn is_propagated(&self) -> bool {
        !matches!(self, RowPriors::SharedHyper)
    }

    fn check(&self, rows: usize, k: usize, side: Side) -> Result<()> {
        let (len, ks): (usize, Vec<usize>) = match self {
            RowPriors::SharedHyper => return Ok(()),
            RowPriors::Gaussian(v) => (v.len(), v.iter().map(|p| p.k()).collect()),
            RowPriors::Gmm(v) => (v.len(), v.iter().map(|p| p.k()).collect()),
        };
        if len != rows {
            return Err(validation!(
                "{} side has {} propagated priors for {} rows",
                side.name(),
                len,
                rows
            ));
        }
        if ks.iter().any(|&kk| kk != k) {
            return Err(validation!("{} side prior dimension differs from K = {k}", side.name()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowPriorSet {
    pub x: RowPriors,
    pub w: RowPriors,
}

impl RowPriorSet {
    pub fn shared() -> Self {
        RowPriorSet {
            x: RowPriors::SharedHyper,
            w: RowPriors::SharedHyper,
        }
    }

    pub fn side(&self, side: Side) -> &RowPriors {
        match side {
            Side::X => &self.x,
            Side::W => &self.w,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GibbsConfig {
    pub k: usize,
    pub tau: f64,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Sample rows within a sweep on the rayon pool. Results do not depend on
    /// this flag.
    #[serde(default = "default_true")]
    pub parallel_rows: bool,
}

fn default_true() -> bool {
    true
}

impl GibbsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(validation!("K must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(validation!("tau must be positive, got {}", self.tau));
        }
        if self.iterations <= self.burn_in {
            return Err(validation!(
                "iterations ({}) must exceed burn-in ({})",
                self.iterations,
                self.burn_in
            ));
        }
        if self.thin == 0 {
            return Err(validation!("thinning must be at least 1"));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSample {
    pub x: Factors,
    pub w: Factors,
    pub hyper_x: HyperState,
    pub hyper_w: HyperState,
}

/// Retained post-burn-in draws of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleChain {
    pub config: GibbsConfig,
    pub samples: Vec<ChainSample>,
}

impl SampleChain {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// All retained draws of one row, in chain order.
    pub fn row_cloud(&self, side: Side, row: usize) -> Vec<DVector<f64>> {
        self.samples
            .iter()
            .map(|s| {
                let f = match side {
                    Side::X => &s.x,
                    Side::W => &s.w,
                };
                DVector::from_column_slice(f.row(row))
            })
            .collect()
    }

    pub fn row_clouds(&self, side: Side) -> Vec<Vec<DVector<f64>>> {
        let rows = match (side, self.samples.first()) {
            (_, None) => 0,
            (Side::X, Some(s)) => s.x.n_rows(),
            (Side::W, Some(s)) => s.w.n_rows(),
        };
        (0..rows).map(|r| self.row_cloud(side, r)).collect()
    }

    /// Gaussian with the chain-averaged hyper mean and precision of a side.
    pub fn hyper_mean(&self, side: Side) -> Result<RowPosterior> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| validation!("empty chain"))?;
        let k = first.hyper_x.mu.len();
        let mut mu = DVector::zeros(k);
        let mut lambda = DMatrix::zeros(k, k);
        for s in &self.samples {
            let h = match side {
                Side::X => &s.hyper_x,
                Side::W => &s.hyper_w,
            };
            mu += &h.mu;
            lambda += &h.lambda;
        }
        let n = self.samples.len() as f64;
        RowPosterior::new(mu / n, lambda / n)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("chain serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| validation!("sample chain: {e}"))
    }
}

/// Row-compressed view of a block, built once per run.
struct Csr {
    offsets: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl Csr {
    fn build(n: usize, triples: impl Iterator<Item = (usize, usize, f64)> + Clone) -> Csr {
        let mut offsets = vec![0usize; n + 1];
        for (r, _, _) in triples.clone() {
            offsets[r + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let nnz = offsets[n];
        let mut fill = offsets.clone();
        let mut idx = vec![0; nnz];
        let mut val = vec![0.0; nnz];
        for (r, c, v) in triples {
            idx[fill[r]] = c;
            val[fill[r]] = v;
            fill[r] += 1;
        }
        Csr { offsets, idx, val }
    }

    fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let s = self.offsets[r];
        let e = self.offsets[r + 1];
        (&self.idx[s..e], &self.val[s..e])
    }
}

struct PreparedComponent {
    log_weight: f64,
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    pm: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

enum Prepared {
    Shared,
    Gaussian(Vec<(DMatrix<f64>, DVector<f64>, DVector<f64>)>),
    Gmm(Vec<Vec<PreparedComponent>>),
}

impl Prepared {
    fn new(priors: &RowPriors) -> Result<Prepared> {
        Ok(match priors {
            RowPriors::SharedHyper => Prepared::Shared,
            RowPriors::Gaussian(v) => Prepared::Gaussian(
                v.iter()
                    .map(|p| (p.precision.clone(), &p.precision * &p.mean, p.mean.clone()))
                    .collect(),
            ),
            RowPriors::Gmm(v) => Prepared::Gmm(
                v.iter()
                    .map(|g| {
                        g.components
                            .iter()
                            .map(|c| {
                                Ok(PreparedComponent {
                                    log_weight: c.weight.ln(),
                                    mean: c.mean.clone(),
                                    precision: c.precision.clone(),
                                    pm: &c.precision * &c.mean,
                                    chol: cholesky_jittered(&c.precision, "mixture prior")?,
                                })
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        })
    }
}

fn select_component(comps: &[PreparedComponent], x: &[f64]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (c, comp) in comps.iter().enumerate() {
        let s = comp.log_weight + linalg::log_mvn_density_chol(x, &comp.mean, &comp.chol);
        if s > best.1 {
            best = (c, s);
        }
    }
    best.0
}

fn initial_rows(
    n: usize,
    k: usize,
    prepared: &Prepared,
    nw: &NormalWishartPrior,
    seed: u64,
    side: Side,
) -> Result<Factors> {
    let shared_chol = cholesky_jittered(&nw.w0, "W0")?;
    let mut f = Factors::zeros(n, k);
    for r in 0..n {
        let mut rng = seed::rng(seed, &[tag::INIT, side.tag(), r as u64]);
        let draw = match prepared {
            Prepared::Shared => linalg::sample_mvn_precision(&nw.mu0, &shared_chol, &mut rng),
            Prepared::Gaussian(v) => {
                let chol = cholesky_jittered(&v[r].0, "propagated prior")?;
                linalg::sample_mvn_precision(&v[r].2, &chol, &mut rng)
            }
            Prepared::Gmm(v) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = v[r].len() - 1;
                for (c, comp) in v[r].iter().enumerate() {
                    acc += comp.log_weight.exp();
                    if u < acc {
                        pick = c;
                        break;
                    }
                }
                let comp = &v[r][pick];
                linalg::sample_mvn_precision(&comp.mean, &comp.chol, &mut rng)
            }
        };
        f.row_mut(r).copy_from_slice(draw.as_slice());
    }
    Ok(f)
}

#[allow(clippy::too_many_arguments)]
fn update_side(
    current: &Factors,
    csr: &Csr,
    partners: &Factors,
    prepared: &Prepared,
    hyper: &HyperState,
    tau: f64,
    seed: u64,
    sweep: usize,
    side: Side,
    parallel: bool,
) -> Result<Factors> {
    let k = current.k();
    let shared_pm = &hyper.lambda * &hyper.mu;
    let draw_row = |r: usize| -> Result<DVector<f64>> {
        let mut rng = seed::rng(seed, &[tag::ROW, sweep as u64, side.tag(), r as u64]);
        let (idx, val) = csr.row(r);
        let (prec, pm): (&DMatrix<f64>, &DVector<f64>) = match prepared {
            Prepared::Shared => (&hyper.lambda, &shared_pm),
            Prepared::Gaussian(v) => (&v[r].0, &v[r].1),
            Prepared::Gmm(v) => {
                let c = select_component(&v[r], current.row(r));
                (&v[r][c].precision, &v[r][c].pm)
            }
        };
        let what = format!("sweep {sweep}, {} row {r}", side.name());
        let (mean, chol) = conditional(idx, val, partners, tau, prec, pm, &what)?;
        Ok(linalg::sample_mvn_precision(&mean, &chol, &mut rng))
    };
    let n = current.n_rows();
    let rows: Vec<DVector<f64>> = if parallel {
        (0..n).into_par_iter().map(draw_row).collect::<Result<_>>()?
    } else {
        (0..n).map(draw_row).collect::<Result<_>>()?
    };
    let mut out = Factors::zeros(n, k);
    for (r, v) in rows.iter().enumerate() {
        out.row_mut(r).copy_from_slice(v.as_slice());
    }
    Ok(out)
}

/// Runs `config.iterations` sweeps over one block (local indices) and keeps
/// every `thin`-th draw after burn-in.
pub fn gibbs_run(
    block: &SparseMatrix,
    priors: &RowPriorSet,
    nw_prior: &NormalWishartPrior,
    config: &GibbsConfig,
) -> Result<SampleChain> {
    config.validate()?;
    let k = config.k;
    if nw_prior.k() != k {
        return Err(validation!("Normal-Wishart prior has K = {}, config K = {k}", nw_prior.k()));
    }
    if block.is_empty() {
        return Err(validation!("cannot sample an empty block"));
    }
    let (n, d) = (block.n_rows(), block.n_cols());
    priors.x.check(n, k, Side::X)?;
    priors.w.check(d, k, Side::W)?;

    let by_row = Csr::build(n, block.entries().iter().map(|e| (e.row, e.col, e.value)));
    let by_col = Csr::build(d, block.entries().iter().map(|e| (e.col, e.row, e.value)));
    let prep_x = Prepared::new(&priors.x)?;
    let prep_w = Prepared::new(&priors.w)?;

    let mut hyper_x = nw_prior.initial_state();
    let mut hyper_w = nw_prior.initial_state();
    let mut x = initial_rows(n, k, &prep_x, nw_prior, config.seed, Side::X)?;
    let mut w = initial_rows(d, k, &prep_w, nw_prior, config.seed, Side::W)?;

    let w_first = priors.x.is_propagated() && !priors.w.is_propagated();
    let mut samples = Vec::with_capacity(config.retained());
    for sweep in 1..=config.iterations {
        if !priors.x.is_propagated() {
            let mut rng = seed::rng(config.seed, &[tag::HYPER, sweep as u64, tag::SIDE_X]);
            hyper_x = sample_hyper_normal_wishart(&x, nw_prior, &mut rng)
                .map_err(|e| Error::Numerical(format!("sweep {sweep}, x hyperparameters: {e}")))?;
        }
        if !priors.w.is_propagated() {
            let mut rng = seed::rng(config.seed, &[tag::HYPER, sweep as u64, tag::SIDE_W]);
            hyper_w = sample_hyper_normal_wishart(&w, nw_prior, &mut rng)
                .map_err(|e| Error::Numerical(format!("sweep {sweep}, w hyperparameters: {e}")))?;
        }
        // The side without a propagated prior goes first, so its opening draw
        // conditions on the informed side rather than on a random start.
        if w_first {
            w = update_side(
                &w, &by_col, &x, &prep_w, &hyper_w, config.tau, config.seed, sweep, Side::W,
                config.parallel_rows,
            )?;
        }
        x = update_side(
            &x, &by_row, &w, &prep_x, &hyper_x, config.tau, config.seed, sweep, Side::X,
            config.parallel_rows,
        )?;
        if !w_first {
            w = update_side(
                &w, &by_col, &x, &prep_w, &hyper_w, config.tau, config.seed, sweep, Side::W,
                config.parallel_rows,
            )?;
        }
        if sweep > config.burn_in && (sweep - config.burn_in).is_multiple_of(config.thin) {
            samples.push(ChainSample {
                x: x.clone(),
                w: w.clone(),
                hyper_x: hyper_x.clone(),
                hyper_w: hyper_w.clone(),
            });
        }
    }
    Ok(SampleChain {
        config: config.clone(),
        samples,
    })
}

/// Elementwise average of the retained `X` and `W` draws.
pub fn chain_posterior_mean(chain: &SampleChain) -> Result<(Factors, Factors)> {
    let first = chain
        .samples
        .first()
        .ok_or_else(|| validation!("posterior mean of an empty chain"))?;
    let mut xm = Factors::zeros(first.x.n_rows(), first.x.k());
    let mut wm = Factors::zeros(first.w.n_rows(), first.w.k());
    for s in &chain.samples {
        for (a, b) in xm.as_mut_slice().iter_mut().zip(s.x.as_slice()) {
            *a += b;
        }
        for (a, b) in wm.as_mut_slice().iter_mut().zip(s.w.as_slice()) {
            *a += b;
        }
    }
    let n = chain.samples.len() as f64;
    xm.as_mut_slice().iter_mut().for_each(|v| *v /= n);
    wm.as_mut_slice().iter_mut().for_each(|v| *v /= n);
    Ok((xm, wm))
}

/// `x_n . w_d` for each requested `(n, d)`; no clipping.
pub fn predict(x: &Factors, w: &Factors, indices: &[(usize, usize)]) -> Result<Vec<f64>> {
    if x.k() != w.k() {
        return Err(validation!("factor ranks differ: {} vs {}", x.k(), w.k()));
    }
    indices
        .iter()
        .map(|&(n, d)| {
            if n >= x.n_rows() || d >= w.n_rows() {
                Err(validation!(
                    "index ({n}, {d}) outside {}x{}",
                    x.n_rows(),
                    w.n_rows()
                ))
            } else {
                Ok(dot(x.row(n), w.row(d)))
            }
        })
        .collect()
}

/// Gaussian log-likelihood of the observed entries.
pub fn log_likelihood(matrix: &SparseMatrix, x: &Factors, w: &Factors, tau: f64) -> f64 {
    let norm = 0.5 * (tau / (2.0 * std::f64::consts::PI)).ln();
    matrix
        .entries()
        .iter()
        .map(|e| {
            let r = e.value - dot(x.row(e.row), w.row(e.col));
            norm - 0.5 * tau * r * r
        })
        .sum()
}
