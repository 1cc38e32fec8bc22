//! Parametric fits of per-row posterior sample clouds.
//!
//! Each row of `X` or `W` gets its own cloud of retained Gibbs draws. The
//! cloud is summarised either by one Gaussian over all samples (moment
//! matching), one Gaussian over the largest lambda-means cluster (dominant
//! mode), or a mixture over the largest few clusters.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::linalg::{self, symmetrize};
use crate::seed;

/// Relative ridge added to the sample covariance diagonal.
pub const EPS_VAR_REL: f64 = 1e-8;
/// Ridge used when every sample is identical.
pub const EPS_VAR_FLOOR: f64 = 1e-8;
pub const DEFAULT_TOP_N: usize = 3;
/// Samples used for the median-pairwise-distance lambda heuristic.
pub const LAMBDA_SUBSAMPLE: usize = 100;

/// Gaussian `N(mean, precision^-1)` over one K-dimensional row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowPosterior {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
}

impl RowPosterior {
    pub fn new(mean: DVector<f64>, precision: DMatrix<f64>) -> Result<Self> {
        if precision.nrows() != mean.len() || !precision.is_square() {
            return Err(validation!("precision shape does not match mean length"));
        }
        if mean.iter().chain(precision.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("row posterior has non-finite entries".into()));
        }
        if !linalg::is_spd(&precision) {
            return Err(Error::Numerical("row posterior precision is not SPD".into()));
        }
        Ok(RowPosterior { mean, precision })
    }

    pub fn isotropic(mean: DVector<f64>, precision: f64) -> Self {
        let k = mean.len();
        RowPosterior {
            mean,
            precision: DMatrix::identity(k, k) * precision,
        }
    }

    pub fn k(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        linalg::spd_inverse(&self.precision, "row posterior covariance")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
}

/// Weighted mixture of Gaussians over one row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmPosterior {
    pub components: Vec<GmmComponent>,
}

impl GmmPosterior {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(validation!("mixture needs at least one component"));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if components.iter().any(|c| !(c.weight > 0.0 && c.weight <= 1.0))
            || (total - 1.0).abs() > 1e-9
        {
            return Err(validation!("mixture weights must be positive and sum to 1"));
        }
        Ok(GmmPosterior { components })
    }

    pub fn single(p: RowPosterior) -> Self {
        GmmPosterior {
            components: vec![GmmComponent {
                weight: 1.0,
                mean: p.mean,
                precision: p.precision,
            }],
        }
    }

    pub fn k(&self) -> usize {
        self.components[0].mean.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApproxKind {
    /// Moment matching over all samples.
    Mm,
    /// Dominant mode.
    Dm,
    /// Top-N Gaussian mixture.
    Gmm,
}

impl ApproxKind {
    pub fn code(self) -> u8 {
        match self {
            ApproxKind::Mm => 0,
            ApproxKind::Dm => 1,
            ApproxKind::Gmm => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ApproxKind::Mm),
            1 => Some(ApproxKind::Dm),
            2 => Some(ApproxKind::Gmm),
            _ => None,
        }
    }
}

/// Per-row approximations for one side of one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SidePosteriors {
    Gaussian(Vec<RowPosterior>),
    Gmm(Vec<GmmPosterior>),
}

impl SidePosteriors {
    pub fn len(&self) -> usize {
        match self {
            SidePosteriors::Gaussian(v) => v.len(),
            SidePosteriors::Gmm(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Collapses mixtures to their moment-preserving Gaussian.
    pub fn pooled(&self) -> Vec<RowPosterior> {
        match self {
            SidePosteriors::Gaussian(v) => v.clone(),
            SidePosteriors::Gmm(v) => v.iter().map(pool_gmm).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaPolicy {
    /// Median pairwise distance of an evenly strided subsample.
    MedianPairwise,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centers: Vec<DVector<f64>>,
    pub lambda: f64,
}

impl Clustering {
    pub fn n_clusters(&self) -> usize {
        self.centers.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.centers.len()];
        for &a in &self.assignments {
            s[a] += 1;
        }
        s
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| (a == cluster).then_some(i))
            .collect()
    }
}

fn dist(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Lambda-means clustering.
///
/// Centers are spawned by a farthest-first pass: starting from a seeded
/// sample, the sample farthest from all current centers becomes a new center
/// while that distance exceeds `lambda`. Lloyd alternation then refines the
/// centers with the cluster count held fixed (an emptied cluster is reseeded
/// at the worst-fit sample). The farthest-first order does not depend on
/// `lambda`, so the cluster count is nonincreasing in `lambda`.
pub fn lambda_means(
    samples: &[DVector<f64>],
    lambda: f64,
    max_iters: usize,
    seed: u64,
) -> Result<Clustering> {
    if samples.is_empty() {
        return Err(validation!("lambda-means needs at least one sample"));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(validation!("lambda must be positive, got {lambda}"));
    }
    let n = samples.len();
    let start = seed::rng(seed, &[seed::tag::FIT]).random_range(0..n);

    let mut centers = vec![samples[start].clone()];
    let mut nearest: Vec<f64> = samples.iter().map(|s| dist(s, &samples[start])).collect();
    loop {
        let (far, &d) = nearest
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        if d <= lambda {
            break;
        }
        let c = samples[far].clone();
        for (i, s) in samples.iter().enumerate() {
            nearest[i] = nearest[i].min(dist(s, &c));
        }
        centers.push(c);
    }

    let k = centers.len();
    let dim = samples[0].len();
    let assign = |centers: &[DVector<f64>]| -> Vec<usize> {
        let mut out: Vec<usize> = samples
            .iter()
            .map(|s| {
                let mut best = (0, f64::INFINITY);
                for (c, center) in centers.iter().enumerate() {
                    let d = dist(s, center);
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                best.0
            })
            .collect();
        fill_empty(samples, centers, &mut out);
        out
    };
    let recenter = |assignments: &[usize], centers: &mut [DVector<f64>]| {
        let mut sums = vec![DVector::zeros(dim); k];
        let mut counts = vec![0usize; k];
        for (s, &a) in samples.iter().zip(assignments) {
            sums[a] += s;
            counts[a] += 1;
        }
        for c in 0..k {
            centers[c] = &sums[c] / counts[c] as f64;
        }
    };

    let mut assignments = assign(&centers);
    for _ in 0..max_iters {
        recenter(&assignments, &mut centers);
        let next = assign(&centers);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    recenter(&assignments, &mut centers);
    Ok(Clustering {
        assignments,
        centers,
        lambda,
    })
}

/// Moves the worst-fitting sample of a multi-member cluster into every empty
/// cluster, keeping the cluster count fixed.
fn fill_empty(samples: &[DVector<f64>], centers: &[DVector<f64>], assignments: &mut [usize]) {
    let mut sizes = vec![0usize; centers.len()];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    for c in 0..centers.len() {
        if sizes[c] > 0 {
            continue;
        }
        let mut worst: Option<(usize, f64)> = None;
        for (i, s) in samples.iter().enumerate() {
            if sizes[assignments[i]] < 2 {
                continue;
            }
            let d = dist(s, &centers[assignments[i]]);
            if worst.is_none_or(|(_, wd)| d > wd) {
                worst = Some((i, d));
            }
        }
        if let Some((i, _)) = worst {
            sizes[assignments[i]] -= 1;
            assignments[i] = c;
            sizes[c] = 1;
        }
    }
}

/// Median pairwise Euclidean distance over an evenly strided subsample of at
/// most `LAMBDA_SUBSAMPLE` samples; floors at a tiny positive value.
pub fn default_lambda(samples: &[DVector<f64>]) -> f64 {
    let n = samples.len();
    let take = n.min(LAMBDA_SUBSAMPLE);
    if take < 2 {
        return f64::MIN_POSITIVE.sqrt();
    }
    let picked: Vec<&DVector<f64>> = (0..take).map(|i| &samples[i * n / take]).collect();
    let mut d = Vec::with_capacity(take * (take - 1) / 2);
    for a in 0..take {
        for b in (a + 1)..take {
            d.push(dist(picked[a], picked[b]));
        }
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let med = if d.len() % 2 == 0 {
        0.5 * (d[mid - 1] + d[mid])
    } else {
        d[mid]
    };
    med.max(f64::MIN_POSITIVE.sqrt())
}

pub fn resolve_lambda(policy: LambdaPolicy, samples: &[DVector<f64>]) -> f64 {
    match policy {
        LambdaPolicy::MedianPairwise => default_lambda(samples),
        LambdaPolicy::Fixed(l) => l,
    }
}

/// Mean and population covariance (ridge-regularised), returned as a
/// Gaussian with the inverse covariance as precision.
pub fn fit_moment_matching(samples: &[DVector<f64>]) -> Result<RowPosterior> {
    let refs: Vec<&DVector<f64>> = samples.iter().collect();
    moment_match_refs(&refs)
}

fn moment_match_refs(samples: &[&DVector<f64>]) -> Result<RowPosterior> {
    let n = samples.len();
    if n == 0 {
        return Err(validation!("moment matching needs at least one sample"));
    }
    let k = samples[0].len();
    let mut mean = DVector::zeros(k);
    for s in samples {
        mean += *s;
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(k, k);
    for s in samples {
        let c = *s - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= n as f64;
    let mean_diag = cov.trace() / k as f64;
    let ridge = if mean_diag > 0.0 {
        EPS_VAR_REL * mean_diag
    } else {
        EPS_VAR_FLOOR
    };
    for i in 0..k {
        cov[(i, i)] += ridge;
    }
    let chol = linalg::cholesky(&cov)
        .ok_or_else(|| Error::Numerical("sample covariance is not invertible".into()))?;
    let mut precision = chol.inverse();
    symmetrize(&mut precision);
    Ok(RowPosterior { mean, precision })
}

/// Moment matching on the largest lambda-means cluster (ties go to the lowest
/// cluster index). Falls back to all samples when that cluster has fewer
/// than `K + 2` members.
pub fn fit_dominant_mode(samples: &[DVector<f64>], lambda: f64, seed: u64) -> Result<RowPosterior> {
    if samples.is_empty() {
        return Err(validation!("dominant mode needs at least one sample"));
    }
    let k = samples[0].len();
    let cl = lambda_means(samples, lambda, 100, seed)?;
    let sizes = cl.sizes();
    let best = (0..sizes.len())
        .fold(0, |b, c| if sizes[c] > sizes[b] { c } else { b });
    if sizes[best] < k + 2 {
        log::debug!(
            "dominant cluster has {} samples (< K+2 = {}); using all samples",
            sizes[best],
            k + 2
        );
        return fit_moment_matching(samples);
    }
    let members: Vec<&DVector<f64>> = cl.members(best).into_iter().map(|i| &samples[i]).collect();
    moment_match_refs(&members)
}

/// Mixture over the `top_n` largest clusters with at least `K + 2` members,
/// weighted by cluster size.
pub fn fit_gmm(
    samples: &[DVector<f64>],
    lambda: f64,
    top_n: usize,
    seed: u64,
) -> Result<GmmPosterior> {
    if top_n == 0 {
        return Err(validation!("top_n must be at least 1"));
    }
    if samples.is_empty() {
        return Err(validation!("mixture fit needs at least one sample"));
    }
    let k = samples[0].len();
    let cl = lambda_means(samples, lambda, 100, seed)?;
    let sizes = cl.sizes();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]));
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&c| sizes[c] >= k + 2)
        .take(top_n)
        .collect();
    if kept.is_empty() {
        log::debug!("no cluster reaches K+2 samples; single moment-matched component");
        return Ok(GmmPosterior::single(fit_moment_matching(samples)?));
    }
    let total: usize = kept.iter().map(|&c| sizes[c]).sum();
    let components = kept
        .iter()
        .map(|&c| {
            let members: Vec<&DVector<f64>> =
                cl.members(c).into_iter().map(|i| &samples[i]).collect();
            let fit = moment_match_refs(&members)?;
            Ok(GmmComponent {
                weight: sizes[c] as f64 / total as f64,
                mean: fit.mean,
                precision: fit.precision,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GmmPosterior { components })
}

/// The Gaussian with the mixture's exact mean and covariance.
pub fn pool_gmm(gmm: &GmmPosterior) -> RowPosterior {
    if gmm.components.len() == 1 {
        let c = &gmm.components[0];
        return RowPosterior {
            mean: c.mean.clone(),
            precision: c.precision.clone(),
        };
    }
    let k = gmm.k();
    let mut mean = DVector::zeros(k);
    for c in &gmm.components {
        mean.axpy(c.weight, &c.mean, 1.0);
    }
    let mut cov = DMatrix::zeros(k, k);
    for c in &gmm.components {
        let comp_cov = linalg::spd_inverse(&c.precision, "mixture component")
            .expect("mixture components carry SPD precisions");
        cov += comp_cov * c.weight;
        let dm = &c.mean - &mean;
        cov.ger(c.weight, &dm, &dm, 1.0);
    }
    symmetrize(&mut cov);
    let precision =
        linalg::spd_inverse(&cov, "pooled mixture").expect("pooled covariance is SPD");
    RowPosterior { mean, precision }
}

/// Settings for fitting every row of one side.
#[derive(Clone, Copy, Debug)]
pub struct FitSettings {
    pub kind: ApproxKind,
    pub lambda: LambdaPolicy,
    pub top_n: usize,
    pub seed: u64,
}

/// Fits each row's sample cloud independently (rows in parallel).
pub fn fit_rows(clouds: &[Vec<DVector<f64>>], settings: FitSettings) -> Result<SidePosteriors> {
    let fit_seed = |row: usize| seed::derive(settings.seed, &[seed::tag::FIT, row as u64]);
    match settings.kind {
        ApproxKind::Mm => clouds
            .par_iter()
            .map(|c| fit_moment_matching(c))
            .collect::<Result<Vec<_>>>()
            .map(SidePosteriors::Gaussian),
        ApproxKind::Dm => clouds
            .par_iter()
            .enumerate()
            .map(|(r, c)| fit_dominant_mode(c, resolve_lambda(settings.lambda, c), fit_seed(r)))
            .collect::<Result<Vec<_>>>()
            .map(SidePosteriors::Gaussian),
        ApproxKind::Gmm => clouds
            .par_iter()
            .enumerate()
            .map(|(r, c)| {
                fit_gmm(c, resolve_lambda(settings.lambda, c), settings.top_n, fit_seed(r))
            })
            .collect::<Result<Vec<_>>>()
            .map(SidePosteriors::Gmm),
    }
}
