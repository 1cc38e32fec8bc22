//! Combining per-row subset posteriors.
//!
//! Under posterior propagation every later-stage posterior of a row already
//! contains the base posterior `(mu_1, Lambda_1)` as its prior, so the base is
//! counted once and each other term contributes only its increment:
//!
//! ```text
//! Lambda* = (2 - J) Lambda_1 + sum_j Lambda*_j
//! mu*     = Lambda*^-1 [ (2 - J) Lambda_1 mu_1 + sum_j Lambda*_j mu_j ]
//! ```
//!
//! where `Lambda*_j = Lambda_j` when `Lambda_j - Lambda_1` is positive definite
//! and `EC(Lambda_j - Lambda_1) + Lambda_1` otherwise, `EC` being the
//! eigenvalue correction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::approx::RowPosterior;
use crate::error::{validation, Error, Result};
use crate::linalg::{self, symmetrize};

/// `eps_ev = EPS_EV_REL * trace(Lambda_1) / K`.
pub const EPS_EV_REL: f64 = 1e-6;

pub fn default_eps(base_precision: &DMatrix<f64>) -> f64 {
    let k = base_precision.nrows().max(1) as f64;
    (EPS_EV_REL * base_precision.trace() / k).max(f64::MIN_POSITIVE)
}

/// `Lambda* = sum Lambda_j`, `mu* = Lambda*^-1 sum Lambda_j mu_j`.
pub fn gaussian_product(posteriors: &[RowPosterior]) -> Result<RowPosterior> {
    let first = posteriors
        .first()
        .ok_or_else(|| validation!("product of zero Gaussians"))?;
    let k = first.k();
    if posteriors.iter().any(|p| p.k() != k) {
        return Err(validation!("Gaussian product over mixed dimensions"));
    }
    if posteriors.len() == 1 {
        return Ok(first.clone());
    }
    let mut prec = DMatrix::zeros(k, k);
    let mut b = DVector::zeros(k);
    for p in posteriors {
        prec += &p.precision;
        b += &p.precision * &p.mean;
    }
    symmetrize(&mut prec);
    finish(prec, &b, "Gaussian product")
}

fn finish(precision: DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<RowPosterior> {
    let chol = linalg::cholesky_jittered(&precision, what)?;
    let mean = chol.solve(b);
    if mean.iter().chain(precision.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{what}: non-finite result")));
    }
    Ok(RowPosterior { mean, precision })
}

/// Returns `m` unchanged when it is positive definite, otherwise
/// `m + (|lambda_min| + eps) I`.
pub fn eigenvalue_correction(m: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    Ok(correct(m, eps)?.0)
}

/// Eigenvalue correction that also reports `(lambda_min, shift)` when applied.
fn correct(m: &DMatrix<f64>, eps: f64) -> Result<(DMatrix<f64>, Option<(f64, f64)>)> {
    if !linalg::is_symmetric(m) {
        return Err(validation!("eigenvalue correction needs a symmetric matrix"));
    }
    if !(eps > 0.0) {
        return Err(validation!("eigenvalue correction constant must be positive"));
    }
    if linalg::is_spd(m) {
        return Ok((m.clone(), None));
    }
    let lambda_min = linalg::min_eigenvalue(m);
    if !lambda_min.is_finite() {
        return Err(Error::Numerical("eigenvalue correction of a non-finite matrix".into()));
    }
    let mut shift = lambda_min.abs() + eps;
    // Rounding in the eigen-solver can leave the shifted matrix on the
    // boundary; grow the shift until Cholesky accepts it.
    for _ in 0..32 {
        let mut out = m.clone();
        for i in 0..m.nrows() {
            out[(i, i)] += shift;
        }
        if linalg::is_spd(&out) {
            return Ok((out, Some((lambda_min, shift))));
        }
        shift += eps.max(shift * 1e-12);
        shift *= 2.0;
    }
    Err(Error::Numerical("eigenvalue correction did not reach a positive definite matrix".into()))
}

/// Which term of an aggregation needed a correction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectedTerm {
    /// `Lambda_j - Lambda_1` for the `j`-th non-base posterior (0-based).
    Increment(usize),
    /// The aggregated precision itself.
    Final,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub term: CorrectedTerm,
    pub min_eigenvalue: f64,
    pub shift: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregated {
    pub posterior: RowPosterior,
    pub corrections: Vec<Correction>,
}

/// Base posterior plus the `J - 1` posteriors that used it as a prior.
#[derive(Clone, Debug)]
pub struct AggregationInput<'a> {
    pub base: &'a RowPosterior,
    pub others: &'a [RowPosterior],
}

/// Aggregates one row with `eps_ev` chosen by [`default_eps`] when `None`.
pub fn pp_aggregate_row(input: &AggregationInput<'_>, eps: Option<f64>) -> Result<Aggregated> {
    let base = input.base;
    let k = base.k();
    if input.others.iter().any(|p| p.k() != k) {
        return Err(validation!("aggregation inputs have mixed dimensions"));
    }
    if input.others.is_empty() {
        return Ok(Aggregated {
            posterior: base.clone(),
            corrections: Vec::new(),
        });
    }
    let eps = eps.unwrap_or_else(|| default_eps(&base.precision));
    let j_total = input.others.len() + 1;
    let base_weight = 2.0 - j_total as f64;
    let base_b = &base.precision * &base.mean;

    let mut corrections = Vec::new();
    let mut prec = &base.precision * base_weight;
    let mut b = &base_b * base_weight;
    for (j, other) in input.others.iter().enumerate() {
        // A block without observations returns its prior unchanged; its term
        // cancels exactly and must not be perturbed by a correction.
        if other == base {
            prec += &other.precision;
            b += &base_b;
            continue;
        }
        let mut diff = &other.precision - &base.precision;
        symmetrize(&mut diff);
        let (fixed, event) = correct(&diff, eps)?;
        match event {
            None => {
                prec += &other.precision;
                b += &other.precision * &other.mean;
            }
            Some((min_eigenvalue, shift)) => {
                corrections.push(Correction {
                    term: CorrectedTerm::Increment(j),
                    min_eigenvalue,
                    shift,
                });
                let corrected = fixed + &base.precision;
                b += &corrected * &other.mean;
                prec += corrected;
            }
        }
    }
    symmetrize(&mut prec);
    let (prec, event) = correct(&prec, eps)?;
    if let Some((min_eigenvalue, shift)) = event {
        log::warn!("aggregated precision was indefinite (min eigenvalue {min_eigenvalue:e}); shifted by {shift:e}");
        corrections.push(Correction {
            term: CorrectedTerm::Final,
            min_eigenvalue,
            shift,
        });
    }
    Ok(Aggregated {
        posterior: finish(prec, &b, "aggregated row")?,
        corrections,
    })
}

/// Product of independent subset posteriors with the `J - 1` surplus copies
/// of the prior divided out:
/// `Lambda* = sum Lambda_j - (J - 1) Lambda_p`,
/// `mu* = Lambda*^-1 [sum Lambda_j mu_j - (J - 1) Lambda_p mu_p]`.
pub fn ep_parametric_aggregate(
    subsets: &[RowPosterior],
    prior: &RowPosterior,
    eps: Option<f64>,
) -> Result<Aggregated> {
    let first = subsets
        .first()
        .ok_or_else(|| validation!("no subset posteriors to aggregate"))?;
    let k = first.k();
    if prior.k() != k || subsets.iter().any(|p| p.k() != k) {
        return Err(validation!("aggregation inputs have mixed dimensions"));
    }
    if subsets.len() == 1 {
        return Ok(Aggregated {
            posterior: first.clone(),
            corrections: Vec::new(),
        });
    }
    let surplus = (subsets.len() - 1) as f64;
    let mut prec = &prior.precision * -surplus;
    let mut b = (&prior.precision * &prior.mean) * -surplus;
    for p in subsets {
        prec += &p.precision;
        b += &p.precision * &p.mean;
    }
    symmetrize(&mut prec);
    let eps = eps.unwrap_or_else(|| default_eps(&first.precision));
    let (prec, event) = correct(&prec, eps)?;
    let corrections = event
        .map(|(min_eigenvalue, shift)| Correction {
            term: CorrectedTerm::Final,
            min_eigenvalue,
            shift,
        })
        .into_iter()
        .collect();
    Ok(Aggregated {
        posterior: finish(prec, &b, "parametric aggregate")?,
        corrections,
    })
}
