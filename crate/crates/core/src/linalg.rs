//! Small dense helpers on top of `nalgebra`.
//!
//! Factor matrices are stored row-major ([`Factors`]) because every hot loop
//! in the sampler walks whole rows. `K x K` work (precisions, Cholesky,
//! eigen-decompositions) goes through `DMatrix`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative diagonal jitter applied once when a Cholesky factorization fails.
pub const JITTER_REL: f64 = 1e-10;

/// Row-major `n_rows x k` matrix of latent factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Factors {
    n_rows: usize,
    k: usize,
    data: Vec<f64>,
}

impl Factors {
    pub fn zeros(n_rows: usize, k: usize) -> Self {
        Factors {
            n_rows,
            k,
            data: vec![0.0; n_rows * k],
        }
    }

    pub fn from_vec(n_rows: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_rows * k {
            return Err(Error::Validation(format!(
                "factor buffer has {} values, expected {}x{}",
                data.len(),
                n_rows,
                k
            )));
        }
        Ok(Factors { n_rows, k, data })
    }

    pub fn from_rows(k: usize, rows: &[DVector<f64>]) -> Self {
        let mut f = Factors::zeros(rows.len(), k);
        for (n, r) in rows.iter().enumerate() {
            f.row_mut(n).copy_from_slice(r.as_slice());
        }
        f
    }

    #[inline]
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn row(&self, n: usize) -> &[f64] {
        &self.data[n * self.k..(n + 1) * self.k]
    }

    #[inline]
    pub fn row_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.data[n * self.k..(n + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.k.max(1)).take(self.n_rows)
    }

    pub fn get(&self, n: usize, k: usize) -> f64 {
        self.data[n * self.k + k]
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.n_rows).map(|n| self.get(n, k)).collect()
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Factors {
        Factors {
            n_rows: end - start,
            k: self.k,
            data: self.data[start * self.k..end * self.k].to_vec(),
        }
    }

    /// Gathers rows so that row `p` of the result is row `perm[p]` of `self`.
    pub fn gather_rows(&self, perm: &[usize]) -> Factors {
        let mut out = Factors::zeros(perm.len(), self.k);
        for (p, &src) in perm.iter().enumerate() {
            out.row_mut(p).copy_from_slice(self.row(src));
        }
        out
    }

    /// Scatters rows so that row `perm[p]` of the result is row `p` of `self`.
    pub fn scatter_rows(&self, perm: &[usize]) -> Factors {
        let mut out = Factors::zeros(perm.len(), self.k);
        for (p, &dst) in perm.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(p));
        }
        out
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_rows, self.k, &self.data)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn is_symmetric(m: &DMatrix<f64>) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-9 * scale {
                return false;
            }
        }
    }
    true
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Plain Cholesky attempt; `None` when the matrix is not numerically SPD.
pub fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Cholesky::new(m.clone())
}

pub fn is_spd(m: &DMatrix<f64>) -> bool {
    cholesky(m).is_some()
}

/// Cholesky with one retry after adding `JITTER_REL * trace / K` to the
/// diagonal.
pub fn cholesky_jittered(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = cholesky(m) {
        return Ok(c);
    }
    let k = m.nrows().max(1) as f64;
    let bump = (JITTER_REL * m.trace().abs() / k).max(f64::MIN_POSITIVE);
    let mut jittered = m.clone();
    for i in 0..m.nrows() {
        jittered[(i, i)] += bump;
    }
    log::warn!("{what}: Cholesky failed, retrying with diagonal jitter {bump:e}");
    cholesky(&jittered)
        .ok_or_else(|| Error::Numerical(format!("{what}: matrix is not positive definite")))
}

pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let mut inv = cholesky_jittered(m, what)?.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Draws from `N(mean, precision^-1)` given the Cholesky factor of the
/// precision: `mean + L^-T z`.
pub fn sample_mvn_precision<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    precision_chol: &Cholesky<f64, Dyn>,
    rng: &mut R,
) -> DVector<f64> {
    let k = mean.len();
    let z = DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let offset = precision_chol
        .l_dirty()
        .tr_solve_lower_triangular(&z)
        .expect("Cholesky factor has a nonzero diagonal");
    mean + offset
}

/// `log N(x; mean, precision^-1)` using a precomputed Cholesky factor.
pub fn log_mvn_density_chol(
    x: &[f64],
    mean: &DVector<f64>,
    precision_chol: &Cholesky<f64, Dyn>,
) -> f64 {
    let k = mean.len();
    let l = precision_chol.l_dirty();
    // precision = L L^T, so the quadratic form is |L^T (x - mean)|^2.
    let mut quad = 0.0;
    for j in 0..k {
        let mut s = 0.0;
        for i in j..k {
            s += l[(i, j)] * (x[i] - mean[i]);
        }
        quad += s * s;
    }
    let log_det: f64 = (0..k).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
    0.5 * log_det - 0.5 * quad - 0.5 * k as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Packs the upper triangle (diagonal included) row by row.
pub fn pack_upper(m: &DMatrix<f64>) -> Vec<f64> {
    let k = m.nrows();
    let mut out = Vec::with_capacity(k * (k + 1) / 2);
    for i in 0..k {
        for j in i..k {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn unpack_upper(k: usize, packed: &[f64]) -> DMatrix<f64> {
    assert_eq!(packed.len(), k * (k + 1) / 2);
    let mut m = DMatrix::zeros(k, k);
    let mut it = packed.iter();
    for i in 0..k {
        for j in i..k {
            let v = *it.next().unwrap();
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_roundtrip() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        assert_eq!(unpack_upper(3, &pack_upper(&m)), m);
    }

    #[test]
    fn log_density_matches_scalar_formula() {
        let prec = DMatrix::from_element(1, 1, 4.0);
        let chol = cholesky(&prec).unwrap();
        let mean = DVector::from_element(1, 1.0);
        let got = log_mvn_density_chol(&[1.5], &mean, &chol);
        let var: f64 = 0.25;
        let want = -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.25 / (2.0 * var);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn jitter_rescues_semidefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(cholesky(&m).is_none());
        assert!(cholesky_jittered(&m, "test").is_ok());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(cholesky_jittered(&bad, "test").is_err());
    }

    #[test]
    fn scatter_inverts_gather() {
        let f = Factors::from_vec(3, 2, vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let perm = [2, 0, 1];
        assert_eq!(f.gather_rows(&perm).scatter_rows(&perm), f);
        assert_eq!(f.gather_rows(&perm).row(0), &[4., 5.]);
    }
}
