//! Grid-exact evaluation of the staged product density on tiny problems.
//!
//! For `K = 1`, fixed priors `x_n, w_d ~ N(0, 1/p)` and a 2x2 block grid,
//! every stage posterior, every propagated marginal and every normalizer is
//! computed by quadrature (one side of each block integrated in closed form).
//! The staged product, with propagated marginals divided out, must then
//! differ from the unnormalized joint posterior by a constant.
//!
//! Blocks: rows `A = 0..row_cut`, `B = row_cut..N`; columns likewise.
//! Stage one is `(A, A)`, stage two `(B, A)` and `(A, B)`, stage three
//! `(B, B)`.

use std::f64::consts::PI;
use std::ops::Range;

use crate::data::SparseMatrix;
use crate::error::{validation, Result};

/// Midpoint rule on `[-half_width, half_width]` per coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub half_width: f64,
    pub points: usize,
}

impl Grid {
    fn nodes(&self) -> Vec<f64> {
        let h = 2.0 * self.half_width / self.points as f64;
        (0..self.points)
            .map(|i| -self.half_width + (i as f64 + 0.5) * h)
            .collect()
    }

    fn log_cell(&self, dims: usize) -> f64 {
        dims as f64 * (2.0 * self.half_width / self.points as f64).ln()
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Every point of the `dims`-dimensional tensor grid.
fn tensor(nodes: &[f64], dims: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..dims {
        out = out
            .into_iter()
            .flat_map(|p| {
                nodes.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    out
}

/// Rank-one model on a small, fully specified matrix.
#[derive(Clone, Debug)]
pub struct TinyModel {
    pub y: SparseMatrix,
    pub tau: f64,
    pub prior_precision: f64,
    pub row_cut: usize,
    pub col_cut: usize,
}

/// Stage normalizers and the grids used to tabulate propagated marginals.
#[derive(Clone, Debug)]
pub struct ExactDecomposition {
    model: TinyModel,
    grid: Grid,
    log_z1: f64,
    log_z1_x: f64,
    log_z2a: f64,
    log_z2b: f64,
    log_z3: f64,
}

impl TinyModel {
    fn rows(&self, upper: bool) -> Range<usize> {
        if upper {
            0..self.row_cut
        } else {
            self.row_cut..self.y.n_rows()
        }
    }

    fn cols(&self, left: bool) -> Range<usize> {
        if left {
            0..self.col_cut
        } else {
            self.col_cut..self.y.n_cols()
        }
    }

    fn log_prior(&self, v: &[f64]) -> f64 {
        let p = self.prior_precision;
        v.iter()
            .map(|x| 0.5 * (p / (2.0 * PI)).ln() - 0.5 * p * x * x)
            .sum()
    }

    /// Log-likelihood of the entries in `rows x cols`; `x` and `w` are
    /// indexed relative to the ranges.
    fn log_lik(&self, rows: &Range<usize>, cols: &Range<usize>, x: &[f64], w: &[f64]) -> f64 {
        let c = 0.5 * (self.tau / (2.0 * PI)).ln();
        self.y
            .entries()
            .iter()
            .filter(|e| rows.contains(&e.row) && cols.contains(&e.col))
            .map(|e| {
                let r = e.value - x[e.row - rows.start] * w[e.col - cols.start];
                c - 0.5 * self.tau * r * r
            })
            .sum()
    }

    /// `log prod_n int p(x_n) prod_d N(y_nd; x_n w_d, 1/tau) dx_n` over the
    /// rows in `rows`, entries restricted to `cols`.
    fn log_integrate_rows(&self, rows: &Range<usize>, cols: &Range<usize>, w: &[f64]) -> f64 {
        self.log_integrate(rows, cols, w, false)
    }

    fn log_integrate_cols(&self, rows: &Range<usize>, cols: &Range<usize>, x: &[f64]) -> f64 {
        self.log_integrate(rows, cols, x, true)
    }

    fn log_integrate(&self, rows: &Range<usize>, cols: &Range<usize>, other: &[f64], over_cols: bool) -> f64 {
        let (outer, inner) = if over_cols { (cols, rows) } else { (rows, cols) };
        let p = self.prior_precision;
        let tau = self.tau;
        let mut total = 0.0;
        for o in outer.clone() {
            let (mut a, mut b, mut yy, mut m) = (p, 0.0, 0.0, 0usize);
            for e in self.y.entries() {
                let (oi, ii) = if over_cols { (e.col, e.row) } else { (e.row, e.col) };
                if oi == o && inner.contains(&ii) {
                    let v = other[ii - inner.start];
                    a += tau * v * v;
                    b += tau * e.value * v;
                    yy += e.value * e.value;
                    m += 1;
                }
            }
            total += 0.5 * (p / a).ln() + b * b / (2.0 * a) - 0.5 * tau * yy
                + 0.5 * m as f64 * (tau / (2.0 * PI)).ln();
        }
        total
    }

    /// Unnormalized log joint posterior: priors plus full likelihood.
    pub fn log_joint(&self, x: &[f64], w: &[f64]) -> f64 {
        let all_rows = 0..self.y.n_rows();
        let all_cols = 0..self.y.n_cols();
        self.log_prior(x) + self.log_prior(w) + self.log_lik(&all_rows, &all_cols, x, w)
    }
}

impl ExactDecomposition {
    /// Computes the stage normalizers. Blocks larger than three rows or
    /// columns are rejected because the grid grows as `points^(2 * size)`.
    pub fn new(model: TinyModel, grid: Grid) -> Result<Self> {
        let (n, d) = (model.y.n_rows(), model.y.n_cols());
        if model.row_cut == 0 || model.row_cut >= n || model.col_cut == 0 || model.col_cut >= d {
            return Err(validation!("cuts must split both axes into two nonempty parts"));
        }
        if [model.row_cut, n - model.row_cut, model.col_cut, d - model.col_cut]
            .iter()
            .any(|&s| s > 3)
        {
            return Err(validation!("exact decomposition supports blocks of at most 3x3"));
        }
        if !(model.tau > 0.0 && model.prior_precision > 0.0) {
            return Err(validation!("tau and prior precision must be positive"));
        }
        let mut dec = ExactDecomposition {
            model,
            grid,
            log_z1: 0.0,
            log_z1_x: 0.0,
            log_z2a: 0.0,
            log_z2b: 0.0,
            log_z3: 0.0,
        };
        let m = dec.model.clone();
        let (ra, rb, ca, cb) = (m.rows(true), m.rows(false), m.cols(true), m.cols(false));
        let nodes = grid.nodes();

        dec.log_z1 = log_sum_exp(
            tensor(&nodes, ca.len())
                .iter()
                .map(|w1| m.log_prior(w1) + m.log_integrate_rows(&ra, &ca, w1)),
        ) + grid.log_cell(ca.len());
        dec.log_z1_x = log_sum_exp(
            tensor(&nodes, ra.len())
                .iter()
                .map(|x1| m.log_prior(x1) + m.log_integrate_cols(&ra, &ca, x1)),
        ) + grid.log_cell(ra.len());
        dec.log_z2a = log_sum_exp(
            tensor(&nodes, ca.len())
                .iter()
                .map(|w1| dec.log_marginal_w1(w1) + m.log_integrate_rows(&rb, &ca, w1)),
        ) + grid.log_cell(ca.len());
        dec.log_z2b = log_sum_exp(
            tensor(&nodes, ra.len())
                .iter()
                .map(|x1| dec.log_marginal_x1(x1) + m.log_integrate_cols(&ra, &cb, x1)),
        ) + grid.log_cell(ra.len());

        let x2_grid = tensor(&nodes, rb.len());
        let w2_grid = tensor(&nodes, cb.len());
        let mx2: Vec<f64> = x2_grid.iter().map(|x2| dec.log_marginal_x2(x2)).collect();
        let mw2: Vec<f64> = w2_grid.iter().map(|w2| dec.log_marginal_w2(w2)).collect();
        let (m, rb, cb) = (&m, &rb, &cb);
        dec.log_z3 = log_sum_exp(x2_grid.iter().zip(&mx2).flat_map(|(x2, lx)| {
            w2_grid
                .iter()
                .zip(&mw2)
                .map(move |(w2, lw)| lx + lw + m.log_lik(rb, cb, x2, w2))
        })) + grid.log_cell(rb.len() + cb.len());
        Ok(dec)
    }

    /// Stage-one marginal `p(W1 | Y11)`.
    pub fn log_marginal_w1(&self, w1: &[f64]) -> f64 {
        let m = &self.model;
        m.log_prior(w1) + m.log_integrate_rows(&m.rows(true), &m.cols(true), w1) - self.log_z1
    }

    /// Stage-one marginal `p(X1 | Y11)`.
    pub fn log_marginal_x1(&self, x1: &[f64]) -> f64 {
        let m = &self.model;
        m.log_prior(x1) + m.log_integrate_cols(&m.rows(true), &m.cols(true), x1) - self.log_z1_x
    }

    /// Stage-two marginal `p(X2 | Y11, Y21)`, integrating `W1` on the grid.
    pub fn log_marginal_x2(&self, x2: &[f64]) -> f64 {
        let m = &self.model;
        let (rb, ca) = (m.rows(false), m.cols(true));
        let nodes = self.grid.nodes();
        let inner = log_sum_exp(
            tensor(&nodes, ca.len())
                .iter()
                .map(|w1| self.log_marginal_w1(w1) + m.log_lik(&rb, &ca, x2, w1)),
        ) + self.grid.log_cell(ca.len());
        m.log_prior(x2) + inner - self.log_z2a
    }

    /// Stage-two marginal `p(W2 | Y11, Y12)`.
    pub fn log_marginal_w2(&self, w2: &[f64]) -> f64 {
        let m = &self.model;
        let (ra, cb) = (m.rows(true), m.cols(false));
        let nodes = self.grid.nodes();
        let inner = log_sum_exp(
            tensor(&nodes, ra.len())
                .iter()
                .map(|x1| self.log_marginal_x1(x1) + m.log_lik(&ra, &cb, x1, w2)),
        ) + self.grid.log_cell(ra.len());
        m.log_prior(w2) + inner - self.log_z2b
    }

    /// Log densities of the four stage posteriors at `(x, w)`.
    pub fn log_stage_densities(&self, x: &[f64], w: &[f64]) -> [f64; 4] {
        let m = &self.model;
        let (ra, rb, ca, cb) = (m.rows(true), m.rows(false), m.cols(true), m.cols(false));
        let (x1, x2) = x.split_at(m.row_cut);
        let (w1, w2) = w.split_at(m.col_cut);
        let s1 = m.log_prior(x1) + m.log_prior(w1) + m.log_lik(&ra, &ca, x1, w1) - self.log_z1;
        let s2a = self.log_marginal_w1(w1) + m.log_prior(x2) + m.log_lik(&rb, &ca, x2, w1)
            - self.log_z2a;
        let s2b = self.log_marginal_x1(x1) + m.log_prior(w2) + m.log_lik(&ra, &cb, x1, w2)
            - self.log_z2b;
        let s3 = self.log_marginal_x2(x2) + self.log_marginal_w2(w2) + m.log_lik(&rb, &cb, x2, w2)
            - self.log_z3;
        [s1, s2a, s2b, s3]
    }

    /// Log of the staged product with propagated marginals divided out.
    pub fn log_product_density(&self, x: &[f64], w: &[f64]) -> f64 {
        let m = &self.model;
        let (x1, x2) = x.split_at(m.row_cut);
        let (w1, w2) = w.split_at(m.col_cut);
        let [s1, s2a, s2b, s3] = self.log_stage_densities(x, w);
        s1 + (s2a - self.log_marginal_w1(w1))
            + (s2b - self.log_marginal_x1(x1))
            + (s3 - self.log_marginal_x2(x2) - self.log_marginal_w2(w2))
    }

    /// `log product - log joint`; constant in `(x, w)` when the
    /// decomposition is exact.
    pub fn log_ratio(&self, x: &[f64], w: &[f64]) -> f64 {
        self.log_product_density(x, w) - self.model.log_joint(x, w)
    }

    /// Sum of the stage log-normalizers; the ratio should equal its negation.
    pub fn log_normalizer_sum(&self) -> f64 {
        self.log_z1 + self.log_z2a + self.log_z2b + self.log_z3
    }
}

/// Spread (max - min) of `log_ratio` over the given points.
pub fn ratio_spread(dec: &ExactDecomposition, points: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let r: Vec<f64> = points.iter().map(|(x, w)| dec.log_ratio(x, w)).collect();
    let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi - lo
}
