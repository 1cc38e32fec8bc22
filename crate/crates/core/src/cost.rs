//! Proportional compute and communication cost of a staged run.
//!
//! With `U` workers and an `(sqrt U + 1) x (sqrt U + 1)` grid, one stage
//! costs
//! `t0 = [(N + D) K^3 / (sqrt U + 1) + M K^2 / (U + 2 sqrt U + 1)] T`,
//! aggregation costs `t_a = max(N, D) / (sqrt U + 1) (K + K^2)`, and the
//! whole run `3 t0 + t_a`. Stage inputs and outputs move
//! `sqrt U (N + D) L` numbers. All quantities are up to a constant factor.

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub n: f64,
    pub d: f64,
    pub m: f64,
    pub k: f64,
    pub t: f64,
    pub u: f64,
    /// Mixture components per row; one for Gaussian approximations.
    pub c: f64,
    /// Parameters stored per row.
    pub l: f64,
}

impl CostModel {
    /// `L` for a `C`-component mixture: weight, mean and upper-triangular
    /// precision per component.
    pub fn params_per_row(k: usize, c: usize) -> f64 {
        (c * (1 + k + k * (k + 1) / 2)) as f64
    }

    pub fn new(n: usize, d: usize, m: usize, k: usize, t: usize, u: usize, c: usize) -> Self {
        CostModel {
            n: n as f64,
            d: d as f64,
            m: m as f64,
            k: k as f64,
            t: t as f64,
            u: u as f64,
            c: c as f64,
            l: Self::params_per_row(k, c),
        }
    }

    fn validate(&self) -> Result<()> {
        let fields = [self.n, self.d, self.m, self.k, self.t, self.u, self.c, self.l];
        if fields.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(validation!("cost model inputs must be positive: {self:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub t0: f64,
    pub t_a: f64,
    pub total: f64,
    pub communication: f64,
}

pub fn cost_model_eval(cm: &CostModel) -> Result<CostEstimate> {
    cm.validate()?;
    let su = cm.u.sqrt();
    let t0 = ((cm.n + cm.d) * cm.k.powi(3) / (su + 1.0)
        + cm.m * cm.k * cm.k / (cm.u + 2.0 * su + 1.0))
        * cm.t;
    let t_a = cm.n.max(cm.d) / (su + 1.0) * (cm.k + cm.k * cm.k);
    Ok(CostEstimate {
        t0,
        t_a,
        total: 3.0 * t0 + t_a,
        communication: su * (cm.n + cm.d) * cm.l,
    })
}
