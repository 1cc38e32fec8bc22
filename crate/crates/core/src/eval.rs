//! Metrics: RMSE, RMSE by training frequency, cross-block correlations of
//! posterior means, and wall-clock speed-up.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{PartitionPlan, SparseMatrix};
use crate::error::{validation, Result};
use crate::linalg::Factors;
use crate::pipeline::BlockMeans;
use crate::sampler::Side;

pub fn rmse(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(validation!(
            "{} predictions for {} targets",
            predictions.len(),
            truths.len()
        ));
    }
    if predictions.is_empty() {
        return Err(validation!("RMSE of an empty set"));
    }
    let sse: f64 = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((sse / predictions.len() as f64).sqrt())
}

/// Training-count bin edges; the last bin is open-ended.
pub const DEFAULT_BIN_EDGES: [f64; 7] = [0.0, 10.0, 20.0, 40.0, 80.0, 160.0, f64::INFINITY];

/// `[lo, hi)` in training observations per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBin {
    pub lo: f64,
    /// `None` for an unbounded bin.
    pub hi: Option<f64>,
    pub count: usize,
    /// `None` when the bin is empty.
    pub rmse: Option<f64>,
}

/// Bins each test entry by its row's training count and reports per-bin
/// RMSE. `predictions` are aligned with `test.entries()`.
pub fn rmse_by_frequency(
    predictions: &[f64],
    train: &SparseMatrix,
    test: &SparseMatrix,
    edges: &[f64],
) -> Result<Vec<FrequencyBin>> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(validation!("bin edges must be at least two increasing values"));
    }
    if predictions.len() != test.nnz() {
        return Err(validation!("{} predictions for {} test entries", predictions.len(), test.nnz()));
    }
    let counts = train.row_counts();
    let n_bins = edges.len() - 1;
    let mut sse = vec![0.0; n_bins];
    let mut n = vec![0usize; n_bins];
    for (e, p) in test.entries().iter().zip(predictions) {
        let c = counts.get(e.row).copied().unwrap_or(0) as f64;
        let b = edges
            .windows(2)
            .position(|w| w[0] <= c && c < w[1])
            .ok_or_else(|| validation!("row {} with {c} training entries falls outside every bin", e.row))?;
        sse[b] += (p - e.value) * (p - e.value);
        n[b] += 1;
    }
    Ok((0..n_bins)
        .map(|b| FrequencyBin {
            lo: edges[b],
            hi: edges[b + 1].is_finite().then_some(edges[b + 1]),
            count: n[b],
            rmse: (n[b] > 0).then(|| (sse[b] / n[b] as f64).sqrt()),
        })
        .collect())
}

/// Pearson correlation; 0 when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a[..n].iter().zip(&b[..n]) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Column `c` of `A` is matched with column `perm[c]` of `B`, scaled by
/// `signs[c]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub perm: Vec<usize>,
    pub signs: Vec<i8>,
}

impl Alignment {
    pub fn identity(k: usize) -> Self {
        Alignment {
            perm: (0..k).collect(),
            signs: vec![1; k],
        }
    }

    /// `B` with columns permuted and signed to line up with `A`.
    pub fn apply(&self, b: &Factors) -> Factors {
        let mut out = Factors::zeros(b.n_rows(), b.k());
        for r in 0..b.n_rows() {
            let src = b.row(r);
            let dst = out.row_mut(r);
            for (c, (&p, &s)) in self.perm.iter().zip(&self.signs).enumerate() {
                dst[c] = f64::from(s) * src[p];
            }
        }
        out
    }
}

/// Greedy matching: repeatedly pair the unmatched columns with the largest
/// absolute correlation.
pub fn align_latent_dimensions(a: &Factors, b: &Factors) -> Result<Alignment> {
    if a.n_rows() != b.n_rows() || a.k() != b.k() {
        return Err(validation!(
            "cannot align {}x{} with {}x{}",
            a.n_rows(),
            a.k(),
            b.n_rows(),
            b.k()
        ));
    }
    let k = a.k();
    let ca: Vec<Vec<f64>> = (0..k).map(|c| a.column(c)).collect();
    let cb: Vec<Vec<f64>> = (0..k).map(|c| b.column(c)).collect();
    let mut pairs = Vec::with_capacity(k * k);
    for (i, x) in ca.iter().enumerate() {
        for (j, y) in cb.iter().enumerate() {
            pairs.push((pearson(x, y), i, j));
        }
    }
    // Stable sort: equal |r| keeps the lowest (i, j) first.
    pairs.sort_by(|p, q| q.0.abs().total_cmp(&p.0.abs()));
    let mut out = Alignment {
        perm: vec![usize::MAX; k],
        signs: vec![1; k],
    };
    let mut used_b = vec![false; k];
    for (r, i, j) in pairs {
        if out.perm[i] == usize::MAX && !used_b[j] {
            out.perm[i] = j;
            out.signs[i] = if r < 0.0 { -1 } else { 1 };
            used_b[j] = true;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCorrelation {
    pub side: Side,
    pub a: (usize, usize),
    pub b: (usize, usize),
    /// Over the flattened shared block.
    pub flattened: f64,
    pub per_dimension: Vec<f64>,
}

impl PairCorrelation {
    pub fn mean_per_dimension(&self) -> f64 {
        self.per_dimension.iter().sum::<f64>() / self.per_dimension.len().max(1) as f64
    }
}

fn correlate(side: Side, a: &BlockMeans, b: &BlockMeans, align: bool) -> Result<PairCorrelation> {
    let (fa, fb) = match side {
        Side::X => (&a.x_mean, &b.x_mean),
        Side::W => (&a.w_mean, &b.w_mean),
    };
    let fb = if align {
        align_latent_dimensions(fa, fb)?.apply(fb)
    } else {
        fb.clone()
    };
    if fa.n_rows() != fb.n_rows() {
        return Err(validation!("blocks ({},{}) and ({},{}) do not share {} rows", a.i, a.j, b.i, b.j, side.name()));
    }
    Ok(PairCorrelation {
        side,
        a: (a.i, a.j),
        b: (b.i, b.j),
        flattened: pearson(fa.as_slice(), fb.as_slice()),
        per_dimension: (0..fa.k()).map(|c| pearson(&fa.column(c), &fb.column(c))).collect(),
    })
}

/// Correlations of posterior-mean factors between blocks sharing rows or
/// columns: `X` of `(i,0)` against `X` of `(i,j)`, and `W` of `(0,j)`
/// against `W` of `(i,j)`. With `align`, latent dimensions are matched first.
pub fn subset_mean_correlations(
    blocks: &[BlockMeans],
    plan: &PartitionPlan,
    align: bool,
) -> Result<Vec<PairCorrelation>> {
    let find = |i: usize, j: usize| {
        blocks
            .iter()
            .find(|b| b.i == i && b.j == j)
            .ok_or_else(|| validation!("no posterior means for block ({i},{j})"))
    };
    let mut out = Vec::new();
    for i in 0..plan.n_row_blocks() {
        for j in 1..plan.n_col_blocks() {
            out.push(correlate(Side::X, find(i, 0)?, find(i, j)?, align)?);
        }
    }
    for j in 0..plan.n_col_blocks() {
        for i in 1..plan.n_row_blocks() {
            out.push(correlate(Side::W, find(0, j)?, find(i, j)?, align)?);
        }
    }
    Ok(out)
}

pub fn mean_flattened(pairs: &[PairCorrelation]) -> Option<f64> {
    (!pairs.is_empty()).then(|| pairs.iter().map(|p| p.flattened).sum::<f64>() / pairs.len() as f64)
}

/// Wall-clock speed-up: full-data time over distributed time.
pub fn wts(full_time: f64, distributed_time: f64) -> Result<f64> {
    if !(full_time > 0.0 && distributed_time > 0.0) {
        return Err(validation!("times must be positive ({full_time}, {distributed_time})"));
    }
    Ok(full_time / distributed_time)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub partition: String,
    pub seed: u64,
    pub rmse: f64,
    pub bins: Vec<FrequencyBin>,
    pub correlations: Vec<PairCorrelation>,
    pub mean_correlation: Option<f64>,
    pub distributed_seconds: f64,
    pub wts: Option<f64>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method      {}", self.method);
        let _ = writeln!(s, "partition   {}", self.partition);
        let _ = writeln!(s, "seed        {}", self.seed);
        let _ = writeln!(s, "rmse        {:.4}", self.rmse);
        let _ = writeln!(s, "time (s)    {:.3}", self.distributed_seconds);
        if let Some(w) = self.wts {
            let _ = writeln!(s, "wts         {w:.3}");
        }
        if let Some(c) = self.mean_correlation {
            let _ = writeln!(s, "mean corr   {c:.4}");
        }
        let _ = writeln!(s, "\n{:>12} {:>8} {:>8}", "train count", "n", "rmse");
        for b in &self.bins {
            let range = match b.hi {
                Some(hi) => format!("{}-{}", b.lo, hi),
                None => format!("{}+", b.lo),
            };
            let r = b.rmse.map_or("-".to_string(), |r| format!("{r:.4}"));
            let _ = writeln!(s, "{range:>12} {:>8} {r:>8}", b.count);
        }
        if !self.correlations.is_empty() {
            let _ = writeln!(s, "\n{:>4} {:>8} {:>8} {:>10} {:>10}", "side", "a", "b", "flattened", "per-dim");
            for c in &self.correlations {
                let _ = writeln!(
                    s,
                    "{:>4} {:>8} {:>8} {:>10.4} {:>10.4}",
                    c.side.name(),
                    format!("{},{}", c.a.0, c.a.1),
                    format!("{},{}", c.b.0, c.b.1),
                    c.flattened,
                    c.mean_per_dimension()
                );
            }
        }
        s
    }

    pub fn csv_row(&self) -> CsvRow {
        CsvRow {
            partition: self.partition.clone(),
            method: self.method.clone(),
            seed: self.seed,
            rmse: self.rmse,
            wall_clock: self.distributed_seconds,
            wts: self.wts,
        }
    }
}

/// One line of the plotting CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub partition: String,
    pub method: String,
    pub seed: u64,
    pub rmse: f64,
    pub wall_clock: f64,
    pub wts: Option<f64>,
}

pub fn write_csv<W: Write>(out: W, rows: &[CsvRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| validation!("csv: {e}"))?;
    }
    w.flush().map_err(|e| validation!("csv: {e}"))?;
    Ok(())
}
