//! Sparse observation matrices: loading, simulation, train/test splits,
//! row/column ordering and grid partitioning.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::linalg::{dot, Factors};
use crate::seed::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Observed entries of an `n_rows x n_cols` matrix in coordinate form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    entries: Vec<Entry>,
}

impl SparseMatrix {
    pub fn new(n_rows: usize, n_cols: usize, entries: Vec<Entry>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if e.row >= n_rows || e.col >= n_cols {
                return Err(validation!(
                    "entry ({}, {}) outside a {}x{} matrix",
                    e.row,
                    e.col,
                    n_rows,
                    n_cols
                ));
            }
            if !seen.insert((e.row, e.col)) {
                return Err(validation!("duplicate entry ({}, {})", e.row, e.col));
            }
        }
        Ok(SparseMatrix {
            n_rows,
            n_cols,
            entries,
        })
    }

    /// Builds a matrix from entries already known to be valid.
    pub(crate) fn from_trusted(n_rows: usize, n_cols: usize, entries: Vec<Entry>) -> Self {
        debug_assert!(entries.iter().all(|e| e.row < n_rows && e.col < n_cols));
        SparseMatrix {
            n_rows,
            n_cols,
            entries,
        }
    }

    pub fn empty(n_rows: usize, n_cols: usize) -> Self {
        SparseMatrix::from_trusted(n_rows, n_cols, Vec::new())
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Number of observed entries.
    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn row_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_rows];
        for e in &self.entries {
            c[e.row] += 1;
        }
        c
    }

    pub fn col_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_cols];
        for e in &self.entries {
            c[e.col] += 1;
        }
        c
    }

    pub fn indices(&self) -> Vec<(usize, usize)> {
        self.entries.iter().map(|e| (e.row, e.col)).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.value).collect()
    }

    /// Order-independent fingerprint of the entries, used to check that a
    /// partition loses nothing.
    pub fn checksum(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.value * (1.0 + ((e.row * 31 + e.col * 17) % 97) as f64))
            .sum()
    }

    /// Writes the plain triplet format with a leading `# shape` comment.
    pub fn write_triplets(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::with_capacity(self.entries.len() * 24 + 32);
        writeln!(out, "# shape {} {}", self.n_rows, self.n_cols).unwrap();
        for e in &self.entries {
            writeln!(out, "{} {} {}", e.row, e.col, e.value).unwrap();
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TripletFormat {
    /// `row col value`, whitespace or comma separated, 0-based indices.
    Plain,
    /// `user::item::rating::timestamp` with 1-based ids.
    MovielensDat,
}

/// Maps from dense 0-based indices back to the ids found in a MovieLens file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdMap {
    pub row_ids: Vec<u64>,
    pub col_ids: Vec<u64>,
}

pub fn load_triplets(path: impl AsRef<Path>, format: TripletFormat) -> Result<SparseMatrix> {
    match format {
        TripletFormat::Plain => load_plain(path.as_ref()),
        TripletFormat::MovielensDat => load_movielens(path).map(|(m, _)| m),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn check_duplicates(path: &Path, entries: &[Entry], lines: &[usize]) -> Result<()> {
    let mut seen = HashMap::with_capacity(entries.len());
    for (e, &line) in entries.iter().zip(lines) {
        if let Some(first) = seen.insert((e.row, e.col), line) {
            return Err(Error::Validation(format!(
                "{}:{}: duplicate entry ({}, {}) first seen on line {}",
                path.display(),
                line,
                e.row,
                e.col,
                first
            )));
        }
    }
    Ok(())
}

fn load_plain(path: &Path) -> Result<SparseMatrix> {
    let text = read_text(path)?;
    let mut shape: Option<(usize, usize)> = None;
    let mut entries = Vec::new();
    let mut lines = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let mut parts = comment.split_whitespace();
            if parts.next() == Some("shape") {
                let dims: Vec<_> = parts.map(str::parse::<usize>).collect();
                match dims.as_slice() {
                    [Ok(n), Ok(d)] => shape = Some((*n, *d)),
                    _ => return Err(parse_err(path, lineno, "bad '# shape N D' header")),
                }
            }
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        if fields.len() != 3 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 'row col value', found {} fields", fields.len()),
            ));
        }
        let row = fields[0]
            .parse::<usize>()
            .map_err(|e| parse_err(path, lineno, format!("row index: {e}")))?;
        let col = fields[1]
            .parse::<usize>()
            .map_err(|e| parse_err(path, lineno, format!("column index: {e}")))?;
        let value = fields[2]
            .parse::<f64>()
            .map_err(|e| parse_err(path, lineno, format!("value: {e}")))?;
        if !value.is_finite() {
            return Err(parse_err(path, lineno, "value is not finite"));
        }
        entries.push(Entry { row, col, value });
        lines.push(lineno);
    }
    check_duplicates(path, &entries, &lines)?;
    let max_row = entries.iter().map(|e| e.row + 1).max().unwrap_or(0);
    let max_col = entries.iter().map(|e| e.col + 1).max().unwrap_or(0);
    let (n, d) = match shape {
        Some((n, d)) if n >= max_row && d >= max_col => (n, d),
        Some((n, d)) => {
            return Err(validation!(
                "{}: entries exceed declared shape {}x{}",
                path.display(),
                n,
                d
            ))
        }
        None => (max_row, max_col),
    };
    Ok(SparseMatrix::from_trusted(n, d, entries))
}

/// Loads a MovieLens `ratings.dat` file, compacting ids to dense indices in
/// order of first appearance sorted by id.
pub fn load_movielens(path: impl AsRef<Path>) -> Result<(SparseMatrix, IdMap)> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut raw = Vec::new();
    let mut lines = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split("::").collect();
        if fields.len() != 4 {
            return Err(parse_err(
                path,
                lineno,
                "expected 'user::item::rating::timestamp'",
            ));
        }
        let user = fields[0]
            .parse::<u64>()
            .map_err(|e| parse_err(path, lineno, format!("user id: {e}")))?;
        let item = fields[1]
            .parse::<u64>()
            .map_err(|e| parse_err(path, lineno, format!("item id: {e}")))?;
        let rating = fields[2]
            .parse::<f64>()
            .map_err(|e| parse_err(path, lineno, format!("rating: {e}")))?;
        fields[3]
            .parse::<u64>()
            .map_err(|e| parse_err(path, lineno, format!("timestamp: {e}")))?;
        raw.push((user, item, rating));
        lines.push(lineno);
    }
    let compact = |ids: Vec<u64>| -> (Vec<u64>, HashMap<u64, usize>) {
        let mut ids = ids;
        ids.sort_unstable();
        ids.dedup();
        let index = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        (ids, index)
    };
    let (row_ids, row_index) = compact(raw.iter().map(|r| r.0).collect());
    let (col_ids, col_index) = compact(raw.iter().map(|r| r.1).collect());
    let entries: Vec<Entry> = raw
        .iter()
        .map(|&(u, i, v)| Entry {
            row: row_index[&u],
            col: col_index[&i],
            value: v,
        })
        .collect();
    check_duplicates(path, &entries, &lines)?;
    let m = SparseMatrix::from_trusted(row_ids.len(), col_ids.len(), entries);
    Ok((m, IdMap { row_ids, col_ids }))
}

/// The factors and noise level a simulated matrix was drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub x_true: Factors,
    pub w_true: Factors,
    pub tau: f64,
}

/// Fully observed `Y = X W^T + noise` with standard-normal factors and
/// noise precision `tau`.
pub fn simulate(
    n: usize,
    d: usize,
    k: usize,
    tau: f64,
    seed: u64,
) -> Result<(SparseMatrix, GroundTruth)> {
    if n == 0 || d == 0 || k == 0 {
        return Err(validation!("simulate needs N, D, K >= 1 (got {n}, {d}, {k})"));
    }
    let mut rng = seed::rng(seed, &[tag::INIT]);
    let mut draw = |rows: usize| {
        let data = (0..rows * k)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Factors::from_vec(rows, k, data).expect("sized buffer")
    };
    let x = draw(n);
    let w = draw(d);
    simulate_from_factors(x, w, tau, seed)
}

/// Adds Gaussian noise of precision `tau` to `X W^T` for given factors.
pub fn simulate_from_factors(
    x: Factors,
    w: Factors,
    tau: f64,
    seed: u64,
) -> Result<(SparseMatrix, GroundTruth)> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(validation!("noise precision must be positive, got {tau}"));
    }
    if x.k() != w.k() {
        return Err(validation!("factor ranks differ: {} vs {}", x.k(), w.k()));
    }
    let noise = Normal::new(0.0, 1.0 / tau.sqrt()).expect("finite sd");
    let mut rng = seed::rng(seed, &[tag::SPLIT, 0xe55]);
    let (n, d) = (x.n_rows(), w.n_rows());
    let mut entries = Vec::with_capacity(n * d);
    for r in 0..n {
        for c in 0..d {
            let value = dot(x.row(r), w.row(c)) + noise.sample(&mut rng);
            entries.push(Entry { row: r, col: c, value });
        }
    }
    let m = SparseMatrix::from_trusted(n, d, entries);
    Ok((m, GroundTruth {
        x_true: x,
        w_true: w,
        tau,
    }))
}

fn subset(m: &SparseMatrix, keep: impl Fn(usize) -> bool) -> (SparseMatrix, SparseMatrix) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (i, e) in m.entries.iter().enumerate() {
        if keep(i) {
            a.push(*e);
        } else {
            b.push(*e);
        }
    }
    (
        SparseMatrix::from_trusted(m.n_rows, m.n_cols, a),
        SparseMatrix::from_trusted(m.n_rows, m.n_cols, b),
    )
}

/// Withholds `floor(test_fraction * M)` uniformly chosen entries as a test set.
pub fn split_random(
    matrix: &SparseMatrix,
    test_fraction: f64,
    seed: u64,
) -> Result<(SparseMatrix, SparseMatrix)> {
    if matrix.nnz() < 2 {
        return Err(validation!("random split needs at least 2 entries, got {}", matrix.nnz()));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(validation!("test fraction must lie in (0, 1), got {test_fraction}"));
    }
    let m = matrix.nnz();
    let n_test = (test_fraction * m as f64).floor() as usize;
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut seed::rng(seed, &[tag::SPLIT]));
    let mut is_test = vec![false; m];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (test, train) = subset(matrix, |i| is_test[i]);
    Ok((train, test))
}

pub const STRUCTURED_WEIGHT_START: f64 = 0.9;
pub const STRUCTURED_WEIGHT_END: f64 = 0.005;
pub const STRUCTURED_TARGET_FRACTION: f64 = 0.8;

/// How structured-missingness probabilities are formed from the row and
/// column weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StructuredWeighting {
    /// Test probability `w_n * w_d`.
    Raw,
    /// Test probability `min(1, s * w_n * w_d)` with `s` chosen so the
    /// expected test fraction over the observed entries equals `target`.
    Rescaled { target: f64 },
}

#[derive(Clone, Debug)]
pub struct StructuredSplit {
    pub train: SparseMatrix,
    pub test: SparseMatrix,
    /// Multiplier applied to `w_n * w_d` (1 for raw weights).
    pub scale: f64,
    pub expected_test_fraction: f64,
    pub realized_test_fraction: f64,
}

/// Equally spaced decreasing weights from 0.9 to 0.005 over `len` positions.
pub fn structured_weights(len: usize) -> Vec<f64> {
    match len {
        0 => Vec::new(),
        1 => vec![STRUCTURED_WEIGHT_START],
        _ => {
            let step = (STRUCTURED_WEIGHT_START - STRUCTURED_WEIGHT_END) / (len - 1) as f64;
            (0..len)
                .map(|i| STRUCTURED_WEIGHT_START - step * i as f64)
                .collect()
        }
    }
}

fn expected_fraction(matrix: &SparseMatrix, wn: &[f64], wd: &[f64], scale: f64) -> f64 {
    if matrix.is_empty() {
        return 0.0;
    }
    let total: f64 = matrix
        .entries
        .iter()
        .map(|e| (scale * wn[e.row] * wd[e.col]).min(1.0))
        .sum();
    total / matrix.nnz() as f64
}

/// Finds `s` with mean `min(1, s w_n w_d)` over the observed entries equal to
/// `target`, by bisection on the monotone expected fraction.
pub fn structured_scale(matrix: &SparseMatrix, target: f64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(validation!("target fraction must lie in (0, 1), got {target}"));
    }
    let wn = structured_weights(matrix.n_rows);
    let wd = structured_weights(matrix.n_cols);
    if matrix.is_empty() {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while expected_fraction(matrix, &wn, &wd, hi) < target {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::Numerical("structured rescaling did not bracket".into()));
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if expected_fraction(matrix, &wn, &wd, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Not-missing-at-random split: entry `(n, d)` goes to the test set with
/// probability driven by the decreasing row and column weights.
pub fn split_structured(
    matrix: &SparseMatrix,
    seed: u64,
    weighting: StructuredWeighting,
) -> Result<StructuredSplit> {
    let wn = structured_weights(matrix.n_rows);
    let wd = structured_weights(matrix.n_cols);
    let scale = match weighting {
        StructuredWeighting::Raw => 1.0,
        StructuredWeighting::Rescaled { target } => structured_scale(matrix, target)?,
    };
    let mut rng = seed::rng(seed, &[tag::SPLIT, 0x5757]);
    let is_test: Vec<bool> = matrix
        .entries
        .iter()
        .map(|e| rng.random::<f64>() < (scale * wn[e.row] * wd[e.col]).min(1.0))
        .collect();
    let (test, train) = subset(matrix, |i| is_test[i]);
    let realized = if matrix.is_empty() {
        0.0
    } else {
        test.nnz() as f64 / matrix.nnz() as f64
    };
    Ok(StructuredSplit {
        expected_test_fraction: expected_fraction(matrix, &wn, &wd, scale),
        train,
        test,
        scale,
        realized_test_fraction: realized,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderScheme {
    Random,
    Decreasing,
}

impl std::str::FromStr for OrderScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(OrderScheme::Random),
            "decreasing" => Ok(OrderScheme::Decreasing),
            other => Err(validation!("unknown ordering '{other}' (random|decreasing)")),
        }
    }
}

/// Permutations where position `p` holds the original index placed there.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ordering {
    pub row_perm: Vec<usize>,
    pub col_perm: Vec<usize>,
}

impl Ordering {
    pub fn identity(n: usize, d: usize) -> Self {
        Ordering {
            row_perm: (0..n).collect(),
            col_perm: (0..d).collect(),
        }
    }
}

fn decreasing_perm(counts: &[usize]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..counts.len()).collect();
    // Stable sort keeps ascending original index among ties.
    perm.sort_by(|&a, &b| counts[b].cmp(&counts[a]));
    perm
}

pub fn order_matrix(matrix: &SparseMatrix, scheme: OrderScheme, seed: u64) -> Ordering {
    match scheme {
        OrderScheme::Decreasing => Ordering {
            row_perm: decreasing_perm(&matrix.row_counts()),
            col_perm: decreasing_perm(&matrix.col_counts()),
        },
        OrderScheme::Random => {
            let mut rng = seed::rng(seed, &[tag::ORDER]);
            let mut row_perm: Vec<usize> = (0..matrix.n_rows).collect();
            let mut col_perm: Vec<usize> = (0..matrix.n_cols).collect();
            row_perm.shuffle(&mut rng);
            col_perm.shuffle(&mut rng);
            Ordering { row_perm, col_perm }
        }
    }
}

/// An `I x J` grid over the permuted matrix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub row_perm: Vec<usize>,
    pub col_perm: Vec<usize>,
    pub row_cuts: Vec<usize>,
    pub col_cuts: Vec<usize>,
}

/// Boundaries of `parts` near-equal ranges over `len`, remainder spread over
/// the leading ranges.
pub fn balanced_cuts(len: usize, parts: usize) -> Vec<usize> {
    let base = len / parts;
    let extra = len % parts;
    let mut cuts = Vec::with_capacity(parts + 1);
    cuts.push(0);
    for p in 0..parts {
        let size = base + usize::from(p < extra);
        cuts.push(cuts[p] + size);
    }
    cuts
}

fn is_permutation(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter()
        .all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true))
}

pub fn partition(
    matrix: &SparseMatrix,
    ordering: Ordering,
    r: usize,
    c: usize,
) -> Result<PartitionPlan> {
    if r == 0 || c == 0 {
        return Err(validation!("partition needs r, c >= 1 (got {r}x{c})"));
    }
    if r > matrix.n_rows || c > matrix.n_cols {
        return Err(validation!(
            "cannot cut a {}x{} matrix into {}x{} blocks",
            matrix.n_rows,
            matrix.n_cols,
            r,
            c
        ));
    }
    if ordering.row_perm.len() != matrix.n_rows
        || ordering.col_perm.len() != matrix.n_cols
        || !is_permutation(&ordering.row_perm)
        || !is_permutation(&ordering.col_perm)
    {
        return Err(validation!("ordering is not a permutation of the matrix axes"));
    }
    Ok(PartitionPlan {
        row_perm: ordering.row_perm,
        col_perm: ordering.col_perm,
        row_cuts: balanced_cuts(matrix.n_rows, r),
        col_cuts: balanced_cuts(matrix.n_cols, c),
    })
}

/// One block of a partitioned matrix; `data` uses block-local indices.
#[derive(Clone, Debug)]
pub struct Block {
    pub i: usize,
    pub j: usize,
    /// Range of permuted row positions covered.
    pub rows: Range<usize>,
    pub cols: Range<usize>,
    pub data: SparseMatrix,
}

impl PartitionPlan {
    pub fn n_row_blocks(&self) -> usize {
        self.row_cuts.len() - 1
    }

    pub fn n_col_blocks(&self) -> usize {
        self.col_cuts.len() - 1
    }

    pub fn row_range(&self, i: usize) -> Range<usize> {
        self.row_cuts[i]..self.row_cuts[i + 1]
    }

    pub fn col_range(&self, j: usize) -> Range<usize> {
        self.col_cuts[j]..self.col_cuts[j + 1]
    }

    fn inverse(perm: &[usize]) -> Vec<usize> {
        let mut inv = vec![0; perm.len()];
        for (p, &orig) in perm.iter().enumerate() {
            inv[orig] = p;
        }
        inv
    }

    /// Original row index -> permuted position.
    pub fn row_position(&self) -> Vec<usize> {
        Self::inverse(&self.row_perm)
    }

    pub fn col_position(&self) -> Vec<usize> {
        Self::inverse(&self.col_perm)
    }

    fn block_of(cuts: &[usize], pos: usize) -> usize {
        cuts.partition_point(|&c| c <= pos) - 1
    }

    /// Splits `matrix` into the `I x J` grid; `blocks[i][j]`.
    pub fn split(&self, matrix: &SparseMatrix) -> Result<Vec<Vec<Block>>> {
        if matrix.n_rows != self.row_perm.len() || matrix.n_cols != self.col_perm.len() {
            return Err(validation!(
                "plan is for a {}x{} matrix, got {}x{}",
                self.row_perm.len(),
                self.col_perm.len(),
                matrix.n_rows,
                matrix.n_cols
            ));
        }
        let rpos = self.row_position();
        let cpos = self.col_position();
        let (ni, nj) = (self.n_row_blocks(), self.n_col_blocks());
        let mut buckets: Vec<Vec<Vec<Entry>>> = vec![vec![Vec::new(); nj]; ni];
        for e in &matrix.entries {
            let (pr, pc) = (rpos[e.row], cpos[e.col]);
            let (bi, bj) = (Self::block_of(&self.row_cuts, pr), Self::block_of(&self.col_cuts, pc));
            buckets[bi][bj].push(Entry {
                row: pr - self.row_cuts[bi],
                col: pc - self.col_cuts[bj],
                value: e.value,
            });
        }
        Ok(buckets
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                row.into_iter()
                    .enumerate()
                    .map(|(j, entries)| {
                        let rows = self.row_range(i);
                        let cols = self.col_range(j);
                        let data = SparseMatrix::from_trusted(rows.len(), cols.len(), entries);
                        Block { i, j, rows, cols, data }
                    })
                    .collect()
            })
            .collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: PartitionPlan =
            serde_json::from_str(text).map_err(|e| validation!("partition plan: {e}"))?;
        let cuts_ok = |cuts: &[usize], len: usize| {
            cuts.len() >= 2
                && cuts[0] == 0
                && *cuts.last().unwrap() == len
                && cuts.windows(2).all(|w| w[0] < w[1])
        };
        if !is_permutation(&plan.row_perm)
            || !is_permutation(&plan.col_perm)
            || !cuts_ok(&plan.row_cuts, plan.row_perm.len())
            || !cuts_ok(&plan.col_cuts, plan.col_perm.len())
        {
            return Err(validation!("partition plan is inconsistent"));
        }
        Ok(plan)
    }
}
