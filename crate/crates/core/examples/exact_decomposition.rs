//! On a 4x4 rank-one problem every density can be tabulated on a grid. The
//! staged product of block posteriors divided by the full joint is then a
//! constant: the staged scheme reproduces the full posterior up to
//! normalization.

use bmfpp::data::{Entry, SparseMatrix};
use bmfpp::decomposition::{ratio_spread, ExactDecomposition, Grid, TinyModel};

fn main() -> bmfpp::Result<()> {
    let vals = [0.9, -0.4, 1.3, 0.2, 0.6, 1.1, -0.8, 1.5, -0.1, 0.7, 0.4, -1.2, 1.0, 0.3, -0.5, 0.8];
    let entries = (0..16).map(|i| Entry { row: i / 4, col: i % 4, value: vals[i] }).collect();
    let model = TinyModel {
        y: SparseMatrix::new(4, 4, entries)?,
        tau: 1.5,
        prior_precision: 1.0,
        row_cut: 2,
        col_cut: 2,
    };
    let dec = ExactDecomposition::new(model, Grid { half_width: 6.0, points: 32 })?;

    let points: Vec<(Vec<f64>, Vec<f64>)> = (0..5)
        .map(|p| {
            let t = p as f64 * 0.37;
            ((0..4).map(|i| (t + i as f64).sin()).collect(), (0..4).map(|i| (t - i as f64).cos()).collect())
        })
        .collect();
    for (x, w) in &points {
        println!("x {:+.2?} w {:+.2?}: log ratio {:.10}", x, w, dec.log_ratio(x, w));
    }
    println!("spread {:.2e}", ratio_spread(&dec, &points));
    Ok(())
}
