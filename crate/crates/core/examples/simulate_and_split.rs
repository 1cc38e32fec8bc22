//! Simulate a low-rank matrix and hold out test entries two ways: uniformly
//! at random, and with structured (not-at-random) missingness that hides
//! mostly the top-left corner.

use bmfpp::data::{self, StructuredWeighting};

fn main() -> bmfpp::Result<()> {
    let (y, truth) = data::simulate(300, 200, 5, 1.0, 7)?;
    println!("simulated {}x{} with K = {}, {} entries", y.n_rows(), y.n_cols(), truth.x_true.k(), y.nnz());

    let (train, test) = data::split_random(&y, 0.8, 7)?;
    println!("random split: {} train / {} test", train.nnz(), test.nnz());

    for (label, weighting) in [
        ("raw", StructuredWeighting::Raw),
        ("rescaled", StructuredWeighting::Rescaled { target: 0.8 }),
    ] {
        let s = data::split_structured(&y, 7, weighting)?;
        let rows = s.test.row_counts();
        let top: usize = rows[..30].iter().sum();
        let bottom: usize = rows[rows.len() - 30..].iter().sum();
        println!(
            "structured ({label}): scale {:.2}, test fraction {:.3} (expected {:.3}); test entries in first/last 30 rows: {top}/{bottom}",
            s.scale, s.realized_test_fraction, s.expected_test_fraction
        );
    }
    Ok(())
}
