//! Combining per-block row posteriors. A shared base posterior was used as
//! the prior of two later blocks; aggregation keeps it once. An inconsistent
//! input triggers the eigenvalue correction.

use bmfpp::aggregate::{ep_parametric_aggregate, gaussian_product, pp_aggregate_row, AggregationInput};
use bmfpp::approx::RowPosterior;
use nalgebra::{DMatrix, DVector};

fn gaussian(mean: [f64; 2], prec: [f64; 4]) -> RowPosterior {
    RowPosterior::new(DVector::from_row_slice(&mean), DMatrix::from_row_slice(2, 2, &prec)).unwrap()
}

fn main() -> bmfpp::Result<()> {
    let base = gaussian([0.5, -0.2], [2.0, 0.3, 0.3, 1.5]);
    let a = gaussian([0.7, -0.1], [3.0, 0.4, 0.4, 2.5]);
    let b = gaussian([0.4, -0.4], [2.8, 0.2, 0.2, 2.2]);

    let pp = pp_aggregate_row(&AggregationInput { base: &base, others: &[a.clone(), b.clone()] }, None)?;
    println!("propagated: mean {:.3?}, precision {:.3?}", pp.posterior.mean.as_slice(), pp.posterior.precision.as_slice());

    let prior = RowPosterior::isotropic(DVector::zeros(2), 1.0);
    let ep = ep_parametric_aggregate(&[base.clone(), a.clone(), b.clone()], &prior, None)?;
    println!("independent: mean {:.3?}, precision {:.3?}", ep.posterior.mean.as_slice(), ep.posterior.precision.as_slice());

    let product = gaussian_product(&[base.clone(), a, b])?;
    println!("plain product (double counts the base): precision {:.3?}", product.precision.as_slice());

    // A later posterior less certain than its own prior.
    let weak = gaussian([0.5, -0.2], [0.5, 0.0, 0.0, 1.6]);
    let fixed = pp_aggregate_row(&AggregationInput { base: &base, others: &[weak] }, None)?;
    for c in &fixed.corrections {
        println!("{:?}: min eigenvalue {:.3}, shifted by {:.3}", c.term, c.min_eigenvalue, c.shift);
    }
    Ok(())
}
