//! How consistent are the factor estimates of neighbouring blocks? With
//! propagation the blocks share a coordinate system; independent subsets
//! must be aligned first and still agree less.

use bmfpp::data;
use bmfpp::eval;
use bmfpp::pipeline::{self, Method, RunConfig, RunOptions};

fn main() -> bmfpp::Result<()> {
    let (y, _) = data::simulate(400, 300, 4, 1.0, 21)?;
    let (train, _) = data::split_random(&y, 0.8, 21)?;
    let base = RunConfig { k: 4, rows: 2, cols: 2, seed: 21, iterations: 800, burn_in: 500, ..RunConfig::default() };

    for (method, align) in [(Method::PpMm, false), (Method::EpParametric, true)] {
        let r = pipeline::run(&train, &RunConfig { method, ..base.clone() }, &RunOptions::default())?;
        let pairs = eval::subset_mean_correlations(&r.block_means, &r.plan, align)?;
        for p in &pairs {
            println!(
                "{method:>14} {} {:?} vs {:?}: flattened {:.3}, per dimension {:.3}",
                p.side.name(), p.a, p.b, p.flattened, p.mean_per_dimension()
            );
        }
        println!("{method:>14} mean flattened {:.3}", eval::mean_flattened(&pairs).unwrap_or(f64::NAN));
    }
    Ok(())
}
