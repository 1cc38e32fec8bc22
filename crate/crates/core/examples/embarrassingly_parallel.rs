//! The independent-subsets baseline: every block is sampled with no shared
//! information and the subset posteriors are multiplied with the surplus
//! priors divided out.

use bmfpp::data;
use bmfpp::eval;
use bmfpp::pipeline::{self, Method, RunConfig, RunOptions};

fn main() -> bmfpp::Result<()> {
    let (y, _) = data::simulate(400, 300, 4, 1.0, 3)?;
    let (train, test) = data::split_random(&y, 0.8, 3)?;
    let truths = test.values();

    let base = RunConfig { k: 4, rows: 2, cols: 2, seed: 3, iterations: 800, burn_in: 500, ..RunConfig::default() };
    for method in [Method::EpParametric, Method::PpMm] {
        let r = pipeline::run(&train, &RunConfig { method, ..base.clone() }, &RunOptions::default())?;
        println!("{method:>14}: test RMSE {:.4}", eval::rmse(&r.predict(&test), &truths)?);
    }
    Ok(())
}
