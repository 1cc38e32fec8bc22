//! Plain Gibbs sampling on the whole matrix: no partition, no propagation.

use bmfpp::data;
use bmfpp::eval;
use bmfpp::sampler::{chain_posterior_mean, gibbs_run, predict, GibbsConfig, NormalWishartPrior, RowPriorSet};

fn main() -> bmfpp::Result<()> {
    let (y, _) = data::simulate(200, 150, 3, 4.0, 1)?;
    let (train, test) = data::split_random(&y, 0.5, 1)?;

    let config = GibbsConfig {
        k: 3,
        tau: 4.0,
        iterations: 600,
        burn_in: 300,
        thin: 2,
        seed: 1,
        parallel_rows: true,
    };
    let chain = gibbs_run(&train, &RowPriorSet::shared(), &NormalWishartPrior::default_for(3), &config)?;
    let (x, w) = chain_posterior_mean(&chain)?;

    let truths = test.values();
    let pred = predict(&x, &w, &test.indices())?;
    println!("{} retained draws", chain.len());
    println!("test RMSE {:.4} (noise floor {:.4})", eval::rmse(&pred, &truths)?, 0.5);
    Ok(())
}
