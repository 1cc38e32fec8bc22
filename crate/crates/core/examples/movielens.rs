//! Full-data versus propagated factorization of MovieLens 1M.
//!
//! Pass the path to `ratings.dat` as the first argument or through
//! `BMFPP_MOVIELENS`. Expect tens of minutes in release mode.

use bmfpp::data;
use bmfpp::eval::{self, DEFAULT_BIN_EDGES};
use bmfpp::pipeline::{self, Method, RunConfig, RunOptions};

fn main() -> bmfpp::Result<()> {
    let Some(path) = std::env::args().nth(1).or_else(|| std::env::var("BMFPP_MOVIELENS").ok()) else {
        eprintln!("usage: movielens <ratings.dat> (or set BMFPP_MOVIELENS)");
        std::process::exit(2);
    };
    let (ratings, ids) = data::load_movielens(&path)?;
    println!("{} users, {} movies, {} ratings", ids.row_ids.len(), ids.col_ids.len(), ratings.nnz());
    let (train, test) = data::split_random(&ratings, 0.2, 0)?;
    let truths = test.values();

    let base = RunConfig { k: 10, tau: 1.5, ..RunConfig::default() };
    for (method, rows, cols) in [(Method::Full, 1, 1), (Method::PpMm, 5, 5)] {
        let cfg = RunConfig { method, rows, cols, ..base.clone() };
        let r = pipeline::run(&train, &cfg, &RunOptions::default())?;
        let pred = r.predict(&test);
        println!("{method} {rows}x{cols}: RMSE {:.4} in {:.0}s", eval::rmse(&pred, &truths)?, r.timings.wall_seconds);
        for bin in eval::rmse_by_frequency(&pred, &train, &test, &DEFAULT_BIN_EDGES)? {
            let hi = bin.hi.map_or("inf".into(), |h| h.to_string());
            println!("  [{}, {hi}): {} entries, RMSE {:?}", bin.lo, bin.count, bin.rmse);
        }
    }
    Ok(())
}
