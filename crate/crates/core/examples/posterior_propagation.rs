//! Posterior propagation on a 3x3 grid, driven one stage at a time so the
//! handoff files are visible, then compared with the full-data sampler.

use bmfpp::data;
use bmfpp::eval;
use bmfpp::pipeline::{self, Method, RunConfig, RunOptions, Stage, StagedRun};

fn main() -> bmfpp::Result<()> {
    let (y, _) = data::simulate(600, 400, 5, 1.0, 11)?;
    let (train, test) = data::split_random(&y, 0.8, 11)?;
    let truths = test.values();

    let config = RunConfig {
        k: 5,
        rows: 3,
        cols: 3,
        seed: 11,
        method: Method::PpMm,
        ..RunConfig::default()
    };
    let plan = pipeline::make_plan(&train, &config)?;
    let dir = std::env::temp_dir().join("bmfpp-pp-example");
    let options = RunOptions { run_dir: Some(dir.clone()), keep_chains: false };

    let mut staged = StagedRun::new(&train, &plan, &config, &options)?;
    for stage in [Stage::One, Stage::Two, Stage::Three] {
        let t = staged.run_stage(stage)?;
        println!("{}: {} blocks, slowest {:.2}s", t.stage, t.blocks.len(), t.max_seconds);
    }
    let pp = staged.aggregate()?;
    println!("stage files under {}", dir.display());
    println!("eigenvalue corrections applied: {}", pp.corrections.len());

    let full = pipeline::run(&train, &RunConfig { rows: 1, cols: 1, method: Method::Full, ..config.clone() }, &RunOptions::default())?;

    let pp_rmse = eval::rmse(&pp.predict(&test), &truths)?;
    let full_rmse = eval::rmse(&full.predict(&test), &truths)?;
    println!("RMSE full {full_rmse:.4}, PP-MM 3x3 {pp_rmse:.4}");
    println!(
        "speed-up with one worker per block: {:.2}",
        eval::wts(full.timings.distributed_seconds, pp.timings.distributed_seconds)?
    );
    Ok(())
}
