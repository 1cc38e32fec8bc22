//! Proportional compute and communication cost as workers are added, for a
//! MovieLens-1M-sized problem.

use bmfpp::cost::{cost_model_eval, CostModel};

fn main() -> bmfpp::Result<()> {
    let (n, d, m, k, t) = (6040, 3706, 1_000_209, 10, 1200);
    let single = cost_model_eval(&CostModel::new(n, d, m, k, t, 1, 1))?;
    println!("{:>4} {:>14} {:>9} {:>14}", "U", "total", "speed-up", "communication");
    for u in [1, 4, 9, 16, 25, 36, 49, 64] {
        let est = cost_model_eval(&CostModel::new(n, d, m, k, t, u, 1))?;
        println!("{u:>4} {:>14.3e} {:>9.2} {:>14.3e}", est.total, single.total / est.total, est.communication);
    }
    let gmm = cost_model_eval(&CostModel::new(n, d, m, k, t, 25, 3))?;
    println!("three-component mixtures at U = 25 move {:.3e} parameters", gmm.communication);
    Ok(())
}
