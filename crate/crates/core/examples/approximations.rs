//! Fitting a bimodal sample cloud three ways: one moment-matched Gaussian,
//! the dominant lambda-means mode, and a mixture over the largest clusters.

use bmfpp::approx::{self, LambdaPolicy};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

fn main() -> bmfpp::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0, 0.3).unwrap();
    // Sign-flipped modes at +-(2, 1), 70/30.
    let cloud: Vec<DVector<f64>> = (0..500)
        .map(|i| {
            let s = if i % 10 < 7 { 1.0 } else { -1.0 };
            DVector::from_vec(vec![s * 2.0 + noise.sample(&mut rng), s + noise.sample(&mut rng)])
        })
        .collect();

    let median = approx::resolve_lambda(LambdaPolicy::MedianPairwise, &cloud);
    for lambda in [median, 1.5, 5.0] {
        let clusters = approx::lambda_means(&cloud, lambda, 100, 5)?;
        println!("lambda {lambda:.3} gives {} clusters of sizes {:?}", clusters.n_clusters(), clusters.sizes());
    }
    // The median heuristic fragments each mode; at 1.5 the flipped mode gets its own cluster.
    let lambda = approx::resolve_lambda(LambdaPolicy::Fixed(1.5), &cloud);

    let mm = approx::fit_moment_matching(&cloud)?;
    let dm = approx::fit_dominant_mode(&cloud, lambda, 5)?;
    let gmm = approx::fit_gmm(&cloud, lambda, 3, 5)?;
    println!("moment matching: mean {:.2?}, variance {:.2?}", mm.mean.as_slice(), mm.covariance()?.diagonal().as_slice());
    println!("dominant mode:   mean {:.2?}, variance {:.2?}", dm.mean.as_slice(), dm.covariance()?.diagonal().as_slice());
    for c in &gmm.components {
        println!("mixture component: weight {:.2}, mean {:.2?}", c.weight, c.mean.as_slice());
    }
    let pooled = approx::pool_gmm(&gmm);
    println!("pooled mixture:  mean {:.2?}", pooled.mean.as_slice());
    Ok(())
}
