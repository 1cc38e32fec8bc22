//! Independent oracles: grid integration, Monte Carlo, closed forms and
//! direct evaluation, each computed without the library's own formulas.

use bmfpp::aggregate::{ep_parametric_aggregate, gaussian_product, pp_aggregate_row, AggregationInput};
use bmfpp::approx::{pool_gmm, GmmComponent, GmmPosterior, RowPosterior};
use bmfpp::data::{self, Entry, SparseMatrix, StructuredWeighting, TripletFormat};
use bmfpp::eval::{self, align_latent_dimensions, pearson};
use bmfpp::linalg::Factors;
use bmfpp::sampler::{
    chain_posterior_mean, gibbs_run, gmm_component_assign, normal_wishart_posterior, predict, row_conditional_moments,
    sample_hyper_normal_wishart, sample_wishart, GibbsConfig, NormalWishartPrior, RowPriorSet,
};
use bmfpp::seed;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

fn dmat2(a: f64, b: f64, c: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[a, b, b, c])
}

/// Log density of a bivariate normal written out by hand.
fn log_normal2(x: [f64; 2], mean: [f64; 2], prec: &DMatrix<f64>) -> f64 {
    let (a, b, c) = (prec[(0, 0)], prec[(0, 1)], prec[(1, 1)]);
    let (u, v) = (x[0] - mean[0], x[1] - mean[1]);
    0.5 * (a * c - b * b).ln() - (2.0 * std::f64::consts::PI).ln() - 0.5 * (a * u * u + 2.0 * b * u * v + c * v * v)
}

/// Mean and precision of `exp(log_density)` on a square midpoint grid.
fn grid_moments(half_width: f64, points: usize, log_density: impl Fn(f64, f64) -> f64) -> ([f64; 2], DMatrix<f64>) {
    let h = 2.0 * half_width / points as f64;
    let nodes: Vec<f64> = (0..points).map(|i| -half_width + (i as f64 + 0.5) * h).collect();
    let mut lv = Vec::with_capacity(points * points);
    for &a in &nodes {
        for &b in &nodes {
            lv.push((a, b, log_density(a, b)));
        }
    }
    let m = lv.iter().map(|t| t.2).fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut s1, mut s2, mut saa, mut sab, mut sbb) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (a, b, l) in &lv {
        let p = (l - m).exp();
        z += p;
        s1 += p * a;
        s2 += p * b;
        saa += p * a * a;
        sab += p * a * b;
        sbb += p * b * b;
    }
    let mean = [s1 / z, s2 / z];
    let cov = dmat2(saa / z - mean[0] * mean[0], sab / z - mean[0] * mean[1], sbb / z - mean[1] * mean[1]);
    (mean, cov.try_inverse().unwrap())
}

#[test]
fn simulated_entry_variance_is_k_plus_noise() {
    let (k, tau) = (2usize, 4.0);
    let mut values = Vec::new();
    for s in 0..200 {
        let (m, _) = data::simulate(20, 10, k, tau, s).unwrap();
        values.extend(m.values());
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    // Entries within a draw are dependent through shared factors; the
    // tolerance covers that with room to spare at 200 independent draws.
    assert!((var - (k as f64 + 1.0 / tau)).abs() < 0.1, "variance {var}");
}

#[test]
fn three_line_triplet_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.txt");
    std::fs::write(&path, "0 1 2.5\n2,0,-1\n1 1 0.25\n").unwrap();
    let m = data::load_triplets(&path, TripletFormat::Plain).unwrap();
    assert_eq!((m.n_rows(), m.n_cols(), m.nnz()), (3, 2, 3));
    let mut e: Vec<(usize, usize, f64)> = m.entries().iter().map(|e| (e.row, e.col, e.value)).collect();
    e.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(e, vec![(0, 1, 2.5), (1, 1, 0.25), (2, 0, -1.0)]);
}

#[test]
fn movielens_ids_are_compacted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ratings.dat");
    std::fs::write(&path, "1::1193::5::978300760\n1::661::3::978302109\n7::1193::4::978300275\n").unwrap();
    let (m, ids) = data::load_movielens(&path).unwrap();
    assert_eq!((m.n_rows(), m.n_cols(), m.nnz()), (2, 2, 3));
    assert_eq!(ids.row_ids, vec![1, 7]);
    assert_eq!(ids.col_ids.len(), 2);
    assert_eq!(m.values().iter().sum::<f64>(), 12.0);
}

#[test]
fn twenty_percent_holdout() {
    let (m, _) = data::simulate(50, 40, 2, 1.0, 1).unwrap();
    let (train, test) = data::split_random(&m, 0.2, 9).unwrap();
    assert_eq!(test.nnz(), 400);
    assert_eq!(train.nnz() + test.nnz(), 2000);
}

#[test]
fn structured_raw_fraction_is_product_of_mean_weights() {
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    // Linear weights from 0.9 to 0.005 average to their midpoint.
    let closed = ((0.9 + 0.005) / 2.0f64).powi(2);
    let got = mean(data::structured_weights(6040)) * mean(data::structured_weights(3706));
    assert!((got - closed).abs() < 1e-12);
    assert!((closed - 0.2048).abs() < 1e-3);

    let (m, _) = data::simulate(600, 400, 1, 1.0, 2).unwrap();
    let raw = data::split_structured(&m, 3, StructuredWeighting::Raw).unwrap();
    let p = raw.expected_test_fraction;
    let se = (p * (1.0 - p) / m.nnz() as f64).sqrt();
    assert!((raw.realized_test_fraction - p).abs() < 4.0 * se);
    let scaled = data::split_structured(&m, 3, StructuredWeighting::Rescaled { target: 0.8 }).unwrap();
    assert!((scaled.expected_test_fraction - 0.8).abs() < 1e-6);
    assert!((scaled.realized_test_fraction - 0.8).abs() < 0.01);
}

#[test]
fn movielens_scale_blocks() {
    assert_eq!(data::balanced_cuts(6040, 5), vec![0, 1208, 2416, 3624, 4832, 6040]);
    let cols = data::balanced_cuts(3706, 5);
    assert_eq!(cols[1] - cols[0], 742);
}

#[test]
fn row_conditional_matches_grid_posterior() {
    let partners = Factors::from_vec(3, 2, vec![1.0, 0.3, -0.4, 0.9, 0.7, -0.6]).unwrap();
    let ys = [1.2, 0.4, -0.3];
    let tau = 1.5;
    let prior_mean = DVector::from_vec(vec![0.2, -0.1]);
    let prior_prec = dmat2(2.0, 0.5, 1.5);
    let (mean, prec) =
        row_conditional_moments(&[0, 1, 2], &ys, &partners, tau, &prior_mean, &prior_prec).unwrap();

    let (gm, gp) = grid_moments(6.0, 600, |a, b| {
        let mut l = log_normal2([a, b], [0.2, -0.1], &prior_prec);
        for (d, y) in ys.iter().enumerate() {
            let w = partners.row(d);
            l -= 0.5 * tau * (y - a * w[0] - b * w[1]).powi(2);
        }
        l
    });
    for i in 0..2 {
        assert!((mean[i] - gm[i]).abs() < 5e-4, "mean {i}: {} vs {}", mean[i], gm[i]);
        for j in 0..2 {
            assert!((prec[(i, j)] - gp[(i, j)]).abs() < 5e-3 * prec[(i, i)], "precision ({i},{j})");
        }
    }
}

#[test]
fn wishart_and_hyper_means_by_monte_carlo() {
    let rows = Factors::from_vec(4, 2, vec![0.5, 1.0, -0.3, 0.2, 1.1, -0.4, 0.0, 0.6]).unwrap();
    let prior = NormalWishartPrior::default_for(2);
    let post = normal_wishart_posterior(&rows, &prior).unwrap();
    // W0*^-1 = I + sum (x - xbar)(x - xbar)^T + (2 * 4 / 6) xbar xbar^T.
    let xs: Vec<DVector<f64>> = (0..4).map(|r| DVector::from_row_slice(rows.row(r))).collect();
    let xbar = xs.iter().fold(DVector::zeros(2), |a, x| a + x) / 4.0;
    let mut inv = DMatrix::identity(2, 2) + &xbar * xbar.transpose() * (8.0 / 6.0);
    for x in &xs {
        inv += (x - &xbar) * (x - &xbar).transpose();
    }
    assert!((&inv - &post.scale_inv).norm() < 1e-12);
    assert_eq!(post.nu, 6.0);
    let scale = inv.try_inverse().unwrap();
    let expected = &scale * post.nu;

    let mut rng = seed::rng(1, &[]);
    let draws = 10_000;
    let mut sum = DMatrix::zeros(2, 2);
    let mut sq = DMatrix::zeros(2, 2);
    let mut mu_sum = DVector::zeros(2);
    let mut mu_sq = DVector::zeros(2);
    for _ in 0..draws {
        let l = sample_wishart(&scale, post.nu, &mut rng).unwrap();
        sq += l.component_mul(&l);
        sum += l;
        let h = sample_hyper_normal_wishart(&rows, &prior, &mut rng).unwrap();
        mu_sq += h.mu.component_mul(&h.mu);
        mu_sum += h.mu;
    }
    let n = draws as f64;
    for i in 0..2 {
        for j in 0..2 {
            let m = sum[(i, j)] / n;
            let se = ((sq[(i, j)] / n - m * m) / n).sqrt();
            assert!((m - expected[(i, j)]).abs() < 4.0 * se, "Lambda[{i},{j}] {m} vs {}", expected[(i, j)]);
        }
        let m = mu_sum[i] / n;
        let se = ((mu_sq[i] / n - m * m) / n).sqrt();
        assert!((m - 4.0 * xbar[i] / 6.0).abs() < 4.0 * se, "mu[{i}] {m}");
    }
}

#[test]
fn component_assignment_matches_direct_densities() {
    let comps = [
        (0.5, [0.0, 0.0], dmat2(1.0, 0.2, 1.5)),
        (0.3, [2.0, 1.0], dmat2(3.0, -0.5, 2.0)),
        (0.2, [-1.5, 2.0], dmat2(0.5, 0.0, 0.8)),
    ];
    let gmm = GmmPosterior::new(
        comps
            .iter()
            .map(|(w, m, p)| GmmComponent {
                weight: *w,
                mean: DVector::from_row_slice(m),
                precision: p.clone(),
            })
            .collect(),
    )
    .unwrap();
    let mut rng = seed::rng(2, &[]);
    for _ in 0..500 {
        let x = [rng.random_range(-4.0..4.0), rng.random_range(-3.0..5.0)];
        let scores: Vec<f64> = comps.iter().map(|(w, m, p)| w.ln() + log_normal2(x, *m, p)).collect();
        let want = (0..3).fold(0, |best, c| if scores[c] > scores[best] { c } else { best });
        assert_eq!(gmm_component_assign(&x, &gmm), want, "at {x:?}");
    }
}

#[test]
fn chain_mean_matches_two_pass_average() {
    let (m, _) = data::simulate(12, 9, 2, 2.0, 5).unwrap();
    let config = GibbsConfig {
        k: 2,
        tau: 2.0,
        iterations: 500,
        burn_in: 100,
        thin: 2,
        seed: 3,
        parallel_rows: false,
    };
    let chain = gibbs_run(&m, &RowPriorSet::shared(), &NormalWishartPrior::default_for(2), &config).unwrap();
    assert_eq!(chain.len(), 200);
    let (xm, _) = chain_posterior_mean(&chain).unwrap();
    for r in 0..12 {
        for c in 0..2 {
            // Pairwise summation in a different order than a running sum.
            let vals: Vec<f64> = chain.samples.iter().map(|s| s.x.get(r, c)).collect();
            let (a, b) = vals.split_at(100);
            let want = (a.iter().sum::<f64>() + b.iter().sum::<f64>()) / 200.0;
            let scale = vals.iter().map(|v| v.abs()).sum::<f64>() / 200.0;
            assert!((xm.get(r, c) - want).abs() <= 200.0 * f64::EPSILON * scale);
        }
    }
}

#[test]
fn predictions_match_dense_product() {
    let mut rng = seed::rng(4, &[]);
    let x = Factors::from_vec(5, 2, (0..10).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
    let w = Factors::from_vec(4, 2, (0..8).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
    let dense = x.to_dmatrix() * w.to_dmatrix().transpose();
    let idx: Vec<(usize, usize)> = (0..5).flat_map(|r| (0..4).map(move |c| (r, c))).collect();
    let got = predict(&x, &w, &idx).unwrap();
    for ((r, c), p) in idx.iter().zip(got) {
        assert!((p - dense[(*r, *c)]).abs() < 1e-14);
    }
}

#[test]
fn pooled_moments_match_mixture_draws() {
    let comps = [
        (0.5, [0.0, 1.0], dmat2(2.0, 0.3, 1.0)),
        (0.3, [3.0, -1.0], dmat2(1.0, -0.2, 4.0)),
        (0.2, [-2.0, 0.5], dmat2(0.5, 0.1, 0.7)),
    ];
    let gmm = GmmPosterior::new(
        comps
            .iter()
            .map(|(w, m, p)| GmmComponent {
                weight: *w,
                mean: DVector::from_row_slice(m),
                precision: p.clone(),
            })
            .collect(),
    )
    .unwrap();
    let pooled = pool_gmm(&gmm);
    let pooled_cov = pooled.precision.clone().try_inverse().unwrap();

    let chols: Vec<DMatrix<f64>> = comps
        .iter()
        .map(|(_, _, p)| p.clone().try_inverse().unwrap().cholesky().unwrap().unpack())
        .collect();
    let mut rng = seed::rng(5, &[]);
    let n = 1_000_000;
    let mut draws = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let c = if u < 0.5 { 0 } else if u < 0.8 { 1 } else { 2 };
        let z = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
        draws.push(DVector::from_row_slice(&comps[c].1) + &chols[c] * z);
    }
    let nf = n as f64;
    let mean = draws.iter().fold(DVector::zeros(2), |a, d| a + d) / nf;
    for i in 0..2 {
        let col: Vec<f64> = draws.iter().map(|d| d[i]).collect();
        let var = col.iter().map(|v| (v - mean[i]).powi(2)).sum::<f64>() / nf;
        assert!((pooled.mean[i] - mean[i]).abs() < 3.0 * (var / nf).sqrt(), "mean {i}");
        let fourth = col.iter().map(|v| (v - mean[i]).powi(4)).sum::<f64>() / nf;
        let var_se = ((fourth - var * var) / nf).sqrt();
        assert!((pooled_cov[(i, i)] - var).abs() < 3.0 * var_se, "variance {i}");
    }
}

#[test]
fn gaussian_product_matches_grid_product() {
    let parts = [
        ([0.5, -0.2], dmat2(1.0, 0.3, 2.0)),
        ([-1.0, 0.8], dmat2(0.7, -0.1, 0.5)),
        ([0.3, 0.4], dmat2(2.5, 0.6, 1.2)),
    ];
    let posts: Vec<RowPosterior> = parts
        .iter()
        .map(|(m, p)| RowPosterior::new(DVector::from_row_slice(m), p.clone()).unwrap())
        .collect();
    let got = gaussian_product(&posts).unwrap();
    let (gm, gp) = grid_moments(6.0, 500, |a, b| parts.iter().map(|(m, p)| log_normal2([a, b], *m, p)).sum());
    for i in 0..2 {
        assert!((got.mean[i] - gm[i]).abs() < 1e-6);
        for j in 0..2 {
            assert!((got.precision[(i, j)] - gp[(i, j)]).abs() < 1e-5);
        }
    }
}

#[test]
fn pp_aggregate_is_product_with_divided_posteriors() {
    let mut rng = seed::rng(6, &[]);
    for _ in 0..200 {
        let k = rng.random_range(1..=4);
        let spd = |rng: &mut seed::Rng, floor: f64| {
            let b = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
            &b * b.transpose() + DMatrix::identity(k, k) * floor
        };
        let vec = |rng: &mut seed::Rng| DVector::from_fn(k, |_, _| rng.random_range(-2.0..2.0));
        let base = RowPosterior::new(vec(&mut rng), spd(&mut rng, 0.5)).unwrap();
        let others: Vec<RowPosterior> = (0..rng.random_range(1..4))
            .map(|_| {
                let p = &base.precision + spd(&mut rng, 0.2);
                RowPosterior::new(vec(&mut rng), (&p + p.transpose()) * 0.5).unwrap()
            })
            .collect();
        // Each later posterior with the base prior divided away.
        let mut terms = vec![base.clone()];
        for o in &others {
            let prec = &o.precision - &base.precision;
            let b = &o.precision * &o.mean - &base.precision * &base.mean;
            let mean = prec.clone().try_inverse().unwrap() * b;
            terms.push(RowPosterior { mean, precision: prec });
        }
        let want = gaussian_product(&terms).unwrap();
        let got = pp_aggregate_row(&AggregationInput { base: &base, others: &others }, None).unwrap();
        assert!(got.corrections.is_empty());
        assert!((&got.posterior.mean - &want.mean).norm() < 1e-9 * (1.0 + want.mean.norm()));
        assert!((&got.posterior.precision - &want.precision).norm() < 1e-9 * want.precision.norm());
    }
}

#[test]
fn ep_and_pp_agree_when_both_are_exact() {
    // Gaussian prior and two Gaussian likelihood factors: PP propagates the
    // first subset's posterior into the second, EP fits both from the prior.
    let prior = RowPosterior::new(DVector::from_vec(vec![0.0, 0.0]), dmat2(1.0, 0.0, 1.0)).unwrap();
    let l1 = RowPosterior::new(DVector::from_vec(vec![1.0, -0.5]), dmat2(3.0, 0.4, 2.0)).unwrap();
    let l2 = RowPosterior::new(DVector::from_vec(vec![0.6, 0.2]), dmat2(1.5, -0.3, 2.5)).unwrap();
    let sub1 = gaussian_product(&[prior.clone(), l1]).unwrap();
    let sub2_ep = gaussian_product(&[prior.clone(), l2.clone()]).unwrap();
    let sub2_pp = gaussian_product(&[sub1.clone(), l2]).unwrap();
    let ep = ep_parametric_aggregate(&[sub1.clone(), sub2_ep], &prior, None).unwrap();
    let pp = pp_aggregate_row(&AggregationInput { base: &sub1, others: &[sub2_pp] }, None).unwrap();
    assert!((&ep.posterior.mean - &pp.posterior.mean).norm() < 1e-12);
    assert!((&ep.posterior.precision - &pp.posterior.precision).norm() < 1e-12);
}

#[test]
fn rmse_matches_two_pass_accumulation() {
    let mut rng = seed::rng(7, &[]);
    let a: Vec<f64> = (0..100).map(|_| rng.sample(StandardNormal)).collect();
    let b: Vec<f64> = (0..100).map(|_| rng.sample(StandardNormal)).collect();
    let sq: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).collect();
    let (lo, hi) = sq.split_at(50);
    let want = ((lo.iter().rev().sum::<f64>() + hi.iter().rev().sum::<f64>()) / 100.0).sqrt();
    let got = eval::rmse(&a, &b).unwrap();
    assert!((got - want).abs() <= 8.0 * f64::EPSILON * want);
}

#[test]
fn constructed_correlation_of_one_half() {
    let u = [1.0, 1.0, -1.0, -1.0];
    let v = [1.0, -1.0, 1.0, -1.0];
    let b: Vec<f64> = u.iter().zip(&v).map(|(a, c)| 0.5 * a + 0.75f64.sqrt() * c).collect();
    assert!((pearson(&u, &b) - 0.5).abs() < 1e-15);
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn greedy_alignment_is_optimal_under_small_noise() {
    let mut rng = seed::rng(8, &[]);
    for k in 1..=5 {
        for _ in 0..20 {
            let n = 40;
            let a = Factors::from_vec(n, k, (0..n * k).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
            let mut perm: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let mut b = Factors::zeros(n, k);
            for r in 0..n {
                for c in 0..k {
                    let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
                    let noise: f64 = rng.sample(StandardNormal);
                    b.row_mut(r)[perm[c]] = sign * a.get(r, c) + 0.2 * noise;
                }
            }
            let corr: Vec<Vec<f64>> = (0..k)
                .map(|i| (0..k).map(|j| pearson(&a.column(i), &b.column(j)).abs()).collect())
                .collect();
            let best = permutations(k)
                .into_iter()
                .max_by(|p, q| {
                    let s = |m: &Vec<usize>| m.iter().enumerate().map(|(i, &j)| corr[i][j]).sum::<f64>();
                    s(p).total_cmp(&s(q))
                })
                .unwrap();
            let al = align_latent_dimensions(&a, &b).unwrap();
            assert_eq!(al.perm, best);
        }
    }
}

#[test]
fn sparse_constructor_rejects_out_of_range() {
    assert!(SparseMatrix::new(2, 2, vec![Entry { row: 2, col: 0, value: 1.0 }]).is_err());
}
