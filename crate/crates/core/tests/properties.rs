//! Property tests for the invariants every module promises.

use std::collections::HashSet;

use bmfpp::aggregate::{eigenvalue_correction, gaussian_product};
use bmfpp::approx::{fit_moment_matching, lambda_means, pool_gmm, GmmPosterior, RowPosterior};
use bmfpp::cost::{cost_model_eval, CostModel};
use bmfpp::data::{
    order_matrix, partition, split_random, split_structured, Entry, OrderScheme, SparseMatrix,
    StructuredWeighting,
};
use bmfpp::eval::{align_latent_dimensions, rmse};
use bmfpp::linalg::{is_spd, Factors};
use bmfpp::sampler::log_likelihood;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn spd(k: usize, vals: &[f64], ridge: f64) -> DMatrix<f64> {
    let a = DMatrix::from_iterator(k, k, vals.iter().copied().take(k * k));
    &a * a.transpose() + DMatrix::identity(k, k) * ridge
}

fn posterior_strategy(k: usize) -> impl Strategy<Value = RowPosterior> {
    (
        prop::collection::vec(-3.0..3.0f64, k),
        prop::collection::vec(-2.0..2.0f64, k * k),
        0.1..2.0f64,
    )
        .prop_map(move |(m, a, ridge)| RowPosterior {
            mean: DVector::from_vec(m),
            precision: spd(k, &a, ridge),
        })
}

fn matrix_strategy() -> impl Strategy<Value = SparseMatrix> {
    (2usize..12, 2usize..12)
        .prop_flat_map(|(n, d)| {
            let cells = prop::collection::btree_set((0..n, 0..d), 2..=(n * d).min(60));
            (Just(n), Just(d), cells, -5.0..5.0f64)
        })
        .prop_map(|(n, d, cells, shift)| {
            let entries = cells
                .into_iter()
                .enumerate()
                .map(|(i, (row, col))| Entry {
                    row,
                    col,
                    value: shift + i as f64 * 0.1,
                })
                .collect();
            SparseMatrix::new(n, d, entries).unwrap()
        })
}

fn keys(m: &SparseMatrix) -> HashSet<(usize, usize)> {
    m.indices().into_iter().collect()
}

fn rel_close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    (a - b).norm() <= tol * (1.0 + a.norm().max(b.norm()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn sign_flip_leaves_likelihood_unchanged(
        k in 1usize..5,
        seed in any::<u64>(),
        flips in prop::collection::vec(any::<bool>(), 5),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (6, 5);
        let mut x = Factors::zeros(n, k);
        let mut w = Factors::zeros(d, k);
        for v in x.as_mut_slice().iter_mut().chain(w.as_mut_slice()) {
            *v = rng.random_range(-1.0..1.0);
        }
        let entries = (0..n)
            .flat_map(|r| (0..d).map(move |c| (r, c)))
            .filter(|_| rng.random_bool(0.6))
            .map(|(row, col)| Entry { row, col, value: (row as f64 - col as f64) * 0.3 })
            .collect();
        let y = SparseMatrix::new(n, d, entries).unwrap();
        let flip = |f: &Factors| {
            let mut g = f.clone();
            for r in 0..g.n_rows() {
                for (v, &s) in g.row_mut(r).iter_mut().zip(&flips) {
                    if s {
                        *v = -*v;
                    }
                }
            }
            g
        };
        let a = log_likelihood(&y, &x, &w, 1.7);
        let b = log_likelihood(&y, &flip(&x), &flip(&w), 1.7);
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }

    #[test]
    fn gaussian_product_is_commutative(
        ps in (1usize..5).prop_flat_map(|k| prop::collection::vec(posterior_strategy(k), 2..5)),
    ) {
        let fwd = gaussian_product(&ps).unwrap();
        let rev: Vec<_> = ps.iter().rev().cloned().collect();
        let bwd = gaussian_product(&rev).unwrap();
        prop_assert!(rel_close(&fwd.precision, &bwd.precision, 1e-12));
        prop_assert!((&fwd.mean - &bwd.mean).norm() <= 1e-9 * (1.0 + fwd.mean.norm()));
    }

    #[test]
    fn gaussian_product_precision_is_homogeneous(
        ps in (1usize..5).prop_flat_map(|k| prop::collection::vec(posterior_strategy(k), 2..5)),
        c in 0.1..10.0f64,
    ) {
        let base = gaussian_product(&ps).unwrap();
        let scaled: Vec<_> = ps
            .iter()
            .map(|p| RowPosterior { mean: p.mean.clone(), precision: &p.precision * c })
            .collect();
        let out = gaussian_product(&scaled).unwrap();
        prop_assert!(rel_close(&out.precision, &(&base.precision * c), 1e-12));
        prop_assert!((&out.mean - &base.mean).norm() <= 1e-8 * (1.0 + base.mean.norm()));
    }

    #[test]
    fn eigenvalue_correction_yields_spd(
        k in 1usize..6,
        vals in prop::collection::vec(-5.0..5.0f64, 36),
        eps in 1e-8..1.0f64,
    ) {
        let a = DMatrix::from_iterator(k, k, vals.iter().copied().take(k * k));
        let sym = (&a + a.transpose()) * 0.5;
        let out = eigenvalue_correction(&sym, eps).unwrap();
        prop_assert!(is_spd(&out));
        if is_spd(&sym) {
            prop_assert_eq!(out, sym);
        }
    }

    #[test]
    fn partition_tiles_every_entry_once(
        m in matrix_strategy(),
        r in 1usize..4,
        c in 1usize..4,
        seed in any::<u64>(),
    ) {
        prop_assume!(r <= m.n_rows() && c <= m.n_cols());
        let plan = partition(&m, order_matrix(&m, OrderScheme::Random, seed), r, c).unwrap();
        let blocks = plan.split(&m).unwrap();
        let mut seen = HashSet::new();
        let mut total = 0;
        for block in blocks.iter().flatten() {
            prop_assert_eq!(block.data.n_rows(), block.rows.len());
            prop_assert_eq!(block.data.n_cols(), block.cols.len());
            for e in block.data.entries() {
                let row = plan.row_perm[block.rows.start + e.row];
                let col = plan.col_perm[block.cols.start + e.col];
                prop_assert!(seen.insert((row, col)));
                total += 1;
            }
        }
        prop_assert_eq!(total, m.nnz());
        prop_assert_eq!(seen, keys(&m));
    }

    #[test]
    fn random_split_is_a_disjoint_cover(
        m in matrix_strategy(),
        frac in 0.05..0.95f64,
        seed in any::<u64>(),
    ) {
        let (train, test) = split_random(&m, frac, seed).unwrap();
        let (a, b) = (keys(&train), keys(&test));
        prop_assert!(a.is_disjoint(&b));
        prop_assert_eq!(&a | &b, keys(&m));
        prop_assert_eq!(test.nnz(), (frac * m.nnz() as f64).floor() as usize);
    }

    #[test]
    fn structured_split_is_a_disjoint_cover(m in matrix_strategy(), seed in any::<u64>(), raw in any::<bool>()) {
        let weighting = if raw {
            StructuredWeighting::Raw
        } else {
            StructuredWeighting::Rescaled { target: 0.5 }
        };
        let s = split_structured(&m, seed, weighting).unwrap();
        let (a, b) = (keys(&s.train), keys(&s.test));
        prop_assert!(a.is_disjoint(&b));
        prop_assert_eq!(&a | &b, keys(&m));
    }

    #[test]
    fn rmse_ignores_pair_order(
        pairs in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 1..50),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let (ps, ts): (Vec<f64>, Vec<f64>) = shuffled.into_iter().unzip();
        let a = rmse(&p, &t).unwrap();
        let b = rmse(&ps, &ts).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
    }

    #[test]
    fn alignment_recovers_signed_permutation(
        (k, perm) in (1usize..6).prop_flat_map(|k| (Just(k), Just((0..k).collect::<Vec<_>>()).prop_shuffle())),
        flips in prop::collection::vec(any::<bool>(), 6),
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 200;
        let mut a = Factors::zeros(n, k);
        for v in a.as_mut_slice() {
            *v = StandardNormal.sample(&mut rng);
        }
        // b[:, perm[c]] = sign[c] * a[:, c]
        let mut b = Factors::zeros(n, k);
        for r in 0..n {
            for c in 0..k {
                let s = if flips[c] { -1.0 } else { 1.0 };
                b.row_mut(r)[perm[c]] = s * a.get(r, c);
            }
        }
        let al = align_latent_dimensions(&a, &b).unwrap();
        prop_assert_eq!(&al.perm, &perm);
        for c in 0..k {
            prop_assert_eq!(al.signs[c], if flips[c] { -1 } else { 1 });
        }
        prop_assert_eq!(al.apply(&b), a);
    }

    #[test]
    fn moment_matching_is_translation_equivariant(
        k in 1usize..4,
        vals in prop::collection::vec(-3.0..3.0f64, 60),
        shift in prop::collection::vec(-50.0..50.0f64, 3),
    ) {
        let samples: Vec<DVector<f64>> =
            vals.chunks(k).take(60 / k).map(DVector::from_column_slice).filter(|v| v.len() == k).collect();
        let t = DVector::from_column_slice(&shift[..k]);
        let moved: Vec<_> = samples.iter().map(|s| s + &t).collect();
        let a = fit_moment_matching(&samples).unwrap();
        let b = fit_moment_matching(&moved).unwrap();
        prop_assert!((&b.mean - (&a.mean + &t)).norm() <= 1e-9 * (1.0 + t.norm()));
        prop_assert!(rel_close(&a.precision, &b.precision, 1e-6));
    }

    #[test]
    fn lambda_means_cluster_count_is_monotone(
        vals in prop::collection::vec(-10.0..10.0f64, 4..80),
        seed in any::<u64>(),
    ) {
        let cloud: Vec<DVector<f64>> = vals.chunks_exact(2).map(DVector::from_column_slice).collect();
        let counts: Vec<usize> = [0.1, 0.5, 1.0, 2.0, 5.0, 20.0, 100.0]
            .iter()
            .map(|&l| lambda_means(&cloud, l, 50, seed).unwrap().n_clusters())
            .collect();
        prop_assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
        prop_assert_eq!(*counts.last().unwrap(), 1);
    }

    #[test]
    fn total_cost_is_nonincreasing_in_workers(
        n in 10usize..100_000,
        d in 10usize..100_000,
        m in 100usize..10_000_000,
        k in 1usize..50,
    ) {
        let totals: Vec<f64> = (1..=100)
            .map(|u| cost_model_eval(&CostModel::new(n, d, m, k, 100, u, 1)).unwrap().total)
            .collect();
        prop_assert!(totals.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn single_component_pool_is_identity(p in (1usize..5).prop_flat_map(posterior_strategy)) {
        let pooled = pool_gmm(&GmmPosterior::single(p.clone()));
        prop_assert_eq!(pooled, p);
    }
}
