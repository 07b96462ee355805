mod common;

use common::{block_of, finite_difference, relative_error, rng, value, Instance, BLOCKS};
use nalgebra::DMatrix;
use plnfit::elbo::Objective;
use plnfit::model::{sigma_hat, FactoredPositions};
use plnfit::viz::FactorMap;
use plnfit::{Family, ModelParams, VariationalState};
use proptest::prelude::*;

fn shape() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
    (1usize..=3, 1usize..=5, 1usize..=3, any::<u64>()).prop_flat_map(|(d, p, q, seed)| {
        ((d + 1)..=7).prop_map(move |n| (n, p, q.min(p), d, seed))
    })
}

/// Random orthogonal q×q matrix from the QR of a Gaussian matrix.
fn orthogonal(seed: u64, q: usize) -> DMatrix<f64> {
    let g = common::normal_matrix(&mut rng(seed), q, q, 1.0);
    g.qr().q()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn gradient_matches_finite_differences((n, p, q, d, seed) in shape(), missing in prop_oneof![Just(0.0), Just(0.25)]) {
        let mut r = rng(seed);
        let inst = Instance::random(&mut r, n, p, q, d, missing, seed);
        let family = Family::Poisson;
        let mut obj = Objective::new(&family, &inst.counts, &inst.design, q).unwrap();
        let (_, g) = obj.value_and_gradients(&inst.params, &inst.vstate).unwrap();
        for b in BLOCKS {
            let fd = finite_difference(&family, &inst, b);
            prop_assert!(relative_error(block_of(&g, b), &fd) < 1e-6, "block {:?}", b);
        }
    }

    #[test]
    fn offsets_trade_against_the_intercept((n, p, q, _d, seed) in shape(), c in -3.0f64..3.0) {
        let mut r = rng(seed);
        let inst = Instance::random(&mut r, n, p, q, 1, 0.1, seed);
        let shifted = inst.design.shifted_offsets(c);
        let mut params = inst.params.clone();
        params.theta.column_mut(0).add_scalar_mut(-c);
        let a = value(&Family::Poisson, &inst.counts, &inst.design, &inst.params, &inst.vstate);
        let b = value(&Family::Poisson, &inst.counts, &shifted, &params, &inst.vstate);
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn rotations_leave_the_bound_unchanged((n, p, q, d, seed) in shape()) {
        let mut r = rng(seed);
        let inst = Instance::random(&mut r, n, p, q, d, 0.0, seed);
        // row-constant S makes the variance term rotation invariant
        let sds = DMatrix::from_fn(n, q, |i, _| inst.vstate.sds[(i, 0)]);
        let before = VariationalState::new(inst.vstate.means.clone(), sds.clone()).unwrap();
        let rot = orthogonal(seed ^ 0x5eed, q);
        let params = ModelParams::new(inst.params.theta.clone(), &inst.params.loadings * &rot).unwrap();
        let after = VariationalState::new(&inst.vstate.means * &rot, sds).unwrap();
        let a = value(&Family::Poisson, &inst.counts, &inst.design, &inst.params, &before);
        let b = value(&Family::Poisson, &inst.counts, &inst.design, &params, &after);
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn column_permutations_and_sign_flips_are_symmetries((n, p, q, d, seed) in shape(), flip in any::<bool>()) {
        let mut r = rng(seed);
        let inst = Instance::random(&mut r, n, p, q, d, 0.1, seed);
        let order: Vec<usize> = (0..q).rev().collect();
        let sign = if flip { -1.0 } else { 1.0 };
        let permute = |m: &DMatrix<f64>, s: f64| DMatrix::from_fn(m.nrows(), q, |i, k| s * m[(i, order[k])]);
        let params = ModelParams::new(inst.params.theta.clone(), permute(&inst.params.loadings, sign)).unwrap();
        let vstate = VariationalState::new(permute(&inst.vstate.means, sign), permute(&inst.vstate.sds, 1.0)).unwrap();
        let a = value(&Family::Poisson, &inst.counts, &inst.design, &inst.params, &inst.vstate);
        let b = value(&Family::Poisson, &inst.counts, &inst.design, &params, &vstate);
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn factor_map_invariants(n in 3usize..30, p in 2usize..8, q in 1usize..4, seed in any::<u64>()) {
        let q = q.min(p);
        let mut r = rng(seed);
        let positions = FactoredPositions {
            scores: common::normal_matrix(&mut r, n, q, 1.0),
            loadings: common::normal_matrix(&mut r, p, q, 1.0),
        };
        let map = FactorMap::orthogonalize(&positions).unwrap();
        let dense = positions.dense();
        let scale = dense.amax().max(1.0);
        prop_assert!((map.reconstruct() - &dense).amax() <= 1e-10 * scale);
        let ltl = map.loadings.transpose() * &map.loadings;
        prop_assert!((ltl.clone() - DMatrix::identity(ltl.nrows(), ltl.ncols())).amax() <= 1e-12);
        let sts = map.scores.transpose() * &map.scores;
        let off = &sts - DMatrix::from_diagonal(&sts.diagonal());
        prop_assert!(off.amax() <= 1e-10 * sts.amax().max(1.0));
        prop_assert!(map.axis_variance.windows(2).all(|w| w[0] >= w[1]));
        for (k, col) in map.loadings.column_iter().enumerate() {
            let top = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            prop_assert!(top >= 0.0, "axis {} sign", k);
        }

        // the map depends on the product only, not on the factorization
        let rot = orthogonal(seed ^ 1, q);
        let twisted = FactoredPositions {
            scores: &positions.scores * &rot,
            loadings: &positions.loadings * &rot,
        };
        let again = FactorMap::orthogonalize(&twisted).unwrap();
        prop_assert!((again.scores - &map.scores).amax() <= 1e-8 * map.scores.amax().max(1.0));
    }

    #[test]
    fn sigma_hat_is_psd_with_rank_at_most_q(n in 2usize..20, p in 1usize..8, q in 1usize..4, seed in any::<u64>()) {
        let q = q.min(p);
        let mut r = rng(seed);
        let params = ModelParams::new(DMatrix::zeros(p, 1), common::normal_matrix(&mut r, p, q, 1.0)).unwrap();
        let vstate = VariationalState::new(
            common::normal_matrix(&mut r, n, q, 1.0),
            common::uniform_matrix(&mut r, n, q, 0.1, 1.0),
        ).unwrap();
        let s = sigma_hat(&params, &vstate).unwrap();
        let mut ev: Vec<f64> = s.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        let top = ev[0].max(1e-300);
        prop_assert!(ev.iter().all(|&l| l >= -1e-10 * top));
        prop_assert!(ev[q..].iter().all(|&l| l.abs() <= 1e-10 * top));
        prop_assert_eq!(&s, &s.transpose());
    }
}

#[test]
fn factor_map_preserves_sigma_hat() {
    use plnfit::{fit_rank, sample, Design, OptimConfig, SimSpec};
    let (counts, design, _) = sample(&SimSpec::standard(60, 6, 2, 2, 17)).unwrap();
    // without an intercept the variational means keep nonzero column means
    let slope_only = Design::new(design.covariates().columns(1, 1).into_owned(), design.offsets().clone()).unwrap();
    for (design, has_intercept) in [(design, true), (slope_only, false)] {
        let fit = fit_rank(&counts, &design, &Family::Poisson, 2, &OptimConfig::default()).unwrap();
        let scale = fit.sigma_hat.amax();

        let plain = FactorMap::orthogonalize_uncentered(&fit.latent.p_tilde).unwrap();
        assert!((plain.sigma_hat(&fit) - &fit.sigma_hat).amax() <= 1e-10 * scale);

        // the centered map needs the rank-one mean term back
        let centered = FactorMap::orthogonalize(&fit.latent.p_tilde).unwrap();
        assert!((centered.sigma_hat(&fit) - &fit.sigma_hat).amax() <= 1e-10 * scale);
        let mean_term = centered.mean_term().amax();
        if has_intercept {
            assert!(mean_term <= 1e-8 * scale, "{mean_term}");
        } else {
            assert!(mean_term > 1e-6 * scale, "{mean_term}");
        }
    }
}
