use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use seqboed::aldi::{aldi_step, Observation, ParticleEnsemble, SequentialTarget};
use seqboed::eki::{eki_optimize, DesignEnsemble, EkiConfig, Inflation};
use seqboed::gaussian::{condition_gaussian, kl_gaussian, EmpiricalMoments, Gaussian};
use seqboed::models::{
    heat_solve, linear_eval, near_linear_eval, ForwardModel, HeatModelConfig, LinearModelConfig, MatrixModel,
    NearLinearModelConfig,
};
use seqboed::rng::SeedStream;
use seqboed::sequential::select_design;

/// SPD matrix `L Lᵀ + 0.1 I` from raw entries.
fn spd(dim: usize, raw: &[f64]) -> DMatrix<f64> {
    let l = DMatrix::from_fn(dim, dim, |i, j| if j <= i { raw[i * dim + j] } else { 0.0 });
    &l * l.transpose() + DMatrix::identity(dim, dim) * 0.1
}

fn gaussian_strategy() -> impl Strategy<Value = Gaussian> {
    (1usize..=4).prop_flat_map(|d| {
        (prop::collection::vec(-3.0..3.0f64, d), prop::collection::vec(-2.0..2.0f64, d * d))
            .prop_map(move |(m, raw)| Gaussian::new(DVector::from_vec(m), spd(d, &raw)).unwrap())
    })
}

fn pair_strategy() -> impl Strategy<Value = (Gaussian, Gaussian)> {
    (1usize..=4).prop_flat_map(|d| {
        let g = move || {
            (prop::collection::vec(-3.0..3.0f64, d), prop::collection::vec(-2.0..2.0f64, d * d))
                .prop_map(move |(m, raw)| Gaussian::new(DVector::from_vec(m), spd(d, &raw)).unwrap())
        };
        (g(), g())
    })
}

/// Largest distance from the rows of `later` to the affine span of the rows
/// of `initial`.
fn distance_to_affine_span(initial: &DMatrix<f64>, later: &DMatrix<f64>) -> f64 {
    let base = initial.row(0).into_owned();
    let dev = DMatrix::from_fn(initial.nrows() - 1, initial.ncols(), |i, j| initial[(i + 1, j)] - base[j]);
    let svd = dev.transpose().svd(true, false);
    let u = svd.u.unwrap();
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10).count();
    let basis = u.columns(0, rank).into_owned();
    (0..later.nrows())
        .map(|i| {
            let v = (later.row(i) - &base).transpose();
            let proj = &basis * (basis.transpose() * &v);
            (v - proj).norm()
        })
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn kl_is_nonnegative((p, q) in pair_strategy()) {
        prop_assert!(kl_gaussian(&p, &q).unwrap() >= -1e-12);
    }

    #[test]
    fn kl_of_a_gaussian_with_itself_vanishes(p in gaussian_strategy()) {
        prop_assert!(kl_gaussian(&p, &p).unwrap().abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn conditional_covariance_ignores_y_and_mean_is_affine(
        joint in (2usize..=5).prop_flat_map(|n| (Just(n), prop::collection::vec(-2.0..2.0f64, n * n))),
        y1 in -5.0..5.0f64,
        y2 in -5.0..5.0f64,
    ) {
        let (n, raw) = joint;
        let cov = spd(n, &raw);
        let d = n - 1;
        let m = EmpiricalMoments {
            mean_u: DVector::from_element(d, 0.5),
            mean_y: DVector::from_element(1, -1.0),
            cov_u: cov.view((0, 0), (d, d)).into_owned(),
            cov_y: cov.view((d, d), (1, 1)).into_owned(),
            cov_uy: cov.view((0, d), (d, 1)).into_owned(),
            sample_count: 100,
        };
        let a = condition_gaussian(&m, &DVector::from_element(1, y1)).unwrap();
        let b = condition_gaussian(&m, &DVector::from_element(1, y2)).unwrap();
        let mid = condition_gaussian(&m, &DVector::from_element(1, 0.5 * (y1 + y2))).unwrap();
        prop_assert!((a.covariance() - b.covariance()).amax() <= 1e-12);
        prop_assert!((mid.mean() - (a.mean() + b.mean()) * 0.5).amax() <= 1e-10);
    }

    #[test]
    fn spread_matrix_is_a_covariance_square_root(
        j in 2usize..12, d in 1usize..5, raw in prop::collection::vec(-3.0..3.0f64, 60),
    ) {
        let particles = DMatrix::from_fn(j, d, |r, c| raw[(r * d + c) % raw.len()] + 0.37 * (r * c) as f64);
        let ens = ParticleEnsemble::new(particles).unwrap();
        let s = ens.spread_matrix();
        let cov = ens.covariance(seqboed::gaussian::Normalization::Population);
        prop_assert!((&s * s.transpose() - cov).amax() <= 1e-12);
    }

    #[test]
    fn near_linear_approaches_linear(tau in -0.5..0.5f64, u in -3.0..3.0f64, p in 0.0..2.0f64) {
        let lin = LinearModelConfig::default();
        let nl = NearLinearModelConfig { c: lin.c, d_shift: lin.d_shift, tau };
        let diff = (near_linear_eval(&nl, u, p) - linear_eval(&lin, u, p)).abs();
        prop_assert!(diff <= tau.abs() * 9.0 + 1e-12);
    }

    #[test]
    fn argmax_selection_returns_a_maximum(values in prop::collection::vec(-10.0..10.0f64, 1..20)) {
        let i = select_design(&values).unwrap();
        prop_assert!(values.iter().all(|&v| v <= values[i]));
        prop_assert!(values[..i].iter().all(|&v| v < values[i]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn heat_solution_is_linear_in_the_source(lambda in 0.1..5.0f64, level in 0.5..3.0f64, p in 0.0..2.0f64) {
        let mut cfg = HeatModelConfig::scalar();
        let u = DVector::from_element(cfg.param_dim, level);
        let base = heat_solve(&cfg, &u, p).unwrap();
        cfg.source_amplitude = lambda;
        let scaled = heat_solve(&cfg, &u, p).unwrap();
        let scale = base.values.amax().max(1e-300);
        prop_assert!((&scaled.values - &base.values * lambda).amax() <= 1e-10 * lambda * scale);
    }

    #[test]
    fn aldi_stays_in_the_initial_affine_span(seed in any::<u64>(), j in 2usize..5) {
        let d = 5;
        let h = DMatrix::from_fn(2, d, |r, c| ((r + 1) * (c + 2)) as f64 * 0.1 - 0.3);
        let model: Arc<dyn ForwardModel> = Arc::new(MatrixModel::new(h));
        let prior = Gaussian::isotropic(d, 0.0, 1.0).unwrap();
        let target = SequentialTarget::new(prior, Gaussian::isotropic(2, 0.0, 0.5).unwrap())
            .unwrap()
            .with_observation(Observation {
                y: DVector::from_vec(vec![0.3, -0.2]),
                design: DVector::from_element(1, 0.0),
                model,
            })
            .unwrap();
        let mut rng = SeedStream::new(seed).rng();
        let init = ParticleEnsemble::from_prior(target.prior(), j, &mut rng).unwrap();
        let mut ens = init.clone();
        for _ in 0..50 {
            ens = aldi_step(&ens, &target, 0.01, &mut rng).unwrap();
        }
        prop_assert!(distance_to_affine_span(init.particles(), ens.particles()) <= 1e-8);
    }

    #[test]
    fn eki_stays_in_the_initial_affine_span(seed in any::<u64>(), j in 2usize..4) {
        let dim = 4;
        let mut rng = SeedStream::new(seed).rng();
        let init = DMatrix::from_fn(j, dim, |_, _| rand::Rng::random::<f64>(&mut rng) * 2.0);
        let ens = DesignEnsemble::new(init.clone()).unwrap();
        let target = DVector::from_vec(vec![1.0, 0.5, -0.5, 0.2]);
        let cfg = EkiConfig {
            c_p: DMatrix::identity(dim, dim),
            inflation: Inflation::Constant { rho: 0.1 },
            ..EkiConfig::scalar(1e-2, 1.0, 20.0)
        };
        let res = eki_optimize(
            &ens,
            |p, _| Ok(DVector::from_fn(p.nrows(), |i, _| -(p.row(i).transpose() - &target).norm_squared())),
            &cfg,
            &SeedStream::new(seed),
        )
        .unwrap();
        for row in &res.trace {
            prop_assert!(distance_to_affine_span(&init, &row.designs) <= 1e-8);
        }
    }
}

#[test]
fn eki_traces_are_deterministic() {
    let init = DesignEnsemble::new(DMatrix::from_column_slice(3, 1, &[0.2, 1.1, 1.8])).unwrap();
    let cfg = EkiConfig::scalar(1e-2, 3.0, 50.0);
    let noisy = |p: &DMatrix<f64>, s: &SeedStream| {
        let mut rng = s.rng();
        Ok(DVector::from_fn(p.nrows(), |i, _| {
            1.0 - (p[(i, 0)] - 1.0).powi(2) + 0.01 * rand::Rng::random::<f64>(&mut rng)
        }))
    };
    let a = eki_optimize(&init, noisy, &cfg, &SeedStream::new(9)).unwrap();
    let b = eki_optimize(&init, noisy, &cfg, &SeedStream::new(9)).unwrap();
    assert_eq!(a.trace.len(), b.trace.len());
    for (x, y) in a.trace.iter().zip(&b.trace) {
        assert_eq!((x.t, &x.designs, &x.eigs), (y.t, &y.designs, &y.eigs));
    }
}
