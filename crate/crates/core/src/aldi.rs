//! Affine-invariant interacting Langevin dynamics (ALDI) for sampling the
//! sequential posterior.
//!
//! The gradient-free variant replaces `C ∇I` by the ensemble cross-covariance
//! between particles and their forward images, which is exact for linear
//! forward maps. Noise enters through the `d × J` spread matrix
//! `(u⁽ʲ⁾ - ū)/√J`, so every update lies in the affine span of the ensemble.

use std::sync::Arc;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gaussian::{center, sample_gaussian, sample_mean, Gaussian, GaussianDensity, Normalization};
use crate::linalg::Cholesky;
use crate::models::{evaluate_batch_checked, evaluate_checked, ForwardModel};

/// `J × d` particle matrix plus the number of steps taken so far.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    particles: DMatrix<f64>,
    step_count: usize,
}

impl ParticleEnsemble {
    pub fn new(particles: DMatrix<f64>) -> Result<Self> {
        if particles.nrows() < 2 {
            return Err(Error::invalid("an ensemble needs at least 2 particles"));
        }
        if particles.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("ensemble particles must be finite"));
        }
        Ok(Self {
            particles,
            step_count: 0,
        })
    }

    /// `count` i.i.d. draws from `prior`.
    pub fn from_prior<R: Rng + ?Sized>(prior: &Gaussian, count: usize, rng: &mut R) -> Result<Self> {
        Self::new(sample_gaussian(prior, count, rng)?)
    }

    pub fn particles(&self) -> &DMatrix<f64> {
        &self.particles
    }

    pub fn into_particles(self) -> DMatrix<f64> {
        self.particles
    }

    pub fn len(&self) -> usize {
        self.particles.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.particles.ncols()
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn mean(&self) -> DVector<f64> {
        sample_mean(&self.particles)
    }

    pub fn covariance(&self, norm: Normalization) -> DMatrix<f64> {
        crate::gaussian::sample_covariance(&self.particles, norm)
    }

    /// Gaussian fit with the unbiased covariance.
    pub fn gaussian_fit(&self) -> Result<Gaussian> {
        Gaussian::new(self.mean(), self.covariance(Normalization::Unbiased))
    }

    /// The non-symmetric square root `(u⁽¹⁾ - ū, …, u⁽ᴶ⁾ - ū)/√J` (`d × J`).
    pub fn spread_matrix(&self) -> DMatrix<f64> {
        let dev = center(&self.particles, &self.mean());
        dev.transpose() / (self.len() as f64).sqrt()
    }
}

/// One recorded observation `(y†, p†)` with the forward map that produced it.
#[derive(Debug, Clone)]
pub struct Observation {
    pub y: DVector<f64>,
    pub design: DVector<f64>,
    pub model: Arc<dyn ForwardModel>,
}

/// The sequential posterior `π_n ∝ exp(-Σ_ℓ Φ_ℓ) π₀` with Gaussian prior and
/// additive Gaussian noise `N(0, Γ)` shared by all observations.
#[derive(Debug, Clone)]
pub struct SequentialTarget {
    prior: Gaussian,
    noise: Gaussian,
    observations: Vec<Observation>,
    prior_density: GaussianDensity,
    prior_chol: Cholesky,
    noise_chol: Cholesky,
}

impl SequentialTarget {
    pub fn new(prior: Gaussian, noise: Gaussian) -> Result<Self> {
        let prior_density = prior.density()?;
        let prior_chol = prior_density.factor().clone();
        let noise_chol = Cholesky::new(noise.covariance(), "noise covariance")?;
        Ok(Self {
            prior,
            noise,
            observations: Vec::new(),
            prior_density,
            prior_chol,
            noise_chol,
        })
    }

    pub fn push(&mut self, obs: Observation) -> Result<()> {
        if obs.model.param_dim() != self.prior.dim() {
            return Err(Error::DimensionMismatch {
                context: "observation model parameter",
                expected: self.prior.dim(),
                got: obs.model.param_dim(),
            });
        }
        if obs.y.len() != obs.model.obs_dim() || obs.y.len() != self.noise.dim() {
            return Err(Error::DimensionMismatch {
                context: "observation vector",
                expected: obs.model.obs_dim(),
                got: obs.y.len(),
            });
        }
        self.observations.push(obs);
        Ok(())
    }

    pub fn with_observation(mut self, obs: Observation) -> Result<Self> {
        self.push(obs)?;
        Ok(self)
    }

    pub fn prior(&self) -> &Gaussian {
        &self.prior
    }

    pub fn noise(&self) -> &Gaussian {
        &self.noise
    }

    pub fn noise_factor(&self) -> &Cholesky {
        &self.noise_chol
    }

    pub fn prior_factor(&self) -> &Cholesky {
        &self.prior_chol
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    /// `Σ_ℓ ½‖y_ℓ - G_ℓ(u, p_ℓ)‖²_Γ`.
    pub fn misfit(&self, u: &DVector<f64>) -> Result<f64> {
        let mut total = 0.0;
        for obs in &self.observations {
            let r = &obs.y - evaluate_checked(obs.model.as_ref(), u, &obs.design)?;
            total += 0.5 * self.noise_chol.quad_form(r.as_slice());
        }
        Ok(total)
    }

    /// `-Σ Φ_ℓ(u) + log π₀(u)`, the log-density up to the unknown normalizer.
    pub fn log_density_unnormalized(&self, u: &DVector<f64>) -> Result<f64> {
        Ok(self.prior_density.log_density(u.as_slice()) - self.misfit(u)?)
    }

    /// Unnormalized log-density of every row.
    pub fn log_density_unnormalized_batch(&self, particles: &DMatrix<f64>) -> Result<DVector<f64>> {
        let j = particles.nrows();
        let mut out = DVector::from_fn(j, |i, _| {
            self.prior_density
                .log_density(particles.row(i).transpose().as_slice())
        });
        for obs in &self.observations {
            let g = evaluate_batch_checked(obs.model.as_ref(), particles, &obs.design)?;
            for i in 0..j {
                let r: Vec<f64> = obs.y.iter().zip(g.row(i).iter()).map(|(a, b)| a - b).collect();
                out[i] -= 0.5 * self.noise_chol.quad_form(&r);
            }
        }
        Ok(out)
    }

    /// `∇I(u) = -Σ_ℓ DG_ℓᵀ Γ⁻¹ (y_ℓ - G_ℓ) + Σ₀⁻¹(u - m₀)` with central
    /// finite-difference Jacobians (relative step `1e-5`).
    pub fn potential_gradient(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        let mut grad = self.prior_chol.solve(&(u - self.prior.mean()));
        for obs in &self.observations {
            let g = evaluate_checked(obs.model.as_ref(), u, &obs.design)?;
            let jac = finite_difference_jacobian(obs.model.as_ref(), u, &obs.design, 1e-5)?;
            let w = self.noise_chol.solve(&(&obs.y - g));
            grad -= jac.transpose() * w;
        }
        Ok(grad)
    }
}

/// Central-difference Jacobian `k × d` with step `rel · max(1, |u_i|)`.
pub fn finite_difference_jacobian(
    model: &dyn ForwardModel,
    u: &DVector<f64>,
    design: &DVector<f64>,
    rel: f64,
) -> Result<DMatrix<f64>> {
    let d = u.len();
    let mut jac = DMatrix::zeros(model.obs_dim(), d);
    let mut probe = u.clone();
    for i in 0..d {
        let h = rel * u[i].abs().max(1.0);
        probe[i] = u[i] + h;
        let plus = evaluate_checked(model, &probe, design)?;
        probe[i] = u[i] - h;
        let minus = evaluate_checked(model, &probe, design)?;
        probe[i] = u[i];
        jac.set_column(i, &((plus - minus) / (2.0 * h)));
    }
    Ok(jac)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AldiVariant {
    #[default]
    GradientFree,
    /// Finite-difference gradients; a reference sampler.
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AldiOptions {
    pub variant: AldiVariant,
    /// Covariance divisor inside the dynamics.
    pub normalization: Normalization,
    /// Retries with halved steps when a particle becomes non-finite.
    pub max_halvings: u32,
    /// Record a diagnostic snapshot every this many steps.
    pub snapshot_every: usize,
}

impl Default for AldiOptions {
    fn default() -> Self {
        Self {
            variant: AldiVariant::GradientFree,
            normalization: Normalization::Population,
            max_halvings: 4,
            snapshot_every: 10,
        }
    }
}

/// Deterministic part of the ALDI update, `J × d`.
fn drift(
    particles: &DMatrix<f64>,
    target: &SequentialTarget,
    variant: AldiVariant,
    norm: Normalization,
) -> Result<DMatrix<f64>> {
    let (j, d) = particles.shape();
    let divisor = norm.divisor(j);
    let mean = sample_mean(particles);
    let dev = center(particles, &mean);
    let cov_u = dev.tr_mul(&dev) / divisor;
    let mut out = DMatrix::zeros(j, d);
    match variant {
        AldiVariant::GradientFree => {
            for obs in target.observations() {
                let g = evaluate_batch_checked(obs.model.as_ref(), particles, &obs.design)?;
                let g_dev = center(&g, &sample_mean(&g));
                let cov_ug = dev.tr_mul(&g_dev) / divisor; // d × k
                let mut resid_t = -g.transpose(); // k × J
                for mut col in resid_t.column_iter_mut() {
                    col += &obs.y;
                }
                let weighted = target.noise_factor().solve_matrix(&resid_t);
                out += (cov_ug * weighted).transpose();
            }
            let mut shifted_t = particles.transpose();
            for mut col in shifted_t.column_iter_mut() {
                col -= target.prior().mean();
            }
            let prior_term = target.prior_factor().solve_matrix(&shifted_t);
            out -= (&cov_u * prior_term).transpose();
        }
        AldiVariant::Gradient => {
            for i in 0..j {
                let u = particles.row(i).transpose();
                let grad = target.potential_gradient(&u).map_err(|e| match e {
                    Error::ForwardModel { .. } => e,
                    other => other.at_particle(i),
                })?;
                out.row_mut(i).copy_from(&(-(&cov_u * grad)).transpose());
            }
        }
    }
    out += &dev * ((d as f64 + 1.0) / j as f64);
    Ok(out)
}

fn euler_maruyama<R: Rng + ?Sized>(
    particles: &DMatrix<f64>,
    target: &SequentialTarget,
    dt: f64,
    opts: &AldiOptions,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let j = particles.nrows();
    let drift = drift(particles, target, opts.variant, opts.normalization)?;
    let dev = center(particles, &sample_mean(particles));
    let xi = DMatrix::<f64>::from_fn(j, j, |_, _| rng.sample(StandardNormal));
    let noise = xi * dev * ((2.0 * dt).sqrt() / (j as f64).sqrt());
    Ok(particles + drift * dt + noise)
}

fn is_retryable(e: &Error) -> bool {
    match e {
        Error::NonFinite(_) => true,
        Error::ForwardModel { message, .. } => message.contains("non-finite"),
        _ => false,
    }
}

fn step_with_halving<R: Rng + ?Sized>(
    particles: &DMatrix<f64>,
    target: &SequentialTarget,
    dt: f64,
    opts: &AldiOptions,
    rng: &mut R,
    depth: u32,
    step_index: usize,
) -> Result<DMatrix<f64>> {
    let attempt = euler_maruyama(particles, target, dt, opts, rng);
    let ok = match &attempt {
        Ok(next) => next.iter().all(|v| v.is_finite()),
        Err(e) => !is_retryable(e),
    };
    if ok {
        return attempt;
    }
    if depth >= opts.max_halvings {
        return Err(Error::Diverged { step: step_index });
    }
    warn!("ALDI step {step_index}: non-finite update, retrying with dt = {}", dt / 2.0);
    let half = step_with_halving(particles, target, dt / 2.0, opts, rng, depth + 1, step_index)?;
    step_with_halving(&half, target, dt / 2.0, opts, rng, depth + 1, step_index)
}

/// One Euler–Maruyama step of gradient-free ALDI with default options.
pub fn aldi_step<R: Rng + ?Sized>(
    ens: &ParticleEnsemble,
    target: &SequentialTarget,
    dt: f64,
    rng: &mut R,
) -> Result<ParticleEnsemble> {
    aldi_step_with(ens, target, dt, &AldiOptions::default(), rng)
}

/// One step of the finite-difference gradient ALDI reference sampler.
pub fn aldi_step_gradient<R: Rng + ?Sized>(
    ens: &ParticleEnsemble,
    target: &SequentialTarget,
    dt: f64,
    rng: &mut R,
) -> Result<ParticleEnsemble> {
    let opts = AldiOptions {
        variant: AldiVariant::Gradient,
        ..AldiOptions::default()
    };
    aldi_step_with(ens, target, dt, &opts, rng)
}

pub fn aldi_step_with<R: Rng + ?Sized>(
    ens: &ParticleEnsemble,
    target: &SequentialTarget,
    dt: f64,
    opts: &AldiOptions,
    rng: &mut R,
) -> Result<ParticleEnsemble> {
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("ALDI step size must be positive, got {dt}")));
    }
    if ens.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            context: "ALDI ensemble dimension",
            expected: target.dim(),
            got: ens.dim(),
        });
    }
    let step_index = ens.step_count + 1;
    let next = step_with_halving(&ens.particles, target, dt, opts, rng, 0, step_index)?;
    Ok(ParticleEnsemble {
        particles: next,
        step_count: step_index,
    })
}

/// Ensemble summary recorded during a run.
#[derive(Debug, Clone, PartialEq)]
pub struct AldiSnapshot {
    pub step: usize,
    pub time: f64,
    pub mean: DVector<f64>,
    pub cov_trace: f64,
}

#[derive(Debug, Clone)]
pub struct AldiRun {
    pub ensemble: ParticleEnsemble,
    pub diagnostics: Vec<AldiSnapshot>,
    /// Mean drift over the last 20% of the run stayed within one standard error.
    pub stationary: bool,
}

/// Integrate to `t_end` with `⌈t_end/dt⌉` steps using default options.
pub fn aldi_run<R: Rng + ?Sized>(
    init: &ParticleEnsemble,
    target: &SequentialTarget,
    t_end: f64,
    dt: f64,
    rng: &mut R,
) -> Result<AldiRun> {
    aldi_run_with(init, target, t_end, dt, &AldiOptions::default(), rng)
}

pub fn aldi_run_with<R: Rng + ?Sized>(
    init: &ParticleEnsemble,
    target: &SequentialTarget,
    t_end: f64,
    dt: f64,
    opts: &AldiOptions,
    rng: &mut R,
) -> Result<AldiRun> {
    if !(dt > 0.0) || !(t_end >= dt) {
        return Err(Error::invalid(format!(
            "ALDI needs 0 < dt <= t_end, got dt = {dt}, t_end = {t_end}"
        )));
    }
    if init.len() < init.dim() + 2 {
        warn!(
            "ALDI ensemble of {} particles in dimension {} is below the d+2 size the dynamics assume",
            init.len(),
            init.dim()
        );
    }
    let n_steps = ((t_end / dt) - 1e-9).ceil().max(1.0) as usize;
    let snapshot = |e: &ParticleEnsemble, k: usize| AldiSnapshot {
        step: e.step_count,
        time: k as f64 * dt,
        mean: e.mean(),
        cov_trace: e.covariance(opts.normalization).trace(),
    };
    let mut ens = init.clone();
    if ens.covariance(opts.normalization).trace() == 0.0 {
        warn!("ALDI started from a collapsed ensemble; it will not move");
    }
    let mut diagnostics = vec![snapshot(&ens, 0)];
    let every = opts.snapshot_every.max(1);
    for k in 1..=n_steps {
        ens = aldi_step_with(&ens, target, dt, opts, rng)?;
        if k % every == 0 || k == n_steps {
            diagnostics.push(snapshot(&ens, k));
        }
    }
    let stationary = stationarity_check(&diagnostics, ens.len());
    if !stationary {
        debug!("ALDI ensemble mean still drifting over the final 20% of the run");
    }
    Ok(AldiRun {
        ensemble: ens,
        diagnostics,
        stationary,
    })
}

fn stationarity_check(snaps: &[AldiSnapshot], j: usize) -> bool {
    let last = match snaps.last() {
        Some(s) => s,
        None => return true,
    };
    let start = last.time * 0.8;
    let reference = match snaps.iter().find(|s| s.time >= start) {
        Some(s) => s,
        None => return true,
    };
    let se = (last.cov_trace / j as f64).sqrt();
    (&last.mean - &reference.mean).norm() <= se.max(f64::EPSILON)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{design, LinearModel, LinearModelConfig, MatrixModel};
    use crate::rng::SeedStream;
    use approx::assert_relative_eq;

    fn linear_target(y: f64) -> SequentialTarget {
        let model: Arc<dyn ForwardModel> = Arc::new(LinearModel::new(LinearModelConfig::default()).unwrap());
        SequentialTarget::new(Gaussian::scalar(2.0, 2.0).unwrap(), Gaussian::scalar(0.0, 1.0).unwrap())
            .unwrap()
            .with_observation(Observation {
                y: DVector::from_element(1, y),
                design: design(1.0),
                model,
            })
            .unwrap()
    }

    #[test]
    fn spread_matrix_is_a_square_root() {
        let mut rng = SeedStream::new(4).rng();
        let g = Gaussian::isotropic(3, 0.0, 1.0).unwrap();
        for _ in 0..5 {
            let ens = ParticleEnsemble::from_prior(&g, 12, &mut rng).unwrap();
            let s = ens.spread_matrix();
            assert_relative_eq!(
                &s * s.transpose(),
                ens.covariance(Normalization::Population),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn collapsed_ensemble_is_a_fixed_point() {
        let target = linear_target(3.0);
        let ens = ParticleEnsemble::new(DMatrix::from_element(5, 1, 0.7)).unwrap();
        let next = aldi_step(&ens, &target, 0.01, &mut SeedStream::new(1).rng()).unwrap();
        assert_eq!(next.particles(), ens.particles());
        assert_eq!(next.step_count(), 1);
    }

    #[test]
    fn one_step_run_and_determinism() {
        let target = linear_target(3.0);
        let mut rng = SeedStream::new(2).rng();
        let init = ParticleEnsemble::from_prior(target.prior(), 20, &mut rng).unwrap();
        let a = aldi_run(&init, &target, 0.01, 0.01, &mut SeedStream::new(5).rng()).unwrap();
        assert_eq!(a.ensemble.step_count(), 1);
        let b = aldi_run(&init, &target, 0.5, 0.01, &mut SeedStream::new(5).rng()).unwrap();
        let c = aldi_run(&init, &target, 0.5, 0.01, &mut SeedStream::new(5).rng()).unwrap();
        assert_eq!(b.ensemble, c.ensemble);
        assert_eq!(b.ensemble.step_count(), 50);
    }

    #[test]
    fn gradient_and_gradient_free_drifts_agree_for_linear_maps() {
        let h = DMatrix::from_row_slice(2, 3, &[1.0, -0.5, 2.0, 0.3, 1.2, -1.0]);
        let model: Arc<dyn ForwardModel> = Arc::new(MatrixModel::new(h));
        let prior = Gaussian::new(
            DVector::from_vec(vec![0.5, -1.0, 1.0]),
            DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, 0.2, 0.0, 0.2, 0.5]),
        )
        .unwrap();
        let noise = Gaussian::zero_mean(DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.8])).unwrap();
        let target = SequentialTarget::new(prior.clone(), noise)
            .unwrap()
            .with_observation(Observation {
                y: DVector::from_vec(vec![1.0, -2.0]),
                design: design(0.0),
                model,
            })
            .unwrap();
        let ens = ParticleEnsemble::from_prior(&prior, 10, &mut SeedStream::new(8).rng()).unwrap();
        let free = drift(ens.particles(), &target, AldiVariant::GradientFree, Normalization::Population).unwrap();
        let grad = drift(ens.particles(), &target, AldiVariant::Gradient, Normalization::Population).unwrap();
        assert_relative_eq!(free, grad, epsilon = 1e-8);
    }

    #[test]
    fn bad_step_size_is_rejected() {
        let target = linear_target(3.0);
        let ens = ParticleEnsemble::new(DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0])).unwrap();
        assert!(aldi_step(&ens, &target, 0.0, &mut SeedStream::new(1).rng()).is_err());
        assert!(aldi_run(&ens, &target, 0.001, 0.01, &mut SeedStream::new(1).rng()).is_err());
    }

    #[test]
    fn unnormalized_density_matches_pointwise() {
        let target = linear_target(3.0);
        let ps = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.5]);
        let batch = target.log_density_unnormalized_batch(&ps).unwrap();
        for i in 0..3 {
            let u = DVector::from_element(1, ps[(i, 0)]);
            assert_relative_eq!(batch[i], target.log_density_unnormalized(&u).unwrap(), epsilon = 1e-12);
        }
    }
}
