//! Expected-information-gain estimators.
//!
//! Given joint samples `(u⁽ʲ⁾, y⁽ʲ⁾)` at a design, fitting a Gaussian to the
//! `y`-marginal gives an upper bound and fitting the posterior (Gaussian
//! conditional or per-sample Laplace) gives a lower bound. A closed-form
//! linear-Gaussian value and a nested Monte Carlo estimator serve as oracles.

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::aldi::{finite_difference_jacobian, SequentialTarget};
use crate::error::{Error, Result};
use crate::gaussian::{empirical_moments, sample_gaussian, EmpiricalMoments, Gaussian, GaussianConditional, GaussianDensity};
use crate::linalg::symmetrize;
use crate::linalg::Cholesky;
use crate::models::{evaluate_batch_checked, evaluate_checked, ForwardModel};

const BATCHES: usize = 10;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A Monte Carlo mean with its batch-means standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    /// Mean of per-sample contributions; standard error from 10 contiguous
    /// batch means (plain sample SE below 20 samples).
    pub fn from_contributions(c: &[f64]) -> Self {
        let n = c.len();
        let value = c.iter().sum::<f64>() / n as f64;
        if n < 2 * BATCHES {
            let var = c.iter().map(|v| (v - value).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
            return Self {
                value,
                se: (var / n as f64).sqrt(),
            };
        }
        let means: Vec<f64> = (0..BATCHES)
            .map(|b| {
                let lo = b * n / BATCHES;
                let hi = (b + 1) * n / BATCHES;
                c[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
            })
            .collect();
        let mb = means.iter().sum::<f64>() / BATCHES as f64;
        let var = means.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / (BATCHES - 1) as f64;
        Self {
            value,
            se: (var / BATCHES as f64).sqrt(),
        }
    }
}

/// Parameter samples from the current (sequential) prior together with its
/// log-density at each sample.
#[derive(Debug, Clone)]
pub struct PriorSamples {
    samples: DMatrix<f64>,
    log_prior_seq: DVector<f64>,
    log_normalizer: f64,
}

impl PriorSamples {
    /// Samples of a Gaussian prior; the density is exact.
    pub fn from_gaussian(prior: &Gaussian, samples: DMatrix<f64>) -> Result<Self> {
        check_samples(&samples, prior.dim())?;
        let density = prior.density()?;
        let log_prior_seq = DVector::from_fn(samples.nrows(), |i, _| {
            density.log_density(samples.row(i).transpose().as_slice())
        });
        Ok(Self {
            samples,
            log_prior_seq,
            log_normalizer: 0.0,
        })
    }

    /// Posterior-ensemble samples of a sequential target. The unnormalized
    /// log-density is exact; `log Z` is an importance estimate with the
    /// Gaussian fit of the samples as proposal (`n_importance` draws).
    pub fn from_target<R: Rng + ?Sized>(
        target: &SequentialTarget,
        samples: DMatrix<f64>,
        n_importance: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if target.observations().is_empty() {
            return Self::from_gaussian(target.prior(), samples);
        }
        check_samples(&samples, target.dim())?;
        let log_prior_seq = target.log_density_unnormalized_batch(&samples)?;
        let fit = crate::gaussian::sample_covariance(&samples, Default::default());
        let proposal = Gaussian::new(crate::gaussian::sample_mean(&samples), fit)?;
        let log_normalizer = estimate_log_normalizer(target, &proposal, n_importance, rng)?;
        Ok(Self {
            samples,
            log_prior_seq,
            log_normalizer,
        })
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    /// Unnormalized sequential-prior log-density at each sample.
    pub fn log_prior_seq(&self) -> &DVector<f64> {
        &self.log_prior_seq
    }

    /// Estimated `log Z` of the sequential prior (0 for a plain Gaussian prior).
    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }
}

fn check_samples(samples: &DMatrix<f64>, dim: usize) -> Result<()> {
    if samples.nrows() < 2 {
        return Err(Error::invalid("EIG estimation needs at least 2 samples"));
    }
    if samples.ncols() != dim {
        return Err(Error::DimensionMismatch {
            context: "prior samples",
            expected: dim,
            got: samples.ncols(),
        });
    }
    Ok(())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log ∫ exp(-ΣΦ) π₀` by importance sampling from `proposal`.
pub fn estimate_log_normalizer<R: Rng + ?Sized>(
    target: &SequentialTarget,
    proposal: &Gaussian,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    let draws = sample_gaussian(proposal, n.max(1), rng)?;
    let q = proposal.density()?;
    let log_target = target.log_density_unnormalized_batch(&draws)?;
    let w: Vec<f64> = (0..draws.nrows())
        .map(|i| log_target[i] - q.log_density(draws.row(i).transpose().as_slice()))
        .collect();
    Ok(log_sum_exp(&w) - (w.len() as f64).ln())
}

/// Paired `(u, y)` samples at one design with cached log-likelihoods.
#[derive(Debug, Clone)]
pub struct JointSampleSet<'a> {
    prior: &'a PriorSamples,
    design: DVector<f64>,
    samples_y: DMatrix<f64>,
    loglik: DVector<f64>,
}

impl<'a> JointSampleSet<'a> {
    pub fn design(&self) -> &DVector<f64> {
        &self.design
    }
    pub fn samples_u(&self) -> &'a DMatrix<f64> {
        &self.prior.samples
    }
    pub fn samples_y(&self) -> &DMatrix<f64> {
        &self.samples_y
    }
    /// `log π(y⁽ʲ⁾ | u⁽ʲ⁾, p)`.
    pub fn loglik(&self) -> &DVector<f64> {
        &self.loglik
    }
    pub fn prior(&self) -> &'a PriorSamples {
        self.prior
    }
    pub fn len(&self) -> usize {
        self.samples_y.nrows()
    }
    pub fn is_empty(&self) -> bool {
        self.samples_y.nrows() == 0
    }
}

/// `y⁽ʲ⁾ = G(u⁽ʲ⁾, p) + η⁽ʲ⁾` with `η ~ N(0, Γ)`.
pub fn simulate_joint<'a, R: Rng + ?Sized>(
    prior: &'a PriorSamples,
    model: &dyn ForwardModel,
    design: &DVector<f64>,
    noise: &Gaussian,
    rng: &mut R,
) -> Result<JointSampleSet<'a>> {
    let j = prior.len();
    if j < 2 {
        return Err(Error::invalid("simulate_joint needs at least 2 samples"));
    }
    if noise.dim() != model.obs_dim() {
        return Err(Error::DimensionMismatch {
            context: "noise dimension",
            expected: model.obs_dim(),
            got: noise.dim(),
        });
    }
    let g = evaluate_batch_checked(model, &prior.samples, design)?;
    let eta = sample_gaussian(noise, j, rng)?;
    let lik = GaussianDensity::new(DVector::zeros(noise.dim()), noise.covariance())?;
    let loglik = DVector::from_fn(j, |i, _| lik.log_density(eta.row(i).transpose().as_slice()));
    Ok(JointSampleSet {
        prior,
        design: design.clone(),
        samples_y: g + eta,
        loglik,
    })
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().cloned().collect()
}

/// Folds for the held-out Gaussian fits. Evaluating each sample under a fit
/// that did not see it keeps the fitting optimism (about `#params / 2J` nats)
/// from pushing the two bounds across each other.
const FOLDS: usize = 10;

struct HeldOutFit {
    rows: std::ops::Range<usize>,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    count: usize,
}

/// Mean and `1/(n-1)` covariance of `data` with each contiguous fold left out.
fn held_out_fits(data: &DMatrix<f64>) -> Result<Vec<HeldOutFit>> {
    let n = data.nrows();
    if n < 3 {
        return Err(Error::invalid(format!("held-out Gaussian fits need at least 3 samples, got {n}")));
    }
    let folds = FOLDS.min(n);
    let mean = crate::gaussian::sample_mean(data);
    let centered = crate::gaussian::center(data, &mean);
    let total_sum: DVector<f64> = centered.row_sum().transpose();
    let total_outer = centered.transpose() * &centered;
    let mut fits = Vec::with_capacity(folds);
    for f in 0..folds {
        let rows = (f * n / folds)..((f + 1) * n / folds);
        let block = centered.rows(rows.start, rows.len());
        let count = n - rows.len();
        let shift = (&total_sum - block.row_sum().transpose()) / count as f64;
        let outer = &total_outer - block.transpose() * block;
        let covariance = symmetrize(&((outer - &shift * shift.transpose() * count as f64) / (count - 1) as f64));
        fits.push(HeldOutFit {
            rows,
            mean: &mean + shift,
            covariance,
            count,
        });
    }
    Ok(fits)
}

/// Upper bound from a Gaussian fit of the `y`-marginal, evaluated out of fold.
pub fn eig_upper_gaussian(js: &JointSampleSet<'_>) -> Result<Estimate> {
    let y = js.samples_y();
    let mut c = vec![0.0; js.len()];
    for fit in held_out_fits(y)? {
        let chol = Cholesky::with_jitter(&fit.covariance, "marginal covariance of y")?;
        let marginal = GaussianDensity::from_factor(fit.mean, chol);
        for i in fit.rows {
            c[i] = js.loglik[i] - marginal.log_density(&row(y, i));
        }
    }
    Ok(Estimate::from_contributions(&c))
}

/// Lower bound from the Gaussian conditional of the joint fit, evaluated out
/// of fold, including the estimated sequential-prior normalizer.
pub fn eig_lower_gaussian(js: &JointSampleSet<'_>) -> Result<Estimate> {
    let u = js.samples_u();
    let y = js.samples_y();
    let (d, k) = (u.ncols(), y.ncols());
    let mut joint = DMatrix::zeros(js.len(), d + k);
    joint.columns_mut(0, d).copy_from(u);
    joint.columns_mut(d, k).copy_from(y);
    let log_z = js.prior.log_normalizer;
    let mut c = vec![0.0; js.len()];
    for fit in held_out_fits(&joint)? {
        let moments = EmpiricalMoments {
            mean_u: fit.mean.rows(0, d).into_owned(),
            mean_y: fit.mean.rows(d, k).into_owned(),
            cov_u: fit.covariance.view((0, 0), (d, d)).into_owned(),
            cov_y: fit.covariance.view((d, d), (k, k)).into_owned(),
            cov_uy: fit.covariance.view((0, d), (d, k)).into_owned(),
            sample_count: fit.count,
        };
        let cond = GaussianConditional::new(&moments)?;
        let density = cond.density()?;
        for i in fit.rows {
            c[i] = density.log_density(&row(u, i), &row(y, i)) - js.prior.log_prior_seq[i] + log_z;
        }
    }
    Ok(Estimate::from_contributions(&c))
}

/// Gauss–Newton / Levenberg settings for the per-sample Laplace fits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplaceOptions {
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub initial_damping: f64,
    /// Relative central-difference step for Jacobians.
    pub fd_step: f64,
}

impl Default for LaplaceOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            step_tolerance: 1e-8,
            initial_damping: 1e-3,
            fd_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplaceEstimate {
    pub estimate: Estimate,
    /// Samples whose MAP search failed and used the Gaussian conditional.
    pub fallback_count: usize,
}

/// The Laplace fit `N(u*, H⁻¹)` of one posterior.
#[derive(Debug, Clone)]
pub struct LaplaceFit {
    pub map: DVector<f64>,
    /// Gauss–Newton Hessian `JᵀJ` of the whitened residual at the MAP.
    pub hessian: DMatrix<f64>,
    pub iterations: usize,
}

/// Whitened stacked residual `r(u)` with `½‖r‖²` the negative log posterior
/// (up to constants) for a new observation `y` at `design` on top of `target`.
struct Residual<'t> {
    target: &'t SequentialTarget,
    model: &'t dyn ForwardModel,
    design: &'t DVector<f64>,
    y: &'t DVector<f64>,
    fd_step: f64,
}

impl Residual<'_> {
    fn whiten(&self, r: DVector<f64>) -> DVector<f64> {
        let mut r = r;
        self.target.noise_factor().solve_lower_mut(r.as_mut_slice());
        r
    }

    fn eval(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        let mut parts = Vec::new();
        parts.push(self.whiten(self.y - evaluate_checked(self.model, u, self.design)?));
        for obs in self.target.observations() {
            parts.push(self.whiten(&obs.y - evaluate_checked(obs.model.as_ref(), u, &obs.design)?));
        }
        let mut p = u - self.target.prior().mean();
        self.target.prior_factor().solve_lower_mut(p.as_mut_slice());
        parts.push(p);
        Ok(stack(&parts))
    }

    fn jacobian(&self, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        let d = u.len();
        let whiten_jac = |j: DMatrix<f64>| {
            let mut j = -j;
            for mut col in j.column_iter_mut() {
                self.target.noise_factor().solve_lower_mut(col.as_mut_slice());
            }
            j
        };
        let mut blocks = vec![whiten_jac(finite_difference_jacobian(self.model, u, self.design, self.fd_step)?)];
        for obs in self.target.observations() {
            blocks.push(whiten_jac(finite_difference_jacobian(
                obs.model.as_ref(),
                u,
                &obs.design,
                self.fd_step,
            )?));
        }
        let mut prior = DMatrix::identity(d, d);
        for mut col in prior.column_iter_mut() {
            self.target.prior_factor().solve_lower_mut(col.as_mut_slice());
        }
        blocks.push(prior);
        let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
        let mut out = DMatrix::zeros(rows, d);
        let mut r0 = 0;
        for b in blocks {
            out.view_mut((r0, 0), (b.nrows(), d)).copy_from(&b);
            r0 += b.nrows();
        }
        Ok(out)
    }
}

fn stack(parts: &[DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(
        parts.iter().map(|p| p.len()).sum(),
        parts.iter().flat_map(|p| p.iter().cloned()),
    )
}

/// Levenberg-damped Gauss–Newton search for the MAP of
/// `½‖y - G(u,p)‖²_Γ + ΣΦ_ℓ(u) - log π₀(u)`. Returns `None` when the search
/// does not converge within the iteration budget.
pub fn laplace_fit(
    target: &SequentialTarget,
    model: &dyn ForwardModel,
    design: &DVector<f64>,
    y: &DVector<f64>,
    start: &DVector<f64>,
    opts: &LaplaceOptions,
) -> Result<Option<LaplaceFit>> {
    let res = Residual {
        target,
        model,
        design,
        y,
        fd_step: opts.fd_step,
    };
    let d = start.len();
    let mut u = start.clone();
    let mut r = res.eval(&u)?;
    let mut cost = 0.5 * r.norm_squared();
    let mut lambda = opts.initial_damping;
    let mut jac = res.jacobian(&u)?;
    for it in 1..=opts.max_iterations {
        let h = jac.tr_mul(&jac);
        let g = jac.tr_mul(&r);
        let mut damped = h.clone();
        for i in 0..d {
            damped[(i, i)] += lambda * (1.0 + h[(i, i)]);
        }
        let chol = match Cholesky::new(&damped, "Gauss-Newton system") {
            Ok(c) => c,
            Err(_) => return Ok(None),
        };
        let step = -chol.solve(&g);
        let step_norm = step.norm();
        let trial = &u + &step;
        let accepted = match res.eval(&trial) {
            Ok(r_new) => {
                let c_new = 0.5 * r_new.norm_squared();
                if c_new <= cost {
                    u = trial;
                    r = r_new;
                    cost = c_new;
                    true
                } else {
                    false
                }
            }
            Err(Error::NonFinite(_)) => false,
            Err(e) => return Err(e),
        };
        if step_norm < opts.step_tolerance * (1.0 + u.norm()) {
            let jac = if accepted { res.jacobian(&u)? } else { jac };
            return Ok(Some(LaplaceFit {
                map: u,
                hessian: jac.tr_mul(&jac),
                iterations: it,
            }));
        }
        if accepted {
            lambda = (lambda / 10.0).max(1e-12);
            jac = res.jacobian(&u)?;
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                return Ok(None);
            }
        }
    }
    Ok(None)
}

/// Lower bound from per-sample Laplace approximations of the posterior.
pub fn eig_lower_laplace(
    js: &JointSampleSet<'_>,
    model: &dyn ForwardModel,
    target: &SequentialTarget,
) -> Result<LaplaceEstimate> {
    eig_lower_laplace_with(js, model, target, &LaplaceOptions::default())
}

pub fn eig_lower_laplace_with(
    js: &JointSampleSet<'_>,
    model: &dyn ForwardModel,
    target: &SequentialTarget,
    opts: &LaplaceOptions,
) -> Result<LaplaceEstimate> {
    let moments = empirical_moments(js.samples_u(), js.samples_y())?;
    let cond = GaussianConditional::new(&moments)?;
    let cond_density = cond.density().ok();
    let u = js.samples_u();
    let y = js.samples_y();
    let d = u.ncols();
    let log_z = js.prior.log_normalizer;
    let mut fallback_count = 0;
    let mut c = Vec::with_capacity(js.len());
    for i in 0..js.len() {
        let ui = row(u, i);
        let yi = DVector::from_vec(row(y, i));
        let start = cond.mean_at(yi.as_slice());
        let fit = laplace_fit(target, model, js.design(), &yi, &start, opts)?;
        let log_post = match fit.and_then(|f| Cholesky::new(&f.hessian, "Laplace Hessian").ok().map(|h| (f, h))) {
            Some((f, h)) => {
                let diff = DVector::from_vec(ui.clone()) - &f.map;
                let q = (&f.hessian * &diff).dot(&diff);
                -0.5 * q + 0.5 * h.log_det() - 0.5 * d as f64 * LN_2PI
            }
            None => {
                fallback_count += 1;
                match &cond_density {
                    Some(cd) => cd.log_density(&ui, yi.as_slice()),
                    None => {
                        return Err(Error::Degenerate {
                            context: "Laplace fallback: conditional covariance".into(),
                            pivot: 0.0,
                        })
                    }
                }
            }
        };
        c.push(log_post - js.prior.log_prior_seq[i] + log_z);
    }
    if fallback_count > 0 {
        info!("Laplace lower bound: {fallback_count} of {} samples fell back to the Gaussian conditional", js.len());
    }
    Ok(LaplaceEstimate {
        estimate: Estimate::from_contributions(&c),
        fallback_count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LowerMethod {
    Gaussian,
    Laplace,
}

/// Upper and lower EIG bounds at one design.
#[derive(Debug, Clone, PartialEq)]
pub struct EigBounds {
    pub design: DVector<f64>,
    pub lower: f64,
    pub upper: f64,
    pub lower_method: LowerMethod,
    pub gap: f64,
    pub sample_count: usize,
    pub se_lower: f64,
    pub se_upper: f64,
    pub lb_gauss: Estimate,
    pub lb_laplace: Option<Estimate>,
    pub laplace_fallback_count: usize,
    /// The sequential-prior `log Z` folded into the lower bounds.
    pub log_normalizer: f64,
    /// The gap stayed above tolerance after every available refinement.
    pub unresolved: bool,
}

impl EigBounds {
    /// The value passed on to the design optimizer (the upper bound).
    pub fn estimate(&self) -> f64 {
        self.upper
    }

    pub fn combined_se(&self) -> f64 {
        self.se_lower.hypot(self.se_upper)
    }

    /// Allowed ordering violation from Monte Carlo noise.
    pub fn mc_slack(&self) -> f64 {
        3.0 * self.combined_se()
    }

    pub fn ordered(&self) -> bool {
        self.upper >= self.lower - self.mc_slack()
    }

    /// Lower bound with the estimated normalizer left out.
    pub fn lower_without_normalizer(&self) -> f64 {
        self.lower - self.log_normalizer
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundOptions {
    pub delta: f64,
    /// Allow the Laplace refinement when the gap exceeds `delta`.
    pub laplace: bool,
    pub laplace_options: LaplaceOptions,
}

impl Default for BoundOptions {
    fn default() -> Self {
        Self {
            delta: 0.1,
            laplace: true,
            laplace_options: LaplaceOptions::default(),
        }
    }
}

/// Gaussian bounds, refined with the Laplace lower bound when the gap
/// exceeds `delta`.
pub fn estimate_bounds(
    js: &JointSampleSet<'_>,
    model: &dyn ForwardModel,
    target: &SequentialTarget,
    delta: f64,
) -> Result<EigBounds> {
    let opts = BoundOptions {
        delta,
        ..BoundOptions::default()
    };
    estimate_bounds_with(js, model, target, &opts)
}

pub fn estimate_bounds_with(
    js: &JointSampleSet<'_>,
    model: &dyn ForwardModel,
    target: &SequentialTarget,
    opts: &BoundOptions,
) -> Result<EigBounds> {
    if !(opts.delta > 0.0) {
        return Err(Error::invalid(format!("bound tolerance must be positive, got {}", opts.delta)));
    }
    let ub = eig_upper_gaussian(js)?;
    let lb = eig_lower_gaussian(js)?;
    let mut bounds = EigBounds {
        design: js.design.clone(),
        lower: lb.value,
        upper: ub.value,
        lower_method: LowerMethod::Gaussian,
        gap: ub.value - lb.value,
        sample_count: js.len(),
        se_lower: lb.se,
        se_upper: ub.se,
        lb_gauss: lb,
        lb_laplace: None,
        laplace_fallback_count: 0,
        log_normalizer: js.prior.log_normalizer,
        unresolved: false,
    };
    if (ub.value - lb.value).abs() <= opts.delta {
        return Ok(bounds);
    }
    if opts.laplace {
        let lap = eig_lower_laplace_with(js, model, target, &opts.laplace_options)?;
        bounds.lb_laplace = Some(lap.estimate);
        bounds.laplace_fallback_count = lap.fallback_count;
        if lap.estimate.value > bounds.lower {
            bounds.lower = lap.estimate.value;
            bounds.se_lower = lap.estimate.se;
            bounds.lower_method = LowerMethod::Laplace;
        }
        bounds.gap = bounds.upper - bounds.lower;
    }
    if bounds.gap.abs() > opts.delta {
        bounds.unresolved = true;
        warn!(
            "EIG bounds at design {:?} differ by {:.4} > {}; a richer joint approximation would be needed",
            js.design.as_slice(),
            bounds.gap,
            opts.delta
        );
    }
    Ok(bounds)
}

/// `½ log det(I + Γ⁻¹ A Σ₀ Aᵀ)`, the exact EIG of a linear-Gaussian model.
pub fn eig_exact_linear(a: &DMatrix<f64>, prior: &Gaussian, noise_cov: &DMatrix<f64>) -> Result<f64> {
    if a.ncols() != prior.dim() || a.nrows() != noise_cov.nrows() {
        return Err(Error::DimensionMismatch {
            context: "eig_exact_linear",
            expected: prior.dim(),
            got: a.ncols(),
        });
    }
    let noise = Cholesky::new(noise_cov, "noise covariance")?;
    let mut m = a * prior.covariance() * a.transpose();
    for mut col in m.column_iter_mut() {
        noise.solve_lower_mut(col.as_mut_slice());
    }
    let mut m = m.transpose();
    for mut col in m.column_iter_mut() {
        noise.solve_lower_mut(col.as_mut_slice());
    }
    let k = m.nrows();
    let m = crate::linalg::symmetrize(&(m + DMatrix::identity(k, k)));
    Ok(0.5 * Cholesky::new(&m, "I + Γ⁻¹AΣAᵀ")?.log_det())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NestedMcOptions {
    pub n_outer: usize,
    pub n_inner: usize,
}

/// Double-loop Monte Carlo EIG. Each of the 10 outer batches gets its own
/// fresh inner prior sample, so the batch-means standard error is honest.
pub fn eig_nested_mc<R: Rng + ?Sized>(
    prior: &Gaussian,
    model: &dyn ForwardModel,
    design: &DVector<f64>,
    noise: &Gaussian,
    opts: NestedMcOptions,
    rng: &mut R,
) -> Result<Estimate> {
    if opts.n_outer == 0 || opts.n_inner == 0 {
        return Err(Error::invalid("nested Monte Carlo needs n_outer, n_inner >= 1"));
    }
    let noise_chol = Cholesky::new(noise.covariance(), "noise covariance")?;
    let k = noise.dim();
    let log_norm = -0.5 * (k as f64 * LN_2PI + noise_chol.log_det());
    let whiten = |m: DMatrix<f64>| -> DMatrix<f64> {
        let mut t = m.transpose();
        for mut col in t.column_iter_mut() {
            noise_chol.solve_lower_mut(col.as_mut_slice());
        }
        t // k × n, whitened columns
    };
    let batches = BATCHES.min(opts.n_outer);
    let mut contributions = Vec::with_capacity(opts.n_outer);
    let mut scratch = vec![0.0; opts.n_inner];
    for b in 0..batches {
        let lo = b * opts.n_outer / batches;
        let hi = (b + 1) * opts.n_outer / batches;
        let inner = sample_gaussian(prior, opts.n_inner, rng)?;
        let g_inner = whiten(evaluate_batch_checked(model, &inner, design)?);
        let outer = sample_gaussian(prior, hi - lo, rng)?;
        let g_outer = evaluate_batch_checked(model, &outer, design)?;
        let eta = sample_gaussian(noise, hi - lo, rng)?;
        let y = whiten(&g_outer + &eta);
        let eta_w = whiten(eta);
        for i in 0..(hi - lo) {
            let yi = y.column(i);
            let loglik = log_norm - 0.5 * eta_w.column(i).norm_squared();
            for (m, s) in scratch.iter_mut().enumerate() {
                *s = -0.5 * (yi - g_inner.column(m)).norm_squared();
            }
            let evidence = log_norm + log_sum_exp(&scratch) - (opts.n_inner as f64).ln();
            contributions.push(loglik - evidence);
        }
    }
    Ok(Estimate::from_contributions(&contributions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{design, LinearModel, LinearModelConfig, NearLinearModel, NearLinearModelConfig};
    use crate::rng::SeedStream;
    use approx::assert_relative_eq;

    fn linear() -> LinearModel {
        LinearModel::new(LinearModelConfig::default()).unwrap()
    }

    fn unit_noise() -> Gaussian {
        Gaussian::scalar(0.0, 1.0).unwrap()
    }

    fn prior_samples(prior: &Gaussian, j: usize, seed: u64) -> PriorSamples {
        let u = sample_gaussian(prior, j, &mut SeedStream::new(seed).rng()).unwrap();
        PriorSamples::from_gaussian(prior, u).unwrap()
    }

    #[test]
    fn exact_linear_examples() {
        let prior = Gaussian::scalar(2.0, 2.0).unwrap();
        let one = DMatrix::identity(1, 1);
        assert_eq!(eig_exact_linear(&DMatrix::zeros(1, 1), &prior, &one).unwrap(), 0.0);
        let v = eig_exact_linear(&DMatrix::from_element(1, 1, 3.0), &prior, &one).unwrap();
        assert_relative_eq!(v, 0.5 * 19f64.ln(), max_relative = 1e-14);

        let a = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 0.5]);
        let p2 = Gaussian::new(DVector::zeros(2), DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0]))).unwrap();
        let both = eig_exact_linear(&a, &p2, &DMatrix::identity(2, 2)).unwrap();
        let p4 = Gaussian::scalar(0.0, 4.0).unwrap();
        let second = eig_exact_linear(&DMatrix::from_element(1, 1, 0.5), &p4, &one).unwrap();
        assert_relative_eq!(both, v + second, max_relative = 1e-13);
    }

    #[test]
    fn batch_standard_error() {
        let e = Estimate::from_contributions(&[1.0; 40]);
        assert_eq!((e.value, e.se), (1.0, 0.0));
        let e = Estimate::from_contributions(&[0.0, 2.0]);
        assert_eq!(e.value, 1.0);
        assert_relative_eq!(e.se, 1.0, max_relative = 1e-14);
    }

    #[test]
    fn vanishing_noise_reproduces_the_model() {
        let prior = Gaussian::scalar(2.0, 2.0).unwrap();
        let samples = prior_samples(&prior, 50, 1);
        let noise = Gaussian::scalar(0.0, 1e-20).unwrap();
        let js = simulate_joint(&samples, &linear(), &design(0.5), &noise, &mut SeedStream::new(2).rng()).unwrap();
        let a = LinearModelConfig::default().operator(0.5);
        for i in 0..50 {
            assert!((js.samples_y()[(i, 0)] - a * samples.samples()[(i, 0)]).abs() < 1e-9);
        }
        let again = simulate_joint(&samples, &linear(), &design(0.5), &noise, &mut SeedStream::new(2).rng()).unwrap();
        assert_eq!(js.samples_y(), again.samples_y());
    }

    #[test]
    fn linear_bounds_match_closed_form() {
        let prior = Gaussian::scalar(2.0, 2.0).unwrap();
        let samples = prior_samples(&prior, 100_000, 3);
        let js = simulate_joint(&samples, &linear(), &design(1.0), &unit_noise(), &mut SeedStream::new(4).rng()).unwrap();
        let exact = 0.5 * 19f64.ln();
        let ub = eig_upper_gaussian(&js).unwrap();
        let lb = eig_lower_gaussian(&js).unwrap();
        assert!((ub.value - exact).abs() < 0.05, "{ub:?}");
        assert!((lb.value - exact).abs() < 0.05, "{lb:?}");

        let target = SequentialTarget::new(prior.clone(), unit_noise()).unwrap();
        let b = estimate_bounds(&js, &linear(), &target, 0.1).unwrap();
        assert!(b.lb_laplace.is_none());
        assert_eq!(b.lower_method, LowerMethod::Gaussian);

        let wide = estimate_bounds(&js, &linear(), &target, f64::INFINITY).unwrap();
        assert_eq!((wide.lower, wide.upper), (lb.value, ub.value));
    }

    #[test]
    fn uninformative_design_gives_zero() {
        // A(p) = -2(p-1)^2 + 2 vanishes at p = 0
        let model = LinearModel::new(LinearModelConfig { c: 2.0, d_shift: 2.0 }).unwrap();
        let prior = Gaussian::scalar(2.0, 2.0).unwrap();
        let samples = prior_samples(&prior, 20_000, 5);
        let js = simulate_joint(&samples, &model, &design(0.0), &unit_noise(), &mut SeedStream::new(6).rng()).unwrap();
        for e in [eig_upper_gaussian(&js).unwrap(), eig_lower_gaussian(&js).unwrap()] {
            assert!(e.value.abs() <= 3.0 * e.se + 1e-3, "{e:?}");
        }
        let nmc = eig_nested_mc(
            &prior,
            &model,
            &design(0.0),
            &unit_noise(),
            NestedMcOptions { n_outer: 2_000, n_inner: 200 },
            &mut SeedStream::new(7).rng(),
        )
        .unwrap();
        assert!(nmc.value.abs() < 1e-12, "{nmc:?}");
    }

    #[test]
    fn laplace_is_exact_on_quadratic_potentials() {
        let prior = Gaussian::scalar(2.0, 2.0).unwrap();
        let target = SequentialTarget::new(prior.clone(), unit_noise()).unwrap();
        let a = DMatrix::from_element(1, 1, 3.0);
        let y = DVector::from_element(1, 4.0);
        let fit = laplace_fit(&target, &linear(), &design(1.0), &y, &DVector::zeros(1), &LaplaceOptions::default())
            .unwrap()
            .unwrap();
        let exact = crate::sequential::linear_gaussian_update(&prior, &a, &y, &DMatrix::identity(1, 1)).unwrap();
        assert_relative_eq!(fit.map[0], exact.mean()[0], epsilon = 1e-6);
        assert_relative_eq!(1.0 / fit.hessian[(0, 0)], exact.covariance()[(0, 0)], epsilon = 1e-6);
        // with no observations the prior term alone gives Σ₀⁻¹
        let h0 = 1.0 / prior.covariance()[(0, 0)];
        assert_relative_eq!(fit.hessian[(0, 0)] - 9.0, h0, epsilon = 1e-6);

        let samples = prior_samples(&prior, 20_000, 8);
        let js = simulate_joint(&samples, &linear(), &design(1.0), &unit_noise(), &mut SeedStream::new(9).rng()).unwrap();
        let lap = eig_lower_laplace(&js, &linear(), &target).unwrap();
        let gauss = eig_lower_gaussian(&js).unwrap();
        assert_eq!(lap.fallback_count, 0);
        assert!((lap.estimate.value - gauss.value).abs() <= 3.0 * lap.estimate.se.hypot(gauss.se));
        assert!((lap.estimate.value - 0.5 * 19f64.ln()).abs() < 0.05);
    }

    #[test]
    fn large_gap_triggers_laplace() {
        let model = NearLinearModel::new(NearLinearModelConfig { c: 2.0, d_shift: 3.0, tau: 1.5 }).unwrap();
        let prior = Gaussian::scalar(2.0, 1.0).unwrap();
        let samples = prior_samples(&prior, 100, 10);
        let target = SequentialTarget::new(prior, unit_noise()).unwrap();
        let js = simulate_joint(&samples, &model, &design(1.0), &unit_noise(), &mut SeedStream::new(11).rng()).unwrap();
        let b = estimate_bounds(&js, &model, &target, 0.01).unwrap();
        assert!(b.lb_laplace.is_some());
        assert_eq!(b.gap, b.upper - b.lower);
        assert_eq!(b.unresolved, b.gap.abs() > 0.01);
    }

    #[test]
    fn held_out_fits_match_direct_fits() {
        let data = DMatrix::from_fn(30, 2, |i, j| ((i * 7 + j * 3) % 11) as f64 + 0.1 * j as f64);
        for fit in held_out_fits(&data).unwrap() {
            let keep: Vec<usize> = (0..30).filter(|i| !fit.rows.contains(i)).collect();
            let train = data.select_rows(&keep);
            let mean = crate::gaussian::sample_mean(&train);
            let cov = crate::gaussian::sample_covariance(&train, Default::default());
            assert_relative_eq!(fit.mean, mean, epsilon = 1e-12);
            assert_relative_eq!(fit.covariance, cov, epsilon = 1e-12);
        }
    }
}
