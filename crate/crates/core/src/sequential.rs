//! The sequential design loop: estimate EIG on the current posterior
//! ensemble, optimize the design with EKI, observe, and resample with ALDI.

use std::sync::Arc;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::aldi::{aldi_run_with, AldiOptions, Observation, ParticleEnsemble, SequentialTarget};
use crate::eig::{eig_upper_gaussian, estimate_bounds_with, simulate_joint, BoundOptions, EigBounds, PriorSamples};
use crate::eki::{eki_optimize, DesignEnsemble, EkiConfig, EkiResult};
use crate::error::{Error, Result};
use crate::gaussian::{sample_gaussian, Gaussian, Normalization};
use crate::linalg::Cholesky;
use crate::models::{evaluate_checked, ForwardModel};
use crate::rng::SeedStream;

/// Prior, noise and the forward map used at each step (the last entry
/// repeats when there are fewer models than steps).
#[derive(Debug, Clone)]
pub struct SequentialProblem {
    pub prior: Gaussian,
    pub noise: Gaussian,
    pub models: Vec<Arc<dyn ForwardModel>>,
}

impl SequentialProblem {
    pub fn model(&self, step: usize) -> Result<&Arc<dyn ForwardModel>> {
        self.models
            .get(step.min(self.models.len().saturating_sub(1)))
            .ok_or_else(|| Error::invalid("sequential problem has no forward models"))
    }
}

/// The parameter that generates synthetic observations. Kept apart from the
/// state the estimators see.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    u: DVector<f64>,
}

impl GroundTruth {
    pub fn new(u: DVector<f64>) -> Self {
        Self { u }
    }

    pub fn from_prior(prior: &Gaussian, seed: u64) -> Result<Self> {
        let mut rng = SeedStream::new(seed).rng_for("ground-truth");
        let draw = sample_gaussian(prior, 1, &mut rng)?;
        Ok(Self {
            u: draw.row(0).transpose(),
        })
    }

    pub fn value(&self) -> &DVector<f64> {
        &self.u
    }

    /// `y† = G(u†, p†) + η` with fresh noise.
    pub fn observe<R: Rng + ?Sized>(
        &self,
        model: &dyn ForwardModel,
        design: &DVector<f64>,
        noise: &Gaussian,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        if design.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observed design".into()));
        }
        let g = evaluate_checked(model, &self.u, design)?;
        let eta = sample_gaussian(noise, 1, rng)?;
        Ok(g + eta.row(0).transpose())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignSelection {
    /// Member of the final EKI ensemble with the largest EIG estimate.
    #[default]
    Argmax,
    /// Mean of the final EKI ensemble.
    Mean,
}

/// How the loss-transform constant `c` is chosen at each step.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CShift {
    Fixed { value: f64 },
    /// `factor × max EIG` over the initial design ensemble, at least
    /// `max EIG + margin`. Raised and the EKI run restarted when a later
    /// estimate exceeds it.
    InitialMax { factor: f64, margin: f64 },
}

#[derive(Debug, Clone)]
pub struct SequentialConfig {
    pub n_steps: usize,
    pub ensemble_size: usize,
    pub aldi_dt: f64,
    pub aldi_t_end: f64,
    pub aldi: AldiOptions,
    pub eki: EkiConfig,
    pub eki_ensemble_size: usize,
    /// Initial EKI designs are drawn uniformly from `[lower, upper]` per coordinate.
    pub design_lower: DVector<f64>,
    pub design_upper: DVector<f64>,
    pub c_shift: CShift,
    pub bounds: BoundOptions,
    pub selection: DesignSelection,
    /// Start each step's EKI from the previous final ensemble.
    pub warm_start: bool,
    /// Proposal draws for the sequential-prior normalizer.
    pub n_importance: usize,
}

impl SequentialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 || self.ensemble_size < 2 || self.eki_ensemble_size < 1 {
            return Err(Error::invalid("need n_steps >= 1, ensemble_size >= 2, eki_ensemble_size >= 1"));
        }
        if self.design_lower.len() != self.design_upper.len()
            || self.design_lower.iter().zip(self.design_upper.iter()).any(|(a, b)| !(a <= b))
        {
            return Err(Error::invalid("design box needs lower <= upper in every coordinate"));
        }
        if !(self.aldi_dt > 0.0) || !(self.aldi_t_end >= self.aldi_dt) {
            return Err(Error::invalid("ALDI needs 0 < dt <= t_end"));
        }
        self.eki.validate()
    }
}

/// What the estimators may read: the posterior ensemble, the target and
/// the history. The ground truth is not part of it.
#[derive(Debug, Clone)]
pub struct SequentialState {
    pub step: usize,
    pub ensemble: ParticleEnsemble,
    pub target: SequentialTarget,
    pub history: Vec<StepRecord>,
}

/// Everything recorded about one design step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    /// 1-based step index.
    pub step: usize,
    pub design: DVector<f64>,
    pub observation: DVector<f64>,
    /// Bounds at the chosen design.
    pub bounds: EigBounds,
    /// Bounds at every final EKI member, in ensemble order.
    pub particle_bounds: Vec<EigBounds>,
    pub c_shift: f64,
    pub eki: EkiResult,
    pub posterior_mean: DVector<f64>,
    pub posterior_cov_trace: f64,
    pub posterior_cov: DMatrix<f64>,
    pub aldi_stationary: bool,
}

/// Index of the largest value; the first one wins ties.
pub fn select_design(estimates: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in estimates.iter().enumerate() {
        match best {
            Some(b) if estimates[b] >= *v => {}
            _ if v.is_nan() => {}
            _ => best = Some(i),
        }
    }
    best
}

impl SequentialState {
    pub fn initial<R: Rng + ?Sized>(problem: &SequentialProblem, ensemble_size: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            step: 0,
            ensemble: ParticleEnsemble::from_prior(&problem.prior, ensemble_size, rng)?,
            target: SequentialTarget::new(problem.prior.clone(), problem.noise.clone())?,
            history: Vec::new(),
        })
    }

    /// Sequential-prior samples with log-densities for the EIG estimators.
    pub fn prior_samples(&self, n_importance: usize, seeds: &SeedStream) -> Result<PriorSamples> {
        let mut rng = seeds.rng_for("normalizer");
        PriorSamples::from_target(&self.target, self.ensemble.particles().clone(), n_importance, &mut rng)
    }
}

fn uniform_designs<R: Rng + ?Sized>(n: usize, lo: &DVector<f64>, hi: &DVector<f64>, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(n, lo.len(), |_, c| lo[c] + (hi[c] - lo[c]) * rng.random::<f64>())
}

/// Upper-bound EIG estimates for every design row with one shared joint
/// sample noise realization.
pub fn eig_upper_for_designs(
    prior: &PriorSamples,
    model: &dyn ForwardModel,
    noise: &Gaussian,
    designs: &DMatrix<f64>,
    seed: &SeedStream,
) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(designs.nrows());
    for i in 0..designs.nrows() {
        let mut rng = seed.rng();
        let js = simulate_joint(prior, model, &designs.row(i).transpose(), noise, &mut rng)?;
        out[i] = eig_upper_gaussian(&js)?.value;
    }
    Ok(out)
}

/// Full bounds (with the Laplace refinement when needed) at every design row,
/// with a shared seed.
pub fn bounds_for_designs(
    prior: &PriorSamples,
    model: &dyn ForwardModel,
    target: &SequentialTarget,
    designs: &DMatrix<f64>,
    opts: &BoundOptions,
    seed: &SeedStream,
) -> Result<Vec<EigBounds>> {
    (0..designs.nrows())
        .map(|i| {
            let mut rng = seed.rng();
            let js = simulate_joint(prior, model, &designs.row(i).transpose(), target.noise(), &mut rng)?;
            estimate_bounds_with(&js, model, target, opts)
        })
        .collect()
}

fn initial_c_shift(rule: CShift, initial_eigs: &DVector<f64>) -> f64 {
    match rule {
        CShift::Fixed { value } => value,
        CShift::InitialMax { factor, margin } => {
            let m = initial_eigs.max();
            (factor * m).max(m + margin)
        }
    }
}

/// Run EKI at one step, raising `c` and restarting (up to 8 times) when an
/// estimate leaves the loss-transform domain under the adaptive rule.
fn optimize_step(
    init: &DesignEnsemble,
    prior: &PriorSamples,
    model: &dyn ForwardModel,
    noise: &Gaussian,
    cfg: &SequentialConfig,
    seeds: &SeedStream,
) -> Result<(EkiResult, f64)> {
    let eki_seeds = seeds.child("eki");
    let initial = eig_upper_for_designs(prior, model, noise, &init.designs, &eki_seeds.indexed("step", 0))?;
    let mut c = initial_c_shift(cfg.c_shift, &initial);
    for attempt in 0..=8 {
        let eki_cfg = EkiConfig {
            c_shift: c,
            ..cfg.eki.clone()
        };
        let res = eki_optimize(
            init,
            |p, seed| eig_upper_for_designs(prior, model, noise, p, seed),
            &eki_cfg,
            &eki_seeds,
        );
        match res {
            Err(Error::LossDomain { eig, .. }) if matches!(cfg.c_shift, CShift::InitialMax { .. }) && attempt < 8 => {
                let factor = match cfg.c_shift {
                    CShift::InitialMax { factor, .. } => factor,
                    CShift::Fixed { .. } => unreachable!(),
                };
                let raised = (factor * eig).max(c + (eig - c).abs() + 0.1);
                warn!("EIG estimate {eig:.4} reached c = {c:.4}; restarting EKI with c = {raised:.4}");
                c = raised;
            }
            other => return other.map(|r| (r, c)),
        }
    }
    unreachable!("loop returns on its last attempt")
}

/// The complete sequential run.
#[derive(Debug, Clone)]
pub struct SequentialRun {
    pub state: SequentialState,
    pub ground_truth: GroundTruth,
}

/// Run `cfg.n_steps` design steps from the prior.
pub fn run_sequential(
    problem: &SequentialProblem,
    cfg: &SequentialConfig,
    truth: &GroundTruth,
    seeds: &SeedStream,
) -> Result<SequentialRun> {
    cfg.validate()?;
    let mut state = SequentialState::initial(problem, cfg.ensemble_size, &mut seeds.rng_for("initial-ensemble"))?;
    let mut previous_designs: Option<DMatrix<f64>> = None;
    for n in 0..cfg.n_steps {
        let step_seeds = seeds.indexed("step", n as u64);
        let record = advance(&mut state, problem, cfg, truth, &step_seeds, previous_designs.as_ref())?;
        previous_designs = Some(record.eki.ensemble.designs.clone());
        info!(
            "step {}: design {:?}, EIG in [{:.4}, {:.4}], posterior trace {:.4e}",
            record.step,
            record.design.as_slice(),
            record.bounds.lower,
            record.bounds.upper,
            record.posterior_cov_trace
        );
        state.history.push(record);
    }
    Ok(SequentialRun {
        state,
        ground_truth: truth.clone(),
    })
}

/// One design step; `state` gains the new observation and posterior ensemble.
pub fn advance(
    state: &mut SequentialState,
    problem: &SequentialProblem,
    cfg: &SequentialConfig,
    truth: &GroundTruth,
    seeds: &SeedStream,
    previous_designs: Option<&DMatrix<f64>>,
) -> Result<StepRecord> {
    let step = state.step + 1;
    let model = problem.model(state.step)?.clone();
    let prior = state
        .prior_samples(cfg.n_importance, seeds)
        .map_err(|e| e.in_stage(step, "prior samples"))?;

    let init_designs = match (cfg.warm_start, previous_designs) {
        (true, Some(p)) => p.clone(),
        _ => uniform_designs(
            cfg.eki_ensemble_size,
            &cfg.design_lower,
            &cfg.design_upper,
            &mut seeds.rng_for("initial-designs"),
        ),
    };
    let init = DesignEnsemble::new(init_designs).map_err(|e| e.in_stage(step, "EKI init"))?;
    let (eki, c_shift) = optimize_step(&init, &prior, model.as_ref(), &problem.noise, cfg, seeds)
        .map_err(|e| e.in_stage(step, "EKI"))?;

    let particle_bounds = bounds_for_designs(
        &prior,
        model.as_ref(),
        &state.target,
        &eki.ensemble.designs,
        &cfg.bounds,
        &seeds.child("selection"),
    )
    .map_err(|e| e.in_stage(step, "bounds"))?;
    let (design, bounds) = match cfg.selection {
        DesignSelection::Argmax => {
            let ub: Vec<f64> = particle_bounds.iter().map(|b| b.estimate()).collect();
            let i = select_design(&ub).ok_or_else(|| Error::NonFinite("EIG estimates".into()).in_stage(step, "select"))?;
            (eki.ensemble.design(i), particle_bounds[i].clone())
        }
        DesignSelection::Mean => {
            let mean = DMatrix::from_row_slice(1, eki.ensemble.dim(), eki.ensemble.mean().as_slice());
            let b = bounds_for_designs(&prior, model.as_ref(), &state.target, &mean, &cfg.bounds, &seeds.child("selection"))
                .map_err(|e| e.in_stage(step, "bounds"))?;
            (eki.ensemble.mean(), b[0].clone())
        }
    };

    let y = truth
        .observe(model.as_ref(), &design, &problem.noise, &mut seeds.rng_for("observe"))
        .map_err(|e| e.in_stage(step, "observe"))?;
    state
        .target
        .push(Observation {
            y: y.clone(),
            design: design.clone(),
            model: model.clone(),
        })
        .map_err(|e| e.in_stage(step, "target"))?;
    let run = aldi_run_with(
        &state.ensemble,
        &state.target,
        cfg.aldi_t_end,
        cfg.aldi_dt,
        &cfg.aldi,
        &mut seeds.rng_for("aldi"),
    )
    .map_err(|e| e.in_stage(step, "ALDI"))?;
    if !run.stationary {
        warn!("step {step}: ALDI ensemble mean still drifting over the last 20% of the run");
    }
    state.ensemble = run.ensemble;
    state.step = step;
    let cov = state.ensemble.covariance(Normalization::Unbiased);
    Ok(StepRecord {
        step,
        design,
        observation: y,
        bounds,
        particle_bounds,
        c_shift,
        eki,
        posterior_mean: state.ensemble.mean(),
        posterior_cov_trace: cov.trace(),
        posterior_cov: cov,
        aldi_stationary: run.stationary,
    })
}

/// Conjugate update of a Gaussian prior by `y = A u + η`, `η ~ N(0, Γ)`.
pub fn linear_gaussian_update(
    prior: &Gaussian,
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    noise_cov: &DMatrix<f64>,
) -> Result<Gaussian> {
    let s = a * prior.covariance() * a.transpose() + noise_cov;
    let chol = Cholesky::new(&s, "innovation covariance")?;
    let k = (chol.solve_matrix(&(a * prior.covariance()))).transpose(); // d × k
    let mean = prior.mean() + &k * (y - a * prior.mean());
    let cov = prior.covariance() - &k * a * prior.covariance();
    Gaussian::new(mean, cov)
}

/// Exact posterior sequence for a linear-Gaussian history.
pub fn linear_gaussian_filter(
    prior: &Gaussian,
    steps: &[(DMatrix<f64>, DVector<f64>)],
    noise_cov: &DMatrix<f64>,
) -> Result<Vec<Gaussian>> {
    let mut out = Vec::with_capacity(steps.len());
    let mut current = prior.clone();
    for (a, y) in steps {
        current = linear_gaussian_update(&current, a, y, noise_cov)?;
        out.push(current.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn tie_breaks_to_lowest_index() {
        assert_eq!(select_design(&[1.0]), Some(0));
        assert_eq!(select_design(&[0.5, 2.0, 2.0]), Some(1));
        assert_eq!(select_design(&[]), None);
        assert_eq!(select_design(&[f64::NAN, 1.0]), Some(1));
    }

    #[test]
    fn conjugate_update_matches_closed_form() {
        let prior = Gaussian::scalar(2.0, 2.0).unwrap();
        let post = linear_gaussian_update(
            &prior,
            &DMatrix::from_element(1, 1, 3.0),
            &DVector::from_element(1, 3.0),
            &DMatrix::identity(1, 1),
        )
        .unwrap();
        assert_relative_eq!(post.covariance()[(0, 0)], 1.0 / 9.5, epsilon = 1e-14);
        assert_relative_eq!(post.mean()[0], (2.0 / 2.0 + 9.0) / 9.5, epsilon = 1e-14);
    }

    #[test]
    fn vanishing_noise_observes_the_model() {
        let truth = GroundTruth::new(DVector::from_element(1, 1.5));
        let model = crate::models::LinearModel::new(Default::default()).unwrap();
        let noise = Gaussian::scalar(0.0, 1e-20).unwrap();
        let p = DVector::from_element(1, 1.0);
        let y = truth.observe(&model, &p, &noise, &mut SeedStream::new(3).rng()).unwrap();
        assert!((y[0] - 4.5).abs() < 1e-9);
        let y2 = truth.observe(&model, &p, &noise, &mut SeedStream::new(3).rng()).unwrap();
        assert_eq!(y, y2);
    }
}
