//! Oracle checks at reduced scale: closed-form EIG, conjugate ALDI,
//! manufactured FEM solution and a nested Monte Carlo cross-check.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::config::{size, ExperimentConfig, ModelBlock};
use super::HarnessError;
use crate::aldi::{aldi_run, Observation, ParticleEnsemble, SequentialTarget};
use crate::eig::{
    eig_exact_linear, eig_lower_gaussian, eig_nested_mc, eig_upper_gaussian, simulate_joint, NestedMcOptions,
    PriorSamples,
};
use crate::gaussian::{sample_gaussian, Gaussian};
use crate::models::{design, midpoint_fem_solve, ForwardModel, LinearModel, LinearModelConfig, UniformMesh};
use crate::rng::SeedStream;
use crate::sequential::linear_gaussian_update;
use crate::stats::log_log_slope;

/// Below these sizes the tolerances are not expected to hold and failures
/// are reported as warnings.
const FULL_EIG_J: usize = 10_000;
const FULL_SAMPLER_J: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    Warn,
}

impl CheckStatus {
    fn label(self) -> &'static str {
        match self {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Warn => "WARN",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyCheck {
    pub name: &'static str,
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<VerifyCheck>,
}

impl VerifyReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!("{} {}: {}\n", c.status.label(), c.name, c.detail));
        }
        let worst = self.overall();
        out.push_str(&format!("overall {}\n", worst.label()));
        out
    }

    pub fn overall(&self) -> CheckStatus {
        if self.checks.iter().any(|c| c.status == CheckStatus::Fail) {
            CheckStatus::Fail
        } else if self.checks.iter().any(|c| c.status == CheckStatus::Warn) {
            CheckStatus::Warn
        } else {
            CheckStatus::Pass
        }
    }

    /// 0 unless a check failed at full scale.
    pub fn exit_code(&self) -> i32 {
        i32::from(self.overall() == CheckStatus::Fail)
    }
}

struct Sizes {
    eig_j: usize,
    sampler_j: usize,
    dt: f64,
    t_end: f64,
}

/// Run the oracle suite with the seeds and sample sizes of `cfg`. The linear
/// model constants come from `cfg` when it uses the linear model.
pub fn verify(cfg: &ExperimentConfig) -> Result<VerifyReport, HarnessError> {
    let sizes = Sizes {
        eig_j: cfg.eig.as_ref().map_or(FULL_EIG_J, |e| size(e.j)),
        sampler_j: cfg.sampler.as_ref().map_or(1_000, |s| size(s.j)),
        dt: cfg.sampler.as_ref().map_or(0.01, |s| s.dt),
        t_end: cfg.sampler.as_ref().map_or(10.0, |s| s.t_end),
    };
    if sizes.eig_j < 3 || sizes.sampler_j < 2 {
        return Err(HarnessError::invalid("eig.j / sampler.j", "need at least 3 and 2 samples"));
    }
    let lin = match cfg.model {
        Some(ModelBlock::Linear { c, d_shift }) => LinearModelConfig { c, d_shift },
        _ => LinearModelConfig::default(),
    };
    let model = LinearModel::new(lin)?;
    let seeds = SeedStream::new(cfg.seeds.master).child("verify");
    let small_eig = sizes.eig_j < FULL_EIG_J;
    let small_sampler = sizes.sampler_j < FULL_SAMPLER_J;
    let grade = |pass: bool, small: bool| match (pass, small) {
        (true, _) => CheckStatus::Pass,
        (false, true) => CheckStatus::Warn,
        (false, false) => CheckStatus::Fail,
    };
    let note = |small: bool, j: usize| {
        if small {
            format!(" [reduced J={j}: tolerance not expected to hold]")
        } else {
            String::new()
        }
    };
    let prior = Gaussian::scalar(2.0, 2.0)?;
    let noise = Gaussian::scalar(0.0, 1.0)?;
    let mut checks = Vec::new();

    let u = sample_gaussian(&prior, sizes.eig_j, &mut seeds.rng_for("prior"))?;
    let samples = PriorSamples::from_gaussian(&prior, u)?;
    let mut worst: f64 = 0.0;
    let mut violations = 0;
    for (i, p) in [0.0, 1.0, 2.0].into_iter().enumerate() {
        let a = DMatrix::from_element(1, 1, lin.operator(p));
        let exact = eig_exact_linear(&a, &prior, noise.covariance())?;
        let js = simulate_joint(&samples, &model, &design(p), &noise, &mut seeds.indexed("noise", i as u64).rng())?;
        let ub = eig_upper_gaussian(&js)?;
        let lb = eig_lower_gaussian(&js)?;
        worst = worst.max((ub.value - exact).abs()).max((lb.value - exact).abs());
        violations += usize::from(ub.value < lb.value - 3.0 * ub.se.hypot(lb.se));
    }
    checks.push(VerifyCheck {
        name: "closed-form EIG vs Gaussian bounds",
        status: grade(worst <= 0.05 && violations == 0, small_eig),
        detail: format!(
            "max |bound - exact| {} (tol 0.05), ordering violations {violations}{}",
            fmt4(worst),
            note(small_eig, sizes.eig_j)
        ),
    });

    let y = 3.0;
    let target = SequentialTarget::new(prior.clone(), noise.clone())?.with_observation(Observation {
        y: DVector::from_element(1, y),
        design: design(1.0),
        model: Arc::new(model.clone()) as Arc<dyn ForwardModel>,
    })?;
    let exact_post = linear_gaussian_update(
        &prior,
        &DMatrix::from_element(1, 1, lin.operator(1.0)),
        &DVector::from_element(1, y),
        noise.covariance(),
    )?;
    let init = ParticleEnsemble::from_prior(&prior, sizes.sampler_j, &mut seeds.rng_for("aldi-init"))?;
    let run = aldi_run(&init, &target, sizes.t_end, sizes.dt, &mut seeds.rng_for("aldi"))?;
    let (m, v) = (exact_post.mean()[0], exact_post.covariance()[(0, 0)]);
    let em = run.ensemble.mean()[0];
    let ev = run.ensemble.covariance(crate::gaussian::Normalization::Unbiased)[(0, 0)];
    let (rm, rv) = (((em - m) / m).abs(), ((ev - v) / v).abs());
    checks.push(VerifyCheck {
        name: "conjugate posterior vs ALDI",
        status: grade(rm <= 0.05 && rv <= 0.10, small_sampler),
        detail: format!(
            "mean rel err {} (tol 0.05), variance rel err {} (tol 0.10){}",
            fmt4(rm),
            fmt4(rv),
            note(small_sampler, sizes.sampler_j)
        ),
    });

    let grid = [9usize, 17, 33, 65];
    let errs = grid.iter().map(|&n| manufactured_error(n)).collect::<crate::Result<Vec<_>>>()?;
    let hs: Vec<f64> = grid.iter().map(|&n| 1.0 / (n - 1) as f64).collect();
    let slope = log_log_slope(&hs, &errs).unwrap_or(f64::NAN);
    checks.push(VerifyCheck {
        name: "manufactured FEM solution",
        status: grade((slope - 2.0).abs() <= 0.3, false),
        detail: format!("spatial order {} (2 +/- 0.3)", fmt4(slope)),
    });

    let n = sizes.eig_j.min(2_000);
    let nmc = eig_nested_mc(
        &prior,
        &model,
        &design(1.0),
        &noise,
        NestedMcOptions { n_outer: n, n_inner: n },
        &mut seeds.rng_for("nmc"),
    )?;
    let js = simulate_joint(&samples, &model, &design(1.0), &noise, &mut seeds.rng_for("nmc-joint"))?;
    let ub = eig_upper_gaussian(&js)?;
    let slack = 3.0 * nmc.se.hypot(ub.se);
    checks.push(VerifyCheck {
        name: "nested Monte Carlo cross-check",
        status: grade((nmc.value - ub.value).abs() <= slack, small_eig),
        detail: format!(
            "NMC {} +/- {}, UB {} (slack {}){}",
            fmt4(nmc.value),
            fmt4(nmc.se),
            fmt4(ub.value),
            fmt4(slack),
            note(small_eig, sizes.eig_j)
        ),
    });
    Ok(VerifyReport { checks })
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

/// L² error at `t = 0.5` for `u = sin(πx)(1 − e^{−t})` with `κ = 1`.
fn manufactured_error(n_x: usize) -> crate::Result<f64> {
    let mesh = UniformMesh::new(n_x)?;
    let (dt, n_steps) = (1e-3, 500);
    let source = |t: f64, x: f64| (PI * x).sin() * ((-t).exp() + PI * PI * (1.0 - (-t).exp()));
    let traj = midpoint_fem_solve(
        &mesh,
        &vec![1.0; 2 * mesh.n_elements()],
        |t| mesh.load_vector(|x| source(t, x)),
        dt,
        n_steps,
    )?;
    let t_end = dt * n_steps as f64;
    // three-point Gauss-Legendre per element
    let nodes = [-(0.6f64).sqrt(), 0.0, (0.6f64).sqrt()];
    let weights = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
    let h = mesh.h();
    let mut err = 0.0;
    for e in 0..mesh.n_elements() {
        for (xi, w) in nodes.iter().zip(weights) {
            let x = (e as f64 + 0.5 + 0.5 * xi) * h;
            let exact = (PI * x).sin() * (1.0 - (-t_end).exp());
            err += 0.5 * h * w * (traj.value_at(n_steps, x) - exact).powi(2);
        }
    }
    Ok(err.sqrt())
}
