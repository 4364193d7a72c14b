use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use super::config::{size, ExperimentConfig, ExperimentKind, ModelBlock};
use super::{num, opt_num, CsvTable, ExperimentOutput, HarnessError};
use crate::aldi::{AldiOptions, SequentialTarget};
use crate::eig::{
    eig_exact_linear, eig_lower_laplace_with, estimate_bounds_with, simulate_joint, BoundOptions, EigBounds,
    PriorSamples,
};
use crate::eki::{eki_optimize, DesignEnsemble};
use crate::gaussian::{condition_gaussian, empirical_moments, kl_gaussian, sample_gaussian, Gaussian};
use crate::models::{
    design, ForwardModel, HeatObservationModel, HeatSolver, LinearModel, LinearModelConfig, NearLinearModel,
    NearLinearModelConfig,
};
use crate::rng::SeedStream;
use crate::sequential::{
    eig_upper_for_designs, run_sequential, CShift, GroundTruth, SequentialConfig, SequentialProblem,
};
use crate::stats::quantile;

type Res<T> = Result<T, HarnessError>;

/// Forward maps of the configured model; the heat model yields one per
/// observation time.
struct Setup {
    models: Vec<Arc<dyn ForwardModel>>,
    /// Observation time step of each model (1 for the algebraic models).
    obs_steps: Vec<usize>,
    prior: Gaussian,
    noise: Gaussian,
}

fn setup(cfg: &ExperimentConfig) -> Res<Setup> {
    let block = cfg.model()?;
    let (models, obs_steps, k, heat): (Vec<Arc<dyn ForwardModel>>, Vec<usize>, usize, Option<Arc<HeatSolver>>) =
        match block {
            ModelBlock::Linear { c, d_shift } => (
                vec![Arc::new(LinearModel::new(LinearModelConfig { c: *c, d_shift: *d_shift })?)],
                vec![1],
                1,
                None,
            ),
            ModelBlock::NearLinear { c, d_shift, tau } => (
                vec![Arc::new(NearLinearModel::new(NearLinearModelConfig {
                    c: *c,
                    d_shift: *d_shift,
                    tau: *tau,
                })?)],
                vec![1],
                1,
                None,
            ),
            ModelBlock::Heat { .. } => {
                let hc = block.heat_config().expect("heat block");
                let solver = Arc::new(HeatSolver::new(hc.clone())?);
                let models = HeatObservationModel::for_each_observation_step(solver.clone())?
                    .into_iter()
                    .map(|m| Arc::new(m) as Arc<dyn ForwardModel>)
                    .collect();
                (models, hc.obs_steps.clone(), hc.obs_dim(), Some(solver))
            }
        };
    let prior = cfg.prior()?.build(block.param_dim())?;
    let nb = cfg.noise()?;
    let variance = match (nb.variance, nb.relative, &heat) {
        (Some(v), _, _) => v,
        (None, Some(r), Some(solver)) => (r * solver.reference_norm()?).powi(2),
        _ => return Err(HarnessError::invalid("noise", "no usable noise specification")),
    };
    Ok(Setup {
        models,
        obs_steps,
        prior,
        noise: Gaussian::isotropic(k, 0.0, variance)?,
    })
}

pub(super) fn execute(cfg: &ExperimentConfig) -> Res<ExperimentOutput> {
    match cfg.kind {
        ExperimentKind::Linear | ExperimentKind::NearLinear | ExperimentKind::Heat => design_grid(cfg),
        ExperimentKind::EigSweep => eig_sweep(cfg),
        ExperimentKind::KlConvergence => kl_convergence(cfg),
        ExperimentKind::EkiOptimize => eki_run(cfg),
        ExperimentKind::Sequential => sequential(cfg),
    }
}

fn bound_options(cfg: &ExperimentConfig) -> Res<BoundOptions> {
    let eig = cfg.eig()?;
    Ok(BoundOptions {
        delta: eig.delta,
        laplace: eig.laplace,
        ..BoundOptions::default()
    })
}

/// Bounds at each design, each design with its own noise stream. The Laplace
/// bound is always computed when enabled so sweeps report both lower bounds.
fn bounds_on_grid(
    model: &dyn ForwardModel,
    setup: &Setup,
    samples: &PriorSamples,
    designs: &[f64],
    opts: &BoundOptions,
    seeds: &SeedStream,
) -> Res<Vec<EigBounds>> {
    let target = SequentialTarget::new(setup.prior.clone(), setup.noise.clone())?;
    designs
        .par_iter()
        .enumerate()
        .map(|(i, &p)| {
            let mut rng = seeds.indexed("noise", i as u64).rng();
            let js = simulate_joint(samples, model, &design(p), &setup.noise, &mut rng)?;
            let mut b = estimate_bounds_with(&js, model, &target, opts)?;
            if opts.laplace && b.lb_laplace.is_none() {
                let lap = eig_lower_laplace_with(&js, model, &target, &opts.laplace_options)?;
                b.lb_laplace = Some(lap.estimate);
                b.laplace_fallback_count = lap.fallback_count;
                if lap.estimate.value > b.lower {
                    b.lower = lap.estimate.value;
                    b.se_lower = lap.estimate.se;
                    b.lower_method = crate::eig::LowerMethod::Laplace;
                    b.gap = b.upper - b.lower;
                }
            }
            Ok(b)
        })
        .collect::<crate::Result<Vec<_>>>()
        .map_err(Into::into)
}

fn prior_samples(setup: &Setup, j: usize, seeds: &SeedStream) -> Res<PriorSamples> {
    let u = sample_gaussian(&setup.prior, j, &mut seeds.rng_for("prior"))?;
    Ok(PriorSamples::from_gaussian(&setup.prior, u)?)
}

fn bound_columns(b: &EigBounds) -> Vec<String> {
    vec![
        num(b.lb_gauss.value),
        opt_num(b.lb_laplace.map(|e| e.value)),
        num(b.upper),
        num(b.se_lower),
        num(b.se_upper),
        num(b.lower),
        b.ordered().to_string(),
    ]
}

const BOUND_HEADER: [&str; 7] = ["lb_gauss", "lb_laplace", "ub", "se_lower", "se_upper", "lb", "ordered"];

fn count_violations(all: &[EigBounds]) -> usize {
    all.iter().filter(|b| !b.ordered()).count()
}

fn design_grid(cfg: &ExperimentConfig) -> Res<ExperimentOutput> {
    let setup = setup(cfg)?;
    let eig = cfg.eig()?;
    let opts = bound_options(cfg)?;
    let seeds = SeedStream::new(cfg.seeds.master).child(cfg.kind.name());
    let samples = prior_samples(&setup, size(eig.j), &seeds)?;
    let linear = cfg.kind == ExperimentKind::Linear;
    let mut header = vec!["obs_step", "p"];
    header.extend(BOUND_HEADER);
    if linear {
        header.push("exact");
    }
    let mut table = CsvTable::new(cfg.kind.name(), cfg.kind.name(), &header);
    let mut all = Vec::new();
    let mut worst_exact: f64 = 0.0;
    for (m, model) in setup.models.iter().enumerate() {
        let bounds = bounds_on_grid(
            model.as_ref(),
            &setup,
            &samples,
            &eig.designs,
            &opts,
            &seeds.indexed("obs", m as u64),
        )?;
        for (&p, b) in eig.designs.iter().zip(&bounds) {
            let mut row = vec![setup.obs_steps[m].to_string(), num(p)];
            row.extend(bound_columns(b));
            if linear {
                let a = crate::models::linear_operator(model.as_ref(), &design(p))?;
                let exact = eig_exact_linear(&a, &setup.prior, setup.noise.covariance())?;
                worst_exact = worst_exact.max((b.upper - exact).abs()).max((b.lb_gauss.value - exact).abs());
                row.push(num(exact));
            }
            table.push(row);
        }
        all.extend(bounds);
    }
    let mut summary = Map::new();
    summary.insert("designs_evaluated".into(), json!(all.len()));
    summary.insert("ordering_violations".into(), json!(count_violations(&all)));
    if linear {
        summary.insert("max_abs_error_vs_exact".into(), json!(worst_exact));
    }
    Ok(ExperimentOutput {
        tables: vec![table],
        summary,
    })
}

fn eig_sweep(cfg: &ExperimentConfig) -> Res<ExperimentOutput> {
    let ModelBlock::NearLinear { c, d_shift, .. } = *cfg.model()? else {
        return Err(HarnessError::invalid("model.type", "eig_sweep needs the near_linear model"));
    };
    let setup = setup(cfg)?;
    let eig = cfg.eig()?;
    let opts = bound_options(cfg)?;
    let seeds = SeedStream::new(cfg.seeds.master).child("eig_sweep");
    let samples = prior_samples(&setup, size(eig.j), &seeds)?;
    let mut header = vec!["tau", "p"];
    header.extend(BOUND_HEADER);
    let mut table = CsvTable::new("eig_sweep", "eig_sweep", &header);
    let mut all = Vec::new();
    for &tau in &eig.taus {
        let model = NearLinearModel::new(NearLinearModelConfig { c, d_shift, tau })?;
        // shared noise across tau so differences reflect the model alone
        let bounds = bounds_on_grid(&model, &setup, &samples, &eig.designs, &opts, &seeds)?;
        for (&p, b) in eig.designs.iter().zip(&bounds) {
            let mut row = vec![num(tau), num(p)];
            row.extend(bound_columns(b));
            table.push(row);
        }
        all.extend(bounds);
    }
    let mut summary = Map::new();
    summary.insert("designs_evaluated".into(), json!(all.len()));
    summary.insert("ordering_violations".into(), json!(count_violations(&all)));
    Ok(ExperimentOutput {
        tables: vec![table],
        summary,
    })
}

/// KL between the exact marginal / posterior and empirical Gaussian fits,
/// posteriors conditioned at the 10/50/90th percentiles of the simulated `y`.
fn kl_convergence(cfg: &ExperimentConfig) -> Res<ExperimentOutput> {
    let setup = setup(cfg)?;
    let kl = cfg.kl()?;
    let model = setup.models[0].clone();
    let seeds = SeedStream::new(cfg.seeds.master).child("kl_convergence");
    let mut table = CsvTable::new(
        "kl_convergence",
        "kl_convergence",
        &["p", "J", "replicate", "kl_marginal", "kl_posterior_p10", "kl_posterior_p50", "kl_posterior_p90"],
    );
    let noise_cov = setup.noise.covariance().clone();
    let reps = size(kl.replicates);
    let mut means = Vec::new();
    for &p in &kl.designs {
        let a = crate::models::linear_operator(model.as_ref(), &design(p))?;
        let marg_truth = Gaussian::new(
            &a * setup.prior.mean(),
            &a * setup.prior.covariance() * a.transpose() + &noise_cov,
        )?;
        for &j in &kl.j_grid {
            let j = size(j);
            let rows = (0..reps)
                .into_par_iter()
                .map(|rep| -> crate::Result<[f64; 4]> {
                    let mut rng = seeds.indexed(&format!("p{p}-J{j}"), rep as u64).rng();
                    let u = sample_gaussian(&setup.prior, j, &mut rng)?;
                    let eta = sample_gaussian(&setup.noise, j, &mut rng)?;
                    let y = &u * a.transpose() + eta;
                    let m = empirical_moments(&u, &y)?;
                    let mut out = [kl_gaussian(&marg_truth, &m.marginal_y()?)?, 0.0, 0.0, 0.0];
                    let ys: Vec<f64> = y.column(0).iter().cloned().collect();
                    for (ci, q) in [0.1, 0.5, 0.9].into_iter().enumerate() {
                        let yq = DVector::from_element(y.ncols(), quantile(&ys, q));
                        let truth = crate::sequential::linear_gaussian_update(&setup.prior, &a, &yq, &noise_cov)?;
                        out[ci + 1] = kl_gaussian(&truth, &condition_gaussian(&m, &yq)?)?;
                    }
                    Ok(out)
                })
                .collect::<crate::Result<Vec<_>>>()?;
            let mut mean = [0.0; 4];
            for (rep, r) in rows.iter().enumerate() {
                let mut row = vec![num(p), j.to_string(), rep.to_string()];
                row.extend(r.iter().map(|&v| num(v)));
                table.push(row);
                for c in 0..4 {
                    mean[c] += r[c] / reps as f64;
                }
            }
            means.push((p, j, mean));
        }
    }
    let mut summary = Map::new();
    for p in &kl.designs {
        let xs: Vec<f64> = means.iter().filter(|m| m.0 == *p).map(|m| m.1 as f64).collect();
        let slopes: Vec<Value> = (0..4)
            .map(|c| {
                let ys: Vec<f64> = means.iter().filter(|m| m.0 == *p).map(|m| m.2[c]).collect();
                json!(crate::stats::log_log_slope(&xs, &ys))
            })
            .collect();
        summary.insert(format!("log_log_slopes_p{p}"), Value::Array(slopes));
    }
    Ok(ExperimentOutput {
        tables: vec![table],
        summary,
    })
}

fn initial_designs(cfg: &ExperimentConfig, seeds: &SeedStream) -> Res<DesignEnsemble> {
    let eki = cfg.eki()?;
    let mut rng = seeds.rng_for("init");
    let n = size(eki.ensemble_size);
    let designs = DMatrix::from_fn(n, 1, |_, _| {
        eki.design_lower + (eki.design_upper - eki.design_lower) * rng.random::<f64>()
    });
    Ok(DesignEnsemble::new(designs)?)
}

fn eki_run(cfg: &ExperimentConfig) -> Res<ExperimentOutput> {
    let setup = setup(cfg)?;
    let eig = cfg.eig()?;
    let seeds = SeedStream::new(cfg.seeds.master).child("eki_optimize");
    let samples = prior_samples(&setup, size(eig.j), &seeds)?;
    let model = setup.models[0].clone();
    let init = initial_designs(cfg, &seeds)?;
    let eki_cfg = cfg.eki()?.build();
    let res = eki_optimize(
        &init,
        |p, seed| eig_upper_for_designs(&samples, model.as_ref(), &setup.noise, p, seed),
        &eki_cfg,
        &seeds.child("eki"),
    )?;
    let n = init.len();
    let mut header = vec!["t".to_string(), "rho".into(), "v_e".into()];
    header.extend((0..n).map(|i| format!("p_{i}")));
    header.extend((0..n).map(|i| format!("eig_{i}")));
    let mut table = CsvTable::with_header("eki_trace", "eki_optimize", header);
    for row in &res.trace {
        let mut r = vec![num(row.t), num(row.rho), num(row.v_e)];
        r.extend(row.designs.column(0).iter().map(|&v| num(v)));
        r.extend(row.eigs.iter().map(|&v| num(v)));
        table.push(r);
    }
    let mut summary = Map::new();
    summary.insert("final_mean".into(), json!(res.ensemble.mean()[0]));
    summary.insert("final_spread".into(), json!(res.ensemble.spread()));
    summary.insert("accepted_steps".into(), json!(res.accepted_steps));
    summary.insert("rejected_steps".into(), json!(res.rejected_steps));
    summary.insert("spread_tail_slope".into(), json!(res.spread_slope(10.0)));
    Ok(ExperimentOutput {
        tables: vec![table],
        summary,
    })
}

fn sequential(cfg: &ExperimentConfig) -> Res<ExperimentOutput> {
    let setup = setup(cfg)?;
    let eki = cfg.eki()?;
    let sampler = cfg.sampler()?;
    let seq = cfg.sequential()?;
    let truth = match &seq.ground_truth {
        Some(u) => GroundTruth::new(DVector::from_column_slice(u)),
        None => GroundTruth::from_prior(&setup.prior, cfg.seeds.ground_truth.expect("validated"))?,
    };
    let run_cfg = SequentialConfig {
        n_steps: size(seq.n_steps),
        ensemble_size: size(sampler.j),
        aldi_dt: sampler.dt,
        aldi_t_end: sampler.t_end,
        aldi: AldiOptions::default(),
        eki: eki.build(),
        eki_ensemble_size: size(eki.ensemble_size),
        design_lower: DVector::from_element(1, eki.design_lower),
        design_upper: DVector::from_element(1, eki.design_upper),
        c_shift: seq.c_shift.unwrap_or(CShift::Fixed { value: eki.c_shift }),
        bounds: bound_options(cfg)?,
        selection: seq.selection,
        warm_start: seq.warm_start,
        n_importance: seq.n_importance,
    };
    let problem = SequentialProblem {
        prior: setup.prior.clone(),
        noise: setup.noise.clone(),
        models: setup.models.clone(),
    };
    let run = run_sequential(&problem, &run_cfg, &truth, &SeedStream::new(cfg.seeds.master).child("sequential"))?;
    let d = setup.prior.dim();
    let k = setup.noise.dim();
    let mut header = vec!["n".to_string(), "p".into()];
    header.extend((0..k).map(|i| format!("y_{i}")));
    header.extend(["lb", "ub", "lb_gauss", "lb_laplace", "se_lower", "se_upper", "c_shift"].map(String::from));
    header.extend((0..d).map(|i| format!("mean_{i}")));
    header.push("cov_trace".into());
    let mut steps = CsvTable::with_header("sequential_steps", "sequential", header);
    let mut particles = CsvTable::new(
        "sequential_particles",
        "sequential",
        &["n", "particle", "p", "lb", "ub", "lb_gauss", "lb_laplace", "se_lower", "se_upper", "ordered"],
    );
    let mut violations = 0;
    for r in &run.state.history {
        let b = &r.bounds;
        let mut row = vec![r.step.to_string(), num(r.design[0])];
        row.extend(r.observation.iter().map(|&v| num(v)));
        row.extend([
            num(b.lower),
            num(b.upper),
            num(b.lb_gauss.value),
            opt_num(b.lb_laplace.map(|e| e.value)),
            num(b.se_lower),
            num(b.se_upper),
            num(r.c_shift),
        ]);
        row.extend(r.posterior_mean.iter().map(|&v| num(v)));
        row.push(num(r.posterior_cov_trace));
        steps.push(row);
        for (i, pb) in r.particle_bounds.iter().enumerate() {
            violations += usize::from(!pb.ordered());
            particles.push(vec![
                r.step.to_string(),
                i.to_string(),
                num(pb.design[0]),
                num(pb.lower),
                num(pb.upper),
                num(pb.lb_gauss.value),
                opt_num(pb.lb_laplace.map(|e| e.value)),
                num(pb.se_lower),
                num(pb.se_upper),
                pb.ordered().to_string(),
            ]);
        }
    }
    let mut summary = Map::new();
    summary.insert("ground_truth".into(), json!(truth.value().as_slice()));
    summary.insert("ordering_violations".into(), json!(violations));
    summary.insert(
        "designs".into(),
        json!(run.state.history.iter().map(|r| r.design[0]).collect::<Vec<_>>()),
    );
    Ok(ExperimentOutput {
        tables: vec![steps, particles],
        summary,
    })
}
