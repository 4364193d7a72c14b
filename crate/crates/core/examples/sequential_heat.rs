//! Sequential design on the heat model: EKI picks each design, a synthetic
//! observation is drawn from a hidden ground truth, ALDI resamples the
//! posterior. Pass the number of steps and the ensemble size as arguments.

use std::sync::Arc;

use nalgebra::DVector;
use seqboed::aldi::AldiOptions;
use seqboed::eig::BoundOptions;
use seqboed::eki::EkiConfig;
use seqboed::gaussian::Gaussian;
use seqboed::models::{ForwardModel, HeatModelConfig, HeatObservationModel, HeatSolver};
use seqboed::rng::SeedStream;
use seqboed::sequential::{run_sequential, CShift, DesignSelection, GroundTruth, SequentialConfig, SequentialProblem};

fn main() -> seqboed::Result<()> {
    let mut args = std::env::args().skip(1);
    let n_steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let j = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let solver = Arc::new(HeatSolver::new(HeatModelConfig::multi_dim())?);
    let sd = solver.noise_scale()?;
    let (d, k) = (solver.config().param_dim, solver.config().obs_dim());
    let problem = SequentialProblem {
        prior: Gaussian::isotropic(d, 2.0, 0.5)?,
        noise: Gaussian::isotropic(k, 0.0, sd * sd)?,
        models: HeatObservationModel::for_each_observation_step(solver)?
            .into_iter()
            .map(|m| Arc::new(m) as Arc<dyn ForwardModel>)
            .collect(),
    };
    let cfg = SequentialConfig {
        n_steps,
        ensemble_size: j,
        aldi_dt: 0.01,
        aldi_t_end: 10.0,
        aldi: AldiOptions::default(),
        eki: EkiConfig::scalar(1e-2, 3.0, 100.0),
        eki_ensemble_size: 3,
        design_lower: DVector::from_element(1, 0.0),
        design_upper: DVector::from_element(1, 2.0),
        c_shift: CShift::InitialMax { factor: 1.5, margin: 0.1 },
        bounds: BoundOptions::default(),
        selection: DesignSelection::Argmax,
        warm_start: false,
        n_importance: 10_000,
    };
    let truth = GroundTruth::from_prior(&problem.prior, 7)?;
    let run = run_sequential(&problem, &cfg, &truth, &SeedStream::new(6))?;
    for r in &run.state.history {
        println!(
            "step {}: p = {:.3}  EIG in [{:.4}, {:.4}]  tr(cov) {:.3}",
            r.step, r.design[0], r.bounds.lower, r.bounds.upper, r.posterior_cov_trace
        );
    }
    println!("ground truth {:?}", truth.value().as_slice());
    Ok(())
}
