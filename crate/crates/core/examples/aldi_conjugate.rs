//! Gradient-free ALDI sampling a conjugate linear-Gaussian posterior.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use seqboed::aldi::{aldi_run, Observation, ParticleEnsemble, SequentialTarget};
use seqboed::gaussian::{Gaussian, Normalization};
use seqboed::models::{design, LinearModel, LinearModelConfig};
use seqboed::rng::SeedStream;
use seqboed::sequential::linear_gaussian_update;

fn main() -> seqboed::Result<()> {
    let seeds = SeedStream::new(3);
    let prior = Gaussian::scalar(2.0, 2.0)?;
    let noise = Gaussian::scalar(0.0, 1.0)?;
    let y = DVector::from_element(1, 3.0);
    let target = SequentialTarget::new(prior.clone(), noise.clone())?.with_observation(Observation {
        y: y.clone(),
        design: design(1.0),
        model: Arc::new(LinearModel::new(LinearModelConfig::default())?),
    })?;
    let exact = linear_gaussian_update(&prior, &DMatrix::from_element(1, 1, 3.0), &y, noise.covariance())?;

    let init = ParticleEnsemble::from_prior(&prior, 1_000, &mut seeds.rng_for("init"))?;
    let run = aldi_run(&init, &target, 10.0, 0.01, &mut seeds.rng_for("dynamics"))?;
    for s in run.diagnostics.iter().step_by(20) {
        println!("t = {:>5.2}  mean {:.4}  var {:.4}", s.time, s.mean[0], s.cov_trace);
    }
    println!(
        "final mean {:.4} (exact {:.4}), variance {:.4} (exact {:.4}), stationary {}",
        run.ensemble.mean()[0],
        exact.mean()[0],
        run.ensemble.covariance(Normalization::Unbiased)[(0, 0)],
        exact.covariance()[(0, 0)],
        run.stationary
    );
    Ok(())
}
