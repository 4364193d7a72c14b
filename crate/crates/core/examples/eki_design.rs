//! Regularized EKI searching for the most informative design of the linear
//! model. EIG estimates use common random numbers within each step.

use nalgebra::DMatrix;
use rand::Rng;
use seqboed::eig::PriorSamples;
use seqboed::eki::{eki_optimize, DesignEnsemble, EkiConfig};
use seqboed::gaussian::{sample_gaussian, Gaussian};
use seqboed::models::{LinearModel, LinearModelConfig};
use seqboed::rng::SeedStream;
use seqboed::sequential::eig_upper_for_designs;

fn main() -> seqboed::Result<()> {
    let t_end: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1e3);
    let seeds = SeedStream::new(4);
    let prior = Gaussian::scalar(2.0, 2.0)?;
    let noise = Gaussian::scalar(0.0, 1.0)?;
    let model = LinearModel::new(LinearModelConfig::default())?;
    let samples = PriorSamples::from_gaussian(&prior, sample_gaussian(&prior, 100_000, &mut seeds.rng_for("prior"))?)?;
    let mut rng = seeds.rng_for("init");
    let init = DesignEnsemble::new(DMatrix::from_fn(3, 1, |_, _| 2.0 * rng.random::<f64>()))?;
    let res = eki_optimize(
        &init,
        |p, seed| eig_upper_for_designs(&samples, &model, &noise, p, seed),
        &EkiConfig::scalar(1e-2, 3.0, t_end),
        &seeds.child("eki"),
    )?;
    let stride = (res.trace.len() / 15).max(1);
    for row in res.trace.iter().step_by(stride) {
        println!("t = {:>9.3}  designs {:?}  V_e {:.3e}", row.t, row.designs.as_slice(), row.v_e);
    }
    println!(
        "final mean {:.4}, {} accepted / {} rejected steps, V_e tail slope {:.2}",
        res.ensemble.mean()[0],
        res.accepted_steps,
        res.rejected_steps,
        res.spread_slope(10.0).unwrap_or(f64::NAN)
    );
    Ok(())
}
