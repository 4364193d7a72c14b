//! Double-loop Monte Carlo EIG as a reference for the Gaussian upper bound.

use seqboed::eig::{eig_nested_mc, eig_upper_gaussian, simulate_joint, NestedMcOptions, PriorSamples};
use seqboed::gaussian::{sample_gaussian, Gaussian};
use seqboed::models::{design, LinearModel, LinearModelConfig};
use seqboed::rng::SeedStream;

fn main() -> seqboed::Result<()> {
    let seeds = SeedStream::new(8);
    let prior = Gaussian::scalar(2.0, 2.0)?;
    let noise = Gaussian::scalar(0.0, 1.0)?;
    let model = LinearModel::new(LinearModelConfig::default())?;
    let samples = PriorSamples::from_gaussian(&prior, sample_gaussian(&prior, 100_000, &mut seeds.rng_for("prior"))?)?;
    for n in [100, 1_000, 5_000] {
        let nmc = eig_nested_mc(
            &prior,
            &model,
            &design(1.0),
            &noise,
            NestedMcOptions { n_outer: n, n_inner: n },
            &mut seeds.indexed("nmc", n as u64).rng(),
        )?;
        println!("n = {n:>5}: nested MC {:.4} +/- {:.4}", nmc.value, nmc.se);
    }
    let js = simulate_joint(&samples, &model, &design(1.0), &noise, &mut seeds.rng_for("noise"))?;
    let ub = eig_upper_gaussian(&js)?;
    println!("Gaussian upper bound {:.4} +/- {:.4}, exact {:.4}", ub.value, ub.se, 0.5 * 19f64.ln());
    Ok(())
}
