//! Gaussian upper and lower EIG bounds on the linear model `G(u, p) = A(p) u`
//! against the closed-form value `½ log(1 + A(p)² Σ₀ / Γ)`.

use nalgebra::DMatrix;
use seqboed::eig::{eig_exact_linear, eig_lower_gaussian, eig_upper_gaussian, simulate_joint, PriorSamples};
use seqboed::gaussian::{sample_gaussian, Gaussian};
use seqboed::models::{design, LinearModel, LinearModelConfig};
use seqboed::rng::SeedStream;

fn main() -> seqboed::Result<()> {
    let seeds = SeedStream::new(1);
    let prior = Gaussian::scalar(2.0, 2.0)?;
    let noise = Gaussian::scalar(0.0, 1.0)?;
    let cfg = LinearModelConfig::default();
    let model = LinearModel::new(cfg)?;
    let u = sample_gaussian(&prior, 100_000, &mut seeds.rng_for("prior"))?;
    let samples = PriorSamples::from_gaussian(&prior, u)?;

    println!("{:>5} {:>8} {:>8} {:>8} {:>8}", "p", "exact", "lower", "upper", "se");
    for i in 0..=8 {
        let p = 0.25 * i as f64;
        let exact = eig_exact_linear(&DMatrix::from_element(1, 1, cfg.operator(p)), &prior, noise.covariance())?;
        let js = simulate_joint(&samples, &model, &design(p), &noise, &mut seeds.indexed("noise", i).rng())?;
        let (lb, ub) = (eig_lower_gaussian(&js)?, eig_upper_gaussian(&js)?);
        println!("{p:>5.2} {exact:>8.4} {:>8.4} {:>8.4} {:>8.4}", lb.value, ub.value, ub.se);
    }
    Ok(())
}
