//! On the near-linear model `A(p)u + τu²` the Gaussian lower bound is loose;
//! per-sample Laplace fits tighten it.

use seqboed::aldi::SequentialTarget;
use seqboed::eig::{eig_lower_gaussian, eig_lower_laplace, eig_upper_gaussian, simulate_joint, PriorSamples};
use seqboed::gaussian::{sample_gaussian, Gaussian};
use seqboed::models::{design, NearLinearModel, NearLinearModelConfig};
use seqboed::rng::SeedStream;

fn main() -> seqboed::Result<()> {
    let seeds = SeedStream::new(5);
    let prior = Gaussian::scalar(2.0, 1.0)?;
    let noise = Gaussian::scalar(0.0, 1.0)?;
    let target = SequentialTarget::new(prior.clone(), noise.clone())?;
    let samples = PriorSamples::from_gaussian(&prior, sample_gaussian(&prior, 10_000, &mut seeds.rng_for("prior"))?)?;
    println!("{:>4} {:>5} {:>9} {:>9} {:>9}", "tau", "p", "lb gauss", "lb lapl", "ub");
    for tau in [1.5, 1.0, 0.5] {
        let model = NearLinearModel::new(NearLinearModelConfig { c: 2.0, d_shift: 3.0, tau })?;
        for (i, p) in [0.0, 0.5, 1.0, 1.5, 2.0].into_iter().enumerate() {
            let js = simulate_joint(&samples, &model, &design(p), &noise, &mut seeds.indexed("noise", i as u64).rng())?;
            let lap = eig_lower_laplace(&js, &model, &target)?;
            println!(
                "{tau:>4} {p:>5} {:>9.4} {:>9.4} {:>9.4}",
                eig_lower_gaussian(&js)?.value,
                lap.estimate.value,
                eig_upper_gaussian(&js)?.value
            );
        }
    }
    Ok(())
}
