//! KL divergence between the exact y-marginal / posterior of a linear-Gaussian
//! model and their empirical Gaussian fits, as the sample size grows.

use nalgebra::DVector;
use seqboed::gaussian::{condition_gaussian, empirical_moments, kl_gaussian, sample_gaussian, Gaussian};
use seqboed::rng::SeedStream;
use seqboed::stats::{log_log_slope, quantile};

fn main() -> seqboed::Result<()> {
    let seeds = SeedStream::new(2);
    let a = 3.0;
    let prior = Gaussian::scalar(2.0, 2.0)?;
    let noise = Gaussian::scalar(0.0, 1.0)?;
    let marginal = Gaussian::scalar(2.0 * a, 2.0 * a * a + 1.0)?;
    let post_var = 1.0 / (0.5 + a * a);
    let grid = [100usize, 1_000, 10_000, 100_000];
    let (mut km, mut kp) = (Vec::new(), Vec::new());
    println!("{:>7} {:>12} {:>12}", "J", "KL marginal", "KL post q50");
    for &j in &grid {
        let (mut m_sum, mut p_sum) = (0.0, 0.0);
        for rep in 0..10 {
            let mut rng = seeds.indexed(&format!("J{j}"), rep).rng();
            let u = sample_gaussian(&prior, j, &mut rng)?;
            let y = &u * a + sample_gaussian(&noise, j, &mut rng)?;
            let m = empirical_moments(&u, &y)?;
            m_sum += kl_gaussian(&marginal, &m.marginal_y()?)? / 10.0;
            let yq = quantile(y.as_slice(), 0.5);
            let truth = Gaussian::scalar(post_var * (1.0 + a * yq), post_var)?;
            p_sum += kl_gaussian(&truth, &condition_gaussian(&m, &DVector::from_element(1, yq))?)? / 10.0;
        }
        println!("{j:>7} {m_sum:>12.3e} {p_sum:>12.3e}");
        km.push(m_sum);
        kp.push(p_sum);
    }
    let xs: Vec<f64> = grid.iter().map(|&j| j as f64).collect();
    println!(
        "log-log slopes: marginal {:.2}, posterior {:.2}",
        log_log_slope(&xs, &km).unwrap_or(f64::NAN),
        log_log_slope(&xs, &kp).unwrap_or(f64::NAN)
    );
    Ok(())
}
