//! The 1D heat model: P1 finite elements in space, implicit midpoint in time,
//! observed at dyadic points. Prints observations for a few designs.

use nalgebra::DVector;
use seqboed::models::{HeatModelConfig, HeatSolver};

fn main() -> seqboed::Result<()> {
    let cfg = HeatModelConfig::multi_dim();
    let solver = HeatSolver::new(cfg.clone())?;
    println!("observation points {:?}", cfg.observation_points());
    println!("noise standard deviation {:.4e}", solver.noise_scale()?);
    let u = DVector::from_element(cfg.param_dim, 2.0);
    for p in [0.0, 0.5, 1.0, 1.5, 2.0] {
        let traj = solver.solve(&u, p)?;
        for &step in &cfg.obs_steps {
            let y = solver.observe(&traj, step)?;
            println!("p = {p:.1}  step {step:>2}  y = {:?}", y.iter().map(|v| format!("{v:.4e}")).collect::<Vec<_>>());
        }
    }
    Ok(())
}
