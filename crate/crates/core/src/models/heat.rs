//! 1D heat equation `y_t - (κ(x,u) y_x)_x = f(x,p)` on `(0,1)` with zero
//! Dirichlet data and zero initial state.
//!
//! P1 finite elements on a uniform grid (exact mass matrix, two-point Gauss
//! quadrature for the κ-weighted stiffness and the load), implicit midpoint
//! time stepping
//! `(M + dt/2 K) y_{i+1} = (M - dt/2 K) y_i + dt F(t_{i+1/2})`.
//!
//! The diffusivity is `κ(x,u) = exp(Σ_ℓ c ℓ⁻² cos(ℓπx) u_ℓ)` and the source is
//! `exp(-α(p-1)²) ρ_σ(x)` with `ρ_σ` the density of `N(0.5, σ)` (σ is a
//! variance). Because the solution is linear in the source, one solve with
//! unit amplitude serves every design.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ForwardModel;
use crate::error::{Error, Result};

const GAUSS_OFFSET: f64 = 0.288_675_134_594_812_9; // 1/(2√3)

/// Uniform grid on `[0,1]` with `n_nodes` nodes including both boundaries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformMesh {
    n_nodes: usize,
}

impl UniformMesh {
    pub fn new(n_nodes: usize) -> Result<Self> {
        if n_nodes < 3 {
            return Err(Error::invalid(format!("mesh needs at least 3 nodes, got {n_nodes}")));
        }
        Ok(Self { n_nodes })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_interior(&self) -> usize {
        self.n_nodes - 2
    }

    pub fn n_elements(&self) -> usize {
        self.n_nodes - 1
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n_elements() as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        i as f64 * self.h()
    }

    /// Two Gauss points per element, element-major.
    pub fn quadrature_points(&self) -> Vec<f64> {
        let h = self.h();
        (0..self.n_elements())
            .flat_map(|e| {
                let mid = (e as f64 + 0.5) * h;
                [mid - GAUSS_OFFSET * h, mid + GAUSS_OFFSET * h]
            })
            .collect()
    }

    /// `F_i = ∫ f φ_i` over interior basis functions, by two-point Gauss.
    pub fn load_vector(&self, f: impl Fn(f64) -> f64) -> DVector<f64> {
        let h = self.h();
        let mut load = DVector::zeros(self.n_interior());
        for (q, x) in self.quadrature_points().into_iter().enumerate() {
            let e = q / 2;
            let w = 0.5 * h * f(x);
            let right = (x - self.node(e)) / h; // φ_{e+1}
            if e >= 1 {
                load[e - 1] += w * (1.0 - right);
            }
            if e + 1 <= self.n_interior() {
                load[e] += w * right;
            }
        }
        load
    }
}

/// Interior nodal values at every time step; row `i` is step `i+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub mesh: UniformMesh,
    pub dt: f64,
    pub values: DMatrix<f64>,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.values.nrows()
    }

    /// P1 interpolant of step `step` (1-based) at `x ∈ [0,1]`.
    pub fn value_at(&self, step: usize, x: f64) -> f64 {
        let row = self.values.row(step - 1);
        let nodal = |i: usize| {
            if i == 0 || i + 1 >= self.mesh.n_nodes() {
                0.0
            } else {
                row[i - 1]
            }
        };
        let s = (x.clamp(0.0, 1.0) / self.mesh.h()).min(self.mesh.n_elements() as f64 - 1e-12);
        let e = s.floor() as usize;
        let w = s - e as f64;
        (1.0 - w) * nodal(e) + w * nodal(e + 1)
    }
}

/// Tridiagonal system stored as three bands over the interior nodes.
#[derive(Debug, Clone)]
struct Tridiagonal {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
}

impl Tridiagonal {
    fn mul(&self, x: &[f64], out: &mut [f64]) {
        let n = self.diag.len();
        for i in 0..n {
            let mut s = self.diag[i] * x[i];
            if i > 0 {
                s += self.lower[i] * x[i - 1];
            }
            if i + 1 < n {
                s += self.upper[i] * x[i + 1];
            }
            out[i] = s;
        }
    }
}

/// Thomas-algorithm factorization of a tridiagonal matrix.
struct ThomasFactor {
    lower: Vec<f64>,
    pivots: Vec<f64>,
    upper: Vec<f64>,
}

impl ThomasFactor {
    fn new(a: &Tridiagonal) -> Result<Self> {
        let n = a.diag.len();
        let mut pivots = vec![0.0; n];
        for i in 0..n {
            let mut p = a.diag[i];
            if i > 0 {
                p -= a.lower[i] * a.upper[i - 1] / pivots[i - 1];
            }
            if !(p.abs() > 1e-300) || !p.is_finite() {
                return Err(Error::Solver(format!("zero pivot at row {i} of the heat system")));
            }
            pivots[i] = p;
        }
        Ok(Self {
            lower: a.lower.clone(),
            pivots,
            upper: a.upper.clone(),
        })
    }

    fn solve_mut(&self, b: &mut [f64]) {
        let n = b.len();
        for i in 1..n {
            b[i] -= self.lower[i] / self.pivots[i - 1] * b[i - 1];
        }
        b[n - 1] /= self.pivots[n - 1];
        for i in (0..n - 1).rev() {
            b[i] = (b[i] - self.upper[i] * b[i + 1]) / self.pivots[i];
        }
    }
}

/// Integrate with implicit midpoint steps given diffusivity values at the
/// mesh quadrature points and a time-dependent load vector.
pub fn midpoint_fem_solve(
    mesh: &UniformMesh,
    kappa_at_quadrature: &[f64],
    mut load_at: impl FnMut(f64) -> DVector<f64>,
    dt: f64,
    n_steps: usize,
) -> Result<Trajectory> {
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("time step must be positive, got {dt}")));
    }
    let n = mesh.n_interior();
    let h = mesh.h();
    if kappa_at_quadrature.len() != 2 * mesh.n_elements() {
        return Err(Error::DimensionMismatch {
            context: "diffusivity quadrature values",
            expected: 2 * mesh.n_elements(),
            got: kappa_at_quadrature.len(),
        });
    }
    // stiffness bands from element contributions ∫κ / h²
    let mut k_diag = vec![0.0; n];
    let mut k_off = vec![0.0; n]; // k_off[i] couples interior i and i+1
    for e in 0..mesh.n_elements() {
        let ke = 0.5 * h * (kappa_at_quadrature[2 * e] + kappa_at_quadrature[2 * e + 1]) / (h * h);
        // element e joins nodes e and e+1, i.e. interior e-1 and e
        if e >= 1 {
            k_diag[e - 1] += ke;
        }
        if e < n {
            k_diag[e] += ke;
        }
        if e >= 1 && e < n {
            k_off[e - 1] -= ke;
        }
    }
    let band = |sign: f64| {
        let mut t = Tridiagonal {
            lower: vec![0.0; n],
            diag: vec![0.0; n],
            upper: vec![0.0; n],
        };
        for i in 0..n {
            t.diag[i] = 2.0 * h / 3.0 + sign * 0.5 * dt * k_diag[i];
            if i + 1 < n {
                t.upper[i] = h / 6.0 + sign * 0.5 * dt * k_off[i];
                t.lower[i + 1] = t.upper[i];
            }
        }
        t
    };
    let implicit = ThomasFactor::new(&band(1.0))?;
    let explicit = band(-1.0);

    let mut values = DMatrix::zeros(n_steps, n);
    let mut y = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for step in 0..n_steps {
        let t_mid = (step as f64 + 0.5) * dt;
        let f = load_at(t_mid);
        explicit.mul(&y, &mut rhs);
        for i in 0..n {
            rhs[i] += dt * f[i];
        }
        implicit.solve_mut(&mut rhs);
        std::mem::swap(&mut y, &mut rhs);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver(format!("non-finite heat solution at step {}", step + 1)));
        }
        for i in 0..n {
            values[(step, i)] = y[i];
        }
    }
    Ok(Trajectory {
        mesh: *mesh,
        dt,
        values,
    })
}

/// Configuration of the heat-equation forward model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatModelConfig {
    /// Grid nodes including both boundary nodes.
    pub n_x: usize,
    pub dt: f64,
    pub n_steps: usize,
    /// 1-based time-step indices at which observations are taken.
    pub obs_steps: Vec<usize>,
    /// Number of diffusivity modes `d`.
    pub param_dim: usize,
    /// Observation level; `k = 2^level - 1` dyadic interior points.
    pub n_obs_level: u32,
    pub diffusion_c: f64,
    pub alpha: f64,
    pub sigma: f64,
    #[serde(default = "one")]
    pub source_amplitude: f64,
}

fn one() -> f64 {
    1.0
}

impl HeatModelConfig {
    /// Eight diffusivity modes, three observation points, `c = 0.5`.
    pub fn multi_dim() -> Self {
        Self {
            n_x: 33,
            dt: 0.005,
            n_steps: 15,
            obs_steps: vec![5, 10, 15],
            param_dim: 8,
            n_obs_level: 2,
            diffusion_c: 0.5,
            alpha: 10.0,
            sigma: 0.1,
            source_amplitude: 1.0,
        }
    }

    /// One diffusivity mode, one observation point at `x = 0.5`, `c = 1.5`.
    pub fn scalar() -> Self {
        Self {
            param_dim: 1,
            n_obs_level: 1,
            diffusion_c: 1.5,
            ..Self::multi_dim()
        }
    }

    pub fn obs_dim(&self) -> usize {
        (1usize << self.n_obs_level) - 1
    }

    pub fn observation_points(&self) -> Vec<f64> {
        let denom = (1usize << self.n_obs_level) as f64;
        (1..=self.obs_dim()).map(|j| j as f64 / denom).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::invalid("heat model: dt must be positive"));
        }
        if self.n_x < 3 {
            return Err(Error::invalid("heat model: n_x must be at least 3"));
        }
        if self.param_dim == 0 {
            return Err(Error::invalid("heat model: param_dim must be at least 1"));
        }
        if self.n_obs_level == 0 || self.obs_dim() >= self.n_x {
            return Err(Error::invalid("heat model: need 1 <= k < n_x observation points"));
        }
        if let Some(s) = self.obs_steps.iter().find(|&&s| s == 0 || s > self.n_steps) {
            return Err(Error::invalid(format!(
                "heat model: observation step {s} outside 1..={}",
                self.n_steps
            )));
        }
        if !(self.sigma > 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::invalid("heat model: need sigma > 0 and alpha >= 0"));
        }
        Ok(())
    }

    /// Source amplitude `exp(-α(p-1)²)` times the configured scale.
    pub fn source_scale(&self, p: f64) -> f64 {
        self.source_amplitude * (-self.alpha * (p - 1.0).powi(2)).exp()
    }
}

const CACHE_GENERATION: usize = 1 << 16;

#[derive(Debug, Default)]
struct ObservationCache {
    current: HashMap<Vec<u64>, Arc<DMatrix<f64>>>,
    previous: HashMap<Vec<u64>, Arc<DMatrix<f64>>>,
}

impl ObservationCache {
    fn get(&self, key: &[u64]) -> Option<Arc<DMatrix<f64>>> {
        self.current.get(key).or_else(|| self.previous.get(key)).cloned()
    }

    fn insert(&mut self, key: Vec<u64>, value: Arc<DMatrix<f64>>) {
        if self.current.len() >= CACHE_GENERATION {
            self.previous = std::mem::take(&mut self.current);
        }
        self.current.insert(key, value);
    }
}

/// Precomputed discretization plus a cache of unit-source observations keyed
/// by the exact parameter vector.
#[derive(Debug)]
pub struct HeatSolver {
    cfg: HeatModelConfig,
    mesh: UniformMesh,
    /// `modes[q * d + ℓ] = c ℓ⁻² cos(ℓπ x_q)`.
    modes: Vec<f64>,
    unit_load: DVector<f64>,
    obs_points: Vec<f64>,
    cache: Mutex<ObservationCache>,
}

impl HeatSolver {
    pub fn new(cfg: HeatModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mesh = UniformMesh::new(cfg.n_x)?;
        let d = cfg.param_dim;
        let modes = mesh
            .quadrature_points()
            .into_iter()
            .flat_map(|x| {
                (1..=d).map(move |l| {
                    let l = l as f64;
                    cfg.diffusion_c / (l * l) * (l * PI * x).cos()
                })
            })
            .collect();
        let var = cfg.sigma;
        let norm = 1.0 / (2.0 * PI * var).sqrt();
        let unit_load = mesh.load_vector(|x| norm * (-(x - 0.5).powi(2) / (2.0 * var)).exp());
        Ok(Self {
            obs_points: cfg.observation_points(),
            cfg,
            mesh,
            modes,
            unit_load,
            cache: Mutex::new(ObservationCache::default()),
        })
    }

    pub fn config(&self) -> &HeatModelConfig {
        &self.cfg
    }

    pub fn mesh(&self) -> &UniformMesh {
        &self.mesh
    }

    /// `κ(x_q, u)` at every quadrature point.
    pub fn diffusivity(&self, u: &DVector<f64>) -> Result<Vec<f64>> {
        let d = self.cfg.param_dim;
        if u.len() != d {
            return Err(Error::DimensionMismatch {
                context: "heat model parameter",
                expected: d,
                got: u.len(),
            });
        }
        let kappa: Vec<f64> = self
            .modes
            .chunks_exact(d)
            .map(|m| m.iter().zip(u.iter()).map(|(a, b)| a * b).sum::<f64>().exp())
            .collect();
        if kappa.iter().any(|k| !k.is_finite() || *k <= 0.0) {
            return Err(Error::NonFinite("heat diffusivity".into()));
        }
        Ok(kappa)
    }

    /// Solve for the source of design `p`.
    pub fn solve(&self, u: &DVector<f64>, p: f64) -> Result<Trajectory> {
        let kappa = self.diffusivity(u)?;
        let load = &self.unit_load * self.cfg.source_scale(p);
        midpoint_fem_solve(&self.mesh, &kappa, |_| load.clone(), self.cfg.dt, self.cfg.n_steps)
    }

    /// Observations at every step for a unit-amplitude source (`n_steps × k`).
    pub fn unit_observations(&self, u: &DVector<f64>) -> Result<Arc<DMatrix<f64>>> {
        let key: Vec<u64> = u.iter().map(|v| v.to_bits()).collect();
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(hit);
        }
        let kappa = self.diffusivity(u)?;
        let load = &self.unit_load * self.cfg.source_amplitude;
        let traj = midpoint_fem_solve(&self.mesh, &kappa, |_| load.clone(), self.cfg.dt, self.cfg.n_steps)?;
        let obs = Arc::new(DMatrix::from_fn(self.cfg.n_steps, self.obs_points.len(), |s, j| {
            traj.value_at(s + 1, self.obs_points[j])
        }));
        self.cache.lock().expect("cache lock").insert(key, obs.clone());
        Ok(obs)
    }

    /// Observation vector at a 1-based time step.
    pub fn observe(&self, traj: &Trajectory, step: usize) -> Result<DVector<f64>> {
        if step == 0 || step > traj.n_steps() {
            return Err(Error::invalid(format!(
                "observation step {step} outside 1..={}",
                traj.n_steps()
            )));
        }
        Ok(DVector::from_iterator(
            self.obs_points.len(),
            self.obs_points.iter().map(|&x| traj.value_at(step, x)),
        ))
    }

    /// `‖G(0.5·1, 1)‖₂` with observations stacked over all observation steps.
    pub fn reference_norm(&self) -> Result<f64> {
        let u = DVector::from_element(self.cfg.param_dim, 0.5);
        let traj = self.solve(&u, 1.0)?;
        let mut sq = 0.0;
        for &s in &self.cfg.obs_steps {
            sq += self.observe(&traj, s)?.norm_squared();
        }
        Ok(sq.sqrt())
    }

    /// Noise standard deviation `0.1 ‖G(0.5·1, 1)‖₂`. The noise covariance is
    /// its square times `I_k`.
    pub fn noise_scale(&self) -> Result<f64> {
        Ok(0.1 * self.reference_norm()?)
    }
}

pub fn heat_solve(cfg: &HeatModelConfig, u: &DVector<f64>, p: f64) -> Result<Trajectory> {
    HeatSolver::new(cfg.clone())?.solve(u, p)
}

pub fn heat_observe(cfg: &HeatModelConfig, trajectory: &Trajectory, step: usize) -> Result<DVector<f64>> {
    HeatSolver::new(cfg.clone())?.observe(trajectory, step)
}

pub fn heat_noise_scale(cfg: &HeatModelConfig) -> Result<f64> {
    HeatSolver::new(cfg.clone())?.noise_scale()
}

/// The heat solver observed at one fixed time step, `G_n = O_{t_n} ∘ G`.
#[derive(Debug, Clone)]
pub struct HeatObservationModel {
    solver: Arc<HeatSolver>,
    step: usize,
}

impl HeatObservationModel {
    pub fn new(solver: Arc<HeatSolver>, step: usize) -> Result<Self> {
        if step == 0 || step > solver.cfg.n_steps {
            return Err(Error::invalid(format!("observation step {step} outside the simulated range")));
        }
        Ok(Self { solver, step })
    }

    /// One model per configured observation step, sharing the solver cache.
    pub fn for_each_observation_step(solver: Arc<HeatSolver>) -> Result<Vec<Self>> {
        solver
            .cfg
            .obs_steps
            .clone()
            .into_iter()
            .map(|s| Self::new(solver.clone(), s))
            .collect()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn solver(&self) -> &Arc<HeatSolver> {
        &self.solver
    }
}

impl ForwardModel for HeatObservationModel {
    fn param_dim(&self) -> usize {
        self.solver.cfg.param_dim
    }

    fn obs_dim(&self) -> usize {
        self.solver.obs_points.len()
    }

    fn evaluate(&self, u: &DVector<f64>, design: &DVector<f64>) -> Result<DVector<f64>> {
        let obs = self.solver.unit_observations(u)?;
        let scale = self.solver.cfg.source_scale(design[0]);
        Ok(obs.row(self.step - 1).transpose() * scale)
    }
}
