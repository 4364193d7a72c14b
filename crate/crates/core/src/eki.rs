//! Regularized ensemble Kalman inversion over designs.
//!
//! Maximizing an EIG estimate `L(p)` becomes the least-squares problem
//! `½F(p)² + α/2 ‖p‖²_{C_p}` with `F(p) = √(2(c − L(p)))`, solved by the
//! continuous-time EKI flow
//! `dp⁽ⁱ⁾/dt = (1−ρ)[−C_pF F(p⁽ⁱ⁾) − C_p α C_p⁻¹ p⁽ⁱ⁾] + ρ[−C_pF F̄ − C_p α C_p⁻¹ p̄]`
//! integrated with an adaptive Dormand–Prince 4(5) pair.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{center, sample_mean};
use crate::linalg::Cholesky;
use crate::rng::SeedStream;

/// `J_EKI × dim_p` design particles at a point in pseudo-time.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignEnsemble {
    pub designs: DMatrix<f64>,
    pub time: f64,
}

impl DesignEnsemble {
    pub fn new(designs: DMatrix<f64>) -> Result<Self> {
        if designs.nrows() < 2 {
            return Err(Error::invalid("EKI needs at least 2 design particles"));
        }
        if designs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial design ensemble".into()));
        }
        Ok(Self { designs, time: 0.0 })
    }

    /// Scalar designs.
    pub fn from_points(points: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_column_slice(points.len(), 1, points))
    }

    pub fn len(&self) -> usize {
        self.designs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.designs.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.designs.ncols()
    }

    pub fn design(&self, i: usize) -> DVector<f64> {
        self.designs.row(i).transpose()
    }

    pub fn mean(&self) -> DVector<f64> {
        sample_mean(&self.designs)
    }

    /// `V_e = (1/J) Σ ½‖p⁽ⁱ⁾ − p̄‖²`.
    pub fn spread(&self) -> f64 {
        ensemble_spread(&self.designs)
    }
}

pub fn ensemble_spread(designs: &DMatrix<f64>) -> f64 {
    let dev = center(designs, &sample_mean(designs));
    0.5 * dev.norm_squared() / designs.nrows() as f64
}

/// Mixing weight `ρ(t)` between particle-wise and mean-field drift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Inflation {
    Constant { rho: f64 },
    /// `ρ(t) = scale (1 − (t/horizon + 1)^(−gamma))`.
    Schedule { scale: f64, horizon: f64, gamma: f64 },
}

impl Inflation {
    pub fn rho(&self, t: f64) -> f64 {
        match *self {
            Inflation::Constant { rho } => rho,
            Inflation::Schedule { scale, horizon, gamma } => scale * (1.0 - (t / horizon + 1.0).powf(-gamma)),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Inflation::Constant { rho } => (0.0..1.0).contains(&rho),
            Inflation::Schedule { scale, horizon, gamma } => {
                (0.0..1.0).contains(&scale) && horizon > 0.0 && gamma >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("inflation {self:?} does not keep 0 <= rho < 1")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkiConfig {
    pub alpha: f64,
    /// SPD design-regularization covariance, `dim_p × dim_p`.
    pub c_p: DMatrix<f64>,
    pub inflation: Inflation,
    pub c_shift: f64,
    pub t_end: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Upper bound on accepted steps.
    pub max_steps: usize,
    /// Consecutive rejections tolerated before giving up.
    pub max_rejections: usize,
}

impl EkiConfig {
    /// Scalar designs with `C_p = 1`, the constant-free schedule
    /// `ρ(t) = 0.01(1 − (t/T + 1)^(−0.2))` and `T = t_end`.
    pub fn scalar(alpha: f64, c_shift: f64, t_end: f64) -> Self {
        Self {
            alpha,
            c_p: DMatrix::identity(1, 1),
            inflation: Inflation::Schedule {
                scale: 0.01,
                horizon: t_end,
                gamma: 0.2,
            },
            c_shift,
            t_end,
            rtol: 1e-6,
            atol: 1e-9,
            max_steps: 100_000,
            max_rejections: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::invalid(format!("EKI alpha must be positive, got {}", self.alpha)));
        }
        if !self.c_shift.is_finite() {
            return Err(Error::invalid("EKI c_shift must be finite"));
        }
        if !(self.t_end > 0.0) || !(self.rtol > 0.0) || !(self.atol > 0.0) {
            return Err(Error::invalid("EKI needs t_end, rtol, atol > 0"));
        }
        if self.c_p.nrows() != self.c_p.ncols() {
            return Err(Error::invalid("EKI c_p must be square"));
        }
        self.inflation.validate()
    }
}

/// `F = √(2(c − eig))`.
pub fn loss_transform(eig: f64, c_shift: f64) -> Result<f64> {
    let r = c_shift - eig;
    if !(r > 0.0) {
        return Err(Error::LossDomain { eig, c_shift });
    }
    Ok((2.0 * r).sqrt())
}

/// Inverse of [`loss_transform`].
pub fn eig_from_loss(loss: f64, c_shift: f64) -> f64 {
    c_shift - 0.5 * loss * loss
}

struct Regularizer {
    alpha: f64,
    c_p: Cholesky,
}

impl Regularizer {
    fn new(cfg: &EkiConfig) -> Result<Self> {
        Ok(Self {
            alpha: cfg.alpha,
            c_p: Cholesky::new(&cfg.c_p, "EKI design covariance C_p")?,
        })
    }

    fn drift(&self, designs: &DMatrix<f64>, losses: &DVector<f64>, rho: f64) -> Result<DMatrix<f64>> {
        let (j, dim) = designs.shape();
        if losses.len() != j {
            return Err(Error::DimensionMismatch {
                context: "EKI losses",
                expected: j,
                got: losses.len(),
            });
        }
        if self.c_p.dim() != dim {
            return Err(Error::DimensionMismatch {
                context: "EKI design covariance",
                expected: dim,
                got: self.c_p.dim(),
            });
        }
        if losses.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("EKI losses".into()));
        }
        let p_bar = sample_mean(designs);
        let dev = center(designs, &p_bar);
        let f_bar = losses.mean();
        let c_p_emp = dev.tr_mul(&dev) / j as f64;
        let c_pf = dev.tr_mul(&losses.add_scalar(-f_bar)) / j as f64; // dim × 1
        // C̃_p α C_p⁻¹ applied to a design vector
        let pull = |p: DVector<f64>| -> DVector<f64> { &c_p_emp * self.c_p.solve(&p) * self.alpha };
        let mean_field = -&c_pf * f_bar - pull(p_bar);
        let mut out = DMatrix::zeros(j, dim);
        for i in 0..j {
            let own = -&c_pf * losses[i] - pull(designs.row(i).transpose());
            out.row_mut(i).copy_from(&((1.0 - rho) * own + rho * &mean_field).transpose());
        }
        Ok(out)
    }
}

/// Right-hand side of the EKI flow for given losses at time `t`.
pub fn eki_rhs(designs: &DMatrix<f64>, losses: &DVector<f64>, cfg: &EkiConfig, t: f64) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    Regularizer::new(cfg)?.drift(designs, losses, cfg.inflation.rho(t))
}

/// State of the ensemble at one accepted integrator point.
#[derive(Debug, Clone, PartialEq)]
pub struct EkiTraceRow {
    pub t: f64,
    pub designs: DMatrix<f64>,
    pub eigs: DVector<f64>,
    pub losses: DVector<f64>,
    pub v_e: f64,
    pub rho: f64,
}

#[derive(Debug, Clone)]
pub struct EkiResult {
    pub ensemble: DesignEnsemble,
    pub trace: Vec<EkiTraceRow>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl EkiResult {
    /// Tail slope of `log V_e` against `log t` over `t ∈ [t_from, ∞)`.
    pub fn spread_slope(&self, t_from: f64) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .trace
            .iter()
            .filter(|r| r.t >= t_from && r.v_e > 0.0)
            .map(|r| (r.t.ln(), r.v_e.ln()))
            .collect();
        crate::stats::fit_slope(&pts)
    }
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

fn error_norm(err: &DMatrix<f64>, y0: &DMatrix<f64>, y1: &DMatrix<f64>, rtol: f64, atol: f64) -> f64 {
    let n = err.len() as f64;
    let s: f64 = err
        .iter()
        .zip(y0.iter().zip(y1.iter()))
        .map(|(e, (a, b))| (e / (atol + rtol * a.abs().max(b.abs()))).powi(2))
        .sum();
    (s / n).sqrt()
}

/// Integrate the EKI flow to `cfg.t_end`.
///
/// `eig_fn(designs, seed)` returns the EIG estimate of every design row. All
/// stage evaluations and retries of the `k`-th step receive the same seed
/// (`seeds.indexed("step", k)`), so the vector field is deterministic
/// within a step.
pub fn eki_optimize<F>(init: &DesignEnsemble, mut eig_fn: F, cfg: &EkiConfig, seeds: &SeedStream) -> Result<EkiResult>
where
    F: FnMut(&DMatrix<f64>, &SeedStream) -> Result<DVector<f64>>,
{
    cfg.validate()?;
    let reg = Regularizer::new(cfg)?;
    let mut eval = |p: &DMatrix<f64>, t: f64, step: usize| -> Result<(DMatrix<f64>, DVector<f64>, DVector<f64>)> {
        let eig = eig_fn(p, &seeds.indexed("step", step as u64))?;
        if eig.len() != p.nrows() {
            return Err(Error::DimensionMismatch {
                context: "EIG estimates per design",
                expected: p.nrows(),
                got: eig.len(),
            });
        }
        let losses = eig.iter().map(|&e| loss_transform(e, cfg.c_shift)).collect::<Result<Vec<_>>>()?;
        let losses = DVector::from_vec(losses);
        let drift = reg.drift(p, &losses, cfg.inflation.rho(t))?;
        Ok((drift, eig, losses))
    };

    let mut t = init.time;
    let t_end = init.time + cfg.t_end;
    let mut y = init.designs.clone();
    let mut step = 0usize;
    let (mut k0, mut eig, mut losses) = eval(&y, t, step)?;
    let mut trace = vec![EkiTraceRow {
        t,
        designs: y.clone(),
        eigs: eig.clone(),
        losses: losses.clone(),
        v_e: ensemble_spread(&y),
        rho: cfg.inflation.rho(t),
    }];

    // initial step from the scaled norms of the state and its derivative
    let scale = |m: &DMatrix<f64>| m.map(|v| cfg.atol + cfg.rtol * v.abs());
    let d0 = y.component_div(&scale(&y)).norm() / (y.len() as f64).sqrt();
    let d1 = k0.component_div(&scale(&y)).norm() / (y.len() as f64).sqrt();
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h = h.min(cfg.t_end);

    let mut rejected = 0usize;
    let mut consecutive = 0usize;
    while t < t_end * (1.0 - 1e-14) {
        if step >= cfg.max_steps {
            return Err(Error::Integrator {
                t,
                reason: format!("exceeded {} accepted steps", cfg.max_steps),
            });
        }
        h = h.min(t_end - t);
        let mut k: Vec<DMatrix<f64>> = Vec::with_capacity(7);
        k.push(k0.clone());
        for s in 1..7 {
            let mut ys = y.clone();
            for (r, kr) in k.iter().enumerate() {
                if A[s][r] != 0.0 {
                    ys += kr * (h * A[s][r]);
                }
            }
            k.push(eval(&ys, t + C[s] * h, step)?.0);
        }
        let mut y5 = y.clone();
        let mut err = DMatrix::zeros(y.nrows(), y.ncols());
        for s in 0..7 {
            y5 += &k[s] * (h * B5[s]);
            err += &k[s] * (h * (B5[s] - B4[s]));
        }
        let en = error_norm(&err, &y, &y5, cfg.rtol, cfg.atol);
        if en.is_finite() && en <= 1.0 {
            t += h;
            y = y5;
            step += 1;
            consecutive = 0;
            (k0, eig, losses) = eval(&y, t, step)?;
            trace.push(EkiTraceRow {
                t,
                designs: y.clone(),
                eigs: eig.clone(),
                losses: losses.clone(),
                v_e: ensemble_spread(&y),
                rho: cfg.inflation.rho(t),
            });
            let factor = if en == 0.0 { 5.0 } else { (0.9 * en.powf(-0.2)).clamp(0.2, 5.0) };
            h *= factor;
        } else {
            rejected += 1;
            consecutive += 1;
            if consecutive > cfg.max_rejections {
                return Err(Error::Integrator {
                    t,
                    reason: format!("{consecutive} consecutive rejected steps (h = {h:e})"),
                });
            }
            let factor = if en.is_finite() { (0.9 * en.powf(-0.2)).clamp(0.1, 0.5) } else { 0.1 };
            h *= factor;
            if h < 1e-14 * t.abs().max(1.0) {
                return Err(Error::Integrator {
                    t,
                    reason: "step size underflow".into(),
                });
            }
        }
    }
    let _ = (eig, losses);
    Ok(EkiResult {
        ensemble: DesignEnsemble { designs: y, time: t },
        trace,
        accepted_steps: step,
        rejected_steps: rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn loss_transform_examples() {
        assert_relative_eq!(loss_transform(0.0, 2.0).unwrap(), 2.0);
        assert!(matches!(loss_transform(2.0, 2.0), Err(Error::LossDomain { .. })));
        let eig = 0.5 * 19f64.ln();
        assert_relative_eq!(loss_transform(eig, 3.0).unwrap(), (2.0 * (3.0 - eig)).sqrt());
        assert!((loss_transform(eig, 3.0).unwrap() - 1.7480).abs() < 5e-4);
        assert_relative_eq!(eig_from_loss(loss_transform(eig, 3.0).unwrap(), 3.0), eig, epsilon = 1e-12);
    }

    #[test]
    fn collapsed_ensemble_has_zero_drift() {
        let cfg = EkiConfig::scalar(1e-2, 3.0, 10.0);
        let p = DMatrix::from_element(3, 1, 0.7);
        let f = DVector::from_element(3, 1.3);
        assert!(eki_rhs(&p, &f, &cfg, 0.0).unwrap().amax() < 1e-30);
    }

    #[test]
    fn limiting_inflation_forms_are_finite() {
        let p = DMatrix::from_column_slice(3, 1, &[0.2, 1.0, 1.7]);
        let f = DVector::from_vec(vec![0.3, 0.1, 0.5]);
        for rho in [0.0, 0.99] {
            let mut cfg = EkiConfig::scalar(1e-2, 3.0, 10.0);
            cfg.inflation = Inflation::Constant { rho };
            let d = eki_rhs(&p, &f, &cfg, 1.0).unwrap();
            assert!(d.iter().all(|v| v.is_finite()));
        }
        let mut cfg = EkiConfig::scalar(1e-2, 3.0, 10.0);
        cfg.inflation = Inflation::Constant { rho: 1.0 };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn drift_descends_on_absolute_value_loss() {
        // F(p) = |p| on a one-sided ensemble: the flow moves toward 0
        let mut cfg = EkiConfig::scalar(1e-12, 10.0, 10.0);
        cfg.inflation = Inflation::Constant { rho: 0.0 };
        for pts in [[0.5, 1.0, 1.5], [-1.5, -1.0, -0.5]] {
            let p = DMatrix::from_column_slice(3, 1, &pts);
            let f = p.column(0).map(f64::abs);
            let d = eki_rhs(&p, &f, &cfg, 0.0).unwrap();
            for i in 0..3 {
                assert!(d[(i, 0)] * pts[i] < 0.0, "particle {i} drifts away from 0");
            }
        }
    }

    #[test]
    fn schedule_matches_formula() {
        let inf = Inflation::Schedule {
            scale: 0.01,
            horizon: 1e3,
            gamma: 0.2,
        };
        assert_eq!(inf.rho(0.0), 0.0);
        assert_relative_eq!(inf.rho(1e3), 0.01 * (1.0 - 2f64.powf(-0.2)));
    }

    #[test]
    fn quadratic_eig_converges_to_regularized_optimum() {
        // EIG(p) = 1 − (p − 1)², regularized optimum p* = 1/(1 + α/2)
        let alpha = 0.1;
        let cfg = EkiConfig::scalar(alpha, 3.0, 200.0);
        let init = DesignEnsemble::from_points(&[0.1, 0.9, 1.8]).unwrap();
        let res = eki_optimize(
            &init,
            |p, _| Ok(p.column(0).map(|x| 1.0 - (x - 1.0).powi(2))),
            &cfg,
            &SeedStream::new(1),
        )
        .unwrap();
        let target = 1.0 / (1.0 + alpha / 2.0);
        assert!((res.ensemble.mean()[0] - target).abs() < 0.02, "{}", res.ensemble.mean()[0]);
        assert!(res.trace.last().unwrap().v_e < res.trace[0].v_e);
    }
}
