//! Parameterized forward maps `G(u, p)`.
//!
//! Designs are vectors (`dim_p = 1` in every bundled model). Evaluation is
//! deterministic; observation noise is added by callers.

mod heat;

pub use heat::{
    heat_noise_scale, heat_observe, heat_solve, midpoint_fem_solve, HeatModelConfig, HeatObservationModel,
    HeatSolver, Trajectory, UniformMesh,
};

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A deterministic forward map from parameters and a design to observations.
pub trait ForwardModel: Send + Sync + fmt::Debug {
    fn param_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn design_dim(&self) -> usize {
        1
    }

    fn evaluate(&self, u: &DVector<f64>, design: &DVector<f64>) -> Result<DVector<f64>>;

    /// Evaluate every row of a `J × d` particle matrix, returning `J × k`.
    fn evaluate_batch(&self, particles: &DMatrix<f64>, design: &DVector<f64>) -> Result<DMatrix<f64>> {
        let j = particles.nrows();
        let mut out = DMatrix::zeros(j, self.obs_dim());
        for i in 0..j {
            let u = particles.row(i).transpose();
            let g = self.evaluate(&u, design).map_err(|e| e.at_particle(i))?;
            out.row_mut(i).copy_from(&g.transpose());
        }
        Ok(out)
    }
}

/// Evaluate and reject non-finite output.
pub fn evaluate_checked(
    model: &dyn ForwardModel,
    u: &DVector<f64>,
    design: &DVector<f64>,
) -> Result<DVector<f64>> {
    if u.len() != model.param_dim() {
        return Err(Error::DimensionMismatch {
            context: "forward model parameter",
            expected: model.param_dim(),
            got: u.len(),
        });
    }
    let g = model.evaluate(u, design)?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{model:?}")));
    }
    Ok(g)
}

/// Batch evaluation that rejects non-finite rows with the offending index.
pub fn evaluate_batch_checked(
    model: &dyn ForwardModel,
    particles: &DMatrix<f64>,
    design: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    if particles.ncols() != model.param_dim() {
        return Err(Error::DimensionMismatch {
            context: "forward model parameter",
            expected: model.param_dim(),
            got: particles.ncols(),
        });
    }
    let g = model.evaluate_batch(particles, design)?;
    for i in 0..g.nrows() {
        if g.row(i).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{model:?}")).at_particle(i));
        }
    }
    Ok(g)
}

/// A one-dimensional design vector.
pub fn design(p: f64) -> DVector<f64> {
    DVector::from_element(1, p)
}

/// `A(p) = -c(p-1)² + d_shift`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearModelConfig {
    pub c: f64,
    pub d_shift: f64,
}

impl Default for LinearModelConfig {
    fn default() -> Self {
        Self { c: 2.0, d_shift: 3.0 }
    }
}

impl LinearModelConfig {
    pub fn operator(&self, p: f64) -> f64 {
        -self.c * (p - 1.0).powi(2) + self.d_shift
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return Err(Error::invalid(format!("linear model needs c > 0, got {}", self.c)));
        }
        Ok(())
    }
}

pub fn linear_eval(cfg: &LinearModelConfig, u: f64, p: f64) -> f64 {
    cfg.operator(p) * u
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearLinearModelConfig {
    pub c: f64,
    pub d_shift: f64,
    pub tau: f64,
}

impl NearLinearModelConfig {
    pub fn linear_part(&self) -> LinearModelConfig {
        LinearModelConfig {
            c: self.c,
            d_shift: self.d_shift,
        }
    }
}

/// `A(p)u + τu²`.
pub fn near_linear_eval(cfg: &NearLinearModelConfig, u: f64, p: f64) -> f64 {
    cfg.linear_part().operator(p) * u + cfg.tau * u * u
}

/// Scalar linear model `G(u, p) = A(p) u`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub cfg: LinearModelConfig,
}

impl LinearModel {
    pub fn new(cfg: LinearModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }
}

impl ForwardModel for LinearModel {
    fn param_dim(&self) -> usize {
        1
    }
    fn obs_dim(&self) -> usize {
        1
    }
    fn evaluate(&self, u: &DVector<f64>, design: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::from_element(1, linear_eval(&self.cfg, u[0], design[0])))
    }
    fn evaluate_batch(&self, particles: &DMatrix<f64>, design: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(particles * self.cfg.operator(design[0]))
    }
}

/// Scalar near-linear model `G(u, p) = A(p) u + τ u²`.
#[derive(Debug, Clone)]
pub struct NearLinearModel {
    pub cfg: NearLinearModelConfig,
}

impl NearLinearModel {
    pub fn new(cfg: NearLinearModelConfig) -> Result<Self> {
        cfg.linear_part().validate()?;
        Ok(Self { cfg })
    }
}

impl ForwardModel for NearLinearModel {
    fn param_dim(&self) -> usize {
        1
    }
    fn obs_dim(&self) -> usize {
        1
    }
    fn evaluate(&self, u: &DVector<f64>, design: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::from_element(1, near_linear_eval(&self.cfg, u[0], design[0])))
    }
    fn evaluate_batch(&self, particles: &DMatrix<f64>, design: &DVector<f64>) -> Result<DMatrix<f64>> {
        let a = self.cfg.linear_part().operator(design[0]);
        let tau = self.cfg.tau;
        Ok(particles.map(|u| a * u + tau * u * u))
    }
}

/// Design-independent linear map `G(u, p) = H u`.
#[derive(Debug, Clone)]
pub struct MatrixModel {
    pub h: DMatrix<f64>,
}

impl MatrixModel {
    pub fn new(h: DMatrix<f64>) -> Self {
        Self { h }
    }
}

impl ForwardModel for MatrixModel {
    fn param_dim(&self) -> usize {
        self.h.ncols()
    }
    fn obs_dim(&self) -> usize {
        self.h.nrows()
    }
    fn evaluate(&self, u: &DVector<f64>, _design: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.h * u)
    }
    fn evaluate_batch(&self, particles: &DMatrix<f64>, _design: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(particles * self.h.transpose())
    }
}

/// `A(p)` of a design-dependent linear model as a `k × d` matrix, when the
/// model has one. Used by the closed-form EIG oracle.
pub fn linear_operator(model: &dyn ForwardModel, design: &DVector<f64>) -> Result<DMatrix<f64>> {
    let d = model.param_dim();
    let zero = model.evaluate(&DVector::zeros(d), design)?;
    let mut a = DMatrix::zeros(model.obs_dim(), d);
    for i in 0..d {
        let mut e = DVector::zeros(d);
        e[i] = 1.0;
        let col = model.evaluate(&e, design)? - &zero;
        a.set_column(i, &col);
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn linear_examples() {
        let cfg = LinearModelConfig { c: 2.0, d_shift: 3.0 };
        assert_eq!(linear_eval(&cfg, 1.0, 1.0), 3.0);
        assert_eq!(linear_eval(&cfg, 0.0, 0.37), 0.0);
        assert_eq!(linear_eval(&cfg, 2.0, 0.0), 2.0);
        assert!(LinearModel::new(LinearModelConfig { c: 0.0, d_shift: 1.0 }).is_err());
    }

    #[test]
    fn near_linear_examples() {
        let cfg = NearLinearModelConfig { c: 2.0, d_shift: 3.0, tau: 1.0 };
        assert_eq!(near_linear_eval(&cfg, 2.0, 1.0), 10.0);
        let cfg = NearLinearModelConfig { tau: 0.5, ..cfg };
        assert_eq!(near_linear_eval(&cfg, -1.0, 1.0), -2.5);
    }

    #[test]
    fn batch_matches_pointwise() {
        let m = NearLinearModel::new(NearLinearModelConfig { c: 2.0, d_shift: 3.0, tau: 0.7 }).unwrap();
        let us = DMatrix::from_column_slice(4, 1, &[-1.0, 0.0, 0.5, 2.0]);
        let p = design(0.3);
        let batch = m.evaluate_batch(&us, &p).unwrap();
        for i in 0..4 {
            let single = m.evaluate(&DVector::from_element(1, us[(i, 0)]), &p).unwrap();
            assert_relative_eq!(batch[(i, 0)], single[0]);
        }
    }

    #[test]
    fn matrix_model_operator_roundtrip() {
        let h = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.0, -1.0, 0.5, 3.0]);
        let m = MatrixModel::new(h.clone());
        assert_relative_eq!(linear_operator(&m, &design(0.0)).unwrap(), h);
    }

    proptest! {
        #[test]
        fn near_linear_reduces_to_linear(u in -5.0f64..5.0, p in -1.0f64..3.0, tau in -1.0f64..1.0) {
            let lin = LinearModelConfig { c: 2.0, d_shift: 3.0 };
            let nl0 = NearLinearModelConfig { c: 2.0, d_shift: 3.0, tau: 0.0 };
            prop_assert_eq!(near_linear_eval(&nl0, u, p), linear_eval(&lin, u, p));
            let nl = NearLinearModelConfig { tau, ..nl0 };
            let gap = (near_linear_eval(&nl, u, p) - linear_eval(&lin, u, p)).abs();
            prop_assert!(gap <= tau.abs() * 25.0 + 1e-12);
        }
    }
}
