//! Empirical moments, Gaussian densities, closed-form KL divergence and
//! Gaussian conditioning through the Schur complement.
//!
//! Sample sets are stored row-wise: a `J × d` matrix holds `J` draws of a
//! `d`-dimensional variable.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt, repair_psd, symmetrize, Cholesky};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Divisor used for empirical (cross-)covariances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// `1/(J-1)`, the unbiased estimator.
    #[default]
    Unbiased,
    /// `1/J`, used by the particle dynamics.
    Population,
}

impl Normalization {
    pub fn divisor(self, count: usize) -> f64 {
        match self {
            Normalization::Unbiased => (count as f64 - 1.0).max(1.0),
            Normalization::Population => count as f64,
        }
    }
}

/// Column means of a row-wise sample matrix.
pub fn sample_mean(samples: &DMatrix<f64>) -> DVector<f64> {
    let j = samples.nrows().max(1) as f64;
    DVector::from_iterator(
        samples.ncols(),
        samples.column_iter().map(|c| c.sum() / j),
    )
}

/// Subtract `mean` from every row.
pub fn center(samples: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut c = samples.clone();
    for (k, mut col) in c.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[k]);
    }
    c
}

/// Cross-covariance of two already-centered row-wise sample sets.
pub fn cross_covariance(
    a_centered: &DMatrix<f64>,
    b_centered: &DMatrix<f64>,
    norm: Normalization,
) -> DMatrix<f64> {
    a_centered.tr_mul(b_centered) / norm.divisor(a_centered.nrows())
}

/// Empirical covariance of a row-wise sample set.
pub fn sample_covariance(samples: &DMatrix<f64>, norm: Normalization) -> DMatrix<f64> {
    let c = center(samples, &sample_mean(samples));
    symmetrize(&cross_covariance(&c, &c, norm))
}

/// A multivariate normal distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl Gaussian {
    /// Builds a Gaussian, symmetrizing the covariance.
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::DimensionMismatch {
                context: "Gaussian covariance",
                expected: d,
                got: covariance.nrows(),
            });
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("Gaussian parameters must be finite"));
        }
        Ok(Self {
            mean,
            covariance: symmetrize(&covariance),
        })
    }

    pub fn scalar(mean: f64, variance: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(1, mean),
            DMatrix::from_element(1, 1, variance),
        )
    }

    /// `N(mean·1, variance·I)` in `dim` dimensions.
    pub fn isotropic(dim: usize, mean: f64, variance: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(dim, mean),
            DMatrix::identity(dim, dim) * variance,
        )
    }

    pub fn zero_mean(covariance: DMatrix<f64>) -> Result<Self> {
        Self::new(DVector::zeros(covariance.nrows()), covariance)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Precompute the Cholesky factor for repeated density evaluation.
    pub fn density(&self) -> Result<GaussianDensity> {
        GaussianDensity::new(self.mean.clone(), &self.covariance)
    }

    /// `log N(x; m, C)`.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "gaussian_log_density",
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(self.density()?.log_density(x.as_slice()))
    }
}

/// A Gaussian with a factored covariance.
#[derive(Debug, Clone)]
pub struct GaussianDensity {
    mean: DVector<f64>,
    chol: Cholesky,
    log_norm: f64,
}

impl GaussianDensity {
    pub fn new(mean: DVector<f64>, covariance: &DMatrix<f64>) -> Result<Self> {
        let chol = Cholesky::new(covariance, "gaussian density covariance")?;
        Ok(Self::from_factor(mean, chol))
    }

    pub fn from_factor(mean: DVector<f64>, chol: Cholesky) -> Self {
        let d = mean.len() as f64;
        let log_norm = -0.5 * (d * LN_2PI + chol.log_det());
        Self {
            mean,
            chol,
            log_norm,
        }
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn factor(&self) -> &Cholesky {
        &self.chol
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.mean.len();
        let mut diff = [0.0f64; 16];
        if d <= 16 {
            for i in 0..d {
                diff[i] = x[i] - self.mean[i];
            }
            self.log_density_centered(&diff[..d])
        } else {
            let diff: Vec<f64> = x.iter().zip(self.mean.iter()).map(|(a, b)| a - b).collect();
            self.log_density_centered(&diff)
        }
    }

    /// Density of `x - mean` supplied directly.
    pub fn log_density_centered(&self, diff: &[f64]) -> f64 {
        self.log_norm - 0.5 * self.chol.quad_form(diff)
    }
}

/// `KL(p ‖ q)` between two Gaussians in closed form.
pub fn kl_gaussian(p: &Gaussian, q: &Gaussian) -> Result<f64> {
    let d = p.dim();
    if q.dim() != d {
        return Err(Error::DimensionMismatch {
            context: "kl_gaussian",
            expected: d,
            got: q.dim(),
        });
    }
    let cp = Cholesky::new(p.covariance(), "kl_gaussian: first covariance")?;
    let cq = Cholesky::new(q.covariance(), "kl_gaussian: second covariance")?;
    let trace = cq.solve_matrix(p.covariance()).trace();
    let dm = q.mean() - p.mean();
    let maha = cq.quad_form(dm.as_slice());
    let log_det_ratio = cq.log_det() - cp.log_det();
    Ok(0.5 * (trace - d as f64 + maha + log_det_ratio))
}

/// Per-block empirical moments of paired `(u, y)` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMoments {
    pub mean_u: DVector<f64>,
    pub mean_y: DVector<f64>,
    pub cov_u: DMatrix<f64>,
    pub cov_y: DMatrix<f64>,
    /// `d × k`; the `k × d` partner is its transpose.
    pub cov_uy: DMatrix<f64>,
    pub sample_count: usize,
}

/// Moments with the unbiased `1/(J-1)` normalization.
pub fn empirical_moments(
    samples_u: &DMatrix<f64>,
    samples_y: &DMatrix<f64>,
) -> Result<EmpiricalMoments> {
    empirical_moments_with(samples_u, samples_y, Normalization::Unbiased)
}

pub fn empirical_moments_with(
    samples_u: &DMatrix<f64>,
    samples_y: &DMatrix<f64>,
    norm: Normalization,
) -> Result<EmpiricalMoments> {
    let j = samples_u.nrows();
    if j < 2 {
        return Err(Error::invalid(format!(
            "empirical moments need at least 2 samples, got {j}"
        )));
    }
    if samples_y.nrows() != j {
        return Err(Error::DimensionMismatch {
            context: "empirical_moments sample counts",
            expected: j,
            got: samples_y.nrows(),
        });
    }
    let mean_u = sample_mean(samples_u);
    let mean_y = sample_mean(samples_y);
    let cu = center(samples_u, &mean_u);
    let cy = center(samples_y, &mean_y);
    Ok(EmpiricalMoments {
        cov_u: symmetrize(&cross_covariance(&cu, &cu, norm)),
        cov_y: symmetrize(&cross_covariance(&cy, &cy, norm)),
        cov_uy: cross_covariance(&cu, &cy, norm),
        mean_u,
        mean_y,
        sample_count: j,
    })
}

impl EmpiricalMoments {
    pub fn marginal_u(&self) -> Result<Gaussian> {
        Gaussian::new(self.mean_u.clone(), self.cov_u.clone())
    }

    pub fn marginal_y(&self) -> Result<Gaussian> {
        Gaussian::new(self.mean_y.clone(), self.cov_y.clone())
    }

    /// The assembled `(d+k)`-dimensional joint Gaussian.
    pub fn joint(&self) -> Result<Gaussian> {
        let d = self.mean_u.len();
        let k = self.mean_y.len();
        let mut mean = DVector::zeros(d + k);
        mean.rows_mut(0, d).copy_from(&self.mean_u);
        mean.rows_mut(d, k).copy_from(&self.mean_y);
        let mut cov = DMatrix::zeros(d + k, d + k);
        cov.view_mut((0, 0), (d, d)).copy_from(&self.cov_u);
        cov.view_mut((d, d), (k, k)).copy_from(&self.cov_y);
        cov.view_mut((0, d), (d, k)).copy_from(&self.cov_uy);
        cov.view_mut((d, 0), (k, d)).copy_from(&self.cov_uy.transpose());
        Gaussian::new(mean, cov)
    }
}

/// The conditional family `u | y` of a joint Gaussian. The covariance does not
/// depend on `y`; the mean is affine in it.
#[derive(Debug, Clone)]
pub struct GaussianConditional {
    mean_u: DVector<f64>,
    mean_y: DVector<f64>,
    gain: DMatrix<f64>,
    covariance: DMatrix<f64>,
}

impl GaussianConditional {
    pub fn new(m: &EmpiricalMoments) -> Result<Self> {
        let chol_y = Cholesky::with_jitter(&m.cov_y, "conditioning: cov_y")?;
        // gain = C_uy C_y⁻¹ = (C_y⁻¹ C_yu)ᵀ
        let gain = chol_y.solve_matrix(&m.cov_uy.transpose()).transpose();
        let schur = &m.cov_u - &gain * m.cov_uy.transpose();
        let covariance = repair_psd(&schur, "conditional covariance")?;
        Ok(Self {
            mean_u: m.mean_u.clone(),
            mean_y: m.mean_y.clone(),
            gain,
            covariance,
        })
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn mean_at(&self, y: &[f64]) -> DVector<f64> {
        let dy = DVector::from_iterator(
            self.mean_y.len(),
            y.iter().zip(self.mean_y.iter()).map(|(a, b)| a - b),
        );
        &self.mean_u + &self.gain * dy
    }

    pub fn condition(&self, y: &DVector<f64>) -> Result<Gaussian> {
        if y.len() != self.mean_y.len() {
            return Err(Error::DimensionMismatch {
                context: "condition_gaussian",
                expected: self.mean_y.len(),
                got: y.len(),
            });
        }
        Gaussian::new(self.mean_at(y.as_slice()), self.covariance.clone())
    }

    /// Factored form for evaluating `log π̃(u | y)` many times.
    pub fn density(&self) -> Result<ConditionalDensity<'_>> {
        let chol = Cholesky::new(&self.covariance, "conditional covariance")?;
        Ok(ConditionalDensity {
            cond: self,
            density: GaussianDensity::from_factor(DVector::zeros(self.mean_u.len()), chol),
        })
    }
}

pub struct ConditionalDensity<'a> {
    cond: &'a GaussianConditional,
    density: GaussianDensity,
}

impl ConditionalDensity<'_> {
    pub fn log_density(&self, u: &[f64], y: &[f64]) -> f64 {
        let m = self.cond.mean_at(y);
        let diff: Vec<f64> = u.iter().zip(m.iter()).map(|(a, b)| a - b).collect();
        self.density.log_density_centered(&diff)
    }
}

/// Condition the joint Gaussian fit on an observed `y`.
pub fn condition_gaussian(m: &EmpiricalMoments, y_value: &DVector<f64>) -> Result<Gaussian> {
    GaussianConditional::new(m)?.condition(y_value)
}

/// Draw `count` i.i.d. samples as rows of a `count × d` matrix.
pub fn sample_gaussian<R: Rng + ?Sized>(
    g: &Gaussian,
    count: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if count == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let d = g.dim();
    let s = psd_sqrt(g.covariance());
    let mut z = DMatrix::<f64>::zeros(count, d);
    // row-major fill order keeps draws stable under changes of `count`
    for i in 0..count {
        for k in 0..d {
            z[(i, k)] = rng.sample(StandardNormal);
        }
    }
    let mut out = z * s.transpose();
    for (k, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(g.mean()[k]);
    }
    Ok(out)
}

/// Log-density constant `-½ d log(2π)`.
pub fn log_norm_const(d: usize) -> f64 {
    -0.5 * d as f64 * (2.0 * PI).ln()
}
