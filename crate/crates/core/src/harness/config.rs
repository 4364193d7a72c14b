//! Experiment configuration: TOML with dot-path overrides.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use super::HarnessError;
use crate::eki::{EkiConfig, Inflation};
use crate::gaussian::Gaussian;
use crate::models::HeatModelConfig;
use crate::sequential::{CShift, DesignSelection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Bounds and closed-form EIG over a design grid.
    Linear,
    /// Gaussian and Laplace bounds over a design grid.
    NearLinear,
    /// Bounds at every observation time over a design grid.
    Heat,
    KlConvergence,
    /// Near-linear bounds over a grid of `tau` and designs.
    EigSweep,
    EkiOptimize,
    Sequential,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Linear => "linear",
            ExperimentKind::NearLinear => "near_linear",
            ExperimentKind::Heat => "heat",
            ExperimentKind::KlConvergence => "kl_convergence",
            ExperimentKind::EigSweep => "eig_sweep",
            ExperimentKind::EkiOptimize => "eki_optimize",
            ExperimentKind::Sequential => "sequential",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seeds: SeedsBlock,
    pub out_dir: Option<PathBuf>,
    pub model: Option<ModelBlock>,
    pub prior: Option<PriorBlock>,
    pub noise: Option<NoiseBlock>,
    pub sampler: Option<SamplerBlock>,
    pub eki: Option<EkiBlock>,
    pub eig: Option<EigBlock>,
    pub kl: Option<KlBlock>,
    pub sequential: Option<SequentialBlock>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsBlock {
    pub master: u64,
    /// Seed for drawing the ground truth from the prior.
    pub ground_truth: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatPreset {
    MultiDim,
    Scalar,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelBlock {
    Linear {
        c: f64,
        d_shift: f64,
    },
    NearLinear {
        c: f64,
        d_shift: f64,
        tau: f64,
    },
    Heat {
        preset: HeatPreset,
        n_x: Option<usize>,
        dt: Option<f64>,
        obs_steps: Option<Vec<usize>>,
        diffusion_c: Option<f64>,
        source_amplitude: Option<f64>,
    },
}

impl ModelBlock {
    pub fn heat_config(&self) -> Option<HeatModelConfig> {
        let ModelBlock::Heat {
            preset,
            n_x,
            dt,
            obs_steps,
            diffusion_c,
            source_amplitude,
        } = self
        else {
            return None;
        };
        let mut cfg = match preset {
            HeatPreset::MultiDim => HeatModelConfig::multi_dim(),
            HeatPreset::Scalar => HeatModelConfig::scalar(),
        };
        if let Some(v) = n_x {
            cfg.n_x = *v;
        }
        if let Some(v) = dt {
            cfg.dt = *v;
        }
        if let Some(v) = obs_steps {
            cfg.obs_steps = v.clone();
            cfg.n_steps = v.iter().copied().max().unwrap_or(cfg.n_steps);
        }
        if let Some(v) = diffusion_c {
            cfg.diffusion_c = *v;
        }
        if let Some(v) = source_amplitude {
            cfg.source_amplitude = *v;
        }
        Some(cfg)
    }

    pub fn param_dim(&self) -> usize {
        match self {
            ModelBlock::Heat { .. } => self.heat_config().map_or(1, |c| c.param_dim),
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrVec {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl ScalarOrVec {
    fn to_vector(&self, dim: usize) -> Option<DVector<f64>> {
        match self {
            ScalarOrVec::Scalar(v) => Some(DVector::from_element(dim, *v)),
            ScalarOrVec::Vector(v) if v.len() == dim => Some(DVector::from_column_slice(v)),
            ScalarOrVec::Vector(_) => None,
        }
    }
}

/// Gaussian prior: `mean` broadcast from a scalar or given in full, and
/// either an isotropic `variance` or a full `covariance`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorBlock {
    pub mean: ScalarOrVec,
    pub variance: Option<f64>,
    pub covariance: Option<Vec<Vec<f64>>>,
}

impl PriorBlock {
    pub fn build(&self, dim: usize) -> Result<Gaussian, HarnessError> {
        let mean = self
            .mean
            .to_vector(dim)
            .ok_or_else(|| HarnessError::invalid("prior.mean", format!("expected a scalar or {dim} entries")))?;
        let cov = match (&self.variance, &self.covariance) {
            (Some(v), None) => DMatrix::identity(dim, dim) * *v,
            (None, Some(rows)) => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(HarnessError::invalid("prior.covariance", format!("expected a {dim}x{dim} matrix")));
                }
                DMatrix::from_fn(dim, dim, |i, j| rows[i][j])
            }
            _ => {
                return Err(HarnessError::invalid(
                    "prior",
                    "give exactly one of `variance` and `covariance`",
                ))
            }
        };
        Gaussian::new(mean, cov).map_err(|e| HarnessError::invalid("prior", e.to_string()))
    }
}

/// Observation noise: an isotropic `variance`, or (heat model) a standard
/// deviation of `relative` times the norm of the reference observations.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseBlock {
    pub variance: Option<f64>,
    pub relative: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerBlock {
    pub j: i64,
    pub dt: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EigBlock {
    pub j: i64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_true")]
    pub laplace: bool,
    #[serde(default = "default_designs")]
    pub designs: Vec<f64>,
    /// Nonlinearity values for `eig_sweep`.
    #[serde(default)]
    pub taus: Vec<f64>,
}

fn default_delta() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

fn default_designs() -> Vec<f64> {
    (0..=8).map(|i| 0.25 * i as f64).collect()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EkiBlock {
    pub alpha: f64,
    pub t_end: f64,
    pub ensemble_size: i64,
    #[serde(default = "default_c_shift")]
    pub c_shift: f64,
    #[serde(default)]
    pub design_lower: f64,
    #[serde(default = "default_upper")]
    pub design_upper: f64,
    pub inflation: Option<Inflation>,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default = "default_atol")]
    pub atol: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

fn default_c_shift() -> f64 {
    3.0
}

fn default_upper() -> f64 {
    2.0
}

fn default_rtol() -> f64 {
    1e-6
}

fn default_atol() -> f64 {
    1e-9
}

fn default_max_steps() -> usize {
    100_000
}

impl EkiBlock {
    pub fn build(&self) -> EkiConfig {
        let mut cfg = EkiConfig::scalar(self.alpha, self.c_shift, self.t_end);
        if let Some(inflation) = self.inflation {
            cfg.inflation = inflation;
        }
        cfg.rtol = self.rtol;
        cfg.atol = self.atol;
        cfg.max_steps = self.max_steps;
        cfg
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KlBlock {
    pub j_grid: Vec<i64>,
    pub replicates: i64,
    #[serde(default = "default_kl_designs")]
    pub designs: Vec<f64>,
}

fn default_kl_designs() -> Vec<f64> {
    vec![1.0]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequentialBlock {
    pub n_steps: i64,
    #[serde(default)]
    pub selection: DesignSelection,
    #[serde(default)]
    pub warm_start: bool,
    pub c_shift: Option<CShift>,
    #[serde(default = "default_importance")]
    pub n_importance: usize,
    /// Explicit ground truth; drawn from the prior when absent.
    pub ground_truth: Option<Vec<f64>>,
}

fn default_importance() -> usize {
    10_000
}

/// Parse TOML text and apply `key.path=value` overrides.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<(ExperimentConfig, toml::Table), HarnessError> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg = ExperimentConfig::deserialize(toml::Value::Table(table.clone()))
        .map_err(|e| HarnessError::Parse(e.to_string()))?;
    Ok((cfg, table))
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<(ExperimentConfig, toml::Table), HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text, overrides)
}

/// Set `a.b.c = value`, creating tables on the way. The value is read as a
/// TOML literal, or as a bare string when it is not one.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), HarnessError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| HarnessError::Parse(format!("override `{spec}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::Parse(format!("override key `{key}` has an empty segment")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut cur = table;
    for seg in &path[..path.len() - 1] {
        let entry = cur
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Parse(format!("override `{key}`: `{seg}` is not a table")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

fn count(path: &str, v: i64, min: i64) -> Result<usize, HarnessError> {
    if v < min {
        return Err(HarnessError::invalid(path, format!("must be at least {min}, got {v}")));
    }
    Ok(v as usize)
}

fn positive(path: &str, v: f64) -> Result<(), HarnessError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(HarnessError::invalid(path, format!("must be positive, got {v}")))
    }
}

fn require<'a, T>(block: &'a Option<T>, name: &str, kind: ExperimentKind) -> Result<&'a T, HarnessError> {
    block
        .as_ref()
        .ok_or_else(|| HarnessError::invalid(name, format!("block required for kind `{}`", kind.name())))
}

impl ExperimentConfig {
    pub fn model(&self) -> Result<&ModelBlock, HarnessError> {
        require(&self.model, "model", self.kind)
    }

    pub fn prior(&self) -> Result<&PriorBlock, HarnessError> {
        require(&self.prior, "prior", self.kind)
    }

    pub fn noise(&self) -> Result<&NoiseBlock, HarnessError> {
        require(&self.noise, "noise", self.kind)
    }

    pub fn sampler(&self) -> Result<&SamplerBlock, HarnessError> {
        require(&self.sampler, "sampler", self.kind)
    }

    pub fn eki(&self) -> Result<&EkiBlock, HarnessError> {
        require(&self.eki, "eki", self.kind)
    }

    pub fn eig(&self) -> Result<&EigBlock, HarnessError> {
        require(&self.eig, "eig", self.kind)
    }

    pub fn kl(&self) -> Result<&KlBlock, HarnessError> {
        require(&self.kl, "kl", self.kind)
    }

    pub fn sequential(&self) -> Result<&SequentialBlock, HarnessError> {
        require(&self.sequential, "sequential", self.kind)
    }

    /// Check that every block the kind needs is present and in range.
    pub fn validate(&self) -> Result<(), HarnessError> {
        use ExperimentKind::*;
        let kind = self.kind;
        let model_type_ok = |m: &ModelBlock| match kind {
            Linear | KlConvergence => matches!(m, ModelBlock::Linear { .. }),
            NearLinear | EigSweep => matches!(m, ModelBlock::NearLinear { .. }),
            Heat => matches!(m, ModelBlock::Heat { .. }),
            EkiOptimize | Sequential => true,
        };
        let model = self.model()?;
        if !model_type_ok(model) {
            return Err(HarnessError::invalid("model.type", format!("does not fit kind `{}`", kind.name())));
        }
        match model {
            ModelBlock::Linear { c, .. } | ModelBlock::NearLinear { c, .. } => positive("model.c", *c)?,
            ModelBlock::Heat { .. } => {
                let cfg = model.heat_config().expect("heat block");
                cfg.validate().map_err(|e| HarnessError::invalid("model", e.to_string()))?;
            }
        }
        self.prior()?.build(model.param_dim())?;
        let noise = self.noise()?;
        match (noise.variance, noise.relative) {
            (Some(v), None) => positive("noise.variance", v)?,
            (None, Some(r)) => {
                positive("noise.relative", r)?;
                if !matches!(model, ModelBlock::Heat { .. }) {
                    return Err(HarnessError::invalid("noise.relative", "only defined for the heat model"));
                }
            }
            _ => return Err(HarnessError::invalid("noise", "give exactly one of `variance` and `relative`")),
        }
        if matches!(kind, Linear | NearLinear | Heat | EigSweep | EkiOptimize | Sequential) {
            let eig = self.eig()?;
            count("eig.j", eig.j, 3)?;
            positive("eig.delta", eig.delta)?;
            if eig.designs.is_empty() && kind != EkiOptimize && kind != Sequential {
                return Err(HarnessError::invalid("eig.designs", "must not be empty"));
            }
        }
        if kind == EigSweep && self.eig()?.taus.is_empty() {
            return Err(HarnessError::invalid("eig.taus", "must not be empty for `eig_sweep`"));
        }
        if kind == KlConvergence {
            let kl = self.kl()?;
            if kl.j_grid.len() < 2 {
                return Err(HarnessError::invalid("kl.j_grid", "needs at least two sample sizes"));
            }
            for (i, &j) in kl.j_grid.iter().enumerate() {
                count(&format!("kl.j_grid[{i}]"), j, 3)?;
            }
            count("kl.replicates", kl.replicates, 1)?;
        }
        if matches!(kind, EkiOptimize | Sequential) {
            let eki = self.eki()?;
            count("eki.ensemble_size", eki.ensemble_size, 1)?;
            if !(eki.design_lower <= eki.design_upper) {
                return Err(HarnessError::invalid("eki.design_lower", "must not exceed eki.design_upper"));
            }
            eki.build().validate().map_err(|e| HarnessError::invalid("eki", e.to_string()))?;
        }
        if kind == Sequential {
            self.sampler()?;
        }
        if let Some(sampler) = &self.sampler {
            count("sampler.j", sampler.j, 2)?;
            positive("sampler.dt", sampler.dt)?;
            if !(sampler.t_end >= sampler.dt) {
                return Err(HarnessError::invalid("sampler.t_end", "must be at least sampler.dt"));
            }
        }
        if let Some(eig) = &self.eig {
            count("eig.j", eig.j, 3)?;
        }
        if kind == Sequential {
            let seq = self.sequential()?;
            count("sequential.n_steps", seq.n_steps, 1)?;
            match &seq.ground_truth {
                Some(u) if u.len() != model.param_dim() => {
                    return Err(HarnessError::invalid(
                        "sequential.ground_truth",
                        format!("expected {} entries", model.param_dim()),
                    ))
                }
                None if self.seeds.ground_truth.is_none() => {
                    return Err(HarnessError::invalid(
                        "seeds.ground_truth",
                        "required unless sequential.ground_truth is given",
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Sample count as validated.
pub fn size(v: i64) -> usize {
    v.max(0) as usize
}
