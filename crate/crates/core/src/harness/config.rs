//! Flat `key = value` run configuration.
//!
//! Files use TOML syntax restricted to top-level scalars:
//!
//! ```text
//! problem = "hyperlogreg"
//! dataset = "data/a9a"
//! algo = "vrdbo"
//! eta = 0.33
//! ```
//!
//! Unknown keys are rejected. [`RunConfig::set`] applies a single override
//! with the same grammar, so command-line values behave like file values.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergrad::HypergradParams;
use crate::optim::{AlgoConfig, Algorithm};
use crate::problems::QuadraticConfig;
use crate::topology::{MixingScheme, TopologyKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Quadratic,
    Hyperlogreg,
}

impl FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadratic" => Ok(Self::Quadratic),
            "hyperlogreg" => Ok(Self::Hyperlogreg),
            other => Err(Error::Config(format!("unknown problem `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Jsonl,
    Csv,
}

impl fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Jsonl => "jsonl",
            Self::Csv => "csv",
        })
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub topology: TopologyKind,
    pub mixing: MixingScheme,
    pub nodes: usize,

    pub problem: ProblemKind,
    // quadratic instance
    pub dim_x: usize,
    pub dim_y: usize,
    pub samples_per_node: usize,
    pub mu: f64,
    pub l_max: f64,
    pub rho: f64,
    pub noise_sigma: f64,
    pub heterogeneity: f64,
    pub coupling: f64,
    // logistic-regression instance
    pub dataset: Option<PathBuf>,
    pub dataset_dim: Option<usize>,
    pub val_frac: f64,
    pub max_samples: Option<usize>,

    pub algo: Algorithm,
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub batch_size: usize,
    /// Defaults to `batch_size`.
    pub init_batch: Option<usize>,
    pub neumann_j: usize,
    /// Defaults to the largest eigenvalue of `A` (quadratic) or 10 (logistic).
    pub l_gy: Option<f64>,

    pub iters: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub output_path: Option<PathBuf>,
    pub output_format: OutputFormat,

    /// Radius of the `y` ball over which the quadratic `C_fy` is taken.
    pub y_radius: f64,
    // user-supplied constants for the step-size calculators
    pub const_mu: Option<f64>,
    pub const_l_gy: Option<f64>,
    pub const_l_fx: Option<f64>,
    pub const_l_fy: Option<f64>,
    pub const_c_fy: Option<f64>,
    pub const_c_gxy: Option<f64>,
    pub const_l_gxy: Option<f64>,
    pub const_l_gyy: Option<f64>,
    pub const_sigma: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let q = QuadraticConfig::default();
        Self {
            topology: TopologyKind::Ring,
            mixing: MixingScheme::UniformNeighbor,
            nodes: 8,
            problem: ProblemKind::Quadratic,
            dim_x: q.dim_x,
            dim_y: q.dim_y,
            samples_per_node: q.samples_per_node,
            mu: q.mu,
            l_max: q.l_max,
            rho: q.rho,
            noise_sigma: q.noise_sigma,
            heterogeneity: q.heterogeneity,
            coupling: q.coupling,
            dataset: None,
            dataset_dim: None,
            val_frac: 0.3,
            max_samples: None,
            algo: Algorithm::Mdbo,
            eta: 0.1,
            beta1: 1.0,
            beta2: 1.0,
            alpha1: 1.0,
            alpha2: 1.0,
            batch_size: 50,
            init_batch: None,
            neumann_j: 10,
            l_gy: None,
            iters: 500,
            eval_every: 10,
            seed: 0,
            output_path: None,
            output_format: OutputFormat::Jsonl,
            y_radius: 10.0,
            const_mu: None,
            const_l_gy: None,
            const_l_fx: None,
            const_l_fy: None,
            const_c_fy: None,
            const_c_gxy: None,
            const_l_gxy: None,
            const_l_gyy: None,
            const_sigma: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `dataset` path resolves against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(ds), Some(dir)) = (&cfg.dataset, path.parent()) {
            if ds.is_relative() && !ds.exists() {
                cfg.dataset = Some(dir.join(ds));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies one `key = value` override. Bare words are read as strings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table: toml::Table =
            toml::from_str(&self.to_toml_string()?).map_err(|e| Error::Config(e.to_string()))?;
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        let next: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override `{key}`: {e}")))?;
        *self = next;
        Ok(())
    }

    /// Applies `key=value` strings in order and validates the result.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        for p in pairs {
            let p = p.as_ref();
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{p}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::Config("iters must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if self.nodes == 0 {
            return Err(Error::Config("nodes must be at least 1".into()));
        }
        if self.problem == ProblemKind::Hyperlogreg && self.dataset.is_none() {
            return Err(Error::Config("hyperlogreg needs a dataset path".into()));
        }
        if let Some(l) = self.l_gy {
            if !(l > 0.0) {
                return Err(Error::Config(format!("l_gy must be positive, got {l}")));
            }
        }
        Ok(())
    }

    pub fn quadratic_config(&self) -> QuadraticConfig {
        QuadraticConfig {
            dim_x: self.dim_x,
            dim_y: self.dim_y,
            nodes: self.nodes,
            samples_per_node: self.samples_per_node,
            mu: self.mu,
            l_max: self.l_max,
            rho: self.rho,
            noise_sigma: self.noise_sigma,
            heterogeneity: self.heterogeneity,
            coupling: self.coupling,
            seed: self.seed,
        }
    }

    /// Optimizer settings once `l_gy` has been resolved for the problem.
    pub fn algo_config(&self, l_gy: f64) -> AlgoConfig {
        AlgoConfig {
            algo: self.algo,
            eta: self.eta,
            beta1: self.beta1,
            beta2: self.beta2,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            batch_size: self.batch_size,
            init_batch: self.init_batch.unwrap_or(self.batch_size),
            hypergrad: HypergradParams {
                depth: self.neumann_j,
                l_gy,
                mu: None,
            },
        }
    }
}
