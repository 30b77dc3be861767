//! Run configuration, read from a single TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DomainSpec, KernelParams, DEFAULT_NORMALIZATION};
use crate::nonlinear::SolverOptions;
use crate::operator::ProblemParams;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamsBlock {
    pub s: f64,
    pub q: f64,
    pub p: f64,
    /// Kernel constant in front of `|x − y|^{−N−2s}`.
    pub normalization: f64,
}

impl Default for ParamsBlock {
    fn default() -> Self {
        Self { s: 0.5, q: 0.5, p: 3.0, normalization: DEFAULT_NORMALIZATION }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// Exactly one absolute λ.
    Single,
    /// Increasing absolute λ values.
    Branch,
    /// Values are fractions of the lower end of the Λ bracket.
    Bracket,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    Linear,
    Log,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub start: f64,
    pub stop: f64,
    pub count: usize,
    #[serde(default = "default_spacing")]
    pub spacing: Spacing,
}

fn default_spacing() -> Spacing {
    Spacing::Linear
}

/// A missing `[lambda]` table means the single value 1; a present one must list its values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaBlock {
    #[serde(default = "default_mode")]
    pub mode: LambdaMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Grid>,
}

fn default_mode() -> LambdaMode {
    LambdaMode::Single
}

impl Default for LambdaBlock {
    fn default() -> Self {
        Self { mode: LambdaMode::Single, values: Some(vec![1.0]), grid: None }
    }
}

impl LambdaBlock {
    /// The λ list as written (fractions in bracket mode).
    pub fn values(&self) -> Result<Vec<f64>> {
        let vals = match (&self.values, &self.grid) {
            (Some(_), Some(_)) => return Err(Error::Config("give either lambda.values or lambda.grid, not both".into())),
            (Some(v), None) => v.clone(),
            (None, Some(g)) => g.expand()?,
            (None, None) => Vec::new(),
        };
        if vals.is_empty() {
            return Err(Error::Config("empty lambda grid".into()));
        }
        if vals.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("lambda values must be positive and finite".into()));
        }
        if vals.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("lambda values must be strictly increasing".into()));
        }
        if self.mode == LambdaMode::Single && vals.len() != 1 {
            return Err(Error::Config(format!("mode 'single' takes one lambda, got {}", vals.len())));
        }
        Ok(vals)
    }
}

impl Grid {
    fn expand(&self) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Ok(Vec::new());
        }
        if !(self.start > 0.0 && self.stop >= self.start && self.stop.is_finite()) {
            return Err(Error::Config("lambda.grid needs 0 < start <= stop".into()));
        }
        if self.count == 1 {
            return Ok(vec![self.start]);
        }
        let m = (self.count - 1) as f64;
        Ok((0..self.count)
            .map(|i| {
                let t = i as f64 / m;
                match self.spacing {
                    Spacing::Linear => self.start + t * (self.stop - self.start),
                    Spacing::Log => (self.start.ln() + t * (self.stop / self.start).ln()).exp(),
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: PathBuf,
    /// Write per-λ solution snapshots next to the summaries.
    pub snapshots: bool,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), snapshots: true }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub domain: DomainSpec,
    pub params: ParamsBlock,
    pub solver: SolverOptions,
    pub lambda: LambdaBlock,
    pub output: OutputBlock,
    pub seed: u64,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Everything except the λ list, which each command checks itself.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.domain.validate().map_err(cfg)?;
        self.solver.validate().map_err(cfg)?;
        self.kernel().map_err(cfg)?;
        self.problem(1.0).map_err(cfg)?;
        Ok(())
    }

    pub fn kernel(&self) -> Result<KernelParams> {
        KernelParams::new(self.domain.dimension, self.params.s, self.params.normalization)
    }

    pub fn problem(&self, lambda: f64) -> Result<ProblemParams> {
        ProblemParams::new(self.params.s, self.params.q, self.params.p, lambda)
    }
}
