//! TOML experiment configuration. Every table rejects unknown keys.

use std::path::{Path, PathBuf};

use markovgen_core::schedules::{CapacityConstants, Diffusion, GaussianSchedule, MixtureSchedule, ScheduleKind};
use markovgen_core::targets::{FiniteTarget, GaussianMixture};
use markovgen_core::training::{LossKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    SamplePath,
    Train,
    Verify,
    Rate,
    Discretization,
    OuFigures,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::SamplePath => "sample-path",
            Self::Train => "train",
            Self::Verify => "verify",
            Self::Rate => "rate",
            Self::Discretization => "discretization",
            Self::OuFigures => "ou-figures",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TargetConfig {
    /// Isotropic Gaussian mixture; `means` holds one row per component.
    Mixture { weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64> },
    Finite { pmf: Vec<f64> },
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self::Mixture { weights: vec![0.5, 0.5], means: vec![vec![-1.0], vec![1.0]], variances: vec![0.25, 0.25] }
    }
}

impl TargetConfig {
    pub fn mixture(&self) -> Result<GaussianMixture, CliError> {
        match self {
            Self::Mixture { weights, means, variances } => Ok(GaussianMixture::new(weights.clone(), means.clone(), variances.clone())?),
            Self::Finite { .. } => Err(CliError::config("this experiment needs a `mixture` target")),
        }
    }

    pub fn finite(&self) -> Result<FiniteTarget, CliError> {
        match self {
            Self::Finite { pmf } => Ok(FiniteTarget::new(pmf.clone())?),
            Self::Mixture { .. } => Err(CliError::config("expected a `finite` target")),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Mixture { means, .. } => means.first().map_or(0, Vec::len),
            Self::Finite { .. } => 1,
        }
    }
}

/// The interpolating path. Gaussian paths take an optional constant
/// generative diffusion b overriding the model default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PathConfig {
    VanillaFm {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        diffusion: Option<f64>,
    },
    RescaledDiffusion {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        diffusion: Option<f64>,
    },
    OuSgm {
        lambda: f64,
        sigma: f64,
        horizon: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        diffusion: Option<f64>,
    },
    /// (1−κ_t) base + κ_t δ_target with κ_t = t^exponent; the base is N(0, I)
    /// for mixture targets and uniform for finite ones.
    Mixture {
        #[serde(default = "one")]
        exponent: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Default for PathConfig {
    fn default() -> Self {
        Self::VanillaFm { diffusion: None }
    }
}

impl PathConfig {
    pub fn gaussian(&self) -> Result<GaussianSchedule, CliError> {
        let (kind, b) = match *self {
            Self::VanillaFm { diffusion } => (ScheduleKind::VanillaFm, diffusion),
            Self::RescaledDiffusion { diffusion } => (ScheduleKind::RescaledDiffusion, diffusion),
            Self::OuSgm { lambda, sigma, horizon, diffusion } => (ScheduleKind::OuSgm { lambda, sigma, horizon }, diffusion),
            Self::Mixture { .. } => return Err(CliError::config("this experiment needs a Gaussian path")),
        };
        let s = GaussianSchedule::new(kind).with_diffusion(b.map_or(Diffusion::PathDefault, Diffusion::Constant));
        s.validate()?;
        Ok(s)
    }

    pub fn mixture(&self) -> Result<MixtureSchedule, CliError> {
        match *self {
            Self::Mixture { exponent: 1.0 } => Ok(MixtureSchedule::Linear),
            Self::Mixture { exponent } if exponent > 1.0 && exponent.is_finite() => Ok(MixtureSchedule::Power { exponent }),
            Self::Mixture { .. } => Err(CliError::config("path.exponent must be at least 1")),
            _ => Err(CliError::config("this experiment needs the mixture path")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// sample budget driving K_n and T_n when those are not given
    pub budget: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    pub beta: f64,
    pub steps_per_block: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { budget: 4096, blocks: None, t_end: None, beta: 1.0, steps_per_block: 20 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    /// probability-flow ODE (b = 0)
    Flow,
    /// SDE with the path's generative diffusion
    Sde,
    Jump,
    Ctmc,
    /// convex combination of flow and jump on the mixture path
    Superposition,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub sampler: SamplerKind,
    pub n: usize,
    /// stored full trajectories
    pub keep: usize,
    /// weight of the flow part for `superposition`
    pub flow_weight: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { sampler: SamplerKind::Flow, n: 10_000, keep: 0, flow_weight: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub loss: LossKind,
    pub n: usize,
    pub eval_times: Vec<f64>,
    pub eval_points: usize,
    pub config: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { loss: LossKind::GaussCgm, n: 4096, eval_times: vec![0.25, 0.5, 0.75], eval_points: 4000, config: TrainConfig::tuned() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// criterion numbers to run; empty runs the fast property checks
    pub checks: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateConfig {
    pub budgets: Vec<usize>,
    pub repetitions: u64,
    pub eval_points: usize,
    pub steps_per_block: usize,
    /// optimizer steps per block per data point; 0 uses `train.steps` at every budget
    pub steps_per_sample: f64,
    pub bootstrap: usize,
    pub train: TrainConfig,
}

impl Default for RateConfig {
    fn default() -> Self {
        let capacity = CapacityConstants { depth: 2.0, width: 16.0, value: 4.0, max_width: 16, ..CapacityConstants::default() };
        Self {
            budgets: vec![1 << 9, 1 << 10, 1 << 11, 1 << 12, 1 << 13],
            repetitions: 5,
            eval_points: 4000,
            steps_per_block: 20,
            steps_per_sample: 0.5,
            bootstrap: 2000,
            train: TrainConfig { steps: 1000, batch_size: 128, certify_points: 200, capacity, ..TrainConfig::tuned() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscretizationConfig {
    pub blocks: usize,
    pub t_end: f64,
    pub total_steps: Vec<usize>,
    pub n: usize,
}

impl Default for DiscretizationConfig {
    fn default() -> Self {
        Self { blocks: 25, t_end: 0.999, total_steps: vec![25, 50, 100, 200, 400, 800], n: 2000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuConfig {
    pub lambda: f64,
    pub sigma: f64,
    pub horizon: f64,
    pub start: f64,
    pub trajectories: usize,
    pub draws: usize,
    pub dt: f64,
    pub bins: usize,
}

impl Default for OuConfig {
    fn default() -> Self {
        Self { lambda: 5.0, sigma: 0.5, horizon: 5.0, start: 2.0, trajectories: 10, draws: 5000, dt: 1e-3, bins: 60 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<ExperimentKind>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub target: TargetConfig,
    pub path: PathConfig,
    pub grid: GridConfig,
    pub sample: SampleConfig,
    pub train: TrainSection,
    pub verify: VerifyConfig,
    pub rate: RateConfig,
    pub discretization: DiscretizationConfig,
    pub ou: OuConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Ok((Self::parse(&text)?, text))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Structural checks; numeric ranges are enforced by the modules. Core
    /// errors raised here are reported as config errors.
    pub fn validate(&self) -> Result<(), CliError> {
        self.validate_inner().map_err(|e| match e {
            CliError::Core(c) => CliError::config(c.to_string()),
            other => other,
        })
    }

    fn validate_inner(&self) -> Result<(), CliError> {
        match &self.target {
            TargetConfig::Mixture { .. } => drop(self.target.mixture()?),
            TargetConfig::Finite { .. } => drop(self.target.finite()?),
        }
        match self.path {
            PathConfig::Mixture { .. } => drop(self.path.mixture()?),
            _ => drop(self.path.gaussian()?),
        }
        self.train.config.validate()?;
        self.rate.train.validate()?;
        if self.sample.n == 0 {
            return Err(CliError::config("sample.n must be positive"));
        }
        if !(0.0..=1.0).contains(&self.sample.flow_weight) {
            return Err(CliError::config("sample.flow_weight must lie in [0, 1]"));
        }
        if self.grid.steps_per_block == 0 || self.rate.steps_per_block == 0 {
            return Err(CliError::config("steps_per_block must be positive"));
        }
        if let Some(t) = self.grid.t_end {
            if !(t > 0.0 && t < 1.0) {
                return Err(CliError::config("grid.t_end must lie in (0, 1)"));
            }
        }
        if self.rate.steps_per_sample.is_nan() || self.rate.steps_per_sample < 0.0 {
            return Err(CliError::config("rate.steps_per_sample must be nonnegative"));
        }
        if self.rate.budgets.iter().any(|&n| n < 2) {
            return Err(CliError::config("rate.budgets must be at least 2"));
        }
        if !(self.ou.dt > 0.0 && self.ou.bins > 0 && self.ou.draws > 0) {
            return Err(CliError::config("ou.dt, ou.bins and ou.draws must be positive"));
        }
        Ok(())
    }

    pub fn loss(&self) -> LossKind {
        self.train.loss
    }
}
