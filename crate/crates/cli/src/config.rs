use anyhow::{anyhow, bail, Context, Result};
use resolvent_core::{ModelParams, Modulator, Payoff, Potential, PotentialKind};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Simulate,
    Estimate,
    Solve,
    Verify,
    Sweep,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outdir: Option<PathBuf>,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub estimate: EstimateConfig,
    #[serde(default)]
    pub solve: SolveConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub lambda: f64,
    #[serde(default = "zero_potential")]
    pub potential: PotentialKind,
}

fn zero_potential() -> PotentialKind {
    PotentialKind::Zero
}

impl ModelConfig {
    pub fn params(&self) -> Result<ModelParams> {
        self.params_at(self.lambda)
    }

    pub fn params_at(&self, lambda: f64) -> Result<ModelParams> {
        let v = Potential::from_kind(self.potential.clone())?;
        Ok(ModelParams::new(lambda, v)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartConfig {
    pub x: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimProcess {
    Full,
    MomentumOnly,
    Homogenized,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub start: StartConfig,
    pub horizon: f64,
    pub process: SimProcess,
    pub paths: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { start: StartConfig { x: 0.0, p: 2.0 }, horizon: 10.0, process: SimProcess::Full, paths: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PayoffConfig {
    IndicatorBand { lo: f64, hi: f64 },
    EnergyBand { lo: f64, hi: f64 },
    Constant { value: f64 },
}

impl PayoffConfig {
    pub fn build(&self) -> Payoff {
        match *self {
            Self::IndicatorBand { lo, hi } => Payoff::IndicatorBand { lo, hi },
            Self::EnergyBand { lo, hi } => Payoff::EnergyBand { lo, hi },
            Self::Constant { value } => Payoff::Constant(value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModulatorConfig {
    /// `χ(H ≤ l)`.
    Standard,
    EnergyIndicator {
        level: f64,
    },
    MomentumIndicator {
        bound: f64,
    },
    Constant {
        value: f64,
    },
}

impl ModulatorConfig {
    pub fn build(&self, params: &ModelParams) -> Modulator {
        match *self {
            Self::Standard => Modulator::standard(params),
            Self::EnergyIndicator { level } => Modulator::EnergyIndicator { level },
            Self::MomentumIndicator { bound } => Modulator::MomentumIndicator { bound },
            Self::Constant { value } => Modulator::Constant(value),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub x: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateProcess {
    Full,
    MomentumOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateConfig {
    pub queries: Vec<QueryConfig>,
    pub payoff: PayoffConfig,
    pub modulator: ModulatorConfig,
    pub estimators: Vec<String>,
    pub samples: usize,
    pub h_hat: Option<f64>,
    pub process: EstimateProcess,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            queries: vec![QueryConfig { id: None, x: 0.0, p: 2.0 }],
            payoff: PayoffConfig::IndicatorBand { lo: 1.0, hi: 3.0 },
            modulator: ModulatorConfig::Standard,
            estimators: vec!["killing".into()],
            samples: 10_000,
            h_hat: None,
            process: EstimateProcess::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Momentum,
    Homogenized,
    PhaseSpace,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveConfig {
    pub solver: SolverKind,
    pub payoff: PayoffConfig,
    pub modulator: ModulatorConfig,
    /// Momentum cutoff; defaults to `max(20, 7/λ)`.
    pub p_max: Option<f64>,
    /// Killing radius of the homogenized solve; defaults to `√(2l)`.
    pub kill_radius: Option<f64>,
    pub nx: usize,
    pub tol: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            solver: SolverKind::Momentum,
            payoff: PayoffConfig::IndicatorBand { lo: 1.0, hi: 3.0 },
            modulator: ModulatorConfig::Standard,
            p_max: None,
            kill_radius: None,
            nx: 32,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    ResolventBound,
    LowEnergyIntegral,
    LowEnergyIntegralReduced,
    CollisionDrift,
    SkeletonDrift,
    HomogenizationError,
    HighEnergyExcursion,
    SkeletonDropTail,
}

impl CheckKind {
    pub const ALL: [CheckKind; 8] = [
        Self::ResolventBound,
        Self::LowEnergyIntegral,
        Self::LowEnergyIntegralReduced,
        Self::CollisionDrift,
        Self::SkeletonDrift,
        Self::HomogenizationError,
        Self::HighEnergyExcursion,
        Self::SkeletonDropTail,
    ];
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub checks: Vec<CheckKind>,
    /// Defaults to the model's `λ` alone.
    pub lambdas: Option<Vec<f64>>,
    pub samples: usize,
    pub ceiling: f64,
    /// Energy level `L` of the low-energy integral checks.
    pub level: f64,
    pub homogenization_momenta: Vec<f64>,
    pub homogenization_positions: Vec<f64>,
    pub tail_radii: Vec<f64>,
    pub tail_samples: usize,
    pub tail_bin_width: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            checks: CheckKind::ALL.to_vec(),
            lambdas: None,
            samples: 2000,
            ceiling: 1.5,
            level: 4.0,
            homogenization_momenta: vec![3.0, 6.0, 12.0],
            homogenization_positions: vec![0.0, 0.5],
            tail_radii: vec![3.0],
            tail_samples: 20_000,
            tail_bin_width: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
}

/// Parses the config file, reporting syntax and schema errors by line, then
/// applies `key=value` overrides on dotted paths.
pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    if overrides.is_empty() {
        return validate(cfg);
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| anyhow!("after --set overrides: {e}"))?;
    validate(cfg)
}

fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| anyhow!("override '{assignment}' is not key=value"))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            bail!("override '{assignment}' has an empty path segment");
        }
        let obj = node.as_object_mut().ok_or_else(|| anyhow!("override '{key}': '{part}' is not inside an object"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn validate(cfg: RunConfig) -> Result<RunConfig> {
    cfg.model.params().context("model")?;
    if cfg.task == TaskKind::Sweep {
        let sweep = cfg.sweep.as_ref().ok_or_else(|| anyhow!("sweep task needs a 'sweep.lambdas' list"))?;
        if sweep.lambdas.is_empty() {
            bail!("sweep.lambdas must not be empty");
        }
    }
    if cfg.task == TaskKind::Estimate {
        for e in &cfg.estimate.estimators {
            e.parse::<resolvent_core::resolvent_mc::EstimatorKind>()?;
        }
    }
    if cfg.workers == Some(0) {
        bail!("workers must be >= 1");
    }
    Ok(cfg)
}
