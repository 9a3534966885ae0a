use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::maps::NormKind;
use crate::model::{Schedule, SpinBosonParams, SpinInit, DEFAULT_COUPLINGS, DEFAULT_FREQUENCIES};
use crate::stochastic::{DkNormalization, ViolationLevel, MAX_ENUMERATED_STEPS};

/// How conditional quantities are reported.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchMode {
    /// Probability-weighted over all outcome sequences (non-selective for
    /// trajectories).
    Average,
    /// The sequence with outcome `+` (the first outcome) at every step.
    AllPlus,
    /// One row per outcome sequence.
    PerBranch,
}

impl BranchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BranchMode::Average => "average",
            BranchMode::AllPlus => "all-plus",
            BranchMode::PerBranch => "per-branch",
        }
    }
}

impl std::str::FromStr for BranchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(BranchMode::Average),
            "all-plus" => Ok(BranchMode::AllPlus),
            "per-branch" => Ok(BranchMode::PerBranch),
            other => Err(Error::Config(format!("unknown branch mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub frequencies: Vec<f64>,
    pub couplings: Vec<f64>,
    pub d_osc: usize,
    pub spin_init: SpinInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frequencies: DEFAULT_FREQUENCIES.to_vec(),
            couplings: DEFAULT_COUPLINGS.to_vec(),
            d_osc: 3,
            spin_init: SpinInit::Plus,
        }
    }
}

impl ModelConfig {
    pub fn params(&self) -> SpinBosonParams {
        SpinBosonParams {
            frequencies: self.frequencies.clone(),
            couplings: self.couplings.clone(),
            d_osc: self.d_osc,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub deltas: Vec<f64>,
    /// Number of measurement times `M`.
    pub steps: usize,
    /// Fine-grid points per interval in trajectory output.
    pub substeps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { deltas: vec![1.0, 2.0, 3.0], steps: 5, substeps: 40 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasurementConfig {
    pub lambdas: Vec<f64>,
}

impl Default for MeasurementConfig {
    fn default() -> Self {
        Self { lambdas: vec![0.0, 0.25, 0.5, 1.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub norm: NormKind,
    pub dk_normalization: DkNormalization,
    pub branch_modes: Vec<BranchMode>,
    pub violation_delta: f64,
    /// Report every `(k, j)` pair instead of `j = 0` only.
    pub violation_full_grid: bool,
    pub violation_level: ViolationLevel,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            norm: NormKind::Frobenius,
            dk_normalization: DkNormalization::TermCount,
            branch_modes: vec![BranchMode::Average, BranchMode::AllPlus],
            violation_delta: 2.0,
            violation_full_grid: false,
            violation_level: ViolationLevel::State,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Exact identities: one-step tensors, trace preservation, normalization.
    pub structural: f64,
    /// Reconstruction identities of the hierarchies.
    pub reconstruction: f64,
    /// Allowed negative Choi eigenvalue.
    pub psd: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { structural: 1e-10, reconstruction: 1e-8, psd: 1e-9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DephasingConfig {
    pub gamma: f64,
    pub delta: f64,
    pub steps: usize,
    pub cp_divisible_pair: [f64; 2],
    pub non_cp_divisible_pair: [f64; 2],
}

impl Default for DephasingConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            delta: 1.0,
            steps: 4,
            cp_divisible_pair: [0.8, 0.7],
            non_cp_divisible_pair: [0.3, 0.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub deltas: Vec<f64>,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self { deltas: vec![1.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("results") }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub measurement: MeasurementConfig,
    pub analysis: AnalysisConfig,
    pub tolerances: Tolerances,
    pub dephasing: DephasingConfig,
    pub convergence: ConvergenceConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical serialization. The output directory is
    /// excluded so that relocating results does not change their identity.
    pub fn fingerprint(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = OutputConfig { dir: PathBuf::new() };
        let text = canonical.to_toml().expect("config always serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.model.params().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model
            .spin_init
            .density_matrix()
            .map_err(|e| Error::Config(format!("spin_init: {e}")))?;
        if self.schedule.deltas.is_empty() {
            return bad("schedule.deltas is empty".into());
        }
        for &delta in self.schedule.deltas.iter().chain(&self.convergence.deltas) {
            self.schedule_for(delta).map_err(|e| Error::Config(e.to_string()))?;
        }
        self.schedule_for(self.analysis.violation_delta)
            .map_err(|e| Error::Config(format!("analysis.violation_delta: {e}")))?;
        if self.schedule.steps > MAX_ENUMERATED_STEPS {
            return Err(Error::BranchCap(self.schedule.steps, MAX_ENUMERATED_STEPS));
        }
        if self.measurement.lambdas.is_empty() {
            return bad("measurement.lambdas is empty".into());
        }
        if let Some(l) = self.measurement.lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return bad(format!("lambda {l} outside [0, 1]"));
        }
        if self.analysis.branch_modes.is_empty() {
            return bad("analysis.branch_modes is empty".into());
        }
        let t = &self.tolerances;
        if [t.structural, t.reconstruction, t.psd].iter().any(|x| !(*x > 0.0)) {
            return bad("tolerances must be positive".into());
        }
        let dp = &self.dephasing;
        if !(dp.gamma >= 0.0) || !(dp.delta > 0.0) || dp.steps < 2 {
            return bad("dephasing needs gamma >= 0, delta > 0 and steps >= 2".into());
        }
        for [k1, k2] in [dp.cp_divisible_pair, dp.non_cp_divisible_pair] {
            if k1 == 0.0 || k1.abs() > 1.0 || k2.abs() > 1.0 {
                return bad(format!("dephasing pair ({k1}, {k2}) needs 0 < |k1| <= 1 and |k2| <= 1"));
            }
        }
        Ok(())
    }

    pub fn schedule_for(&self, delta: f64) -> Result<Schedule> {
        Schedule::new(delta, self.schedule.steps, self.schedule.substeps)
    }
}
