//! Experiment runners, configuration and result emission.

pub mod config;
pub mod emit;
mod experiments;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::dataset::{GeneratorConfig, MnistSplit};
use crate::error::{AifError, Result};
use crate::kernel::{KernelKind, KernelSpec};
use crate::model::BasisKind;
use crate::robustopt::PgdConfig;
use emit::f17;

pub use experiments::{capacity_regime, spearman, Regime};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentName {
    Fig1Effectiveness,
    CapacityRegimes,
    FeatureCount,
    RandomEffectCurve,
    SmoothingSweep,
    NtkEffectiveness,
    DroScaling,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 7] = [
        ExperimentName::Fig1Effectiveness,
        ExperimentName::CapacityRegimes,
        ExperimentName::FeatureCount,
        ExperimentName::RandomEffectCurve,
        ExperimentName::SmoothingSweep,
        ExperimentName::NtkEffectiveness,
        ExperimentName::DroScaling,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentName::Fig1Effectiveness => "fig1-effectiveness",
            ExperimentName::CapacityRegimes => "capacity-regimes",
            ExperimentName::FeatureCount => "feature-count",
            ExperimentName::RandomEffectCurve => "random-effect-curve",
            ExperimentName::SmoothingSweep => "smoothing-sweep",
            ExperimentName::NtkEffectiveness => "ntk-effectiveness",
            ExperimentName::DroScaling => "dro-scaling",
        }
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentName {
    type Err = AifError;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentName::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| AifError::Config(format!("unknown experiment '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_basis")]
    pub basis: BasisKind,
    #[serde(default = "default_kernel")]
    pub kernel: KernelSpec,
}

fn default_basis() -> BasisKind {
    BasisKind::Identity
}

fn default_kernel() -> KernelSpec {
    KernelSpec::new(KernelKind::Ntk, 1e-3)
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            basis: default_basis(),
            kernel: default_kernel(),
        }
    }
}

/// A fully resolved experiment. `grid` holds the experiment's own sweep variable: feature
/// counts m, smoothing scales σ_r, duplication factors k, or ‖β₂‖² values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: ExperimentName,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub attack: AttackConfig,
    pub pgd: PgdConfig,
    pub eps_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub repetitions: usize,
    pub grid: Vec<f64>,
    /// Rows in each evaluation split. Defaults to the training size.
    pub eval_n: Option<usize>,
    /// MNIST split read by ntk-effectiveness when the files are present.
    #[serde(default)]
    pub mnist_split: MnistSplit,
    /// Not part of the config hash.
    #[serde(default, skip_serializing)]
    pub output_path: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(AifError::Config("repetitions must be >= 1".into()));
        }
        if self.seeds.len() != self.repetitions {
            return Err(AifError::Config(format!(
                "{} seeds given for {} repetitions",
                self.seeds.len(),
                self.repetitions
            )));
        }
        if self.eps_grid.is_empty() {
            return Err(AifError::Config("eps_grid is empty".into()));
        }
        if self.eps_grid.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(AifError::Config("eps_grid values must be positive".into()));
        }
        if self.eps_grid.windows(2).any(|w| w[1] >= w[0]) {
            return Err(AifError::Config("eps_grid must be strictly decreasing".into()));
        }
        if self.grid.iter().any(|v| !v.is_finite()) {
            return Err(AifError::Config("grid values must be finite".into()));
        }
        if self.eval_n == Some(0) {
            return Err(AifError::Config("eval_n must be >= 1".into()));
        }
        self.attack.validate()?;
        self.pgd.validate()?;
        self.model.kernel.validate()?;
        self.generator.validate()
    }

    pub fn eval_rows(&self) -> usize {
        self.eval_n.unwrap_or(self.generator.n)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// One (param, ε, seed) cell. `value` and `reference` carry the experiment-specific measured
/// and predicted quantities; unused numeric fields are NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub experiment: ExperimentName,
    #[serde(with = "f17")]
    pub epsilon: f64,
    pub seed: u64,
    #[serde(rename = "delta_I", with = "f17")]
    pub delta_i: f64,
    #[serde(rename = "delta_S", with = "f17")]
    pub delta_s: f64,
    #[serde(rename = "S_aif", with = "f17")]
    pub s_aif: f64,
    #[serde(rename = "S_emp", with = "f17")]
    pub s_emp: f64,
    #[serde(with = "f17")]
    pub runtime_ms: f64,
    pub param: String,
    #[serde(with = "f17")]
    pub value: f64,
    #[serde(with = "f17")]
    pub reference: f64,
    pub status: String,
}

impl Row {
    pub fn new(experiment: ExperimentName, param: String, epsilon: f64, seed: u64) -> Self {
        Row {
            experiment,
            epsilon,
            seed,
            delta_i: f64::NAN,
            delta_s: f64::NAN,
            s_aif: f64::NAN,
            s_emp: f64::NAN,
            runtime_ms: 0.0,
            param,
            value: f64::NAN,
            reference: f64::NAN,
            status: "ok".into(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    fn metrics(&self) -> [f64; 6] {
        [
            self.delta_i,
            self.delta_s,
            self.s_aif,
            self.s_emp,
            self.value,
            self.reference,
        ]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    #[serde(with = "f17")]
    pub mean: f64,
    #[serde(with = "f17")]
    pub stderr: f64,
}

impl Stat {
    /// Mean and standard error over the finite entries.
    pub fn of(values: &[f64]) -> Stat {
        let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return Stat {
                mean: f64::NAN,
                stderr: f64::NAN,
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let stderr = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            f64::NAN
        };
        Stat { mean, stderr }
    }
}

/// Mean ± standard error of every metric over the seeds of one (param, ε) group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub param: String,
    #[serde(with = "f17")]
    pub epsilon: f64,
    pub count: usize,
    pub failed: usize,
    #[serde(rename = "delta_I")]
    pub delta_i: Stat,
    #[serde(rename = "delta_S")]
    pub delta_s: Stat,
    #[serde(rename = "S_aif")]
    pub s_aif: Stat,
    #[serde(rename = "S_emp")]
    pub s_emp: Stat,
    pub value: Stat,
    pub reference: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: ExperimentName,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub data_source: String,
    pub aggregates: Vec<Aggregate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub summary: Summary,
    pub rows: Vec<Row>,
}

impl Table {
    /// Aggregate for a parameter label and ε, if present.
    pub fn aggregate(&self, param: &str, epsilon: f64) -> Option<&Aggregate> {
        self.summary
            .aggregates
            .iter()
            .find(|a| a.param == param && a.epsilon == epsilon)
    }
}

pub(crate) fn aggregate(rows: &[Row]) -> Vec<Aggregate> {
    let mut out: Vec<Aggregate> = Vec::new();
    let mut start = 0;
    while start < rows.len() {
        let (param, eps) = (&rows[start].param, rows[start].epsilon);
        let end = start
            + rows[start..]
                .iter()
                .take_while(|r| &r.param == param && r.epsilon.to_bits() == eps.to_bits())
                .count();
        let group = &rows[start..end];
        let column = |k: usize| Stat::of(&group.iter().map(|r| r.metrics()[k]).collect::<Vec<_>>());
        out.push(Aggregate {
            param: param.clone(),
            epsilon: eps,
            count: group.len(),
            failed: group.iter().filter(|r| !r.is_ok()).count(),
            delta_i: column(0),
            delta_s: column(1),
            s_aif: column(2),
            s_emp: column(3),
            value: column(4),
            reference: column(5),
        });
        start = end;
    }
    out
}

/// Runs every cell of the experiment. Failures inside a cell are recorded in its row.
pub fn run(spec: &ExperimentSpec) -> Result<Table> {
    spec.validate()?;
    let (rows, data_source) = experiments::run_cells(spec)?;
    Ok(Table {
        summary: Summary {
            experiment: spec.name,
            config_hash: spec.config_hash(),
            seeds: spec.seeds.clone(),
            data_source,
            aggregates: aggregate(&rows),
        },
        rows,
    })
}
