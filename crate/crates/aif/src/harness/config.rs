//! Experiment presets and the sectioned JSON config format.
//!
//! A config file has the sections `dataset`, `model`, `attack`, `pgd` and `experiment`. Each
//! section is deep-merged over the preset of the named experiment, and CLI overrides are
//! merged last.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{ExperimentName, ExperimentSpec, ModelConfig};
use crate::attack::{AttackConfig, NormOrder};
use crate::dataset::{Coefficients, Family, GeneratorConfig, MnistSplit, RandomKeyword};
use crate::error::{AifError, Result};
use crate::kernel::{KernelKind, KernelSpec};
use crate::model::BasisKind;
use crate::robustopt::PgdConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: ExperimentName,
    pub eps_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub repetitions: usize,
    #[serde(default)]
    pub grid: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_n: Option<usize>,
    #[serde(default)]
    pub mnist_split: MnistSplit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    pub dataset: GeneratorConfig,
    pub model: ModelConfig,
    pub attack: AttackConfig,
    pub pgd: PgdConfig,
    pub experiment: ExperimentSection,
}

impl From<&ExperimentSpec> for ConfigDocument {
    fn from(s: &ExperimentSpec) -> Self {
        ConfigDocument {
            dataset: s.generator.clone(),
            model: s.model.clone(),
            attack: s.attack.clone(),
            pgd: s.pgd.clone(),
            experiment: ExperimentSection {
                name: s.name,
                eps_grid: s.eps_grid.clone(),
                seeds: s.seeds.clone(),
                repetitions: s.repetitions,
                grid: s.grid.clone(),
                eval_n: s.eval_n,
                mnist_split: s.mnist_split,
                out: s.output_path.clone(),
            },
        }
    }
}

impl From<ConfigDocument> for ExperimentSpec {
    fn from(d: ConfigDocument) -> Self {
        ExperimentSpec {
            name: d.experiment.name,
            generator: d.dataset,
            model: d.model,
            attack: d.attack,
            pgd: d.pgd,
            eps_grid: d.experiment.eps_grid,
            seeds: d.experiment.seeds,
            repetitions: d.experiment.repetitions,
            grid: d.experiment.grid,
            eval_n: d.experiment.eval_n,
            mnist_split: d.experiment.mnist_split,
            output_path: d.experiment.out,
        }
    }
}

fn values(v: &[f64]) -> Option<Coefficients> {
    Some(Coefficients::Values(v.to_vec()))
}

fn random() -> Option<Coefficients> {
    Some(Coefficients::Keyword(RandomKeyword::Random))
}

fn seeds(k: usize) -> Vec<u64> {
    (0..k as u64).collect()
}

/// Desk-scale defaults. `full` raises repetition counts to the published ones where the
/// published count is known.
pub fn preset(name: ExperimentName, full: bool) -> ExperimentSpec {
    let mut generator = GeneratorConfig::new(Family::GaussianLinear, 500, 2);
    generator.sigma_xi = 0.1;
    let mut model = ModelConfig::default();
    let mut attack = AttackConfig::new(NormOrder::Two, 0.0);
    let mut pgd = PgdConfig::default();
    let mut eps_grid = vec![0.1];
    let mut repetitions = 20;
    let mut grid = Vec::new();
    match name {
        ExperimentName::Fig1Effectiveness => {
            generator.beta1 = values(&[2.0, -3.4]);
            eps_grid = vec![0.1, 0.05, 0.02, 0.01];
        }
        ExperimentName::CapacityRegimes => {
            generator = GeneratorConfig::new(Family::GaussianLinearQuadratic, 5000, 5);
            generator.sigma_xi = 0.1;
            generator.beta1 = random();
            grid = vec![1.0, 0.01];
        }
        ExperimentName::FeatureCount => {
            generator = GeneratorConfig::new(Family::UniformQuadraticBasis, 5000, 20);
            generator.total_features = Some(20);
            generator.sigma_xi = 0.1;
            generator.beta1 = random();
            generator.beta2 = random();
            model.basis = BasisKind::QuadraticDiag;
            grid = (2..=20).map(f64::from).collect();
            repetitions = if full { 1000 } else { 50 };
        }
        ExperimentName::RandomEffectCurve => {
            generator = GeneratorConfig::new(Family::RandomEffect, 5000, 10);
            generator.total_features = Some(10);
            generator.sigma_xi = 0.1;
            grid = (1..=10).map(f64::from).collect();
        }
        ExperimentName::SmoothingSweep => {
            generator = GeneratorConfig::new(Family::GaussianLinear, 20000, 5);
            generator.sigma_xi = 0.1;
            generator.beta1 = values(&[1.0 / 5f64.sqrt(); 5]);
            grid = vec![0.0, 0.5, 1.0, 2.0];
        }
        ExperimentName::NtkEffectiveness => {
            generator = GeneratorConfig::new(Family::UnitSphere, 300, 10);
            generator.sigma_xi = 0.1;
            generator.beta1 = random();
            model.kernel = KernelSpec::new(KernelKind::Ntk, 1e-3);
            pgd.outer_steps = 100;
            eps_grid = vec![0.1, 0.05, 0.02];
            repetitions = 10;
        }
        ExperimentName::DroScaling => {
            generator.n = 50;
            generator.beta1 = values(&[2.0, -3.4]);
            attack.u = 2.0;
            grid = vec![1.0, 2.0, 4.0];
            repetitions = 1;
        }
    }
    ExperimentSpec {
        name,
        generator,
        model,
        attack,
        pgd,
        eps_grid,
        seeds: seeds(repetitions),
        repetitions,
        grid,
        eval_n: None,
        mnist_split: MnistSplit::Train,
        output_path: None,
    }
}

/// Recursively merges `patch` into `base`. Objects merge key by key, anything else replaces.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

pub fn load_config(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)?;
    let value: Value = serde_json::from_str(&text)?;
    if !value.is_object() {
        return Err(AifError::Config(format!(
            "{} is not a JSON object",
            path.display()
        )));
    }
    Ok(value)
}

/// Reads one section of a config document, if present.
pub fn section<T: serde::de::DeserializeOwned>(doc: &Value, key: &str) -> Result<Option<T>> {
    match doc.get(key) {
        None => Ok(None),
        Some(v) => Ok(Some(serde_json::from_value(v.clone())?)),
    }
}

fn experiment_key<'a>(v: &'a Value, key: &str) -> Option<&'a Value> {
    v.get("experiment").and_then(|e| e.get(key))
}

/// Builds a spec from (in increasing priority) the preset, a config file and CLI overrides.
/// The experiment name comes from `name` or else the file's `experiment.name`.
pub fn resolve(
    name: Option<ExperimentName>,
    file: Option<&Value>,
    overrides: &Value,
    full: bool,
) -> Result<ExperimentSpec> {
    let from_file = match file.and_then(|f| experiment_key(f, "name")) {
        Some(v) => Some(serde_json::from_value::<ExperimentName>(v.clone())?),
        None => None,
    };
    let name = match (name, from_file) {
        (Some(a), Some(b)) if a != b => {
            return Err(AifError::Config(format!(
                "experiment '{a}' requested but the config file names '{b}'"
            )))
        }
        (Some(a), _) | (None, Some(a)) => a,
        (None, None) => return Err(AifError::Config("no experiment named".into())),
    };
    let mut doc = serde_json::to_value(ConfigDocument::from(&preset(name, full)))?;
    let mut seeds_set = false;
    let mut reps_set = false;
    for patch in file.into_iter().chain(std::iter::once(overrides)) {
        if !patch.is_object() && !patch.is_null() {
            return Err(AifError::Config("config overrides must be a JSON object".into()));
        }
        if patch.is_object() {
            seeds_set |= experiment_key(patch, "seeds").is_some();
            reps_set |= experiment_key(patch, "repetitions").is_some();
            merge(&mut doc, patch);
        }
    }
    if let Some(exp) = doc.get_mut("experiment").and_then(Value::as_object_mut) {
        reconcile_seeds(exp, seeds_set, reps_set)?;
    }
    let doc: ConfigDocument = serde_json::from_value(doc)?;
    let spec = ExperimentSpec::from(doc);
    spec.validate()?;
    Ok(spec)
}

/// A patch that sets only one of `seeds` and `repetitions` determines the other.
fn reconcile_seeds(exp: &mut Map<String, Value>, seeds_set: bool, reps_set: bool) -> Result<()> {
    match (seeds_set, reps_set) {
        (true, false) => {
            let k = exp.get("seeds").and_then(Value::as_array).map_or(0, Vec::len);
            exp.insert("repetitions".into(), Value::from(k));
        }
        (false, true) => {
            let k = exp
                .get("repetitions")
                .and_then(Value::as_u64)
                .ok_or_else(|| AifError::Config("repetitions must be a count".into()))?;
            exp.insert("seeds".into(), serde_json::to_value(seeds(k as usize))?);
        }
        _ => {}
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn presets_are_valid() {
        for name in ExperimentName::ALL {
            for full in [false, true] {
                let spec = preset(name, full);
                spec.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
                assert!(spec.repetitions <= 50 || full);
            }
        }
        assert_eq!(preset(ExperimentName::FeatureCount, true).repetitions, 1000);
    }

    #[test]
    fn preset_round_trips_through_document() {
        let spec = preset(ExperimentName::SmoothingSweep, false);
        let again = resolve(Some(spec.name), None, &Value::Null, false).unwrap();
        assert_eq!(again, spec);
    }

    #[test]
    fn file_then_flags_override() {
        let file = json!({"experiment": {"name": "fig1-effectiveness", "repetitions": 3},
                          "dataset": {"n": 100}, "attack": {"p": "inf"}});
        let flags = json!({"dataset": {"n": 200}});
        let spec = resolve(None, Some(&file), &flags, false).unwrap();
        assert_eq!(spec.generator.n, 200);
        assert_eq!(spec.generator.m, 2);
        assert_eq!(spec.attack.p, NormOrder::Inf);
        assert_eq!(spec.seeds, vec![0, 1, 2]);
    }

    #[test]
    fn explicit_seeds_set_repetitions() {
        let file = json!({"experiment": {"seeds": [7, 9]}});
        let spec = resolve(Some(ExperimentName::DroScaling), Some(&file), &Value::Null, false).unwrap();
        assert_eq!(spec.repetitions, 2);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        let cases = [
            json!({"dataset": {"colour": 1}}),
            json!({"experiment": {"eps_grid": [0.01, 0.1]}}),
            json!({"experiment": {"name": "dro-scaling"}}),
            json!({"pgd": {"inner_steps": 0}}),
        ];
        for file in cases {
            let err = resolve(
                Some(ExperimentName::Fig1Effectiveness),
                Some(&file),
                &Value::Null,
                false,
            )
            .unwrap_err();
            assert_eq!(err.exit_code(), 2, "{file}: {err}");
        }
        assert!(resolve(None, None, &Value::Null, false).is_err());
    }
}
