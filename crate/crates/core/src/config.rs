//! TOML experiment files with `key=value` overrides.
//!
//! Top-level keys mirror [`TrainConfig`]. Optional `[synthetic]`,
//! `[evaluation]` and `[report]` tables drive data generation, scoring and
//! reporting. A missing `[weights]` table, or a partial one, is filled from
//! the variant's defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::datasets::{ShiftMode, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::{LossVariant, LossWeights};
use crate::training::TrainConfig;

const SECTIONS: [&str; 3] = ["synthetic", "evaluation", "report"];

/// Everything a config file can describe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub synthetic: Option<SynthConfig>,
    pub evaluation: EvalConfig,
    pub report: ReportConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default)]
    pub spec: SyntheticSpec,
    pub count_per_class: usize,
    pub seed: u64,
    /// Written to `dataset_root`.
    #[serde(default)]
    pub test_sets: Vec<SynthTestSet>,
}

/// A shifted copy of the training distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTestSet {
    pub name: String,
    pub shift_mode: ShiftMode,
    pub root: PathBuf,
    pub count_per_class: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSet {
    pub name: String,
    pub root: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Defaults to the synthetic test sets.
    pub test_sets: Vec<TestSet>,
    /// Method label in reports. Defaults to the variant name, with a
    /// `+fooling` suffix for fooling runs.
    pub method: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Training output directories to combine. Defaults to `output_dir`.
    pub run_dirs: Vec<PathBuf>,
    pub subsets: Option<Vec<String>>,
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut raw: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if !overrides.is_empty() {
            let full = resolve(raw.clone())?.flat_table()?;
            for o in overrides {
                apply_override(&mut raw, &full, o)?;
            }
        }
        let config = resolve(raw)?;
        config
            .train
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if let Some(s) = &config.synthetic {
            s.spec
                .validate()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(config)
    }

    /// Test sets to score, falling back to the generated ones.
    pub fn test_sets(&self) -> Vec<TestSet> {
        if !self.evaluation.test_sets.is_empty() {
            return self.evaluation.test_sets.clone();
        }
        self.synthetic
            .iter()
            .flat_map(|s| &s.test_sets)
            .map(|t| TestSet {
                name: t.name.clone(),
                root: t.root.clone(),
            })
            .collect()
    }

    pub fn method_label(&self) -> String {
        self.evaluation.method.clone().unwrap_or_else(|| {
            let mut label = self.train.variant.to_string();
            if self.train.fooling {
                label.push_str("+fooling");
            }
            label
        })
    }

    pub fn run_dirs(&self) -> Vec<PathBuf> {
        if self.report.run_dirs.is_empty() {
            vec![self.train.output_dir.clone()]
        } else {
            self.report.run_dirs.clone()
        }
    }

    /// The file layout: training keys at the top level, then the sections.
    pub fn flat_table(&self) -> Result<Table> {
        let mut table = to_table(&self.train)?;
        if let Some(Value::Table(w)) = table.get_mut("weights") {
            w.remove("variant");
        }
        if let Some(s) = &self.synthetic {
            table.insert("synthetic".into(), Value::Table(to_table(s)?));
        }
        table.insert(
            "evaluation".into(),
            Value::Table(to_table(&self.evaluation)?),
        );
        table.insert("report".into(), Value::Table(to_table(&self.report)?));
        Ok(table)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(&self.flat_table()?).map_err(config_err)
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Fills defaults and splits the sections off the training keys.
fn resolve(mut raw: Table) -> Result<ExperimentConfig> {
    let mut take = |name: &str| raw.remove(name);
    let synthetic = take("synthetic")
        .map(|v| v.try_into::<SynthConfig>().map_err(config_err))
        .transpose()?;
    let evaluation = take("evaluation")
        .map(|v| v.try_into::<EvalConfig>().map_err(config_err))
        .transpose()?
        .unwrap_or_default();
    let report = take("report")
        .map(|v| v.try_into::<ReportConfig>().map_err(config_err))
        .transpose()?
        .unwrap_or_default();

    let variant: LossVariant = raw
        .get("variant")
        .ok_or_else(|| Error::Config("missing key `variant`".into()))?
        .clone()
        .try_into()
        .map_err(config_err)?;
    let mut weights = LossWeights::default_for(variant);
    if let Some(w) = raw.remove("weights") {
        let Value::Table(w) = w else {
            return Err(Error::Config("`weights` must be a table".into()));
        };
        for (key, value) in w {
            let number = value
                .as_float()
                .or_else(|| value.as_integer().map(|i| i as f64))
                .ok_or_else(|| Error::Config(format!("weights.{key} must be a number")))?;
            match key.as_str() {
                "alpha" => weights.alpha = number,
                "beta" => weights.beta = number,
                "gamma" => weights.gamma = number,
                _ => return Err(Error::Config(format!("unknown key `weights.{key}`"))),
            }
        }
    }
    for key in ["dataset_root", "output_dir"] {
        if !raw.contains_key(key) {
            return Err(Error::Config(format!("missing key `{key}`")));
        }
    }
    let mut full = to_table(&TrainConfig::new(variant, "", ""))?;
    for (key, value) in raw {
        if !full.contains_key(&key) && key != "pretrained_checkpoint" {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        full.insert(key, value);
    }
    full.insert(
        "weights".into(),
        Value::try_from(weights).map_err(config_err)?,
    );
    let train: TrainConfig = Value::Table(full).try_into().map_err(config_err)?;
    Ok(ExperimentConfig {
        train,
        synthetic,
        evaluation,
        report,
    })
}

fn to_table<T: Serialize>(value: &T) -> Result<Table> {
    match Value::try_from(value).map_err(config_err)? {
        Value::Table(t) => Ok(t),
        _ => Err(Error::Config("expected a table".into())),
    }
}

/// Applies one `dotted.key=value` override. The key must exist once defaults
/// are filled in; the value is parsed as TOML, or taken as a bare string.
fn apply_override(raw: &mut Table, full: &Table, spec: &str) -> Result<()> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    // Section contents are checked when the section is deserialized.
    let known = lookup(full, &path).is_some()
        || (path.len() == 1 && path[0] == "pretrained_checkpoint")
        || (path.len() > 1 && SECTIONS.contains(&path[0]));
    if !known {
        return Err(Error::Config(format!(
            "override `{key}` does not name a config key"
        )));
    }
    let value = parse_value(value.trim());
    let mut table = raw;
    for part in &path[..path.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    table.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

fn lookup<'a>(table: &'a Table, path: &[&str]) -> Option<&'a Value> {
    let (first, rest) = path.split_first()?;
    let value = table.get(*first)?;
    if rest.is_empty() {
        Some(value)
    } else {
        lookup(value.as_table()?, rest)
    }
}

fn parse_value(text: &str) -> Value {
    format!("v = {text}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}
