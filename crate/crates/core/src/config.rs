//! Experiment configuration: one JSON object with `dataset`, `schema`,
//! `model`, `pretrain` and `prompt` sections plus `seed` and `out_dir`.
//!
//! Unknown keys are rejected at every level. Environment variables of the
//! form `MPTREC_<SECTION>__<KEY>` (nested keys joined by `__`, matched
//! case-insensitively) override file values before parsing; the value is
//! read as JSON when it parses and as a string otherwise. `MPTREC_SEED` and
//! `MPTREC_OUT_DIR` override the top-level keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::census::{load_census, CensusSchemaConfig, LabelRules};
use crate::data::{generate_synthetic, validation_split, Dataset, FeatureSchema, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pretrain::PretrainConfig;
use crate::prompt::PromptConfig;

pub const ENV_PREFIX: &str = "MPTREC_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Census {
        train: PathBuf,
        test: PathBuf,
        /// Label rule file; the bundled rules when absent.
        #[serde(default)]
        label_rules: Option<PathBuf>,
    },
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
        /// Share of generated rows held out as the test set.
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn default_test_fraction() -> f64 {
    0.2
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            spec: SyntheticSpec::default(),
            test_fraction: default_test_fraction(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    /// Census column handling; ignored for synthetic data.
    pub schema: CensusSchemaConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub prompt: PromptConfig,
    /// Tasks trained jointly. `None` means every dataset task except
    /// `new_task`.
    pub tasks: Option<Vec<String>>,
    /// Task added by prompt tuning or fine-tuning.
    pub new_task: Option<String>,
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
}

/// Loaded splits with their schema and the label rules used.
pub struct LoadedData {
    pub schema: FeatureSchema,
    pub train: Dataset,
    pub test: Dataset,
    pub label_rules: Option<LabelRules>,
}

impl LoadedData {
    pub fn task_names(&self) -> Vec<String> {
        self.train.task_names()
    }
}

fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut cur = root;
    for (i, key) in path.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "override path `{}` crosses a non-object",
                path.join(".")
            ))
        })?;
        if i + 1 == path.len() {
            obj.insert(key.clone(), value);
            return Ok(());
        }
        cur = obj
            .entry(key.clone())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Applies `MPTREC_*` overrides from `vars` to a raw config object.
pub fn apply_env_overrides(
    root: &mut Value,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<Vec<String>> {
    let mut applied = Vec::new();
    let mut vars: Vec<(String, String)> = vars.into_iter().collect();
    vars.sort();
    for (k, v) in vars {
        let Some(rest) = k.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let path: Vec<String> = if rest.contains("__") {
            rest.split("__").map(str::to_ascii_lowercase).collect()
        } else if rest == "SEED" || rest == "OUT_DIR" {
            vec![rest.to_ascii_lowercase()]
        } else {
            continue;
        };
        if path.iter().any(String::is_empty) {
            return Err(Error::Config(format!("malformed override variable `{k}`")));
        }
        let value = serde_json::from_str(&v).unwrap_or(Value::String(v));
        set_path(root, &path, value)?;
        applied.push(k);
    }
    Ok(applied)
}

impl ExperimentConfig {
    /// Parses JSON text, applying the given environment overrides first.
    pub fn from_json_with_env(
        text: &str,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut root: Value = serde_json::from_str(text)?;
        if !root.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        apply_env_overrides(&mut root, vars)?;
        let cfg: ExperimentConfig =
            serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; process environment overrides apply.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_with_env(&text, std::env::vars())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.prompt.validate()?;
        if let DatasetConfig::Synthetic {
            spec,
            test_fraction,
        } = &self.dataset
        {
            spec.validate()?;
            if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                return Err(Error::Config("test_fraction must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }

    /// Copies the top-level seed into every section.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.pretrain.seed = c.seed;
        c.prompt.seed = c.seed;
        if let DatasetConfig::Synthetic { spec, .. } = &mut c.dataset {
            spec.seed = c.seed;
        }
        c
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn load_data(&self) -> Result<LoadedData> {
        match &self.dataset {
            DatasetConfig::Census {
                train,
                test,
                label_rules,
            } => {
                let rules = match label_rules {
                    Some(p) => LabelRules::from_path(p)?,
                    None => LabelRules::census_default(),
                };
                let d = load_census(train, test, &self.schema, &rules)?;
                Ok(LoadedData {
                    schema: d.schema,
                    train: d.train,
                    test: d.test,
                    label_rules: Some(rules),
                })
            }
            DatasetConfig::Synthetic {
                spec,
                test_fraction,
            } => {
                let (all, schema) = generate_synthetic(spec)?;
                let (train, test) = validation_split(all.len(), *test_fraction, spec.seed ^ 0x7E57);
                Ok(LoadedData {
                    schema,
                    train: all.subset(&train),
                    test: all.subset(&test),
                    label_rules: None,
                })
            }
        }
    }

    /// Jointly trained tasks for `data`.
    pub fn pretrain_tasks(&self, data: &LoadedData) -> Result<Vec<String>> {
        let tasks = match &self.tasks {
            Some(t) => t.clone(),
            None => data
                .task_names()
                .into_iter()
                .filter(|t| Some(t) != self.new_task.as_ref())
                .collect(),
        };
        for t in &tasks {
            data.train.labels(t)?;
        }
        if tasks.is_empty() {
            return Err(Error::Config("no pre-training tasks".into()));
        }
        Ok(tasks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(
            ExperimentConfig::from_json_with_env(r#"{"pretrain": {"alpah": 0.2}}"#, vec![])
                .is_err()
        );
        assert!(ExperimentConfig::from_json_with_env(r#"{"bogus": 1}"#, vec![]).is_err());
        let c = ExperimentConfig::from_json_with_env("{}", vec![]).unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn env_overrides_nested_keys() {
        let c = ExperimentConfig::from_json_with_env(
            r#"{"pretrain": {"epochs": 2}}"#,
            vars(&[
                ("MPTREC_PRETRAIN__EPOCHS", "7"),
                ("MPTREC_MODEL__ABLATION__NO_GAN", "true"),
                ("MPTREC_SEED", "11"),
                ("MPTREC_CENSUS_DIR", "/elsewhere"),
                ("HOME", "/root"),
            ]),
        )
        .unwrap();
        assert_eq!(c.pretrain.epochs, 7);
        assert!(c.model.ablation.no_gan);
        assert_eq!(c.seed, 11);
        assert!(ExperimentConfig::from_json_with_env(
            "{}",
            vars(&[("MPTREC_PRETRAIN__NOPE", "1")])
        )
        .is_err());
    }

    #[test]
    fn resolved_round_trips() {
        let c = ExperimentConfig {
            seed: 5,
            ..ExperimentConfig::default()
        };
        let r = c.resolved();
        assert_eq!(r.pretrain.seed, 5);
        let back = ExperimentConfig::from_json_with_env(&r.to_json().unwrap(), vec![]).unwrap();
        assert_eq!(back, r);
    }
}
