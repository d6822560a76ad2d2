//! Run configuration: a TOML file with `[model]`, `[data]`, `[train]` and
//! `[prune]` sections, plus `KEY=VALUE` overrides applied before validation.

use std::path::{Path, PathBuf};

use oicsr::data::{gen_synthetic, idx::load_idx};
use oicsr::{
    Architecture, Criterion, Dataset, LayerSpec, RegularizerKind, RunConfig, Split, SyntheticTask,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Problems with the configuration or command line; these exit with code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Per-sample input shape; taken from the dataset when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<Vec<usize>>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub channels: usize,
    #[serde(default = "default_side")]
    pub side: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_lambda")]
    pub weight_decay: f64,
    #[serde(default = "default_lambda")]
    pub lambda_s: f64,
    pub regularizer: RegularizerKind,
    pub batch_size: usize,
    pub epochs: usize,
    /// `[[epoch, multiplier], ...]`; an empty list keeps the rate constant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_schedule: Option<Vec<(usize, f64)>>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSection {
    #[serde(default)]
    pub ratios: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criterion: Option<Criterion>,
    #[serde(default)]
    pub fine_tune_epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fine_tune_lr: Option<f64>,
}

fn default_n_train() -> usize {
    1000
}
fn default_n_eval() -> usize {
    500
}
fn one() -> usize {
    1
}
fn default_side() -> usize {
    8
}
fn default_noise() -> f64 {
    0.5
}
fn default_momentum() -> f64 {
    0.9
}
fn default_lambda() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    #[serde(default)]
    pub prune: PruneSection,
}

const SECTIONS: [(&str, &[&str]); 4] = [
    ("model", &["input", "layers"]),
    (
        "data",
        &[
            "source",
            "task",
            "n_train",
            "n_eval",
            "seed",
            "channels",
            "side",
            "noise",
            "train_images",
            "train_labels",
            "eval_images",
            "eval_labels",
        ],
    ),
    (
        "train",
        &[
            "lr",
            "momentum",
            "weight_decay",
            "lambda_s",
            "regularizer",
            "batch_size",
            "epochs",
            "lr_schedule",
            "seed",
        ],
    ),
    (
        "prune",
        &["ratios", "criterion", "fine_tune_epochs", "fine_tune_lr"],
    ),
];

/// `section.key` for a dotted key, or the unique section declaring a bare key.
fn resolve_key(key: &str) -> Result<(String, String), ConfigError> {
    if let Some((section, field)) = key.split_once('.') {
        return match SECTIONS.iter().find(|(s, _)| *s == section) {
            Some((_, fields)) if fields.contains(&field) => Ok((section.into(), field.into())),
            Some(_) => err(format!("unknown config key '{key}'")),
            None => err(format!("unknown config section '{section}' in '{key}'")),
        };
    }
    let hits: Vec<&str> = SECTIONS
        .iter()
        .filter(|(_, fields)| fields.contains(&key))
        .map(|(s, _)| *s)
        .collect();
    match hits.as_slice() {
        [section] => Ok(((*section).into(), key.into())),
        [] => err(format!("unknown config key '{key}'")),
        _ => err(format!(
            "ambiguous key '{key}': qualify it as one of {}",
            hits.iter()
                .map(|s| format!("{s}.{key}"))
                .collect::<Vec<_>>()
                .join(", ")
        )),
    }
}

/// Parses `VALUE` as a TOML value, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn apply_override(table: &mut Table, spec: &str) -> Result<(), ConfigError> {
    let Some((key, raw)) = spec.split_once('=') else {
        return err(format!("override '{spec}' is not KEY=VALUE"));
    };
    let (section, field) = resolve_key(key.trim())?;
    let entry = table
        .entry(section.clone())
        .or_insert_with(|| Value::Table(Table::new()));
    let Value::Table(t) = entry else {
        return err(format!("'{section}' must be a table"));
    };
    t.insert(field, parse_value(raw.trim()));
    Ok(())
}

fn section<T: DeserializeOwned>(
    table: &Table,
    name: &str,
    required: bool,
) -> Result<T, ConfigError> {
    let value = match table.get(name) {
        Some(v) => v.clone(),
        None if required => return err(format!("missing section [{name}]")),
        None => Value::Table(Table::new()),
    };
    T::deserialize(value).map_err(|e| ConfigError(format!("[{name}]: {}", e.message().trim())))
}

impl Config {
    /// Parses `text`, applies `overrides` in order, then validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError(format!("invalid TOML: {}", e.message())))?;
        for name in table.keys() {
            if !SECTIONS.iter().any(|(s, _)| s == name) {
                return err(format!("unknown config section [{name}]"));
            }
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config = Self {
            model: section(&table, "model", true)?,
            data: section(&table, "data", true)?,
            train: section(&table, "train", true)?,
            prune: section(&table, "prune", false)?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text, overrides)?;
        if let Some(dir) = path.parent() {
            config.data.resolve_paths(dir);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.model.layers.is_empty() {
            return err("model.layers must not be empty");
        }
        self.data.task()?;
        self.run_config()
            .validate()
            .map_err(|e| ConfigError(format!("[train]/[prune]: {e}")))?;
        Ok(())
    }

    pub fn run_config(&self) -> RunConfig {
        let t = &self.train;
        let p = &self.prune;
        let mut c = RunConfig::new(t.regularizer, t.lr, t.batch_size, t.epochs);
        c.momentum = t.momentum;
        c.weight_decay = t.weight_decay;
        c.lambda_s = t.lambda_s;
        c.lr_schedule = t.lr_schedule.clone();
        c.seed = t.seed;
        c.prune_ratios = p.ratios.clone();
        c.criterion = p.criterion;
        c.fine_tune_epochs = p.fine_tune_epochs;
        c.fine_tune_lr = p.fine_tune_lr;
        c
    }

    pub fn architecture(&self, data: &Dataset) -> Architecture {
        Architecture {
            input: self
                .model
                .input
                .clone()
                .unwrap_or_else(|| data.sample_shape().to_vec()),
            layers: self.model.layers.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }
}

impl DataSection {
    fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.train_images,
            &mut self.train_labels,
            &mut self.eval_images,
            &mut self.eval_labels,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    fn task(&self) -> Result<Option<SyntheticTask>, ConfigError> {
        match self.source {
            DataSource::Idx => {
                for (key, v) in [
                    ("train_images", &self.train_images),
                    ("train_labels", &self.train_labels),
                    ("eval_images", &self.eval_images),
                    ("eval_labels", &self.eval_labels),
                ] {
                    if v.is_none() {
                        return err(format!(
                            "missing key data.{key} (required when source = \"idx\")"
                        ));
                    }
                }
                Ok(None)
            }
            DataSource::Synthetic => {
                let Some(task) = &self.task else {
                    return err("missing key data.task (required when source = \"synthetic\")");
                };
                Ok(Some(match task.as_str() {
                    "two_moons" => SyntheticTask::TwoMoons,
                    "gaussian_blobs" => SyntheticTask::GaussianBlobs,
                    "striped_images" => SyntheticTask::StripedImages {
                        channels: self.channels,
                        side: self.side,
                        noise: self.noise,
                    },
                    other => {
                        return err(format!(
                            "data.task: unknown task '{other}' (expected two_moons, gaussian_blobs or striped_images)"
                        ))
                    }
                }))
            }
        }
    }

    /// Train and eval splits. Synthetic eval data uses `seed + 1`.
    pub fn load(&self) -> anyhow::Result<(Dataset, Dataset)> {
        Ok(match self.task()? {
            Some(task) => (
                gen_synthetic(task, self.n_train, self.seed)?,
                gen_synthetic(task, self.n_eval, self.seed.wrapping_add(1))?
                    .with_split(Split::Eval),
            ),
            None => {
                let path = |p: &Option<PathBuf>| p.clone().expect("validated");
                (
                    load_idx(
                        &path(&self.train_images),
                        &path(&self.train_labels),
                        Split::Train,
                    )?,
                    load_idx(
                        &path(&self.eval_images),
                        &path(&self.eval_labels),
                        Split::Eval,
                    )?,
                )
            }
        })
    }
}
