//! Run configuration files: TOML with the sections `[data]`, `[scenario]`,
//! `[tasks]`, `[weights]`, `[optimizer]` and `[model]`.
//!
//! Keys left out of a file take the preset value of `scenario.kind`.
//! Overrides (`section.key=value`) are applied to the parsed document before
//! presets are merged, so they behave exactly like editing the file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use xdomain_core::engine::{
    ModelSection, OptimizerSection, Scenario, ScenarioSection, TasksSection, TrainConfig, WeightsSection,
};
use xdomain_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory written by `synth-data` (or any directory with a manifest).
    pub dir: String,
    /// Labeled source domains, pooled for training.
    pub sources: Vec<String>,
    /// Unlabeled training pool for the adaptive scenarios; several names are pooled.
    #[serde(default)]
    pub target: Vec<String>,
    /// Labeled domain scored after every epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<String>,
    /// Restricts the target pool and eval domain to these classes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_classes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub scenario: ScenarioSection,
    pub tasks: TasksSection,
    pub weights: WeightsSection,
    pub optimizer: OptimizerSection,
    pub model: ModelSection,
}

/// Every addressable key with a one-line description, for `--help`.
pub const CONFIG_KEYS: &str = "\
Config keys (TOML; omitted keys take the preset of scenario.kind):
  [data]       dir, sources, target, eval, target_classes
  [scenario]   kind (dg|da|pda|prda), epochs, batch_size, beta, seed,
               validation_fraction, augment
  [tasks]      active (list of jigsaw|rotation), grid_n, permutations, gray_prob
  [weights]    alpha_s_jigsaw, alpha_s_rotation, alpha_t_jigsaw, alpha_t_rotation,
               eta, lambda_max, schedule_steepness
  [optimizer]  kind (sgd|adam), lr, head_lr, momentum, weight_decay, lr_step,
               adam_beta1, adam_beta2, adam_eps
  [model]      backbone (reference|cam), conv1, conv2, fc1, fc2,
               discriminator_hidden1, discriminator_hidden2";

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

pub fn apply_override(doc: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| config_err(format!("override `{spec}` is not key=value")))?;
    let (section, field) = key
        .trim()
        .split_once('.')
        .ok_or_else(|| config_err(format!("override key `{key}` is not section.key")))?;
    let table = doc
        .entry(section.to_string())
        .or_insert_with(|| Value::Table(Table::new()))
        .as_table_mut()
        .ok_or_else(|| config_err(format!("`{section}` is not a section")))?;
    table.insert(field.to_string(), parse_value(raw.trim()));
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut doc: Table = text.parse().map_err(|e: toml::de::Error| config_err(e.message().to_string()))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let kind: Scenario = doc
        .get("scenario")
        .and_then(|s| s.get("kind"))
        .and_then(Value::as_str)
        .ok_or_else(|| config_err("scenario.kind is required"))?
        .parse()?;
    let preset = TrainConfig::preset(kind);
    let mut full = Table::try_from(&preset).map_err(|e| config_err(e.to_string()))?;
    merge(&mut full, doc);
    let config: RunConfig = full.try_into().map_err(|e: toml::de::Error| config_err(e.message().to_string()))?;
    config.train_config().validate().map_err(|e| match e {
        Error::InvalidArgument(m) => config_err(m),
        other => other,
    })?;
    Ok(config)
}

pub fn load_config(path: impl AsRef<Path>, overrides: &[String]) -> Result<RunConfig> {
    parse_config(&fs::read_to_string(path)?, overrides)
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            scenario: self.scenario.clone(),
            tasks: self.tasks.clone(),
            weights: self.weights.clone(),
            optimizer: self.optimizer.clone(),
            model: self.model.clone(),
        }
    }

    /// Canonical text: every key written, fixed section and key order.
    pub fn to_canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
