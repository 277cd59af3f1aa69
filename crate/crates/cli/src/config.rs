//! Experiment configuration: TOML file plus dotted-path overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use kiflab_core::model::ModelConfig;
use kiflab_core::tasks::{
    make_permuted_feature_stream, make_rotated_gaussian_stream, TaskSequence,
};
use kiflab_core::trainer::{Method, TrainConfig};
use kiflab_core::{Error, Result};

/// Stream settings as written in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    /// "rotated_gaussian" or "permuted_features".
    pub generator: String,
    pub num_tasks: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub rotation_step_degrees: f64,
    pub seed: u64,
    /// Task orders to run; each is a permutation of 0..num_tasks.
    pub orders: Vec<Vec<usize>>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            generator: "rotated_gaussian".into(),
            num_tasks: 5,
            num_classes: 4,
            input_dim: 32,
            n_train: 1000,
            n_test: 400,
            rotation_step_degrees: 60.0,
            seed: 7,
            orders: vec![(0..5).collect()],
        }
    }
}

impl StreamConfig {
    /// Generate the canonical sequence, then one sequence per order.
    pub fn build_sequences(&self) -> Result<Vec<TaskSequence>> {
        let canonical = match self.generator.as_str() {
            "rotated_gaussian" => make_rotated_gaussian_stream(
                self.num_tasks,
                self.num_classes,
                self.input_dim,
                self.n_train,
                self.n_test,
                self.rotation_step_degrees,
                self.seed,
            )?,
            "permuted_features" => make_permuted_feature_stream(
                self.num_tasks,
                self.num_classes,
                self.input_dim,
                self.n_train,
                self.n_test,
                self.seed,
            )?,
            other => {
                return Err(Error::InvalidParameter {
                    name: "generator",
                    message: format!("unknown generator {other:?}"),
                })
            }
        };
        let mut sequences = Vec::new();
        for (idx, order) in self.orders.iter().enumerate() {
            sequences.push(canonical.with_order(order, &format!("order{idx}"))?);
        }
        if sequences.is_empty() {
            sequences.push(canonical);
        }
        Ok(sequences)
    }
}

/// Sweep axes for the ablate command. Every listed value multiplies the
/// run grid; empty lists mean "just the base config's value".
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    /// Fusion variants applied to cycle-based methods.
    pub policies: Vec<kiflab_core::fusion::FusionVariant>,
    /// Inner-loop sizes; total inner steps stay fixed at N', so the
    /// fusion count N'/Q varies.
    pub q_values: Vec<usize>,
    pub keep_fractions: Vec<f64>,
    /// Values applied to both smoothing factors.
    pub alphas: Vec<f64>,
    pub capacity_fractions: Vec<f64>,
}

/// A full experiment: stream, model, training, seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub stream: StreamConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            stream: StreamConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![1],
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidParameter {
                name: "seeds",
                message: "at least one seed is required".into(),
            });
        }
        if self.model.input_dim != self.stream.input_dim
            || self.model.num_classes != self.stream.num_classes
        {
            return Err(Error::InvalidParameter {
                name: "model",
                message: format!(
                    "model ({} dims, {} classes) does not match stream ({} dims, {} classes)",
                    self.model.input_dim,
                    self.model.num_classes,
                    self.stream.input_dim,
                    self.stream.num_classes
                ),
            });
        }
        Ok(())
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    // Try TOML literal first (numbers, bools, arrays), else a string.
    toml::from_str::<toml::Value>(&format!("v = {raw}"))
        .ok()
        .and_then(|v| v.get("v").cloned())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Apply `--path.to.key value` overrides onto a TOML tree.
fn apply_overrides(tree: &mut toml::Value, overrides: &[(String, String)]) -> Result<()> {
    for (path, raw) in overrides {
        let parts: Vec<&str> = path.split('.').collect();
        let (last, walk) = parts.split_last().expect("split produces at least one part");
        let mut node = &mut *tree;
        for (depth, part) in walk.iter().enumerate() {
            let table = node.as_table_mut().ok_or_else(|| Error::InvalidParameter {
                name: "override",
                message: format!("{path}: {} is not a table", parts[..depth].join(".")),
            })?;
            node = table
                .entry(part.to_string())
                .or_insert(toml::Value::Table(Default::default()));
        }
        let table = node.as_table_mut().ok_or_else(|| Error::InvalidParameter {
            name: "override",
            message: format!("{path}: parent is not a table"),
        })?;
        table.insert(last.to_string(), parse_override_value(raw));
    }
    Ok(())
}

/// Load a config file and apply `key=value` style overrides parsed from
/// the command line.
pub fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    let mut tree: toml::Value = toml::from_str(&text).map_err(|e| Error::Format {
        path: display.clone(),
        message: e.to_string(),
    })?;
    apply_overrides(&mut tree, overrides)?;
    let config: ExperimentConfig =
        tree.try_into().map_err(|e: toml::de::Error| Error::Format {
            path: display,
            message: e.to_string(),
        })?;
    config.validate()?;
    Ok(config)
}

/// Parse raw trailing CLI tokens of the form `--a.b.c value` into
/// override pairs.
pub fn parse_override_args(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let path = flag
            .strip_prefix("--")
            .ok_or_else(|| Error::InvalidParameter {
                name: "override",
                message: format!("expected --dotted.path, found {flag:?}"),
            })?;
        let value = it.next().ok_or_else(|| Error::InvalidParameter {
            name: "override",
            message: format!("missing value for --{path}"),
        })?;
        out.push((path.to_string(), value.clone()));
    }
    Ok(out)
}
