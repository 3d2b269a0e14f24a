use std::fs;
use std::path::Path;

use genshield_core::dataset::DatasetConfig;
use genshield_core::evalharness::EvalOptions;
use genshield_core::trainer::TrainingConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const THREADS_ENV: &str = "GENSHIELD_MICRO_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Weights {
    Ema,
    Live,
}

/// Everything a run depends on besides file paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub dataset: DatasetConfig,
    pub training: TrainingConfig,
    pub eval: EvalOptions,
    pub threads: usize,
    pub weights: Weights,
}

impl CliConfig {
    pub fn defaults(stage: u8) -> Self {
        Self {
            dataset: DatasetConfig::default(),
            training: TrainingConfig::for_stage(stage),
            eval: EvalOptions {
                robustness: false,
                ..EvalOptions::default()
            },
            threads: 1,
            weights: Weights::Ema,
        }
    }

    /// Defaults for `stage`, overlaid with the optional JSON file. Objects
    /// merge key by key; anything else replaces.
    pub fn load(stage: u8, file: Option<&Path>) -> Result<Self, CliError> {
        let mut base = serde_json::to_value(Self::defaults(stage)).expect("config serializes");
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
            let over: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::config(format!("config {} is not JSON: {e}", path.display())))?;
            if !over.is_object() {
                return Err(CliError::config(format!(
                    "config {} must be a JSON object",
                    path.display()
                )));
            }
            merge(&mut base, over);
        }
        serde_path_to_error::deserialize(base)
            .map_err(|e| CliError::config(format!("config field {}: {}", e.path(), e.inner())))
    }

    /// Resolve the worker count: flag, then environment, then file.
    pub fn apply_threads(&mut self, flag: Option<usize>) -> Result<(), CliError> {
        let env = match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::config(format!("{THREADS_ENV}={v:?} is not a positive integer")))?,
            ),
            Err(_) => None,
        };
        if let Some(n) = flag.or(env) {
            self.threads = n;
        }
        if self.threads == 0 {
            return Err(CliError::config("threads must be at least 1"));
        }
        self.eval.threads = self.threads;
        Ok(())
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes") + "\n";
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}
