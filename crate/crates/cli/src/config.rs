use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use resattunet::data::{Split, SynthConfig};
use resattunet::train::TrainConfig;
use resattunet::ModelConfig;

use crate::CliError;

pub const RESOLVED_CONFIG: &str = "config.json";

/// Everything a subcommand may need. Each command reads only its own fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
    /// Weights for `evaluate` and `predict`.
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint `train` continues from.
    pub resume: Option<PathBuf>,
    /// Split scored by `evaluate`.
    pub split: Split,
    /// MSP image read by `predict`.
    pub image: Option<PathBuf>,
    /// Per-class pixel counts for `weights`; the MARIDA table when absent.
    pub counts: Option<Vec<u64>>,
    /// Band standardization with the manifest's training statistics.
    pub standardize: bool,
    pub gradcheck_seeds: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            manifest: None,
            out: PathBuf::from("run"),
            checkpoint: None,
            resume: None,
            split: Split::Test,
            image: None,
            counts: None,
            standardize: true,
            gradcheck_seeds: 20,
        }
    }
}

impl RunConfig {
    /// Defaults, then the config file, then `key=value` overrides, then the
    /// `SEED` variable.
    pub fn resolve(file: Option<&Path>, overrides: &[String], out: Option<&Path>, seed: Option<&str>) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            let from_file: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            merge(&mut value, from_file);
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("override {item:?} is not key=value")))?;
            set_path(&mut value, key, parse_scalar(raw))?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::usage(format!("config: {e}")))?;
        if let Some(out) = out {
            cfg.out = out.to_path_buf();
        }
        if let Some(seed) = seed {
            let seed: u64 = seed
                .trim()
                .parse()
                .map_err(|_| CliError::usage(format!("SEED {seed:?} is not an unsigned integer")))?;
            cfg.train.seed = seed;
            cfg.synth.seed = seed;
        }
        Ok(cfg)
    }

    /// Writes the resolved config into the output directory.
    pub fn echo(&self) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::runtime(format!("{}: {e}", self.out.display())))?;
        let path = self.out.join(RESOLVED_CONFIG);
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

/// JSON when it parses as JSON, otherwise a bare string.
fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Recursive object merge; non-object values replace.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets a dotted path. Every segment must already exist, so a misspelt key
/// is reported instead of silently ignored.
fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut slot = root;
    for seg in key.split('.') {
        slot = match slot {
            Value::Object(map) => map.get_mut(seg),
            Value::Array(items) => seg.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| CliError::usage(format!("unknown config key {key:?}")))?;
    }
    *slot = value;
    Ok(())
}
