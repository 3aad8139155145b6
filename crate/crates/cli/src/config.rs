//! Run configuration: one TOML file, merged over built-in defaults, with
//! `--set key=value` overrides and an `LLE_SEED` environment override.
//!
//! ```toml
//! seed = 17                # optional; replaces every stage seed
//!
//! [paths]
//! corpus = "data"
//! checkpoints = "checkpoints"
//! output = "out"
//!
//! [data]
//! source_language = "A"
//! target_speaker = "B00"
//!
//! [model]                  # network sizes, see ModelConfig
//! [train]                  # StageConfig of initial training
//! [train.weights]          # LossWeights
//! [adapt]
//! [weld]
//! [eval]                   # items, probe settings
//! [grad_check]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use lle_core::eval::ProbeConfig;
use lle_core::model::ModelConfig;
use lle_core::protocol::{StageConfig, StageKind};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub checkpoints: PathBuf,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Transcribed language used for initial training.
    pub source_language: String,
    /// Speaker adapted to; its training split is the adaptation set.
    pub target_speaker: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out source utterances converted per evaluation.
    pub items: usize,
    pub probe: ProbeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    pub seeds: u64,
    pub eps: f64,
    pub tolerance: f64,
    /// Entries perturbed per parameter tensor; 0 = all.
    pub max_entries: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub paths: Paths,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: StageConfig,
    pub adapt: StageConfig,
    pub weld: StageConfig,
    pub eval: EvalConfig,
    pub grad_check: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            paths: Paths {
                corpus: "data".into(),
                checkpoints: "checkpoints".into(),
                output: "out".into(),
            },
            data: DataConfig {
                source_language: "A".into(),
                target_speaker: "B00".into(),
            },
            model: ModelConfig::default(),
            train: StageConfig::initial(),
            adapt: StageConfig::adapt(),
            weld: StageConfig::weld(),
            eval: EvalConfig {
                items: 20,
                probe: ProbeConfig::default(),
            },
            grad_check: GradCheckConfig {
                seeds: 5,
                eps: 1e-5,
                tolerance: 1e-4,
                max_entries: 4,
                batch_size: 2,
            },
        }
    }
}

impl RunConfig {
    /// Defaults, then `path` (if any), then `overrides`, then `LLE_SEED`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut tree = Value::try_from(RunConfig::default()).expect("defaults serialize");
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::domain(format!("cannot read config {}: {e}", path.display())))?;
            let user: Table = text
                .parse()
                .map_err(|e| CliError::domain(format!("config {}: {e}", path.display())))?;
            merge(&mut tree, Value::Table(user));
        }
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let mut cfg: RunConfig = tree
            .try_into()
            .map_err(|e: toml::de::Error| CliError::domain(format!("config: {}", e.message())))?;
        if let Ok(v) = std::env::var("LLE_SEED") {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::usage(format!("LLE_SEED must be an unsigned integer, got `{v}`")))?;
            cfg.seed = Some(seed);
        }
        if let Some(seed) = cfg.seed {
            for s in [&mut cfg.train, &mut cfg.adapt, &mut cfg.weld] {
                s.seed = seed;
            }
        }
        cfg.model.validate().map_err(CliError::from)?;
        Ok(cfg)
    }

    pub fn stage(&self, kind: StageKind) -> &StageConfig {
        match kind {
            StageKind::Initial => &self.train,
            StageKind::Adapt => &self.adapt,
            StageKind::Weld => &self.weld,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Recursively overlays `top` onto `base`; tables merge, everything else
/// is replaced.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
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

/// `a.b.c=value`; the value is parsed as a TOML value, or taken as a
/// string if that fails.
fn apply_override(tree: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("--set expects key=value, got `{spec}`")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::usage(format!("bad --set key `{key}`")));
    }
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let mut node = tree;
    for p in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CliError::usage(format!("--set key `{key}` descends into a non-table")))?;
        node = table.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| CliError::usage(format!("--set key `{key}` descends into a non-table")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
