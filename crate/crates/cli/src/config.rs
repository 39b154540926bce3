//! Run configuration: one JSON document plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use mbse3_core::model::ModelConfig;
use mbse3_core::scenegen::SceneSpec;
use mbse3_core::trainer::TrainerConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Holds `train/`, `val/` and `test/` scene directories.
    pub data_root: PathBuf,
    pub checkpoint: PathBuf,
    /// Optimizer moments, flow estimates and epoch counter for resuming.
    pub train_state: PathBuf,
    /// Training record, one JSON object per epoch.
    pub record: PathBuf,
    pub report: PathBuf,
    pub csv: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_root: "data".into(),
            checkpoint: "run/checkpoint.json".into(),
            train_state: "run/train_state.json".into(),
            record: "run/train_record.jsonl".into(),
            report: "run/eval_report.json".into(),
            csv: "run/eval.csv".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Counts {
    pub train: u64,
    pub val: u64,
    pub test: u64,
}

impl Default for Counts {
    fn default() -> Self {
        Self {
            train: 200,
            val: 0,
            test: 50,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Modes {
    /// Continue training from `checkpoint` + `train_state` if both exist.
    pub resume: bool,
    /// Evaluate ground-truth masks and motions instead of the network.
    pub oracle: bool,
    /// Disable the Kabsch reflection fix inside `check`.
    pub fault_reflection: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub paths: Paths,
    pub counts: Counts,
    pub modes: Modes,
}

impl RunConfig {
    /// Reads `path` (defaults when absent), applies overrides, validates.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for s in sets {
            apply_set(&mut doc, s)?;
        }
        let cfg: RunConfig =
            serde_path_to_error::deserialize(doc).map_err(|e| CliError::Config(format!("{}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let wrap = |e: mbse3_core::Error| CliError::Config(e.to_string());
        self.scene.validate().map_err(wrap)?;
        self.model.validate().map_err(wrap)?;
        self.trainer.validate().map_err(wrap)?;
        if self.model.backbone.neighbors > self.scene.points {
            return Err(CliError::Config(format!(
                "model.backbone.neighbors ({}) exceeds scene.points ({})",
                self.model.backbone.neighbors, self.scene.points
            )));
        }
        if self.scene.max_parts > self.model.slots {
            return Err(CliError::Config(format!(
                "scene.max_parts ({}) exceeds model.slots ({})",
                self.scene.max_parts, self.model.slots
            )));
        }
        Ok(())
    }
}

/// `a.b.c=value`: value is parsed as JSON, falling back to a plain string.
fn apply_set(doc: &mut Value, set: &str) -> Result<(), CliError> {
    let (key, raw) = set
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set `{set}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("--set key `{key}` is malformed")));
    }
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("--set `{key}`: `{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("key has at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn set_overrides_nested_keys() {
        let cfg = RunConfig::load(None, &["trainer.epochs=3".into(), "paths.data_root=/tmp/x".into()]).unwrap();
        assert_eq!(cfg.trainer.epochs, 3);
        assert_eq!(cfg.paths.data_root, PathBuf::from("/tmp/x"));
        let cfg = RunConfig::load(None, &["model.backbone.layer_dims=[8,8]".into()]).unwrap();
        assert_eq!(cfg.model.backbone.layer_dims, vec![8, 8]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::load(None, &["trainer.epoch=3".into()]).unwrap_err();
        assert!(matches!(err, CliError::Config(ref m) if m.contains("trainer")), "{err:?}");
        assert!(RunConfig::load(None, &["bogus=1".into()]).is_err());
        assert!(RunConfig::load(None, &["noequals".into()]).is_err());
    }

    #[test]
    fn constraint_violations_name_the_field() {
        let err = RunConfig::load(None, &["scene.points=10".into()]).unwrap_err();
        assert!(matches!(err, CliError::Config(ref m) if m.contains("scene.")), "{err:?}");
    }
}
