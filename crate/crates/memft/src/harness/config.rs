//! The combined run configuration: model, data, pretraining, and stream
//! settings in one JSON document.
//!
//! Loading layers three sources: built-in defaults, an optional JSON file
//! (deep-merged, so partial files are fine), and `key.path=value` overrides.
//! Override paths must already exist in the merged document, which catches
//! typos instead of silently ignoring them.

use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::ModelConfig;

use super::data::DataConfig;
use super::stream::{PretrainConfig, StreamConfig};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize, Default)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub stream: StreamConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stream.method.validate()?;
        self.pretrain.optimizer.validate()?;
        if self.data.n_pretrain_facts == 0 || self.data.n_stream_facts == 0 {
            return Err(Error::Config("need both pretrain and stream facts".into()));
        }
        Ok(())
    }
}

fn deep_merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key.path=value")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
    let mut cursor = doc;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let obj = cursor.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "config path {:?} is not an object; set it to a full object first",
                segments[..i].join(".")
            ))
        })?;
        let slot = obj
            .get_mut(*seg)
            .ok_or_else(|| Error::Config(format!("unknown config path {path:?} (at {seg:?})")))?;
        if i + 1 == segments.len() {
            *slot = value;
            return Ok(());
        }
        cursor = slot;
    }
    unreachable!("loop returns on the last segment")
}

/// Layer an optional JSON file (deep-merged) and `key.path=value` overrides
/// on top of `base`, then validate. Used both for fresh runs (base =
/// defaults) and for resuming from a checkpoint (base = the stored config).
pub fn patch_config(base: &RunConfig, path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut doc = serde_json::to_value(base)?;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)?;
        let patch: Value = serde_json::from_str(&text)?;
        deep_merge(&mut doc, patch);
    }
    for spec in overrides {
        apply_override(&mut doc, spec)?;
    }
    let cfg: RunConfig = serde_json::from_value(doc)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Defaults, optionally deep-merged with a JSON file, then patched by
/// `key.path=value` overrides. The result is validated.
pub fn load_run_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    patch_config(&RunConfig::default(), path, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::MethodKind;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn overrides_patch_nested_fields() {
        let cfg = load_run_config(
            None,
            &[
                "model.d_model=32".to_string(),
                "stream.method.t=7".to_string(),
                "pretrain.target_acc=0.5".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.stream.method.t, Some(7));
        assert_eq!(cfg.pretrain.target_acc, 0.5);
    }

    #[test]
    fn unknown_paths_are_rejected() {
        let err = load_run_config(None, &["model.d_modle=32".to_string()]).unwrap_err();
        assert!(err.to_string().contains("unknown config path"));
        assert!(load_run_config(None, &["no_equals_sign".to_string()]).is_err());
    }

    #[test]
    fn method_can_be_switched_to_lora_via_overrides() {
        let cfg = load_run_config(
            None,
            &[
                "stream.method.method=lora".to_string(),
                "stream.method.t=null".to_string(),
                "stream.method.optimizer.kind=adamw".to_string(),
                "stream.method.optimizer.weight_decay=0.1".to_string(),
                r#"stream.method.lora={"rank":4,"alpha":8.0,"target":"all_linear"}"#.to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.stream.method.method, MethodKind::Lora);
        assert_eq!(cfg.stream.method.lora.as_ref().unwrap().rank, 4);
    }

    #[test]
    fn file_merge_keeps_unmentioned_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{"model": {"n_layers": 2, "memory_layer_index": 1}, "stream": {"n_facts": 5}}"#,
        )
        .unwrap();
        let cfg = load_run_config(Some(&path), &[]).unwrap();
        assert_eq!(cfg.model.n_layers, 2);
        assert_eq!(cfg.stream.n_facts, 5);
        let defaults = RunConfig::default();
        assert_eq!(cfg.model.d_model, defaults.model.d_model);
        assert_eq!(cfg.stream.batch_size, defaults.stream.batch_size);
    }

    #[test]
    fn invalid_merged_configs_fail_validation() {
        assert!(load_run_config(None, &["model.d_model=0".to_string()]).is_err());
        assert!(load_run_config(None, &["stream.method.t=0".to_string()]).is_err());
    }
}
