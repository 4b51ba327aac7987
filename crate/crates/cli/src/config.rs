//! Run configuration: one JSON schema for every subcommand, layered as
//! defaults, then the `--config` file, then `--set key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use ckstn::data::SynthSpec;
use ckstn::eval::AblationConfig;
use ckstn::model::ModelConfig;
use ckstn::train::TrainConfig;
use ckstn::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SEED_ENV: &str = "CKSTN_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Training seed; falls back to `CKSTN_SEED`, then to `train.seed`.
    pub seed: Option<u64>,
    /// Directory receiving every output of the run.
    pub output: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub grad_check: GradCheckConfig,
    pub ablation: AblationConfig,
    pub matching: MatchingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            output: PathBuf::from("runs/ckstn"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            grad_check: GradCheckConfig::default(),
            ablation: AblationConfig::default(),
            matching: MatchingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus descriptor naming train and held-out feature directories. When
    /// absent, a synthetic corpus is generated from `synth`.
    pub corpus: Option<PathBuf>,
    pub synth: SynthSpec,
    /// Pairs of the synthetic corpus assigned to training; the rest are held out.
    pub train_pairs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus: None,
            synth: SynthSpec::default(),
            train_pairs: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Defaults to `<output>/checkpoint-final`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    /// Model initialization seeds; each gets its own random batch.
    pub seeds: Vec<u64>,
    /// Pairs per checked batch.
    pub batch: usize,
    pub tol: f64,
    /// Token noise of the random batch; large values keep tokens distinct.
    pub noise: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seeds: vec![1],
            batch: 4,
            tol: 1e-4,
            noise: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingConfig {
    /// Defaults to `<output>/checkpoint-final`.
    pub checkpoint: Option<PathBuf>,
    /// Index of the held-out pair to export.
    pub pair: usize,
    /// One label per textual token; defaults to `w0, w1, ...`.
    pub vocab: Option<Vec<String>>,
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Recursively overlays `top` onto `base`; objects merge key by key.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
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

/// Applies one `a.b.c=value` override. The value is read as JSON when it
/// parses, otherwise as a string. Missing intermediate objects are created so
/// that a misspelled key reaches the schema check instead of vanishing.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_error(format!("override {spec:?} is not key=value")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(config_error(format!("override {spec:?} has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for key in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| config_error(format!("override {path:?}: {key:?} is not inside an object")))?;
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| config_error(format!("override {path:?} does not name an object field")))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Resolves the layered configuration and the effective seed.
pub fn load(config: Option<&Path>, overrides: &[String], env_seed: Option<&str>) -> Result<RunConfig> {
    let mut doc = serde_json::to_value(RunConfig::default()).map_err(|e| Error::Format(e.to_string()))?;
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let file: Value =
            serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        if !file.is_object() {
            return Err(config_error(format!("{}: top level must be an object", path.display())));
        }
        merge(&mut doc, file);
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| config_error(e.to_string()))?;
    if cfg.seed.is_none() {
        if let Some(raw) = env_seed {
            let seed = raw
                .trim()
                .parse()
                .map_err(|_| config_error(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
            cfg.seed = Some(seed);
        }
    }
    if let Some(seed) = cfg.seed {
        cfg.train.seed = seed;
    }
    cfg.seed = Some(cfg.train.seed);
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_json_or_string() {
        let mut doc = serde_json::to_value(RunConfig::default()).unwrap();
        apply_override(&mut doc, "train.epochs=3").unwrap();
        apply_override(&mut doc, "model.attention_normalizer=softmax").unwrap();
        apply_override(&mut doc, "output=out/dir").unwrap();
        let cfg: RunConfig = serde_json::from_value(doc).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.attention_normalizer, ckstn::model::AttentionNormalizer::Softmax);
        assert_eq!(cfg.output, PathBuf::from("out/dir"));
    }

    #[test]
    fn misspelled_keys_are_rejected() {
        for bad in ["train.epoch=3", "modle.d_e=4", "nope=1"] {
            let err = load(None, &[bad.to_string()], None).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{bad}");
        }
        assert!(load(None, &["train.epochs".to_string()], None).is_err());
        assert!(load(None, &["train.epochs.x=1".to_string()], None).is_err());
    }

    #[test]
    fn seed_precedence() {
        let cfg = load(None, &[], None).unwrap();
        assert_eq!(cfg.train.seed, TrainConfig::default().seed);
        let cfg = load(None, &[], Some("42")).unwrap();
        assert_eq!((cfg.seed, cfg.train.seed), (Some(42), 42));
        let cfg = load(None, &["seed=5".to_string()], Some("42")).unwrap();
        assert_eq!(cfg.train.seed, 5);
        assert!(load(None, &[], Some("x")).is_err());
    }

    #[test]
    fn file_layers_merge_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"model": {"d_e": 64}, "train": {"epochs": 4}}"#).unwrap();
        let cfg = load(Some(&path), &["train.epochs=6".to_string()], None).unwrap();
        assert_eq!(cfg.model.d_e, 64);
        assert_eq!(cfg.model.tokens, ModelConfig::default().tokens);
        assert_eq!(cfg.train.epochs, 6);
        let missing = load(Some(&dir.path().join("none.json")), &[], None).unwrap_err();
        assert_eq!(missing.exit_code(), 3);
    }
}
