//! Run configuration: nested sections addressed by flat dotted keys
//! (`trainer.epochs_mixup = 30`), loaded from TOML or JSON, then patched by
//! `key=value` overrides and the `STCMIX_SEED` environment variable.
//! Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::evalkit::{FinetuneConfig, ProbeConfig};
use crate::mixing::Operator;
use crate::synthdata::CorpusSpec;
use crate::trainer::TrainerConfig;

pub const SEED_ENV: &str = "STCMIX_SEED";
/// Key that marks a JSON document as a run manifest rather than a config.
pub const MANIFEST_MARKER: &str = "build_id";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub operators: Vec<Operator>,
    /// Modality whose encoder is pretrained and evaluated.
    pub modality: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            operators: Operator::ALL.to_vec(),
            modality: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub tolerance: f64,
    /// Central-difference step.
    pub step: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            step: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for initialisation, batching, augmentation and mixing.
    pub seed: u64,
    pub data: CorpusSpec,
    pub trainer: TrainerConfig,
    pub probe: ProbeConfig,
    pub finetune: FinetuneConfig,
    pub experiment: ExperimentConfig,
    pub gradcheck: GradcheckConfig,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Writes `value` at a dotted path, creating intermediate tables.
fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key '{key}'")));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("'{}' is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("split yields at least one part")
}

/// Merges a possibly mixed nested/dotted document into `root`.
fn merge(root: &mut Value, doc: Value, prefix: &str) -> Result<()> {
    match doc {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k
                } else {
                    format!("{prefix}.{k}")
                };
                merge(root, v, &key)?;
            }
            Ok(())
        }
        leaf => {
            if prefix.is_empty() {
                return Err(Error::Config("config document must be a table".into()));
            }
            set_path(root, prefix, leaf)
        }
    }
}

/// Parses an override value: JSON literal if it parses, bare string otherwise.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// A run manifest carries its resolved config under `config`.
fn unwrap_manifest(v: Value) -> Value {
    match v {
        Value::Object(mut map)
            if map.contains_key(MANIFEST_MARKER) && map.contains_key("config") =>
        {
            map.remove("config").unwrap_or_default()
        }
        other => other,
    }
}

fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(&key, child, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

impl RunConfig {
    fn from_value(v: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(v).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults patched by a config document (TOML, or JSON for `.json` paths),
    /// then `key=value` overrides, then `STCMIX_SEED`.
    pub fn resolve(
        path: Option<&Path>,
        overrides: &[String],
        seed_env: Option<&str>,
    ) -> Result<Self> {
        let mut root = serde_json::to_value(Self::default())?;
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let doc = if path.extension().is_some_and(|e| e == "json") {
                let v: Value = serde_json::from_str(&text).map_err(config_err)?;
                unwrap_manifest(v)
            } else {
                let t: toml::Table = toml::from_str(&text).map_err(config_err)?;
                serde_json::to_value(t)?
            };
            merge(&mut root, doc, "")?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            set_path(&mut root, k.trim(), parse_value(v.trim()))?;
        }
        if let Some(s) = seed_env {
            let seed: u64 = s.trim().parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV}='{s}' is not an unsigned integer"))
            })?;
            set_path(&mut root, "seed", Value::from(seed))?;
        }
        Self::from_value(root)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut root = serde_json::to_value(Self::default())?;
        let t: toml::Table = toml::from_str(text).map_err(config_err)?;
        merge(&mut root, serde_json::to_value(t)?, "")?;
        Self::from_value(root)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.trainer.validate()?;
        if !(1..=2).contains(&self.experiment.modality) {
            return Err(Error::Config(format!(
                "experiment.modality must be 1 or 2, got {}",
                self.experiment.modality
            )));
        }
        if self.trainer.augment.crop > self.data.height.min(self.data.width) {
            return Err(Error::Config(format!(
                "trainer.augment.crop {} exceeds the {}x{} frame",
                self.trainer.augment.crop, self.data.height, self.data.width
            )));
        }
        Ok(())
    }

    /// Every setting as `dotted.key -> value`.
    pub fn flatten(&self) -> Result<BTreeMap<String, Value>> {
        let mut out = BTreeMap::new();
        flatten_into("", &serde_json::to_value(self)?, &mut out);
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.flatten()?)?)
    }

    /// Inverse of [`RunConfig::to_json`].
    pub fn from_flat_json(text: &str) -> Result<Self> {
        let mut root = serde_json::to_value(Self::default())?;
        merge(
            &mut root,
            serde_json::from_str(text).map_err(config_err)?,
            "",
        )?;
        Self::from_value(root)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_dotted_keys() {
        let cfg = RunConfig::from_toml_str(
            "seed = 9\ntrainer.epochs_mixup = 3\n[data]\nclips_per_class = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.trainer.epochs_mixup, 3);
        assert_eq!(cfg.data.clips_per_class, 4);
        assert_eq!(
            cfg.trainer.epochs_cmmc,
            TrainerConfig::default().epochs_cmmc
        );
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(matches!(
            RunConfig::from_toml_str("trainer.epoch_mixup = 3"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("bogus = 1"),
            Err(Error::Config(_))
        ));
        let o = vec!["trainer.augment.crap=3".to_string()];
        assert!(RunConfig::resolve(None, &o, None).is_err());
    }

    #[test]
    fn overrides_and_env() {
        let o = vec![
            "trainer.operator=videomix".to_string(),
            "trainer.tau=0.2".to_string(),
            "experiment.seeds=[4,5]".to_string(),
            "seed=1".to_string(),
        ];
        let cfg = RunConfig::resolve(None, &o, Some("77")).unwrap();
        assert_eq!(cfg.trainer.operator, Operator::VideoMix);
        assert_eq!(cfg.trainer.tau, 0.2);
        assert_eq!(cfg.experiment.seeds, vec![4, 5]);
        assert_eq!(cfg.seed, 77);
        assert!(RunConfig::resolve(None, &["trainer.tau".to_string()], None).is_err());
        assert!(RunConfig::resolve(None, &["trainer.tau=fast".to_string()], None).is_err());
        assert!(RunConfig::resolve(None, &[], Some("x")).is_err());
    }

    #[test]
    fn json_files_and_flat_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"trainer.batch_size": 8, "data": {"seed": 3}}"#).unwrap();
        let cfg = RunConfig::resolve(Some(&path), &[], None).unwrap();
        assert_eq!(cfg.trainer.batch_size, 8);
        assert_eq!(cfg.data.seed, 3);
        let back = RunConfig::from_flat_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.flatten().unwrap().contains_key("trainer.augment.crop"));

        let manifest = dir.path().join("manifest.json");
        let flat: Value = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        let doc = serde_json::json!({"build_id": "x", "seed": 0, "config": flat});
        fs::write(&manifest, doc.to_string()).unwrap();
        assert_eq!(RunConfig::resolve(Some(&manifest), &[], None).unwrap(), cfg);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml_str("data.height = 4").is_err());
        assert!(RunConfig::from_toml_str("experiment.modality = 3").is_err());
        assert!(RunConfig::from_toml_str("trainer.augment.crop = 20").is_err());
    }
}
