//! Encoder checkpoints: a directory holding `manifest.json` plus one NDT1
//! blob per parameter, named `layer{idx}.{weight|bias}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::LayerKind;
use super::stack::{ArchSpec, EncoderStack};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub architecture: ArchSpec,
    pub modality: String,
    pub layers: Vec<LayerKind>,
    pub params: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    pub stage: Option<usize>,
    pub frozen: bool,
}

pub fn save_checkpoint(
    stack: &EncoderStack,
    dir: &Path,
    seeds: BTreeMap<String, u64>,
    stage: Option<usize>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let named = stack.named_params();
    for (name, p) in &named {
        p.value.save(&dir.join(name))?;
    }
    let manifest = CheckpointManifest {
        architecture: stack.arch().clone(),
        modality: stack.modality().to_string(),
        layers: stack.layers().iter().map(|l| l.kind()).collect(),
        params: named.into_iter().map(|(n, _)| n).collect(),
        seeds,
        stage,
        frozen: stack.is_frozen(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_checkpoint(dir: &Path) -> Result<(EncoderStack, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    // Parameters are overwritten below; the init stream is irrelevant.
    let mut stack = EncoderStack::build(
        manifest.architecture.clone(),
        &manifest.modality,
        &mut SeededRng::new(0),
    )?;
    let kinds: Vec<LayerKind> = stack.layers().iter().map(|l| l.kind()).collect();
    if kinds != manifest.layers {
        return Err(Error::Structural(format!(
            "checkpoint {} layer list disagrees with its architecture",
            dir.display()
        )));
    }
    let names: Vec<String> = stack.named_params().into_iter().map(|(n, _)| n).collect();
    if names != manifest.params {
        return Err(Error::Structural(format!(
            "checkpoint {} parameter names disagree with its architecture",
            dir.display()
        )));
    }
    for (name, p) in names.iter().zip(stack.params_mut()) {
        let t = Tensor::load(&dir.join(name))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Structural(format!(
                "{name}: stored shape {:?}, expected {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    stack.set_frozen(manifest.frozen);
    Ok((stack, manifest))
}
