//! Checkpoints: a JSON manifest plus one block of little-endian `f64`s.
//!
//! `<base>.json` lists every array with its shape and byte offset into
//! `<base>.bin`. Array names are `<model>/<parameter>`; optimizer moments
//! use the suffixes `#m` and `#v`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::AdamW;
use crate::autograd::{Mat, ParamSet};
use crate::error::{Error, Result};
use crate::inference::Models;
use crate::model::{ModelConfig, Praline};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub epoch: usize,
    pub seed: u64,
    /// Model names with their architecture, in storage order.
    pub models: Vec<(String, ModelConfig)>,
    pub optimizer_steps: Option<Vec<u64>>,
    pub arrays: Vec<ArrayEntry>,
}

fn paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("json"), base.with_extension("bin"))
}

/// Writes `<base>.json` and `<base>.bin`. Optimizer moments are stored when
/// `optimizers` is given (one per model).
pub fn save_checkpoint(
    base: &Path,
    config: &serde_json::Value,
    epoch: usize,
    seed: u64,
    models: &Models,
    optimizers: Option<&[&AdamW]>,
) -> Result<()> {
    let named = models.named();
    if let Some(opts) = optimizers {
        if opts.len() != named.len() {
            return Err(Error::Checkpoint(format!("{} optimizers for {} models", opts.len(), named.len())));
        }
    }
    let mut arrays = Vec::new();
    let mut bytes: Vec<u8> = Vec::new();
    let mut put = |name: String, m: &Mat| {
        arrays.push(ArrayEntry { name, shape: [m.nrows(), m.ncols()], offset: bytes.len() });
        for x in m.iter() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    };
    for (k, (model_name, model)) in named.iter().enumerate() {
        let params = model.params();
        for i in 0..params.len() {
            put(format!("{model_name}/{}", params.name(i)), params.get(i));
        }
        if let Some(opts) = optimizers {
            for i in 0..params.len() {
                put(format!("{model_name}/{}#m", params.name(i)), &opts[k].m[i]);
                put(format!("{model_name}/{}#v", params.name(i)), &opts[k].v[i]);
            }
        }
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        epoch,
        seed,
        models: named.iter().map(|(n, m)| (n.to_string(), *m.config())).collect(),
        optimizer_steps: optimizers.map(|o| o.iter().map(|a| a.step).collect()),
        arrays,
    };
    let (json, bin) = paths(base);
    if let Some(parent) = json.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&bin, &bytes).map_err(|e| Error::io(&bin, e))?;
    fs::write(&json, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&json, e))?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]; optimizer moments are
/// ignored.
pub fn load_checkpoint(base: &Path) -> Result<(CheckpointManifest, Models)> {
    let (json, bin) = paths(base);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", manifest.format_version)));
    }
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut built = Vec::new();
    for (model_name, config) in &manifest.models {
        let prefix = format!("{model_name}/");
        let mut params = ParamSet::default();
        for entry in manifest.arrays.iter().filter(|a| a.name.starts_with(&prefix) && !a.name.contains('#')) {
            let [r, c] = entry.shape;
            let end = entry.offset + r * c * 8;
            let raw = bytes
                .get(entry.offset..end)
                .ok_or_else(|| Error::Checkpoint(format!("array `{}` runs past the end of the data", entry.name)))?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            let m = Mat::from_shape_vec((r, c), values).map_err(|e| Error::Checkpoint(e.to_string()))?;
            params.push(&entry.name[prefix.len()..], m);
        }
        built.push((model_name.as_str(), Praline::from_params(*config, params)?));
    }
    let models = match built.as_slice() {
        [("joint", m)] => Models::Joint(m.clone()),
        [("pointer", p), ("decoder", d), ("ranker", r)] => {
            Models::Separate { pointer: p.clone(), decoder: d.clone(), ranker: r.clone() }
        }
        _ => return Err(Error::Checkpoint("unrecognized model set".into())),
    };
    Ok((manifest, models))
}
