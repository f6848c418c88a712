//! Checkpoint directories: a flat little-endian `f32` parameter blob plus a
//! TOML manifest carrying shapes, model config, seed, step and metrics.
//! Optimizer moments, when present, are stored as two more blobs in the
//! same layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.toml";
pub const PARAMS_BLOB: &str = "params.bin";
const ADAM_M_BLOB: &str = "adam_m.bin";
const ADAM_V_BLOB: &str = "adam_v.bin";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct OptimizerEntry {
    pub steps_taken: u64,
    pub config: AdamConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    /// Model kind, e.g. `codec`, `dit`, `projector`.
    pub kind: String,
    pub dtype: String,
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    pub config: toml::Value,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub extra: BTreeMap<String, toml::Value>,
    #[serde(default)]
    pub optimizer: Option<OptimizerEntry>,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn new<C: Serialize>(kind: &str, config: &C, step: u64, seed: u64) -> Result<Self> {
        let config =
            toml::Value::try_from(config).map_err(|e| Error::Config(format!("config not serializable: {e}")))?;
        Ok(Self {
            kind: kind.to_string(),
            dtype: "f32-le".to_string(),
            step,
            seed,
            config_hash: config_hash(&config),
            config,
            metrics: BTreeMap::new(),
            extra: BTreeMap::new(),
            optimizer: None,
            tensors: Vec::new(),
        })
    }

    pub fn config_as<C: for<'de> Deserialize<'de>>(&self) -> Result<C> {
        self.config
            .clone()
            .try_into()
            .map_err(|e| Error::Config(format!("manifest config for {}: {e}", self.kind)))
    }
}

/// Hex SHA-256 of the canonical TOML rendering of a config value.
pub fn config_hash(config: &toml::Value) -> String {
    let text = toml::to_string(config).unwrap_or_else(|_| format!("{config:?}"));
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn write_blob(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let mut bytes = Vec::with_capacity(tensors.iter().map(|t| t.numel() * 4).sum());
    for t in tensors {
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_blob(path: &Path, entries: &[TensorEntry]) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let total: usize = entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if bytes.len() != total * 4 {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", total * 4, bytes.len()),
        ));
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    Ok(entries
        .iter()
        .map(|e| {
            let n = e.shape.iter().product();
            Tensor::new(e.shape.clone(), values.by_ref().take(n).collect())
        })
        .collect())
}

/// Writes `dir/manifest.toml`, `dir/params.bin` and, with an optimizer,
/// its moment blobs. The manifest's tensor table is filled in here.
pub fn save(dir: &Path, mut manifest: Manifest, store: &ParamStore, adam: Option<&Adam>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    manifest.tensors = store
        .names()
        .iter()
        .zip(store.tensors())
        .map(|(n, t)| TensorEntry {
            name: n.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    write_blob(&dir.join(PARAMS_BLOB), store.tensors())?;
    if let Some(adam) = adam {
        let (m, v) = adam.moments();
        write_blob(&dir.join(ADAM_M_BLOB), m)?;
        write_blob(&dir.join(ADAM_V_BLOB), v)?;
        manifest.optimizer = Some(OptimizerEntry {
            steps_taken: adam.steps_taken(),
            config: adam.config,
        });
    } else {
        manifest.optimizer = None;
    }
    let text = toml::to_string_pretty(&manifest).map_err(|e| Error::format(dir.join(MANIFEST), e))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::Dependency(format!("no checkpoint at {}", dir.display())));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(path, e))
}

pub struct Loaded {
    pub manifest: Manifest,
    pub params: ParamStore,
    pub adam: Option<Adam>,
}

pub fn load(dir: &Path) -> Result<Loaded> {
    let manifest = load_manifest(dir)?;
    let tensors = read_blob(&dir.join(PARAMS_BLOB), &manifest.tensors)?;
    let names = manifest.tensors.iter().map(|e| e.name.clone()).collect();
    let params = ParamStore::from_parts(names, tensors);
    let adam = match &manifest.optimizer {
        Some(opt) => {
            let m = read_blob(&dir.join(ADAM_M_BLOB), &manifest.tensors)?;
            let v = read_blob(&dir.join(ADAM_V_BLOB), &manifest.tensors)?;
            Some(Adam::from_state(opt.config, m, v, opt.steps_taken))
        }
        None => None,
    };
    Ok(Loaded { manifest, params, adam })
}

/// Loads a checkpoint and checks its kind and tensor layout against a
/// freshly constructed store.
pub fn load_into(dir: &Path, kind: &str, store: &mut ParamStore) -> Result<Loaded> {
    let loaded = load(dir)?;
    if loaded.manifest.kind != kind {
        return Err(Error::format(
            dir.join(MANIFEST),
            format!("expected a {kind} checkpoint, found {}", loaded.manifest.kind),
        ));
    }
    if loaded.params.names() != store.names()
        || loaded
            .params
            .tensors()
            .iter()
            .zip(store.tensors())
            .any(|(a, b)| a.shape() != b.shape())
    {
        return Err(Error::format(
            dir.join(MANIFEST),
            "tensor layout does not match the configured model",
        ));
    }
    *store = loaded.params.clone();
    Ok(loaded)
}
