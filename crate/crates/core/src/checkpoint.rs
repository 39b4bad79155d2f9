//! Checkpoint archives: a tar file holding `manifest.json` and one raw
//! little-endian f32 blob per parameter path.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mim::{VitConfig, VitModel};
use crate::optim::ParamStore;
use crate::tensor::Tensor;
use crate::tokenizer::{Tokenizer, TokenizerConfig};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Tokenizer,
    Mim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub path: String,
    pub shape: Vec<usize>,
    pub blob: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: ModelKind,
    pub architecture: serde_json::Value,
    pub codebook_size: usize,
    pub seed: u64,
    pub steps: usize,
    pub param_hash: String,
    pub params: Vec<ParamEntry>,
}

fn blob_name(path: &str) -> String {
    format!("params/{path}.f32")
}

fn append<W: Write>(ar: &mut tar::Builder<W>, name: &str, bytes: &[u8]) -> Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_cksum();
    ar.append_data(&mut header, name, bytes)?;
    Ok(())
}

/// Write `params` with its manifest. Entries carry no timestamps, so equal
/// inputs give byte-identical archives.
pub fn write_checkpoint(
    path: &Path,
    kind: ModelKind,
    architecture: &impl Serialize,
    codebook_size: usize,
    seed: u64,
    steps: usize,
    params: &ParamStore<f32>,
) -> Result<Manifest> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind,
        architecture: serde_json::to_value(architecture)?,
        codebook_size,
        seed,
        steps,
        param_hash: params.hash_hex(),
        params: params
            .iter()
            .map(|(p, t)| ParamEntry {
                path: p.to_string(),
                shape: t.shape().to_vec(),
                blob: blob_name(p),
            })
            .collect(),
    };
    let mut ar = tar::Builder::new(File::create(path)?);
    append(&mut ar, MANIFEST, &serde_json::to_vec_pretty(&manifest)?)?;
    for ((_, t), e) in params.iter().zip(&manifest.params) {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        append(&mut ar, &e.blob, &bytes)?;
    }
    ar.into_inner()?.flush()?;
    Ok(manifest)
}

/// Parameter tensors keyed by their path.
pub type NamedTensors = Vec<(String, Tensor<f32>)>;

/// Read a manifest and its parameter tensors in manifest order.
pub fn read_checkpoint(path: &Path) -> Result<(Manifest, NamedTensors)> {
    let mut ar = tar::Archive::new(File::open(path)?);
    let mut manifest: Option<Manifest> = None;
    let mut blobs = std::collections::HashMap::new();
    for entry in ar.entries()? {
        let mut entry = entry?;
        let name = entry.path()?.to_string_lossy().into_owned();
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes)?;
        if name == MANIFEST {
            manifest = Some(serde_json::from_slice(&bytes)?);
        } else {
            blobs.insert(name, bytes);
        }
    }
    let manifest =
        manifest.ok_or_else(|| Error::Format(format!("{} has no {MANIFEST}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            manifest.format_version
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.params.len());
    for e in &manifest.params {
        let bytes = blobs
            .remove(&e.blob)
            .ok_or_else(|| Error::Format(format!("missing blob {}", e.blob)))?;
        let n: usize = e.shape.iter().product();
        if bytes.len() != 4 * n {
            return Err(Error::Format(format!(
                "blob {} has {} bytes, expected {}",
                e.blob,
                bytes.len(),
                4 * n
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((e.path.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok((manifest, tensors))
}

/// Copy loaded tensors into `params`, matching by path.
pub fn restore(params: &mut ParamStore<f32>, loaded: Vec<(String, Tensor<f32>)>) -> Result<()> {
    let mut by_name: std::collections::HashMap<String, Tensor<f32>> = loaded.into_iter().collect();
    let mut values = Vec::with_capacity(params.len());
    for name in params.names() {
        values.push(
            by_name
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?,
        );
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Format(format!(
            "checkpoint has unknown parameter {extra}"
        )));
    }
    params.load_values(values)
}

fn expect_kind(m: &Manifest, kind: ModelKind) -> Result<()> {
    if m.kind != kind {
        return Err(Error::Format(format!(
            "checkpoint holds a {:?} model, expected {kind:?}",
            m.kind
        )));
    }
    Ok(())
}

pub fn save_tokenizer(
    path: &Path,
    model: &Tokenizer<f32>,
    seed: u64,
    steps: usize,
) -> Result<Manifest> {
    write_checkpoint(
        path,
        ModelKind::Tokenizer,
        &model.config,
        model.config.codebook_size,
        seed,
        steps,
        &model.params,
    )
}

pub fn load_tokenizer(path: &Path) -> Result<(Tokenizer<f32>, Manifest)> {
    let (m, tensors) = read_checkpoint(path)?;
    expect_kind(&m, ModelKind::Tokenizer)?;
    let config: TokenizerConfig = serde_json::from_value(m.architecture.clone())?;
    let mut model = Tokenizer::new(config, m.seed)?;
    restore(&mut model.params, tensors)?;
    Ok((model, m))
}

pub fn save_vit(path: &Path, model: &VitModel<f32>, seed: u64, steps: usize) -> Result<Manifest> {
    write_checkpoint(
        path,
        ModelKind::Mim,
        &model.config,
        model.config.vocab,
        seed,
        steps,
        &model.params,
    )
}

pub fn load_vit(path: &Path) -> Result<(VitModel<f32>, Manifest)> {
    let (m, tensors) = read_checkpoint(path)?;
    expect_kind(&m, ModelKind::Mim)?;
    let config: VitConfig = serde_json::from_value(m.architecture.clone())?;
    let mut model = VitModel::new(config, m.seed)?;
    restore(&mut model.params, tensors)?;
    Ok((model, m))
}
