//! Binary checkpoints: a JSON manifest followed by raw little-endian f64
//! payloads.
//!
//! Layout: `CLASPCK1`, manifest length as u64 LE, manifest JSON, payload.
//! Each manifest entry records the tensor's shape, byte offset into the
//! payload and the SHA-256 of its bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ClaspError, Result};
use crate::losses::DinoState;
use crate::trainer::{ModelState, TrainConfig};

const MAGIC: &[u8; 8] = b"CLASPCK1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub len: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerMeta {
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub step: u64,
    pub config: TrainConfig,
    pub dino: DinoState,
    pub optimizer: OptimizerMeta,
    pub tensors: Vec<TensorEntry>,
}

fn ck_err(path: &Path, reason: impl Into<String>) -> ClaspError {
    ClaspError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializes `state` together with the config that produced it.
pub fn encode_checkpoint(state: &ModelState, cfg: &TrainConfig) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in state.named_state() {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let bytes = &payload[offset as usize..];
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset,
            len: bytes.len() as u64,
            sha256: hex(&Sha256::digest(bytes)),
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        step: state.step,
        config: cfg.clone(),
        dino: state.dino.clone(),
        optimizer: OptimizerMeta {
            t: state.opt.t,
            beta1: state.opt.beta1,
            beta2: state.opt.beta2,
            eps: state.opt.eps,
            weight_decay: state.opt.weight_decay,
        },
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint(state: &ModelState, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state, cfg)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Splits a checkpoint into its manifest and payload, checking framing only.
pub fn read_manifest<'a>(bytes: &'a [u8], path: &Path) -> Result<(Manifest, &'a [u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(ck_err(path, "not a checkpoint (bad magic)"));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if mlen > body.len() {
        return Err(ck_err(path, "manifest length exceeds file size"));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..mlen]).map_err(|e| ck_err(path, format!("bad manifest: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(ck_err(path, format!("unsupported version {}", manifest.version)));
    }
    Ok((manifest, &body[mlen..]))
}

/// Verifies every tensor against the manifest and decodes it, keyed by name.
fn decode_tensors(manifest: &Manifest, payload: &[u8], path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let mut expected_end = 0u64;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.dtype != "f64" {
            return Err(ck_err(path, format!("tensor {:?} has dtype {}", e.name, e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        if e.len != 8 * numel as u64 || e.offset != expected_end {
            return Err(ck_err(path, format!("tensor {:?} has inconsistent extent", e.name)));
        }
        let end = e.offset + e.len;
        if end > payload.len() as u64 {
            return Err(ck_err(path, format!("tensor {:?} is truncated", e.name)));
        }
        let bytes = &payload[e.offset as usize..end as usize];
        if hex(&Sha256::digest(bytes)) != e.sha256 {
            return Err(ClaspError::Checksum { tensor: e.name.clone() });
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((e.name.clone(), data));
        expected_end = end;
    }
    if expected_end != payload.len() as u64 {
        return Err(ck_err(path, "trailing bytes after last tensor"));
    }
    Ok(out)
}

/// Checks that the manifest describes exactly the tensors of `target`.
fn check_structure(manifest: &Manifest, target: &ModelState, path: &Path) -> Result<()> {
    let want = target.named_state();
    for (name, t) in &want {
        match manifest.tensors.iter().find(|e| &e.name == name) {
            None => return Err(ClaspError::Structural(format!("{}: missing tensor {name:?}", path.display()))),
            Some(e) if e.shape != t.shape() => {
                return Err(ClaspError::Structural(format!(
                    "{}: tensor {name:?} has shape {:?}, expected {:?}",
                    path.display(),
                    e.shape,
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = manifest.tensors.iter().find(|e| !want.iter().any(|(n, _)| n == &e.name)) {
        return Err(ClaspError::Structural(format!(
            "{}: unexpected tensor {:?}",
            path.display(),
            extra.name
        )));
    }
    if manifest.dino.center.len() != target.dino.center.len() {
        return Err(ClaspError::Structural(format!(
            "{}: center has {} prototypes, expected {}",
            path.display(),
            manifest.dino.center.len(),
            target.dino.center.len()
        )));
    }
    Ok(())
}

/// Overwrites `state` from checkpoint bytes. Everything is validated before
/// the first write, so on error `state` is untouched.
pub fn restore_into(state: &mut ModelState, bytes: &[u8], path: &Path) -> Result<()> {
    let (manifest, payload) = read_manifest(bytes, path)?;
    check_structure(&manifest, state, path)?;
    let tensors = decode_tensors(&manifest, payload, path)?;
    manifest.dino.validate()?;
    let mut by_name: std::collections::HashMap<String, Vec<f64>> = tensors.into_iter().collect();
    for (name, t) in state.named_state_mut() {
        let data = by_name.remove(&name).expect("structure checked");
        t.data_mut().copy_from_slice(&data);
    }
    state.step = manifest.step;
    state.dino = manifest.dino;
    state.opt.t = manifest.optimizer.t;
    state.opt.beta1 = manifest.optimizer.beta1;
    state.opt.beta2 = manifest.optimizer.beta2;
    state.opt.eps = manifest.optimizer.eps;
    state.opt.weight_decay = manifest.optimizer.weight_decay;
    Ok(())
}

/// Loads a checkpoint using its own config snapshot for the structure.
fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| ck_err(path, e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, TrainConfig)> {
    let bytes = read_file(path)?;
    let (manifest, _) = read_manifest(&bytes, path)?;
    let cfg = manifest.config;
    cfg.validate()?;
    let mut state = ModelState::init(&cfg)?;
    restore_into(&mut state, &bytes, path)?;
    Ok((state, cfg))
}

/// Loads a checkpoint into a state shaped by `cfg`, rejecting any
/// structural mismatch before anything is built from it.
pub fn load_checkpoint_for(cfg: &TrainConfig, path: &Path) -> Result<ModelState> {
    let bytes = read_file(path)?;
    let mut state = ModelState::init(cfg)?;
    restore_into(&mut state, &bytes, path)?;
    Ok(state)
}
