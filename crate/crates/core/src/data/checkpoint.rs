//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `PRUNENET`, a little-endian `u32` version, a
//! little-endian `u64` header length, a JSON header, then every tensor as
//! raw little-endian `f64` values. The header's manifest gives each
//! tensor's shape and offset (in values) into the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ChannelWeights, NetworkSpec, ParameterSet};
use crate::rewriter::KeepPlan;
use crate::tensor::Tensor;

use super::Normalization;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PRUNENET";
pub const CHECKPOINT_VERSION: u32 = 1;

const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Pretrained main network.
    Baseline,
    /// Main and pruner networks plus the inference mask.
    Pruning,
    /// Rewritten network with the keep plan that produced it.
    Compact,
    /// Compact network after finetuning.
    Finetuned,
}

impl std::fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CheckpointKind::Baseline => "baseline",
            CheckpointKind::Pruning => "pruning",
            CheckpointKind::Compact => "compact",
            CheckpointKind::Finetuned => "finetuned",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epoch: usize,
    /// Configuration the producing command ran with.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
    /// Final metrics reported by the producing command.
    #[serde(default)]
    pub metrics: Option<serde_json::Value>,
    #[serde(default)]
    pub sigmoid_scale: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub spec: NetworkSpec,
    /// Architecture before rewriting, for compact and finetuned networks.
    pub original_spec: Option<NetworkSpec>,
    pub main: ParameterSet,
    pub pruner: Option<ParameterSet>,
    pub mask: Option<Vec<ChannelWeights>>,
    pub plan: Option<KeepPlan>,
    pub normalization: Option<Normalization>,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, spec: NetworkSpec, main: ParameterSet, meta: TrainingMeta) -> Self {
        Checkpoint {
            kind,
            spec,
            original_spec: None,
            main,
            pruner: None,
            mask: None,
            plan: None,
            normalization: None,
            meta,
        }
    }

    pub fn expect_kind(&self, allowed: &[CheckpointKind]) -> Result<()> {
        if allowed.contains(&self.kind) {
            Ok(())
        } else {
            let names: Vec<String> = allowed.iter().map(ToString::to_string).collect();
            Err(Error::Config(format!(
                "checkpoint kind is {}, expected {}",
                self.kind,
                names.join(" or ")
            )))
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    spec: NetworkSpec,
    #[serde(default)]
    original_spec: Option<NetworkSpec>,
    has_pruner: bool,
    mask_layers: Option<Vec<usize>>,
    plan: Option<KeepPlan>,
    normalization: Option<Normalization>,
    meta: TrainingMeta,
    payload_values: u64,
    manifest: Vec<ManifestEntry>,
}

const MAIN: &str = "main";
const PRUNER: &str = "pruner";
const MASK: &str = "mask";

fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut manifest = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    let mut push = |group: &str, name: &str, shape: &[usize], data: &[f64]| {
        manifest.push(ManifestEntry {
            group: group.into(),
            name: name.into(),
            shape: shape.to_vec(),
            offset: payload.len() as u64,
        });
        payload.extend_from_slice(data);
    };
    for (name, t) in ckpt.main.iter() {
        push(MAIN, name, t.shape(), t.data());
    }
    if let Some(p) = &ckpt.pruner {
        for (name, t) in p.iter() {
            push(PRUNER, name, t.shape(), t.data());
        }
    }
    if let Some(mask) = &ckpt.mask {
        for (i, m) in mask.iter().enumerate() {
            push(MASK, &i.to_string(), &[m.len()], &m.values);
        }
    }
    let header = Header {
        kind: ckpt.kind,
        spec: ckpt.spec.clone(),
        original_spec: ckpt.original_spec.clone(),
        has_pruner: ckpt.pruner.is_some(),
        mask_layers: ckpt
            .mask
            .as_ref()
            .map(|m| m.iter().map(|w| w.layer_index).collect()),
        plan: ckpt.plan.clone(),
        normalization: ckpt.normalization.clone(),
        meta: ckpt.meta.clone(),
        payload_values: payload.len() as u64,
        manifest,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + 8 * payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < PREFIX_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let header_end = (PREFIX_LEN as u64)
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| {
            Error::format(
                path,
                format!("header length {header_len} exceeds file size {}", bytes.len()),
            )
        })? as usize;
    let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..header_end])
        .map_err(|e| Error::format(path, format!("corrupt header: {e}")))?;
    let body = &bytes[header_end..];
    let expected = header.payload_values.checked_mul(8);
    if expected != Some(body.len() as u64) {
        return Err(Error::format(
            path,
            format!(
                "payload is {} bytes, header declares {} f64 values ({} bytes)",
                body.len(),
                header.payload_values,
                header.payload_values.saturating_mul(8)
            ),
        ));
    }
    let mut main = ParameterSet::new();
    let mut pruner = ParameterSet::new();
    let mut mask_values: Vec<Vec<f64>> = Vec::new();
    for e in &header.manifest {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        if start.checked_add(n).is_none_or(|end| end as u64 > header.payload_values) {
            return Err(Error::format(
                path,
                format!("tensor {}/{} runs past the payload", e.group, e.name),
            ));
        }
        let data: Vec<f64> = body[8 * start..8 * (start + n)]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        match e.group.as_str() {
            MAIN => main.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?),
            PRUNER => pruner.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?),
            MASK => mask_values.push(data),
            other => return Err(Error::format(path, format!("unknown tensor group `{other}`"))),
        }
    }
    let mask = match header.mask_layers {
        Some(layers) => {
            if layers.len() != mask_values.len() {
                return Err(Error::format(path, "mask manifest does not match mask layers"));
            }
            Some(
                layers
                    .into_iter()
                    .zip(mask_values)
                    .map(|(i, v)| ChannelWeights::new(i, v))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        None => None,
    };
    Ok(Checkpoint {
        kind: header.kind,
        spec: header.spec,
        original_spec: header.original_spec,
        main,
        pruner: header.has_pruner.then_some(pruner),
        mask,
        plan: header.plan,
        normalization: header.normalization,
        meta: header.meta,
    })
}

/// Serialized bytes of `ckpt`; identical states give identical bytes.
pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    encode(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(ckpt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
