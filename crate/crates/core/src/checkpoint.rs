//! Binary checkpoint container.
//!
//! Layout: `b"DSSM"`, format version (u32 LE), header length (u64 LE), a
//! compact UTF-8 JSON header mapping tensor name to
//! `{"shape", "offset", "dtype": "f32"}`, then the little-endian f32
//! payloads back to back. Offsets are relative to the payload start. The
//! reserved `__metadata__` entry holds string key/value pairs, including a
//! SHA-256 digest of every tensor (shape and payload) under `sha256.<name>`
//! and of the remaining metadata under `sha256.__metadata__`.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{DiffussmModel, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DSSM";
pub const VERSION: u32 = 1;
const METADATA_KEY: &str = "__metadata__";
const CHECKSUM_PREFIX: &str = "sha256.";
const PREAMBLE: usize = 16;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn tensor_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn tensor_digest(shape: &[usize], payload: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update((shape.len() as u64).to_le_bytes());
    for &d in shape {
        h.update((d as u64).to_le_bytes());
    }
    h.update(payload);
    hex(&h.finalize())
}

fn metadata_digest(meta: &BTreeMap<String, String>) -> String {
    hex(&Sha256::digest(serde_json::to_vec(meta).expect("metadata serializes")))
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds every tensor of `store` under `{prefix}.{name}`.
    pub fn insert_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (name, t) in store.iter() {
            self.tensors.insert(format!("{prefix}.{name}"), t.clone());
        }
    }

    /// Overwrites every tensor of `store` from `{prefix}.{name}` entries.
    pub fn restore_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let names = store.names().to_vec();
        for (name, dst) in names.iter().zip(store.tensors_mut()) {
            let key = format!("{prefix}.{name}");
            let src = self
                .tensors
                .get(&key)
                .ok_or_else(|| Error::invalid(format!("checkpoint has no tensor {key}")))?;
            if src.shape() != dst.shape() {
                return Err(Error::shape("checkpoint restore", src.shape(), dst.shape()));
            }
            *dst = src.clone();
        }
        let expected = store.len();
        let present = self
            .tensors
            .keys()
            .filter(|k| k.starts_with(&format!("{prefix}.")))
            .count();
        if present != expected {
            return Err(Error::invalid(format!(
                "checkpoint holds {present} tensors under {prefix}, model expects {expected}"
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Map::new();
        let mut meta: Map<String, Value> = self
            .metadata
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let bytes = tensor_bytes(t);
            meta.insert(
                format!("{CHECKSUM_PREFIX}{name}"),
                Value::String(tensor_digest(t.shape(), &bytes)),
            );
            header.insert(
                name.clone(),
                json!({ "dtype": "f32", "offset": payload.len(), "shape": t.shape() }),
            );
            payload.extend_from_slice(&bytes);
        }
        meta.insert(
            format!("{CHECKSUM_PREFIX}{METADATA_KEY}"),
            Value::String(metadata_digest(&self.metadata)),
        );
        header.insert(METADATA_KEY.to_string(), Value::Object(meta));
        let header = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE {
            return Err(Error::format(
                bytes.len() as u64,
                "file shorter than the 16-byte preamble",
            ));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(0, "bad magic, expected DSSM"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        if hlen > (bytes.len() - PREAMBLE) as u64 {
            return Err(Error::format(
                8,
                format!("header length {hlen} exceeds file size {}", bytes.len()),
            ));
        }
        let hlen = hlen as usize;
        let raw = &bytes[PREAMBLE..PREAMBLE + hlen];
        let header: Value = serde_json::from_slice(raw).map_err(|e| {
            let col = if e.line() == 1 { e.column().saturating_sub(1) } else { 0 };
            Error::format((PREAMBLE + col) as u64, format!("header is not valid JSON: {e}"))
        })?;
        let bad_header = |msg: String| Error::format(PREAMBLE as u64, msg);
        let Value::Object(mut entries) = header else {
            return Err(bad_header("header is not a JSON object".into()));
        };
        let mut metadata = BTreeMap::new();
        let mut checksums = BTreeMap::new();
        match entries.remove(METADATA_KEY) {
            Some(Value::Object(meta)) => {
                for (k, v) in meta {
                    let Value::String(v) = v else {
                        return Err(bad_header(format!("metadata value for {k} is not a string")));
                    };
                    match k.strip_prefix(CHECKSUM_PREFIX) {
                        Some(name) => checksums.insert(name.to_string(), v),
                        None => metadata.insert(k, v),
                    };
                }
            }
            _ => return Err(bad_header("missing __metadata__ object".into())),
        }
        if checksums.remove(METADATA_KEY) != Some(metadata_digest(&metadata)) {
            return Err(bad_header("metadata checksum mismatch".into()));
        }

        let payload_start = PREAMBLE + hlen;
        let payload = &bytes[payload_start..];
        let mut spans = Vec::with_capacity(entries.len());
        for (name, entry) in &entries {
            let (shape, offset) = parse_entry(entry)
                .ok_or_else(|| bad_header(format!("entry {name} needs exactly shape, offset and dtype \"f32\"")))?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = numel.and_then(|n| n.checked_mul(4));
            spans.push((offset, len, name.clone(), shape));
        }
        spans.sort_by_key(|s| s.0);
        let mut cursor = 0usize;
        let mut tensors = BTreeMap::new();
        for (offset, len, name, shape) in spans {
            let at = (payload_start + cursor) as u64;
            if offset != cursor {
                return Err(Error::format(
                    at,
                    format!("tensor {name} expected at payload offset {cursor}, header says {offset}"),
                ));
            }
            let end = len.and_then(|l| offset.checked_add(l)).filter(|&e| e <= payload.len());
            let Some(end) = end else {
                return Err(Error::format(
                    at,
                    format!("tensor {name} of shape {shape:?} runs past the end of the file"),
                ));
            };
            let chunk = &payload[offset..end];
            match checksums.remove(&name) {
                Some(sum) if sum == tensor_digest(&shape, chunk) => {}
                Some(_) => return Err(Error::format(at, format!("checksum mismatch in tensor {name}"))),
                None => return Err(bad_header(format!("no checksum recorded for tensor {name}"))),
            }
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.insert(name, Tensor::new(&shape, data)?);
            cursor = end;
        }
        if cursor != payload.len() {
            return Err(Error::format(
                (payload_start + cursor) as u64,
                "trailing bytes after the last tensor",
            ));
        }
        if let Some(name) = checksums.keys().next() {
            return Err(bad_header(format!("checksum recorded for absent tensor {name}")));
        }
        let ckpt = Checkpoint { metadata, tensors };
        // Any header edit that still parses shows up as a non-canonical header.
        let canonical = ckpt.to_bytes();
        if let Some(i) = canonical[..payload_start.min(canonical.len())]
            .iter()
            .zip(&bytes[..payload_start])
            .position(|(a, b)| a != b)
        {
            return Err(Error::format(i as u64, "header is not in canonical form"));
        }
        if canonical.len() != bytes.len() {
            return Err(Error::format(PREAMBLE as u64, "header is not in canonical form"));
        }
        Ok(ckpt)
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn parse_entry(entry: &Value) -> Option<(Vec<usize>, usize)> {
    let obj = entry.as_object()?;
    if obj.len() != 3 || obj.get("dtype")?.as_str()? != "f32" {
        return None;
    }
    let shape = obj
        .get("shape")?
        .as_array()?
        .iter()
        .map(|d| d.as_u64().and_then(|d| usize::try_from(d).ok()))
        .collect::<Option<Vec<_>>>()?;
    let offset = usize::try_from(obj.get("offset")?.as_u64()?).ok()?;
    Some((shape, offset))
}

/// Training snapshot: model config, step, live and EMA weights.
#[derive(Clone, Debug)]
pub struct TrainingSnapshot {
    pub config: ModelConfig,
    pub step: u64,
    pub live: ParamStore<f32>,
    pub ema: ParamStore<f32>,
}

impl TrainingSnapshot {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.metadata.insert("config".into(), self.config.to_toml());
        c.metadata.insert("step".into(), self.step.to_string());
        c.insert_store("live", &self.live);
        c.insert_store("ema", &self.ema);
        c
    }

    /// Rebuilds the model skeleton from the stored config and fills both
    /// weight sets.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<(DiffussmModel, Self)> {
        let text = c
            .metadata
            .get("config")
            .ok_or_else(|| Error::invalid("checkpoint metadata has no config"))?;
        let config = ModelConfig::from_toml(text)?;
        let step = c
            .metadata
            .get("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::invalid("checkpoint metadata has no valid step"))?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let (model, mut live) = DiffussmModel::new::<f32, _>(&config, &mut rng)?;
        let mut ema = live.clone();
        c.restore_store("live", &mut live)?;
        c.restore_store("ema", &mut ema)?;
        Ok((
            model,
            TrainingSnapshot {
                config,
                step,
                live,
                ema,
            },
        ))
    }
}
