//! Checkpoint files.
//!
//! Layout: one compact JSON header line, a newline, then every tensor as raw
//! little-endian `f64` values, concatenated in manifest order. Offsets in the
//! manifest are byte offsets into that data section.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ViTConfig;
use super::params::ViTParams;
use crate::error::{Error, Result};
use crate::tensor::Element;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

/// Provenance stamped into checkpoint headers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    #[serde(default)]
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ViTConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: CheckpointMeta,
}

/// Serializes to bytes. Equal parameters and metadata give equal bytes.
pub fn to_bytes<E: Element>(params: &ViTParams<E>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let named = params.named_tensors();
    let mut offset = 0u64;
    let tensors = named
        .iter()
        .map(|(name, t)| {
            let entry = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 8 * t.len() as u64;
            entry
        })
        .collect();
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        config: params.config().clone(),
        tensors,
        meta: CheckpointMeta {
            frozen: params.is_frozen(),
            ..meta.clone()
        },
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(offset as usize);
    for (_, t) in &named {
        for v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save<E: Element>(params: &ViTParams<E>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = to_bytes(params, meta)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_header(reader: &mut impl BufRead) -> Result<CheckpointHeader> {
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Format(
            "checkpoint header not newline-terminated".into(),
        ));
    }
    let value: serde_json::Value = serde_json::from_slice(&line)?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("checkpoint header lacks format_version".into()))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(Error::FormatVersion {
            found: version as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| Error::Format(format!("checkpoint header: {e}")))
}

pub fn from_reader<E: Element>(reader: impl Read) -> Result<(ViTParams<E>, CheckpointHeader)> {
    let mut reader = BufReader::new(reader);
    let header = read_header(&mut reader)?;
    let mut data = Vec::new();
    reader.read_to_end(&mut data)?;

    // Rebuild the parameter template from the config; the seed is irrelevant
    // because every tensor is overwritten below.
    let mut params = ViTParams::<E>::init(&header.config, 0)?;
    let mut slots = params.named_tensors_mut()?;
    if slots.len() != header.tensors.len() {
        return Err(Error::Format(format!(
            "manifest lists {} tensors, config implies {}",
            header.tensors.len(),
            slots.len()
        )));
    }
    for ((name, slot), entry) in slots.iter_mut().zip(&header.tensors) {
        if *name != entry.name || slot.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!(
                "manifest entry {} {:?} does not match expected {} {:?}",
                entry.name,
                entry.shape,
                name,
                slot.shape()
            )));
        }
        let start = entry.offset as usize;
        let end = start + 8 * slot.len();
        let bytes = data
            .get(start..end)
            .ok_or_else(|| Error::Format(format!("data for {} truncated", entry.name)))?;
        for (dst, chunk) in slot.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
            let v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            if !v.is_finite() {
                return Err(Error::Format(format!("non-finite value in {}", entry.name)));
            }
            *dst = E::of(v);
        }
    }
    drop(slots);
    let params = if header.meta.frozen {
        params.freeze()
    } else {
        params
    };
    Ok((params, header))
}

pub fn load<E: Element>(path: &Path) -> Result<(ViTParams<E>, CheckpointHeader)> {
    from_reader(fs::File::open(path)?)
}
