//! Flat named-tensor archive for trainer checkpoints: magic, `u32` header
//! length, JSON index, then every tensor as little-endian `f32`.

use std::fs;
use std::path::Path;

use kpinr_nn::train::NamedTensor;
use kpinr_nn::TrainState;
use serde::{Deserialize, Serialize};

use crate::container::atomic_write;
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"KPINRNA\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    /// `param`, `adam_m`, `adam_v` or `ksp_in`.
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the payload.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Index {
    pub epoch: usize,
    pub generation: usize,
    pub adam_step: u64,
    pub entries: Vec<Entry>,
}

pub fn encode_state(state: &TrainState) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0;
    let mut push = |group: &str, name: &str, shape: Vec<usize>, data: &[f32]| {
        entries.push(Entry { group: group.into(), name: name.into(), shape, offset, len: data.len() });
        offset += data.len();
        payload.extend(data.iter().flat_map(|v| v.to_le_bytes()));
    };
    for (group, list) in [("param", &state.params), ("adam_m", &state.adam_m), ("adam_v", &state.adam_v)] {
        for t in list {
            push(group, &t.name, t.shape.clone(), &t.data);
        }
    }
    push("ksp_in", "ksp_in", vec![state.ksp_in.len()], &state.ksp_in);
    let index = Index { epoch: state.epoch, generation: state.generation, adam_step: state.adam_step, entries };
    let json = serde_json::to_vec(&index).expect("index serializes");
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn write_state(path: &Path, state: &TrainState) -> Result<()> {
    atomic_write(path, &encode_state(state))
}

pub fn read_index(path: &Path, bytes: &[u8]) -> Result<(Index, usize)> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(CliError::format(path, "not a kpinr checkpoint archive"));
    }
    let len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let raw = bytes.get(12..12 + len).ok_or_else(|| CliError::format(path, "truncated index"))?;
    let index = serde_json::from_slice(raw).map_err(|e| CliError::format(path, format!("index: {e}")))?;
    Ok((index, 12 + len))
}

pub fn read_state(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let (index, start) = read_index(path, &bytes)?;
    let payload = &bytes[start..];
    let total: usize = index.entries.iter().map(|e| e.len).sum();
    if payload.len() != 4 * total {
        return Err(CliError::format(path, format!("payload is {} bytes, index needs {}", payload.len(), 4 * total)));
    }
    let mut state = TrainState {
        epoch: index.epoch,
        generation: index.generation,
        adam_step: index.adam_step,
        params: Vec::new(),
        adam_m: Vec::new(),
        adam_v: Vec::new(),
        ksp_in: Vec::new(),
    };
    for e in index.entries {
        if e.shape.iter().product::<usize>() != e.len || 4 * (e.offset + e.len) > payload.len() {
            return Err(CliError::format(path, format!("entry {} is inconsistent with its shape", e.name)));
        }
        let data: Vec<f32> = payload[4 * e.offset..4 * (e.offset + e.len)]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = NamedTensor { name: e.name, shape: e.shape, data };
        match e.group.as_str() {
            "param" => state.params.push(t),
            "adam_m" => state.adam_m.push(t),
            "adam_v" => state.adam_v.push(t),
            "ksp_in" => state.ksp_in = t.data,
            other => return Err(CliError::format(path, format!("unknown group {other:?}"))),
        }
    }
    Ok(state)
}
