//! Binary checkpoint format.
//!
//! ```text
//! "DFXT"  u32 version  u32 header_len  header (JSON, UTF-8)  payload (f32 LE)
//! ```
//!
//! The payload holds every parameter in declaration order, followed by the
//! optimizer moments when training state is present. Loading validates
//! everything before building the model, so a damaged file never yields a
//! partially loaded one.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::raster::write_atomic;
use crate::model::{Model, ModelSpec, Normalization};
use crate::train::{OptimizerKind, OptimizerState, TrainState};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DFXT";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub state: Option<TrainState>,
    pub tag: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelSpec,
    output_features: usize,
    normalization: Normalization,
    tag: Option<String>,
    parameters: Vec<ParamEntry>,
    param_count: usize,
    moment_count: usize,
    train: Option<TrainState>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

fn entries(model: &Model) -> Vec<ParamEntry> {
    model.params().iter().map(|p| ParamEntry { name: p.name.clone(), shape: p.value.shape().dims().to_vec() }).collect()
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let model = &ckpt.model;
    let moments = ckpt.state.as_ref().map(|s| &s.moments);
    let header = Header {
        model: model.spec().clone(),
        output_features: model.fext().output_channels(),
        normalization: model.normalization().clone(),
        tag: ckpt.tag.clone(),
        parameters: entries(model),
        param_count: model.params().scalar_count(),
        moment_count: moments.map_or(0, OptimizerState::len),
        train: ckpt.state.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::State(format!("checkpoint header: {e}")))?;
    let header_len = u32::try_from(json.len()).map_err(|_| Error::State("checkpoint header too large".into()))?;
    let floats = header.param_count + header.moment_count;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + 4 * floats);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params().iter() {
        out.extend(p.value.values().iter().flat_map(|v| v.to_le_bytes()));
    }
    if let Some(m) = moments {
        out.extend(m.first.iter().chain(&m.second).flat_map(|v| v.to_le_bytes()));
    }
    Ok(out)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(ckpt)?)
}

fn integrity(offset: usize, detail: impl Into<String>) -> Error {
    Error::Integrity { offset: offset as u64, detail: detail.into() }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| integrity(bytes.len(), format!("file ends before the 4-byte field at offset {offset}")))
}

/// Parses a checkpoint from bytes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(integrity(0, "missing DFXT magic; not a checkpoint"));
    }
    let version = read_u32(bytes, 4)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion { found: version, supported: CHECKPOINT_VERSION });
    }
    let header_len = read_u32(bytes, 8)? as usize;
    let payload_start = PREAMBLE.checked_add(header_len).filter(|&end| end <= bytes.len()).ok_or_else(|| {
        integrity(8, format!("header length {header_len} runs past the end of a {}-byte file", bytes.len()))
    })?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..payload_start])
        .map_err(|e| integrity(PREAMBLE + e.column().saturating_sub(1), format!("malformed header: {e}")))?;

    let floats = header
        .param_count
        .checked_add(header.moment_count)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| integrity(PREAMBLE, "declared payload size overflows"))?;
    let payload = &bytes[payload_start..];
    if payload.len() != floats {
        return Err(integrity(
            payload_start + payload.len().min(floats),
            format!(
                "payload holds {} bytes, header declares {floats} ({} parameters + {} moments)",
                payload.len(),
                header.param_count,
                header.moment_count
            ),
        ));
    }

    let mut model = Model::new(header.model, 0).map_err(|e| integrity(PREAMBLE, format!("header model spec: {e}")))?;
    if entries(&model) != header.parameters || model.params().scalar_count() != header.param_count {
        return Err(integrity(PREAMBLE, "parameter table does not match the model spec"));
    }
    if model.fext().output_channels() != header.output_features {
        return Err(integrity(PREAMBLE, "output feature count does not match the model spec"));
    }
    let values: Vec<f32> = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let (param_values, moment_values) = values.split_at(header.param_count);
    model.params_mut().load_flat(param_values)?;
    model.set_normalization(header.normalization).map_err(|e| integrity(PREAMBLE, e.to_string()))?;

    let state = match header.train {
        Some(mut state) => {
            let n = header.param_count;
            let expected = match state.optimizer {
                OptimizerKind::SgdMomentum => n,
                OptimizerKind::Adam => 2 * n,
            };
            if moment_values.len() != expected {
                return Err(integrity(
                    payload_start + 4 * n,
                    format!("{} optimizer moments stored, {expected} expected", moment_values.len()),
                ));
            }
            let (first, second) = moment_values.split_at(n);
            state.moments = OptimizerState { first: first.to_vec(), second: second.to_vec() };
            Some(state)
        }
        None if header.moment_count != 0 => {
            return Err(integrity(payload_start + 4 * header.param_count, "moments stored without training state"))
        }
        None => None,
    };
    Ok(Checkpoint { model, state, tag: header.tag })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fext::{FextLayerSpec, FextNetworkSpec, ScaleSpec};
    use crate::model::Task;
    use crate::train::TrainConfig;

    fn tiny() -> Model {
        let fext = FextNetworkSpec {
            layers: vec![FextLayerSpec { in_channels: 3, branches: vec![ScaleSpec::new(3, 97)] }],
            ..FextNetworkSpec::fext5_100()
        };
        Model::new(ModelSpec::new(fext, Task::Vessel), 4).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let model = tiny();
        let mut state = TrainState::new(&TrainConfig::default(), model.params().scalar_count());
        state.moments.first[3] = 0.25;
        state.running_loss = 0.1 + 0.2;
        let ckpt = Checkpoint { model, state: Some(state), tag: Some("final".into()) };
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn damage_is_reported_with_offsets() {
        let ckpt = Checkpoint { model: tiny(), state: None, tag: None };
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let truncated = &bytes[..bytes.len() - 6];
        assert!(matches!(decode_checkpoint(truncated), Err(Error::Integrity { .. })));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad_magic), Err(Error::Integrity { offset: 0, .. })));
        let mut future = bytes.clone();
        future[4] = 9;
        assert!(matches!(decode_checkpoint(&future), Err(Error::UnsupportedVersion { found: 9, .. })));
    }
}
