//! Container file for trained models.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `EIVMODEL` |
//! | 4 | format version (`u32`) |
//! | 8 | header length in bytes (`u64`) |
//! | n | JSON header: model kind, network, noise, priors, normalization, training configuration and record, column names and log-transformed inputs, parameter block list |
//! | .. | parameter blocks as `f64` little-endian, in the order of the block list |
//!
//! Each layer contributes a `layer{i}.weight` block (`fan_in x fan_out`, row-major)
//! followed by a `layer{i}.bias` block.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::NormalizationStats;
use crate::error::{EivError, Result};
use crate::loss::{NoiseState, PriorConfig};
use crate::nn::{MlpConfig, NetworkParams};
use crate::trainer::{ModelKind, TrainConfig, TrainRecord, TrainedModel};

pub const MAGIC: &[u8; 8] = b"EIVMODEL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: ModelKind,
    net: MlpConfig,
    noise: NoiseState,
    prior: PriorConfig,
    normalization: Option<NormalizationStats>,
    train_config: TrainConfig,
    record: TrainRecord,
    input_names: Vec<String>,
    label_name: String,
    log_inputs: Vec<String>,
    blocks: Vec<BlockInfo>,
}

fn blocks_for(net: &MlpConfig) -> Vec<BlockInfo> {
    net.layer_widths
        .windows(2)
        .enumerate()
        .flat_map(|(i, w)| {
            [
                BlockInfo {
                    name: format!("layer{i}.weight"),
                    shape: vec![w[0], w[1]],
                },
                BlockInfo {
                    name: format!("layer{i}.bias"),
                    shape: vec![w[1]],
                },
            ]
        })
        .collect()
}

pub fn encode_model(model: &TrainedModel) -> Result<Vec<u8>> {
    let header = Header {
        kind: model.kind,
        net: model.net.clone(),
        noise: model.noise,
        prior: model.prior,
        normalization: model.normalization.clone(),
        train_config: model.train_config.clone(),
        record: model.record.clone(),
        input_names: model.input_names.clone(),
        label_name: model.label_name.clone(),
        log_inputs: model.log_inputs.clone(),
        blocks: blocks_for(&model.net),
    };
    let json = serde_json::to_vec(&header).map_err(|e| EivError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * model.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in model.params.flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(EivError::Format(format!("model file truncated in {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn decode_model(mut bytes: &[u8]) -> Result<TrainedModel> {
    let magic = take(&mut bytes, 8, "magic")?;
    if magic != MAGIC {
        return Err(EivError::Format("not a model file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(EivError::Format(format!(
            "model file has format version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8, "header length")?.try_into().expect("8 bytes"));
    let json = take(&mut bytes, len as usize, "header")?;
    let header: Header = serde_json::from_slice(json).map_err(|e| EivError::Format(format!("header: {e}")))?;
    header.net.validate()?;
    if header.blocks != blocks_for(&header.net) {
        return Err(EivError::Format("parameter blocks do not match the network".into()));
    }
    let n: usize = header.blocks.iter().map(|b| b.shape.iter().product::<usize>()).sum();
    let raw = take(&mut bytes, 8 * n, "parameters")?;
    if !bytes.is_empty() {
        return Err(EivError::Format(format!("{} trailing bytes after parameters", bytes.len())));
    }
    let mut params = NetworkParams::zeros(&header.net);
    for (dst, chunk) in params.flat_mut().iter_mut().zip(raw.chunks_exact(8)) {
        *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
    }
    Ok(TrainedModel {
        kind: header.kind,
        net: header.net,
        params,
        noise: header.noise,
        prior: header.prior,
        normalization: header.normalization,
        record: header.record,
        train_config: header.train_config,
        input_names: header.input_names,
        label_name: header.label_name,
        log_inputs: header.log_inputs,
    })
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    decode_model(&std::fs::read(path)?)
}
