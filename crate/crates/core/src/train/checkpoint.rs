//! `BCKP` checkpoints: magic, version byte, a length-prefixed JSON header
//! and named little-endian `f32` tensor blocks.
//!
//! Blocks hold every model parameter in graph order, followed by the Adam
//! moments as `adam.m.<name>` and `adam.v.<name>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, TrainConfig, TrainState};
use crate::binio::{put_string, put_u32, ByteReader};
use crate::error::{FormatError, Result};
use crate::loss::BalancerState;
use crate::model::{Bcae, ModelSpec};

const MAGIC: [u8; 4] = *b"BCKP";
const VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    config: TrainConfig,
    balancer: BalancerState,
    epoch: usize,
    adam_step: u64,
    tensors: usize,
}

fn put_block(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_string(out, name);
    put_u32(out, shape.len());
    for &d in shape {
        put_u32(out, d);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let params: Vec<_> = state.model.graphs().into_iter().flat_map(|g| g.params.iter()).collect();
    let header = Header {
        spec: state.model.spec.clone(),
        config: state.config.clone(),
        balancer: state.balancer,
        epoch: state.epoch,
        adam_step: state.adam.step,
        tensors: params.len() * 3,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    put_u32(&mut out, json.len());
    out.extend_from_slice(&json);
    for p in &params {
        put_block(&mut out, &p.name, p.tensor.shape(), &p.tensor.values());
    }
    for (kind, moments) in [("m", &state.adam.m), ("v", &state.adam.v)] {
        for (p, data) in params.iter().zip(moments) {
            put_block(&mut out, &format!("adam.{kind}.{}", p.name), p.tensor.shape(), data);
        }
    }
    out
}

fn read_block(r: &mut ByteReader<'_>, name: &str, shape: &[usize]) -> Result<Vec<f32>, FormatError> {
    let found = r.string("tensor name")?;
    if found != name {
        return Err(FormatError::Header(format!("expected tensor {name:?}, found {found:?}")));
    }
    let rank = r.usize("tensor rank")?;
    let dims = (0..rank).map(|_| r.usize("tensor dims")).collect::<Result<Vec<_>, _>>()?;
    if dims != shape {
        return Err(FormatError::Extent(format!("tensor {name}: expected shape {shape:?}, found {dims:?}")));
    }
    r.f32s(shape.iter().product(), "tensor data")
}

/// Parse a checkpoint. Nothing outside the returned value is touched, so a
/// failed load leaves the caller's state intact.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let len = r.usize("header length")?;
    let header: Header = serde_json::from_slice(r.take(len, "header")?)
        .map_err(|e| FormatError::Header(e.to_string()))?;
    let mut model = Bcae::build(header.spec)?;
    let n_params: usize = model.graphs().iter().map(|g| g.params.len()).sum();
    if header.tensors != n_params * 3 {
        return Err(FormatError::Header(format!(
            "header lists {} tensors, the model needs {}",
            header.tensors,
            n_params * 3
        ))
        .into());
    }
    let mut names = Vec::with_capacity(n_params);
    for g in model.graphs_mut() {
        for p in &mut g.params {
            let data = read_block(&mut r, &p.name, p.tensor.shape())?;
            p.tensor.as_f32_mut().expect("built parameters are full precision").copy_from_slice(&data);
            names.push((p.name.clone(), p.tensor.shape().to_vec()));
        }
    }
    let mut adam = AdamState {
        step: header.adam_step,
        ..Default::default()
    };
    for kind in ["m", "v"] {
        let moments = names
            .iter()
            .map(|(name, shape)| read_block(&mut r, &format!("adam.{kind}.{name}"), shape))
            .collect::<Result<Vec<_>, _>>()?;
        match kind {
            "m" => adam.m = moments,
            _ => adam.v = moments,
        }
    }
    r.finish()?;
    header.config.validate()?;
    Ok(TrainState {
        model,
        config: header.config,
        adam,
        balancer: header.balancer,
        epoch: header.epoch,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, state: &TrainState) -> Result<()> {
    std::fs::write(path, encode_checkpoint(state))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    decode_checkpoint(&std::fs::read(path)?)
}
