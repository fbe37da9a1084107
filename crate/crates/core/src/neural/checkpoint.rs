//! Checkpoint file: magic, little-endian u64 manifest length, JSON manifest,
//! then every parameter block as little-endian f32.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{layout, Param, UnmixerConfig, UnmixerState};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HSUNMIX\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    /// u128 does not survive JSON numbers.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Block {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: UnmixerConfig,
    step: u64,
    epoch: usize,
    rng: RngState,
    blocks: Vec<Block>,
}

pub fn save_checkpoint(state: &UnmixerState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (seed, stream, word_pos) = state.rng_state();
    let mut blocks = Vec::with_capacity(state.params.len());
    let mut offset = 0;
    for p in &state.params {
        blocks.push(Block {
            name: p.name.clone(),
            shape: p.shape.clone(),
            offset,
        });
        offset += 4 * p.data.len();
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        config: state.config.clone(),
        step: state.step,
        epoch: state.epoch,
        rng: RngState {
            seed: seed.to_vec(),
            stream,
            word_pos: word_pos.to_string(),
        },
        blocks,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &state.params {
        for v in &p.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<UnmixerState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::UnsupportedFormat(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json)?;
    if manifest.version != FORMAT_VERSION {
        return Err(bad(&format!("checkpoint version {}", manifest.version)));
    }
    manifest.config.validate()?;
    let data = &bytes[16 + len..];
    let expected = layout(&manifest.config);
    if expected.len() != manifest.blocks.len() {
        return Err(bad("parameter blocks do not match the config"));
    }
    let mut params = Vec::with_capacity(expected.len());
    for ((name, shape), block) in expected.into_iter().zip(&manifest.blocks) {
        if name != block.name || shape != block.shape {
            return Err(bad(&format!("block {} {:?} where {name} {shape:?} expected", block.name, block.shape)));
        }
        let n: usize = shape.iter().product();
        let raw = data.get(block.offset..block.offset + 4 * n).ok_or_else(|| bad("truncated parameter data"))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        params.push(Param { name, shape, data: values });
    }
    let seed: [u8; 32] = manifest.rng.seed.as_slice().try_into().map_err(|_| bad("rng seed must be 32 bytes"))?;
    let word_pos: u128 = manifest.rng.word_pos.parse().map_err(|_| bad("bad rng word position"))?;
    Ok(UnmixerState::from_parts(
        manifest.config,
        params,
        manifest.step,
        manifest.epoch,
        (seed, manifest.rng.stream, word_pos),
    ))
}
