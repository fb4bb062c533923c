//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"BPLCKPT\0"
//! u32      format version
//! u64      header length, then that many bytes of JSON (CheckpointHeader)
//! u32      block count
//! per block: u32 name length, UTF-8 name, u64 value count
//! then every block's values as f64, in table order
//! ```
//!
//! Parameters are stored under their model names, optimizer moments under
//! `adam.m.<name>` / `adam.v.<name>`, the per-step loss under `history.loss`
//! and, for basis-projected fronts, the starting bases under
//! `front.initial_bases`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use bpl_core::linalg::Matrix;
use bpl_core::nn::ClassifierModel;
use bpl_core::optim::AdamState;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{io_error, CliError};
use crate::train::{skeleton_front, LogEntry, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BPLCKPT\0";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const LOSS_BLOCK: &str = "history.loss";
const INITIAL_BASES_BLOCK: &str = "front.initial_bases";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ExperimentConfig,
    pub input_dim: usize,
    pub step: u64,
    pub log: Vec<LogEntry>,
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: state.config.clone(),
        input_dim: state.model.input_dim,
        step: state.step,
        log: state.log.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");

    let mut blocks: Vec<(String, &[f64])> = state.model.parameters();
    for (i, name) in state.adam.names.iter().enumerate() {
        blocks.push((format!("adam.m.{name}"), &state.adam.m[i]));
        blocks.push((format!("adam.v.{name}"), &state.adam.v[i]));
    }
    blocks.push((LOSS_BLOCK.to_string(), &state.loss_history));
    if let Some(b) = &state.initial_bases {
        blocks.push((INITIAL_BASES_BLOCK.to_string(), b.as_slice()));
    }

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, values) in &blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    }
    for (_, values) in &blocks {
        for v in values.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes through a temporary file so an interrupted save never leaves a
/// truncated checkpoint behind.
pub fn save(state: &TrainState, path: &Path) -> Result<(), CliError> {
    let tmp = path.with_extension("bin.tmp");
    fs::write(&tmp, encode(state)).map_err(|e| io_error(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        if self.bytes.len() - self.pos < n {
            return Err(corrupt(self.path, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, CliError> {
        usize::try_from(self.u64()?).map_err(|_| corrupt(self.path, "length overflows"))
    }
}

fn corrupt(path: &Path, message: impl Into<String>) -> CliError {
    CliError::Core(bpl_core::Error::Schema {
        path: path.to_path_buf(),
        message: message.into(),
    })
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<TrainState, CliError> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(corrupt(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(corrupt(
            path,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let header_len = r.len()?;
    let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| corrupt(path, format!("header: {e}")))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(corrupt(path, "header version does not match"));
    }

    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| corrupt(path, "block name is not UTF-8"))?
            .to_string();
        table.push((name, r.len()?));
    }
    let mut blocks: HashMap<String, Vec<f64>> = HashMap::with_capacity(count);
    for (name, n) in table {
        let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt(path, "block too large"))?)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if blocks.insert(name.clone(), values).is_some() {
            return Err(corrupt(path, format!("duplicate block {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(corrupt(path, "trailing bytes"));
    }

    let config = header.config;
    let mut take_block = |name: &str, len: usize| -> Result<Vec<f64>, CliError> {
        let v = blocks
            .remove(name)
            .ok_or_else(|| corrupt(path, format!("missing block {name}")))?;
        if v.len() != len {
            return Err(corrupt(
                path,
                format!("block {name} has {} values, expected {len}", v.len()),
            ));
        }
        Ok(v)
    };

    let front = skeleton_front(&config, header.input_dim)?;
    let mut model = ClassifierModel::new(config.model, header.input_dim, front, 0)?;
    let mut adam = AdamState::new(&config.optim.adam, &[]);
    for (name, slot) in model.parameters_mut() {
        let v = take_block(&name, slot.len())?;
        slot.copy_from_slice(&v);
        adam.m.push(take_block(&format!("adam.m.{name}"), v.len())?);
        adam.v.push(take_block(&format!("adam.v.{name}"), v.len())?);
        adam.names.push(name);
    }
    adam.step = header.step;
    let loss_history = take_block(LOSS_BLOCK, header.step as usize)?;
    let initial_bases = match &model.front {
        bpl_core::nn::FrontLayer::Bpl(b) => {
            let (n, f) = (b.n_bases(), b.element_dim());
            Some(Matrix::from_vec(n, f, take_block(INITIAL_BASES_BLOCK, n * f)?)?)
        }
        _ => None,
    };
    if let Some(extra) = blocks.keys().next() {
        return Err(corrupt(path, format!("unexpected block {extra}")));
    }

    Ok(TrainState {
        config,
        model,
        adam,
        step: header.step,
        loss_history,
        log: header.log,
        initial_bases,
    })
}

pub fn load(path: &Path) -> Result<TrainState, CliError> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    decode(&bytes, path)
}
