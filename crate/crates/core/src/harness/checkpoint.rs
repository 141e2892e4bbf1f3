//! Checkpoint files: a magic line, a JSON header line, then every
//! parameter block as little-endian `f64` in header order.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::autodiff::ParamStore;
use crate::deformation::{AnchorMeta, DeformConfig, Model, Stage};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "HAIF-CKPT-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub iteration: usize,
    pub stage: Stage,
    pub train: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    model: DeformConfig,
    levels: Vec<Vec<AnchorMeta>>,
    /// Neighbour sets as used at save time; they are only refreshed once
    /// per epoch during training, so recomputing them could differ.
    neighbors: Vec<Vec<Vec<usize>>>,
    blocks: Vec<BlockHeader>,
}

pub fn encode_checkpoint(model: &Model, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = Header {
        meta: meta.clone(),
        model: model.config.clone(),
        levels: model.levels.iter().map(|l| l.anchors.clone()).collect(),
        neighbors: model.levels.iter().map(|l| l.neighbors.clone()).collect(),
        blocks: model
            .store
            .blocks()
            .map(|(_, b)| BlockHeader {
                name: b.name.clone(),
                rows: b.value.nrows(),
                cols: b.value.ncols(),
            })
            .collect(),
    };
    let json = serde_json::to_string(&header).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = format!("{CHECKPOINT_FORMAT}\n{json}\n").into_bytes();
    out.reserve(model.store.num_scalars() * 8);
    for (_, b) in model.store.blocks() {
        for v in b.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes through a temporary file so an interrupted save never leaves a
/// truncated checkpoint behind.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, meta)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, CheckpointMeta)> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(f);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    if line.trim_end() != CHECKPOINT_FORMAT {
        return Err(Error::Incompatible(format!(
            "{}: expected {CHECKPOINT_FORMAT}, found {:?}",
            path.display(),
            line.trim_end()
        )));
    }
    line.clear();
    reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&line).map_err(|e| Error::format(path, e.to_string()))?;
    let mut store = ParamStore::new();
    let mut buf = Vec::new();
    for b in &header.blocks {
        buf.resize(b.rows * b.cols * 8, 0);
        reader
            .read_exact(&mut buf)
            .map_err(|_| Error::format(path, format!("truncated block {}", b.name)))?;
        let values = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let value = Array2::from_shape_vec((b.rows, b.cols), values).expect("sized by header");
        store
            .add(b.name.clone(), value)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    let mut rest = [0u8; 1];
    if reader.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after the last block"));
    }
    let mut model = Model::rebind(header.model, store, header.levels)?;
    if header.neighbors.len() != model.levels.len() {
        return Err(Error::format(path, "neighbour sets do not match the levels"));
    }
    let n = model.num_gaussians();
    for (level, nbrs) in model.levels.iter_mut().zip(header.neighbors) {
        let k = level.neighbors.first().map_or(0, Vec::len);
        let valid = nbrs.len() == n && nbrs.iter().all(|s| s.len() == k && s.iter().all(|&a| a < level.len()));
        if !valid {
            return Err(Error::format(path, "invalid neighbour sets"));
        }
        level.neighbors = nbrs;
    }
    Ok((model, header.meta))
}
