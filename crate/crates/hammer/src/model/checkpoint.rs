//! Versioned single-file checkpoint: JSON header (config echo, world hash,
//! parameter names/shapes, queue metadata) followed by raw little-endian
//! f64 blocks for every parameter store, optimizer moment, and queue.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{GradStore, Mat, ParamStore};

use super::contrastive::FeatureQueue;
use super::{Model, ModelConfig, ModelState};

const MAGIC: &[u8; 4] = b"HMCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Serialize, Deserialize)]
struct QueueMeta {
    capacity: usize,
    dim: usize,
    len: usize,
    cursor: usize,
    source_ids: Vec<u64>,
    manipulated: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    cfg: ModelConfig,
    worldspec_hash: String,
    step: usize,
    mac_warnings: u64,
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    img_queue: QueueMeta,
    txt_queue: QueueMeta,
    /// Free-form echo of the training configuration.
    train_config: serde_json::Value,
}

fn write_mat(w: &mut impl Write, m: &Mat) -> std::io::Result<()> {
    for v in m.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_mat(r: &mut impl Read, rows: usize, cols: usize) -> std::io::Result<Mat> {
    let mut buf = [0u8; 8];
    let mut m = Mat::zeros((rows, cols));
    for v in m.iter_mut() {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(m)
}

fn write_store(w: &mut impl Write, store: &ParamStore) -> std::io::Result<()> {
    for (_, _, m) in store.iter() {
        write_mat(w, m)?;
    }
    Ok(())
}

fn write_grads(w: &mut impl Write, grads: &GradStore) -> std::io::Result<()> {
    for (_, m) in grads.iter() {
        write_mat(w, m)?;
    }
    Ok(())
}

fn queue_meta(q: &FeatureQueue) -> QueueMeta {
    let (entries, ids, manip, cursor) = q.raw_parts();
    QueueMeta {
        capacity: q.capacity(),
        dim: q.dim(),
        len: entries.len(),
        cursor,
        source_ids: ids.to_vec(),
        manipulated: manip.to_vec(),
    }
}

fn write_queue(w: &mut impl Write, q: &FeatureQueue) -> std::io::Result<()> {
    let (entries, _, _, _) = q.raw_parts();
    for e in entries {
        for v in e {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_queue(r: &mut impl Read, meta: &QueueMeta) -> std::io::Result<FeatureQueue> {
    let mut entries = Vec::with_capacity(meta.len);
    let mut buf = [0u8; 8];
    for _ in 0..meta.len {
        let mut e = vec![0.0f64; meta.dim];
        for v in e.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        entries.push(e);
    }
    Ok(FeatureQueue::from_raw_parts(
        meta.capacity,
        meta.dim,
        entries,
        meta.source_ids.clone(),
        meta.manipulated.clone(),
        meta.cursor,
    ))
}

pub fn save_checkpoint(
    state: &ModelState,
    worldspec_hash: &str,
    train_config: serde_json::Value,
    path: &Path,
) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);

    let header = Header {
        cfg: state.cfg.clone(),
        worldspec_hash: worldspec_hash.to_string(),
        step: state.step,
        mac_warnings: state.mac_warnings,
        names: state.online.iter().map(|(_, n, _)| n.to_string()).collect(),
        shapes: state.online.iter().map(|(_, _, m)| (m.nrows(), m.ncols())).collect(),
        img_queue: queue_meta(&state.img_queue),
        txt_queue: queue_meta(&state.txt_queue),
        train_config,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    w.write_all(MAGIC).map_err(io)?;
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    w.write_all(&(header_bytes.len() as u64).to_le_bytes()).map_err(io)?;
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    w.write_all(&header_bytes).map_err(io)?;

    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    (|| -> std::io::Result<()> {
        write_store(&mut w, &state.online)?;
        write_store(&mut w, &state.momentum)?;
        write_grads(&mut w, &state.opt_m)?;
        write_grads(&mut w, &state.opt_v)?;
        write_queue(&mut w, &state.img_queue)?;
        write_queue(&mut w, &state.txt_queue)?;
        w.flush()
    })()
    .map_err(io)?;
    Ok(())
}

/// Rebuilds the model layout from the stored config and loads every block.
/// Returns the state and the stored worldspec hash.
pub fn load_checkpoint(path: &Path) -> Result<(ModelState, String, serde_json::Value), CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let file = File::open(path).map_err(io)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut u32buf = [0u8; 4];
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    r.read_exact(&mut u32buf).map_err(io)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let mut u64buf = [0u8; 8];
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    r.read_exact(&mut u64buf).map_err(io)?;
    let header_len = u64::from_le_bytes(u64buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    r.read_exact(&mut header_bytes).map_err(io)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    // rebuild the layout, then overwrite the values
    let mut online = ParamStore::new();
    let model = Model::build(&header.cfg, &mut online);
    let names: Vec<String> = online.iter().map(|(_, n, _)| n.to_string()).collect();
    if names != header.names {
        return Err(CheckpointError::LayoutMismatch(
            "parameter names differ from the stored layout".to_string(),
        ));
    }
    for ((id, _, m), shape) in online.clone().iter().zip(&header.shapes) {
        if (m.nrows(), m.ncols()) != *shape {
            return Err(CheckpointError::LayoutMismatch(format!(
                "shape mismatch for {}",
                online.name(id)
            )));
        }
    }

    let read_all = |r: &mut BufReader<File>, store: &mut ParamStore| -> std::io::Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, _, m)| (id, m.nrows(), m.ncols())).collect();
        for (id, rows, cols) in ids {
            *store.get_mut(id) = read_mat(r, rows, cols)?;
        }
        Ok(())
    };

    let mut momentum = online.clone();
    let mut opt_m = GradStore::zeros_like(&online);
    let mut opt_v = GradStore::zeros_like(&online);

    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    (|| -> std::io::Result<(FeatureQueue, FeatureQueue)> {
        read_all(&mut r, &mut online)?;
        read_all(&mut r, &mut momentum)?;
        let ids: Vec<_> = opt_m.iter().map(|(id, m)| (id, m.nrows(), m.ncols())).collect();
        for (id, rows, cols) in ids {
            *opt_m.get_mut(id) = read_mat(&mut r, rows, cols)?;
        }
        let ids: Vec<_> = opt_v.iter().map(|(id, m)| (id, m.nrows(), m.ncols())).collect();
        for (id, rows, cols) in ids {
            *opt_v.get_mut(id) = read_mat(&mut r, rows, cols)?;
        }
        let img_queue = read_queue(&mut r, &header.img_queue)?;
        let txt_queue = read_queue(&mut r, &header.txt_queue)?;
        Ok((img_queue, txt_queue))
    })()
    .map_err(io)
    .map(|(img_queue, txt_queue)| {
        let state = ModelState {
            cfg: header.cfg,
            model,
            online,
            momentum,
            img_queue,
            txt_queue,
            opt_m,
            opt_v,
            step: header.step,
            mac_warnings: header.mac_warnings,
        };
        (state, header.worldspec_hash, header.train_config)
    })
}
