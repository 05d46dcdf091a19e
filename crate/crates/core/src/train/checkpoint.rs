//! `crnet.ckpt`: `"CRCK"`, u32 version, u64 length and JSON model config, the
//! parameters as CRMX matrices in canonical order (each beta as a 1×1
//! matrix), the Adam first and second moments in the same order, then the u64
//! step.

use super::adam::AdamState;
use crate::error::{Error, Result};
use crate::model::{Layer, ModelConfig, Params, Tensors};
use crate::tensor::{read_exact_at, read_matrix, write_matrix, Matrix};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const CHECKPOINT_FILE: &str = "crnet.ckpt";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Params,
    pub adam: AdamState,
    pub step: u64,
}

fn shapes(t: &Tensors) -> Vec<(usize, usize)> {
    let mut out = vec![t.embed.shape()];
    for layer in &t.layers {
        match layer {
            Layer::Dense(d) => out.extend(d.w.iter().map(Matrix::shape)),
            Layer::Cross(c) => {
                for p in 0..7 {
                    out.extend([c.a[p].shape(), c.b[p].shape(), (1, 1)]);
                }
            }
        }
    }
    out.push(t.lm_head.shape());
    out
}

fn write_tensors<W: Write>(w: &mut W, t: &Tensors) -> Result<()> {
    for ((_, data), (rows, cols)) in t.slices().into_iter().zip(shapes(t)) {
        write_matrix(w, &Matrix::from_vec(rows, cols, data.to_vec())?)?;
    }
    Ok(())
}

fn read_tensors<R: Read>(r: &mut R, offset: &mut usize, into: &mut Tensors) -> Result<()> {
    let expected = shapes(into);
    for ((_, dst), shape) in into.slices_mut().into_iter().zip(expected) {
        let start = *offset;
        let m = read_matrix(r, offset)?;
        if m.shape() != shape {
            return Err(Error::Format {
                what: "checkpoint tensor",
                offset: start,
                reason: format!("shape {:?} does not match config shape {shape:?}", m.shape()),
            });
        }
        dst.copy_from_slice(m.data());
    }
    Ok(())
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_FILE)
}

pub fn write_checkpoint<W: Write>(w: &mut W, params: &Params, adam: &AdamState, step: u64) -> Result<()> {
    let json = serde_json::to_vec(&params.config)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    write_tensors(w, &params.tensors)?;
    write_tensors(w, &adam.m)?;
    write_tensors(w, &adam.v)?;
    w.write_all(&step.to_le_bytes())?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut offset = 0usize;
    let mut head = [0u8; 16];
    read_exact_at(r, &mut head, &mut offset, "checkpoint header")?;
    if &head[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            what: "checkpoint",
            offset: 0,
            reason: format!("bad magic {:?}", &head[0..4]),
        });
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            what: "checkpoint",
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let len = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
    let json_at = offset;
    let mut json = vec![0u8; len];
    read_exact_at(r, &mut json, &mut offset, "checkpoint config")?;
    let config: ModelConfig = serde_json::from_slice(&json).map_err(|e| Error::Format {
        what: "checkpoint config",
        offset: json_at,
        reason: e.to_string(),
    })?;
    let mut params = Params::init(&config, 0)?;
    read_tensors(r, &mut offset, &mut params.tensors)?;
    let mut adam = AdamState::new(&params.tensors);
    read_tensors(r, &mut offset, &mut adam.m)?;
    read_tensors(r, &mut offset, &mut adam.v)?;
    let mut step = [0u8; 8];
    read_exact_at(r, &mut step, &mut offset, "checkpoint step")?;
    let step = u64::from_le_bytes(step);
    adam.t = step;
    Ok(Checkpoint { params, adam, step })
}

/// Writes `dir/crnet.ckpt` through a temporary file so an interrupted save
/// never replaces the previous checkpoint.
pub fn save_checkpoint(dir: &Path, params: &Params, adam: &AdamState, step: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = checkpoint_path(dir);
    let tmp = dir.join(format!("{CHECKPOINT_FILE}.tmp"));
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_checkpoint(&mut w, params, adam, step)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, &path)?;
    Ok(path)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(checkpoint_path(dir))?);
    read_checkpoint(&mut r)
}
