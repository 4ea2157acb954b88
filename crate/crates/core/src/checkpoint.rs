//! Binary model checkpoints.
//!
//! Layout: magic `CDTMCK1`, a length-prefixed (u32 LE) JSON header naming the
//! schema fingerprint, model configuration, domain ids and every tensor block
//! with its shape, then the blocks as raw f64 LE in declared order: the
//! shared table first, then each domain's parameters sorted by domain id.
//! An optional trailing section carries optimizer state for exact resume.

use crate::model::{CdtmParams, DomainParams, ModelConfig, SharedEmbedding, DOMAIN_PARAM_NAMES};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"CDTMCK1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file: magic bytes missing")]
    BadMagic,
    #[error("malformed checkpoint header: {0}")]
    MalformedHeader(String),
    #[error("file truncated while reading {what}")]
    Truncated { what: String },
    #[error("checkpoint was trained against schema {found}, expected {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("block {name} declares shape {shape:?} but {problem}")]
    BadBlock {
        name: String,
        shape: Vec<usize>,
        problem: String,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockDecl {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    schema_fingerprint: String,
    model: ModelConfig,
    domain_ids: Vec<usize>,
    blocks: Vec<BlockDecl>,
    has_train_state: bool,
}

/// Per-domain position in its epoch permutation, for exact resume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainCursor {
    pub domain_id: usize,
    pub epoch: u64,
    pub cursor: usize,
}

/// Optimizer and data-order state; moments are stored in block order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub adam_t: u64,
    /// Scheduler stream position (ChaCha word position).
    pub scheduler_word_pos: u128,
    pub domain_cursors: Vec<DomainCursor>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainStateHeader {
    step: u64,
    adam_t: u64,
    scheduler_word_pos: String,
    domain_cursors: Vec<DomainCursor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub schema_fingerprint: String,
    pub model: ModelConfig,
    pub params: CdtmParams,
    pub train_state: Option<TrainState>,
}

/// Canonical flat ordering of all parameter tensors: shared table, then the
/// declared per-domain parameter list for each domain in id order. Optimizer
/// moments use the same ordering.
pub fn block_names(params: &CdtmParams) -> Vec<String> {
    let mut names = vec!["shared".to_string()];
    for d in &params.domains {
        for n in DOMAIN_PARAM_NAMES {
            names.push(format!("d{}.{}", d.domain_id, n));
        }
    }
    names
}

pub fn block_tensors(params: &CdtmParams) -> Vec<&Tensor> {
    let mut out = vec![&params.shared.table];
    for d in &params.domains {
        out.extend(d.tensors().into_iter().map(|(_, _, t)| t));
    }
    out
}

pub fn block_tensors_mut(params: &mut CdtmParams) -> Vec<&mut Tensor> {
    let mut out = vec![&mut params.shared.table];
    for d in &mut params.domains {
        out.extend(d.tensors_mut().into_iter().map(|(_, _, t)| t));
    }
    out
}

fn write_block<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    for &x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_block<R: Read>(
    r: &mut R,
    decl: &BlockDecl,
) -> Result<Tensor, CheckpointError> {
    let n: usize = decl.shape.iter().product();
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(|_| CheckpointError::Truncated {
        what: format!("block {}", decl.name),
    })?;
    let data: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect();
    Tensor::new(decl.shape.clone(), data).map_err(|e| CheckpointError::BadBlock {
        name: decl.name.clone(),
        shape: decl.shape.clone(),
        problem: e.to_string(),
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let names = block_names(&ckpt.params);
    let tensors = block_tensors(&ckpt.params);
    let blocks: Vec<BlockDecl> = names
        .iter()
        .zip(&tensors)
        .map(|(name, t)| BlockDecl {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let header = Header {
        version: 1,
        schema_fingerprint: ckpt.schema_fingerprint.clone(),
        model: ckpt.model.clone(),
        domain_ids: ckpt.params.domains.iter().map(|d| d.domain_id).collect(),
        blocks,
        has_train_state: ckpt.train_state.is_some(),
    };

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for t in &tensors {
        write_block(&mut w, t)?;
    }

    if let Some(ts) = &ckpt.train_state {
        let ts_header = TrainStateHeader {
            step: ts.step,
            adam_t: ts.adam_t,
            scheduler_word_pos: ts.scheduler_word_pos.to_string(),
            domain_cursors: ts.domain_cursors.clone(),
        };
        let ts_bytes = serde_json::to_vec(&ts_header).expect("state serializes");
        w.write_all(&(ts_bytes.len() as u32).to_le_bytes())?;
        w.write_all(&ts_bytes)?;
        for t in ts.m.iter().chain(&ts.v) {
            write_block(&mut w, t)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint, refusing it when `expected_fingerprint` is given and
/// does not match the one stored in the header.
pub fn load_checkpoint(
    path: &Path,
    expected_fingerprint: Option<&str>,
) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 7];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::Truncated {
        what: "magic".into(),
    })?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }

    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes).map_err(|_| CheckpointError::Truncated {
        what: "header length".into(),
    })?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
    r.read_exact(&mut header_bytes).map_err(|_| CheckpointError::Truncated {
        what: "header".into(),
    })?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;

    if let Some(expected) = expected_fingerprint {
        if expected != header.schema_fingerprint {
            return Err(CheckpointError::FingerprintMismatch {
                expected: expected.to_string(),
                found: header.schema_fingerprint,
            });
        }
    }

    let expected_names: Vec<String> = {
        let mut names = vec!["shared".to_string()];
        for &id in &header.domain_ids {
            for n in DOMAIN_PARAM_NAMES {
                names.push(format!("d{id}.{n}"));
            }
        }
        names
    };
    let declared: Vec<&str> = header.blocks.iter().map(|b| b.name.as_str()).collect();
    if declared != expected_names.iter().map(|s| s.as_str()).collect::<Vec<_>>() {
        return Err(CheckpointError::MalformedHeader(format!(
            "block list {declared:?} does not match domain ids {:?}",
            header.domain_ids
        )));
    }

    let mut tensors = Vec::with_capacity(header.blocks.len());
    for decl in &header.blocks {
        tensors.push(read_block(&mut r, decl)?);
    }

    let mut it = tensors.into_iter();
    let shared = SharedEmbedding {
        table: it.next().expect("shared block present"),
    };
    let mut domains = Vec::with_capacity(header.domain_ids.len());
    for &id in &header.domain_ids {
        let mut take = || it.next().expect("declared block present");
        domains.push(DomainParams {
            domain_id: id,
            dse: take(),
            transfer: take(),
            attn_w0: take(),
            attn_b0: take(),
            attn_w1: take(),
            attn_b1: take(),
            deep_w1: take(),
            deep_b1: take(),
            deep_w2: take(),
            deep_b2: take(),
            out_w: take(),
            out_b: take(),
        });
    }
    let params = CdtmParams { shared, domains };

    let train_state = if header.has_train_state {
        let mut len_bytes = [0u8; 4];
        r.read_exact(&mut len_bytes).map_err(|_| CheckpointError::Truncated {
            what: "train state length".into(),
        })?;
        let mut ts_bytes = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
        r.read_exact(&mut ts_bytes).map_err(|_| CheckpointError::Truncated {
            what: "train state header".into(),
        })?;
        let ts_header: TrainStateHeader = serde_json::from_slice(&ts_bytes)
            .map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
        let word_pos: u128 = ts_header.scheduler_word_pos.parse().map_err(|_| {
            CheckpointError::MalformedHeader("scheduler_word_pos not an integer".into())
        })?;
        let mut m = Vec::with_capacity(header.blocks.len());
        for decl in &header.blocks {
            m.push(read_block(&mut r, decl)?);
        }
        let mut v = Vec::with_capacity(header.blocks.len());
        for decl in &header.blocks {
            v.push(read_block(&mut r, decl)?);
        }
        Some(TrainState {
            step: ts_header.step,
            adam_t: ts_header.adam_t,
            scheduler_word_pos: word_pos,
            domain_cursors: ts_header.domain_cursors,
            m,
            v,
        })
    } else {
        None
    };

    Ok(Checkpoint {
        schema_fingerprint: header.schema_fingerprint,
        model: header.model,
        params,
        train_state,
    })
}
