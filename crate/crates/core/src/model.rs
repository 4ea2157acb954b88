//! The CDTM network: dual embedding lookup, transfer-matrix mapping,
//! combination attention, deep layers, output head and losses.
//!
//! One [`DomainParams`] per domain plus one [`SharedEmbedding`] referenced by
//! all of them. Vectors are rows throughout; the transfer matrix acts on a
//! row `g` as `g . T`, and weight matrices are stored `(fan_in x fan_out)`.

use crate::data::Dataset;
use crate::rng::{derive_rng, Purpose};
use crate::schema::{DomainSpec, FieldKind, GlobalSchema, SchemaError};
use crate::tape::{ActKind, EwKind, NodeId, Tape};
use crate::tensor::{Tensor, TensorError};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Deep-layer widths, fixed for all experiments.
pub const HIDDEN_SIZES: [usize; 2] = [200, 128];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("domain {domain} transferable field {field_id} has no mapping into the shared table")]
    MissingGlobalMapping { domain: usize, field_id: usize },
    #[error("batch built for domain {batch_domain} fed to domain {model_domain}")]
    DomainMismatch {
        batch_domain: usize,
        model_domain: usize,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("dataset does not conform to domain schema: {0}")]
    BadDataset(#[from] crate::data::DataError),
}

/// Which variant of the network a domain model runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    /// Dual embedding, transfer matrix and combination attention.
    Full,
    /// Dual embedding and transfer matrix, gate fixed at 0.5 (CDTM-DA).
    NoAttention,
    /// Domain-specific embedding only; never reads the shared table.
    Base,
}

/// Structural and loss configuration shared by a training unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding dimension k.
    pub embedding_dim: usize,
    /// Attention hidden width d_h.
    pub attention_hidden: usize,
    pub mode: ModelMode,
    /// Auxiliary alignment loss weight (the only regularizer the model has).
    pub lambda: f64,
    /// Let the alignment loss pull embeddings too, not just the transfer
    /// matrix. Off by default: DSE and GSE are meant to stay different.
    pub aux_full_gradient: bool,
    /// Feed the mapped embedding to the gate instead of the raw shared one.
    pub gate_uses_mapped: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 16,
            attention_hidden: 16,
            mode: ModelMode::Full,
            lambda: 1e-4,
            aux_full_gradient: false,
            gate_uses_mapped: false,
        }
    }
}

/// The global shared embedding table, trained jointly by all domains.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedEmbedding {
    /// p x k.
    pub table: Tensor,
}

/// All trainable tensors of one domain model.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainParams {
    pub domain_id: usize,
    /// Domain-specific embedding table, n_i x k.
    pub dse: Tensor,
    /// Transfer matrix, k x k, applied row-wise.
    pub transfer: Tensor,
    /// Attention first layer, 4k x d_h.
    pub attn_w0: Tensor,
    pub attn_b0: Tensor,
    /// Attention output layer, d_h x k.
    pub attn_w1: Tensor,
    pub attn_b1: Tensor,
    pub deep_w1: Tensor,
    pub deep_b1: Tensor,
    pub deep_w2: Tensor,
    pub deep_b2: Tensor,
    /// Output head weights (128 x 1) and bias (1 x 1).
    pub out_w: Tensor,
    pub out_b: Tensor,
}

/// Whether a parameter is an embedding table (sparse-row update semantics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Dense,
}

/// Declared parameter order inside a domain block; checkpoints and optimizer
/// state follow this order exactly.
pub const DOMAIN_PARAM_NAMES: [&str; 12] = [
    "dse", "transfer", "attn_w0", "attn_b0", "attn_w1", "attn_b1", "deep_w1", "deep_b1",
    "deep_w2", "deep_b2", "out_w", "out_b",
];

impl DomainParams {
    pub fn tensors(&self) -> Vec<(&'static str, ParamKind, &Tensor)> {
        vec![
            ("dse", ParamKind::Embedding, &self.dse),
            ("transfer", ParamKind::Dense, &self.transfer),
            ("attn_w0", ParamKind::Dense, &self.attn_w0),
            ("attn_b0", ParamKind::Dense, &self.attn_b0),
            ("attn_w1", ParamKind::Dense, &self.attn_w1),
            ("attn_b1", ParamKind::Dense, &self.attn_b1),
            ("deep_w1", ParamKind::Dense, &self.deep_w1),
            ("deep_b1", ParamKind::Dense, &self.deep_b1),
            ("deep_w2", ParamKind::Dense, &self.deep_w2),
            ("deep_b2", ParamKind::Dense, &self.deep_b2),
            ("out_w", ParamKind::Dense, &self.out_w),
            ("out_b", ParamKind::Dense, &self.out_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, ParamKind, &mut Tensor)> {
        vec![
            ("dse", ParamKind::Embedding, &mut self.dse),
            ("transfer", ParamKind::Dense, &mut self.transfer),
            ("attn_w0", ParamKind::Dense, &mut self.attn_w0),
            ("attn_b0", ParamKind::Dense, &mut self.attn_b0),
            ("attn_w1", ParamKind::Dense, &mut self.attn_w1),
            ("attn_b1", ParamKind::Dense, &mut self.attn_b1),
            ("deep_w1", ParamKind::Dense, &mut self.deep_w1),
            ("deep_b1", ParamKind::Dense, &mut self.deep_b1),
            ("deep_w2", ParamKind::Dense, &mut self.deep_w2),
            ("deep_b2", ParamKind::Dense, &mut self.deep_b2),
            ("out_w", ParamKind::Dense, &mut self.out_w),
            ("out_b", ParamKind::Dense, &mut self.out_b),
        ]
    }
}

/// One training unit: the shared table plus the participating domain models,
/// kept sorted by domain id.
#[derive(Debug, Clone, PartialEq)]
pub struct CdtmParams {
    pub shared: SharedEmbedding,
    pub domains: Vec<DomainParams>,
}

impl CdtmParams {
    pub fn domain(&self, domain_id: usize) -> Option<&DomainParams> {
        self.domains.iter().find(|d| d.domain_id == domain_id)
    }

    pub fn domain_mut(&mut self, domain_id: usize) -> Option<&mut DomainParams> {
        self.domains.iter_mut().find(|d| d.domain_id == domain_id)
    }
}

fn uniform_tensor(rng: &mut ChaCha20Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

fn init_domain(domain: &DomainSpec, config: &ModelConfig, seed: u64) -> DomainParams {
    let k = config.embedding_dim;
    let dh = config.attention_hidden;
    let n_i = domain.table_rows();
    let input_dim = domain.field_count() * k;
    let emb_bound = 1.0 / (k as f64).sqrt();
    let mut rng = derive_rng(seed, Purpose::ParamInit, domain.domain_id as u64);

    let dse = uniform_tensor(&mut rng, vec![n_i, k], emb_bound);
    let mut transfer = Tensor::eye(k);
    for v in transfer.data_mut() {
        *v += rng.gen_range(-0.01..0.01);
    }
    let fan = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    let attn_w0 = uniform_tensor(&mut rng, vec![4 * k, dh], fan(4 * k));
    let attn_w1 = uniform_tensor(&mut rng, vec![dh, k], fan(dh));
    let deep_w1 = uniform_tensor(&mut rng, vec![input_dim, HIDDEN_SIZES[0]], fan(input_dim));
    let deep_w2 = uniform_tensor(
        &mut rng,
        vec![HIDDEN_SIZES[0], HIDDEN_SIZES[1]],
        fan(HIDDEN_SIZES[0]),
    );
    let out_w = uniform_tensor(&mut rng, vec![HIDDEN_SIZES[1], 1], fan(HIDDEN_SIZES[1]));

    DomainParams {
        domain_id: domain.domain_id,
        dse,
        transfer,
        attn_w0,
        attn_b0: Tensor::zeros(vec![1, dh]),
        attn_w1,
        attn_b1: Tensor::zeros(vec![1, k]),
        deep_w1,
        deep_b1: Tensor::zeros(vec![1, HIDDEN_SIZES[0]]),
        deep_w2,
        deep_b2: Tensor::zeros(vec![1, HIDDEN_SIZES[1]]),
        out_w,
        out_b: Tensor::zeros(vec![1, 1]),
    }
}

/// Deterministic parameter initialization for a training unit over the given
/// domains. Each domain draws from its own id-keyed stream, so adding or
/// removing domains never shifts another domain's initialization.
pub fn init_params(
    schema: &GlobalSchema,
    config: &ModelConfig,
    seed: u64,
    domain_ids: &[usize],
) -> Result<CdtmParams, ModelError> {
    let k = config.embedding_dim;
    let mut shared_rng = derive_rng(seed, Purpose::SharedParamInit, 0);
    let shared = SharedEmbedding {
        table: uniform_tensor(&mut shared_rng, vec![schema.p, k], 1.0 / (k as f64).sqrt()),
    };
    let mut ids: Vec<usize> = domain_ids.to_vec();
    ids.sort_unstable();
    let domains = ids
        .iter()
        .map(|&id| Ok(init_domain(schema.domain(id)?, config, seed)))
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(CdtmParams { shared, domains })
}

/// A batch of records encoded as embedding-table row ids, record-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickBatch {
    pub domain_id: usize,
    pub batch_size: usize,
    /// Transferable field count m.
    pub m: usize,
    /// Nontransferable field count.
    pub s: usize,
    /// B*m rows into the domain table.
    pub dse_transferable_rows: Vec<usize>,
    /// B*m rows into the shared table, same order.
    pub gse_rows: Vec<usize>,
    /// B*s rows into the domain table.
    pub dse_specific_rows: Vec<usize>,
    pub labels: Vec<f64>,
}

/// Encodes dataset rows into table row ids for one domain.
pub fn encode_batch(
    schema: &GlobalSchema,
    domain: &DomainSpec,
    dataset: &Dataset,
    rows: &[usize],
) -> Result<ClickBatch, ModelError> {
    if dataset.domain_id != domain.domain_id {
        return Err(ModelError::DomainMismatch {
            batch_domain: dataset.domain_id,
            model_domain: domain.domain_id,
        });
    }
    if dataset.field_count != domain.field_count() {
        return Err(ModelError::BadDataset(
            crate::data::DataError::FieldCountMismatch {
                domain: domain.domain_id,
                got: dataset.field_count,
                expected: domain.field_count(),
            },
        ));
    }
    if rows.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let m = domain.transferable_count();
    let s = domain.field_count() - m;
    let mut batch = ClickBatch {
        domain_id: domain.domain_id,
        batch_size: rows.len(),
        m,
        s,
        dse_transferable_rows: Vec::with_capacity(rows.len() * m),
        gse_rows: Vec::with_capacity(rows.len() * m),
        dse_specific_rows: Vec::with_capacity(rows.len() * s),
        labels: Vec::with_capacity(rows.len()),
    };
    for &r in rows {
        let vals = dataset.row_values(r);
        for f in &domain.fields {
            let v = vals[f.field_id] as usize;
            match f.kind {
                FieldKind::Transferable => {
                    let gid = f.global_field_id.expect("validated transferable");
                    let gse_offset =
                        schema
                            .gse_offset(gid)
                            .ok_or(ModelError::MissingGlobalMapping {
                                domain: domain.domain_id,
                                field_id: f.field_id,
                            })?;
                    batch
                        .dse_transferable_rows
                        .push(domain.table_offset(f.field_id) + v);
                    batch.gse_rows.push(gse_offset + v);
                }
                FieldKind::Nontransferable => {
                    batch
                        .dse_specific_rows
                        .push(domain.table_offset(f.field_id) + v);
                }
            }
        }
        batch.labels.push(dataset.labels[r] as f64);
    }
    Ok(batch)
}

/// Tape handles for one domain's parameters plus the shared table.
#[derive(Debug, Clone)]
pub struct UnitNodes {
    pub shared: NodeId,
    pub dse: NodeId,
    pub transfer: NodeId,
    pub attn_w0: NodeId,
    pub attn_b0: NodeId,
    pub attn_w1: NodeId,
    pub attn_b1: NodeId,
    pub deep_w1: NodeId,
    pub deep_b1: NodeId,
    pub deep_w2: NodeId,
    pub deep_b2: NodeId,
    pub out_w: NodeId,
    pub out_b: NodeId,
}

/// Registers the shared table and one domain's parameters as gradient leaves.
pub fn register_unit(tape: &mut Tape, params: &CdtmParams, domain_id: usize) -> UnitNodes {
    let d = params.domain(domain_id).expect("domain in unit");
    let leaf = |tape: &mut Tape, t: &Tensor| tape.leaf(t.clone().with_requires_grad(true));
    UnitNodes {
        shared: leaf(tape, &params.shared.table),
        dse: leaf(tape, &d.dse),
        transfer: leaf(tape, &d.transfer),
        attn_w0: leaf(tape, &d.attn_w0),
        attn_b0: leaf(tape, &d.attn_b0),
        attn_w1: leaf(tape, &d.attn_w1),
        attn_b1: leaf(tape, &d.attn_b1),
        deep_w1: leaf(tape, &d.deep_w1),
        deep_b1: leaf(tape, &d.deep_b1),
        deep_w2: leaf(tape, &d.deep_w2),
        deep_b2: leaf(tape, &d.deep_b2),
        out_w: leaf(tape, &d.out_w),
        out_b: leaf(tape, &d.out_b),
    }
}

impl UnitNodes {
    /// Leaves in [`DOMAIN_PARAM_NAMES`] order, preceded by the shared table.
    pub fn all(&self) -> Vec<(&'static str, NodeId)> {
        vec![
            ("shared", self.shared),
            ("dse", self.dse),
            ("transfer", self.transfer),
            ("attn_w0", self.attn_w0),
            ("attn_b0", self.attn_b0),
            ("attn_w1", self.attn_w1),
            ("attn_b1", self.attn_b1),
            ("deep_w1", self.deep_w1),
            ("deep_b1", self.deep_b1),
            ("deep_w2", self.deep_w2),
            ("deep_b2", self.deep_b2),
            ("out_w", self.out_w),
            ("out_b", self.out_b),
        ]
    }
}

/// Test hook forcing the combination gate to a constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateOverride {
    None,
    Constant(f64),
}

/// Everything the forward pass produced, as tape handles.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// B*m x k domain-specific embeddings of transferable fields.
    pub e_c: NodeId,
    /// Shared embeddings, absent in base mode.
    pub g_c: Option<NodeId>,
    /// Transfer-mapped shared embeddings.
    pub mapped: Option<NodeId>,
    /// Combination gate A, present only when attention actually ran.
    pub gate: Option<NodeId>,
    /// Combined transferable embedding E.
    pub combined: NodeId,
    /// Nontransferable embeddings, absent when the domain has none.
    pub e_d: Option<NodeId>,
    pub x0: NodeId,
    /// Last hidden layer output o.
    pub hidden: NodeId,
    /// Predictions in (0,1), B x 1.
    pub p_hat: NodeId,
}

/// Looks up (E_c, G_c, E_d). Base mode never touches the shared table.
pub fn lookup_embeddings(
    tape: &mut Tape,
    nodes: &UnitNodes,
    batch: &ClickBatch,
    mode: ModelMode,
) -> Result<(NodeId, Option<NodeId>, Option<NodeId>), ModelError> {
    let e_c = tape.gather_rows(nodes.dse, &batch.dse_transferable_rows)?;
    let g_c = if mode == ModelMode::Base {
        None
    } else {
        Some(tape.gather_rows(nodes.shared, &batch.gse_rows)?)
    };
    let e_d = if batch.s > 0 {
        Some(tape.gather_rows(nodes.dse, &batch.dse_specific_rows)?)
    } else {
        None
    };
    Ok((e_c, g_c, e_d))
}

/// Applies the transfer matrix row-wise: each shared embedding row g becomes
/// g . T.
pub fn map_gse(tape: &mut Tape, transfer: NodeId, g_c: NodeId) -> Result<NodeId, ModelError> {
    Ok(tape.matmul(g_c, transfer)?)
}

/// Combination attention: h_0 = relu(W0 . [E_c, E_c*G, E_c+G, G] + b0),
/// A = sigmoid(W1 . h_0 + b1), entries strictly in (0,1). One set of
/// attention parameters per domain, shared across its fields.
pub fn attention_gate(
    tape: &mut Tape,
    nodes: &UnitNodes,
    e_c: NodeId,
    g_for_gate: NodeId,
) -> Result<NodeId, ModelError> {
    let prod = tape.elementwise(e_c, g_for_gate, EwKind::Mul)?;
    let sum = tape.elementwise(e_c, g_for_gate, EwKind::Add)?;
    let cat = tape.concat(&[e_c, prod, sum, g_for_gate], 1)?;
    let rows = tape.value(cat).rows();
    let ones = tape.constant(Tensor::ones(vec![rows, 1]));

    let pre0 = tape.matmul(cat, nodes.attn_w0)?;
    let b0 = tape.matmul(ones, nodes.attn_b0)?;
    let pre0 = tape.elementwise(pre0, b0, EwKind::Add)?;
    let h0 = tape.activation(pre0, ActKind::Relu);

    let pre1 = tape.matmul(h0, nodes.attn_w1)?;
    let b1 = tape.matmul(ones, nodes.attn_b1)?;
    let pre1 = tape.elementwise(pre1, b1, EwKind::Add)?;
    Ok(tape.activation(pre1, ActKind::Sigmoid))
}

struct Combined {
    g_c: Option<NodeId>,
    mapped: Option<NodeId>,
    gate: Option<NodeId>,
    combined: NodeId,
}

/// E = E_c * A + (G_c . T) * (1 - A). The gate sees the raw G_c unless
/// configured otherwise. Saturated overrides skip the unused branch entirely
/// so the output is bit-identical to the surviving side.
fn combine(
    tape: &mut Tape,
    config: &ModelConfig,
    nodes: &UnitNodes,
    e_c: NodeId,
    g_c: Option<NodeId>,
    gate_override: GateOverride,
) -> Result<Combined, ModelError> {
    if config.mode == ModelMode::Base {
        return Ok(Combined {
            g_c: None,
            mapped: None,
            gate: None,
            combined: e_c,
        });
    }
    let g_c = g_c.expect("non-base mode looked up G_c");
    let mapped = map_gse(tape, nodes.transfer, g_c)?;

    let fixed_gate = match (gate_override, config.mode) {
        (GateOverride::Constant(c), _) => Some(c),
        (GateOverride::None, ModelMode::NoAttention) => Some(0.5),
        (GateOverride::None, _) => None,
    };

    let (gate, combined) = match fixed_gate {
        Some(c) if c == 1.0 => (None, e_c),
        Some(c) if c == 0.0 => (None, mapped),
        Some(c) => {
            let left = tape.scale(e_c, c);
            let right = tape.scale(mapped, 1.0 - c);
            (None, tape.elementwise(left, right, EwKind::Add)?)
        }
        None => {
            let g_for_gate = if config.gate_uses_mapped { mapped } else { g_c };
            let gate = attention_gate(tape, nodes, e_c, g_for_gate)?;
            let shape = tape.value(gate).shape().to_vec();
            let ones = tape.constant(Tensor::ones(shape));
            let inv_gate = tape.elementwise(ones, gate, EwKind::Sub)?;
            let left = tape.elementwise(e_c, gate, EwKind::Mul)?;
            let right = tape.elementwise(mapped, inv_gate, EwKind::Mul)?;
            (Some(gate), tape.elementwise(left, right, EwKind::Add)?)
        }
    };
    Ok(Combined {
        g_c: Some(g_c),
        mapped: Some(mapped),
        gate,
        combined,
    })
}

/// Full forward pass for a batch: embeddings, combination, two relu hidden
/// layers (200 then 128) and a sigmoid output head.
pub fn forward(
    tape: &mut Tape,
    config: &ModelConfig,
    nodes: &UnitNodes,
    batch: &ClickBatch,
    gate_override: GateOverride,
) -> Result<ForwardTrace, ModelError> {
    let k = config.embedding_dim;
    let b = batch.batch_size;
    let (e_c, g_c, e_d) = lookup_embeddings(tape, nodes, batch, config.mode)?;
    let parts = combine(tape, config, nodes, e_c, g_c, gate_override)?;

    let e_flat = tape.reshape(parts.combined, vec![b, batch.m * k])?;
    let x0 = match e_d {
        Some(ed) => {
            let d_flat = tape.reshape(ed, vec![b, batch.s * k])?;
            tape.concat(&[e_flat, d_flat], 1)?
        }
        None => e_flat,
    };

    let ones = tape.constant(Tensor::ones(vec![b, 1]));
    let dense = |tape: &mut Tape, x: NodeId, w: NodeId, bias: NodeId| -> Result<NodeId, ModelError> {
        let xw = tape.matmul(x, w)?;
        let bb = tape.matmul(ones, bias)?;
        Ok(tape.elementwise(xw, bb, EwKind::Add)?)
    };

    let pre1 = dense(tape, x0, nodes.deep_w1, nodes.deep_b1)?;
    let h1 = tape.activation(pre1, ActKind::Relu);
    let pre2 = dense(tape, h1, nodes.deep_w2, nodes.deep_b2)?;
    let hidden = tape.activation(pre2, ActKind::Relu);
    let logits = dense(tape, hidden, nodes.out_w, nodes.out_b)?;
    let p_hat = tape.activation(logits, ActKind::Sigmoid);

    Ok(ForwardTrace {
        e_c,
        g_c: parts.g_c,
        mapped: parts.mapped,
        gate: parts.gate,
        combined: parts.combined,
        e_d,
        x0,
        hidden,
        p_hat,
    })
}

/// Mean binary cross-entropy, log arguments clamped at 1e-12.
pub fn prediction_loss(
    tape: &mut Tape,
    p_hat: NodeId,
    labels: &[f64],
) -> Result<NodeId, ModelError> {
    Ok(tape.bce_mean(p_hat, labels)?)
}

/// Alignment loss: lambda times the mean (over batch x fields) squared
/// distance between E_c and the mapped G_c. By default the gradient stops at
/// both embeddings and flows only into the transfer matrix.
pub fn auxiliary_loss(
    tape: &mut Tape,
    config: &ModelConfig,
    nodes: &UnitNodes,
    trace: &ForwardTrace,
    batch: &ClickBatch,
) -> Result<NodeId, ModelError> {
    let Some(g_c) = trace.g_c else {
        // base mode has no alignment term
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    if config.lambda == 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let (e_c, g_c) = if config.aux_full_gradient {
        (trace.e_c, g_c)
    } else {
        (tape.detach(trace.e_c), tape.detach(g_c))
    };
    let mapped = tape.matmul(g_c, nodes.transfer)?;
    let diff = tape.elementwise(e_c, mapped, EwKind::Sub)?;
    let ss = tape.sum_squares(diff);
    let denom = (batch.batch_size * batch.m) as f64;
    Ok(tape.scale(ss, config.lambda / denom))
}

/// Joint objective: sum of alpha_i * (Loss_i + L*_i); lambda is already
/// inside each L*_i.
pub fn total_loss(
    tape: &mut Tape,
    per_domain: &[(NodeId, NodeId, f64)],
) -> Result<NodeId, ModelError> {
    let terms: Vec<NodeId> = per_domain
        .iter()
        .map(|&(loss, aux, alpha)| {
            let sum = tape.add_n(&[loss, aux])?;
            Ok(tape.scale(sum, alpha))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(tape.add_n(&terms)?)
}
