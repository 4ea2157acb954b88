//! Joint training of one or more domain models against the shared table.
//!
//! Each step draws one domain (proportionally to its training-set size, or
//! round-robin), samples the next mini-batch of its epoch permutation, runs
//! one forward/backward pass of alpha * (Loss + L*) and applies an Adam
//! update. Everything is a pure function of (config, datasets, seed), and the
//! optimizer state round-trips through checkpoints for exact resume.

use crate::checkpoint::{
    block_tensors, block_tensors_mut, Checkpoint, DomainCursor, TrainState,
};
use crate::data::{DataError, Dataset};
use crate::eval::{auc, EvalError};
use crate::model::{
    self, encode_batch, CdtmParams, GateOverride, ModelConfig, ModelError, ParamKind,
};
use crate::rng::{derive_rng, sub_index, Purpose};
use crate::schema::{GlobalSchema, SchemaError};
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("no dataset provided for domain {0}")]
    MissingDataset(usize),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error(
        "non-finite loss at step {step} in domain {domain}; first non-finite node: {node}"
    )]
    NonFinite {
        step: u64,
        domain: usize,
        node: String,
    },
    #[error("resume checkpoint has no training state")]
    NoTrainState,
    #[error("resume checkpoint covers domains {found:?}, run needs {expected:?}")]
    DomainSetMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduling {
    /// Sample each step's domain with probability proportional to its
    /// training-set size.
    Proportional,
    /// Cycle through the participating domains in id order.
    RoundRobin,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub scheduling: Scheduling,
    /// Fraction of each domain's rows used for training; the rest validates.
    pub train_frac: f64,
    /// Validation cadence in steps; 0 evaluates only after the last step.
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 256,
            steps: 1000,
            scheduling: Scheduling::Proportional,
            train_frac: 0.8,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::BadConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(TrainError::BadConfig(format!(
                "train_frac must be in (0,1), got {}",
                self.train_frac
            )));
        }
        if self.model.embedding_dim == 0 || self.model.attention_hidden == 0 {
            return Err(TrainError::BadConfig("embedding dims must be positive".into()));
        }
        Ok(())
    }
}

/// One logged training step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub domain_id: usize,
    /// Prediction loss (mean BCE) of this step's batch.
    pub loss: f64,
    /// Auxiliary alignment loss of this step's batch, lambda included.
    pub aux: f64,
    pub wall_ms: u64,
}

pub fn metrics_csv_header() -> &'static str {
    "step,domain_id,loss,aux,wall_ms"
}

pub fn metrics_csv_row(r: &MetricsRecord) -> String {
    format!(
        "{},{},{},{},{}",
        r.step, r.domain_id, r.loss, r.aux, r.wall_ms
    )
}

/// Chooses which domain trains at each step.
pub struct Scheduler {
    kind: Scheduling,
    ids: Vec<usize>,
    dist: Option<WeightedIndex<f64>>,
    rng: ChaCha20Rng,
}

impl Scheduler {
    /// `sizes` pairs domain ids with their training-set sizes; order does not
    /// matter, ids are sorted internally.
    pub fn new(kind: Scheduling, sizes: &[(usize, usize)], seed: u64) -> Self {
        let mut sorted: Vec<(usize, usize)> = sizes.to_vec();
        sorted.sort_unstable_by_key(|&(id, _)| id);
        let ids: Vec<usize> = sorted.iter().map(|&(id, _)| id).collect();
        let dist = match kind {
            Scheduling::Proportional if ids.len() > 1 => Some(
                WeightedIndex::new(sorted.iter().map(|&(_, n)| n as f64))
                    .expect("positive training sizes"),
            ),
            _ => None,
        };
        Self {
            kind,
            ids,
            dist,
            rng: derive_rng(seed, Purpose::Scheduler, 0),
        }
    }

    pub fn next(&mut self, step: u64) -> usize {
        match (self.kind, &self.dist) {
            (Scheduling::RoundRobin, _) => self.ids[(step % self.ids.len() as u64) as usize],
            (Scheduling::Proportional, Some(dist)) => self.ids[dist.sample(&mut self.rng)],
            _ => self.ids[0],
        }
    }

    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn set_word_pos(&mut self, pos: u128) {
        self.rng.set_word_pos(pos);
    }
}

/// Adam over the canonical block ordering, with lazy row updates for
/// embedding tables: rows whose gradient is entirely zero keep their moments
/// untouched, so update cost scales with batch size, not table size.
pub struct Adam {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        Self {
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Option<&Tensor>],
        kinds: &[ParamKind],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((p, g), kind), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(kinds)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let Some(g) = g else { continue };
            let cols = if p.shape().len() == 2 { p.cols() } else { p.len() };
            let update_range = |lo: usize, hi: usize, p: &mut Tensor, m: &mut Tensor, v: &mut Tensor| {
                let gd = &g.data()[lo..hi];
                let md = &mut m.data_mut()[lo..hi];
                let vd = &mut v.data_mut()[lo..hi];
                let pd = &mut p.data_mut()[lo..hi];
                for i in 0..gd.len() {
                    md[i] = beta1 * md[i] + (1.0 - beta1) * gd[i];
                    vd[i] = beta2 * vd[i] + (1.0 - beta2) * gd[i] * gd[i];
                    let mh = md[i] / bc1;
                    let vh = vd[i] / bc2;
                    pd[i] -= lr * mh / (vh.sqrt() + eps);
                }
            };
            match kind {
                ParamKind::Embedding => {
                    let rows = p.rows();
                    for r in 0..rows {
                        let lo = r * cols;
                        let hi = lo + cols;
                        if g.data()[lo..hi].iter().any(|&x| x != 0.0) {
                            update_range(lo, hi, p, m, v);
                        }
                    }
                }
                ParamKind::Dense => update_range(0, p.len(), p, m, v),
            }
        }
    }
}

/// Walks each domain's training rows in seeded epoch permutations; the
/// (epoch, cursor) pair is all that is needed to resume mid-epoch.
struct DomainStream {
    domain_id: usize,
    epoch: u64,
    cursor: usize,
    perm: Vec<usize>,
    seed: u64,
}

impl DomainStream {
    fn new(domain_id: usize, n_train: usize, seed: u64) -> Self {
        let mut s = Self {
            domain_id,
            epoch: 0,
            cursor: 0,
            perm: (0..n_train).collect(),
            seed,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let mut rng = derive_rng(
            self.seed,
            Purpose::EpochShuffle,
            sub_index(self.domain_id, self.epoch),
        );
        let n = self.perm.len();
        self.perm = (0..n).collect();
        self.perm.shuffle(&mut rng);
    }

    fn seek(&mut self, epoch: u64, cursor: usize) {
        self.epoch = epoch;
        self.cursor = cursor.min(self.perm.len());
        self.reshuffle();
    }

    /// Next up-to-`batch_size` rows; a short tail batch ends the epoch.
    fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        if self.cursor >= self.perm.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.reshuffle();
        }
        let hi = (self.cursor + batch_size).min(self.perm.len());
        let batch = self.perm[self.cursor..hi].to_vec();
        self.cursor = hi;
        batch
    }
}

/// Result of a training run: the best parameters by mean validation AUC,
/// the final parameters and optimizer state, and the per-step log.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: CdtmParams,
    pub best_step: u64,
    pub best_val_auc: Option<BTreeMap<usize, f64>>,
    pub final_params: CdtmParams,
    pub final_state: TrainState,
    pub metrics: Vec<MetricsRecord>,
}

/// Scores every listed row of a dataset with the given parameters.
pub fn predict(
    schema: &GlobalSchema,
    params: &CdtmParams,
    config: &ModelConfig,
    domain_id: usize,
    dataset: &Dataset,
    rows: &[usize],
) -> Result<Vec<f64>, ModelError> {
    let domain = schema.domain(domain_id)?;
    let mut scores = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(1024) {
        let batch = encode_batch(schema, domain, dataset, chunk)?;
        let mut tape = Tape::new();
        let nodes = model::register_unit(&mut tape, params, domain_id);
        let trace = model::forward(&mut tape, config, &nodes, &batch, GateOverride::None)?;
        scores.extend_from_slice(tape.value(trace.p_hat).data());
    }
    Ok(scores)
}

/// Validation AUC per domain; `None` when a validation split has only one
/// class (possible at very low CTR).
fn validation_aucs(
    schema: &GlobalSchema,
    params: &CdtmParams,
    config: &ModelConfig,
    val_sets: &BTreeMap<usize, Dataset>,
) -> Result<Option<BTreeMap<usize, f64>>, TrainError> {
    let mut out = BTreeMap::new();
    for (&id, val) in val_sets {
        let rows: Vec<usize> = (0..val.n_rows()).collect();
        let scores = predict(schema, params, config, id, val, &rows)?;
        match auc(&scores, &val.labels) {
            Ok(a) => {
                out.insert(id, a);
            }
            Err(EvalError::SingleClass { .. }) => return Ok(None),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Some(out))
}

/// Trains the domains in `domain_ids` jointly. `datasets` must contain one
/// dataset per requested domain (extras are ignored). With `resume`, training
/// continues bit-exactly from the checkpoint's optimizer state.
pub fn train(
    schema: &GlobalSchema,
    datasets: &[Dataset],
    domain_ids: &[usize],
    config: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut ids: Vec<usize> = domain_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(TrainError::BadConfig("no domains to train".into()));
    }

    let mut train_sets: BTreeMap<usize, Dataset> = BTreeMap::new();
    let mut val_sets: BTreeMap<usize, Dataset> = BTreeMap::new();
    for &id in &ids {
        let domain = schema.domain(id)?;
        let ds = datasets
            .iter()
            .find(|d| d.domain_id == id)
            .ok_or(TrainError::MissingDataset(id))?;
        ds.validate(domain)?;
        let (tr, va) = ds.split(config.train_frac, config.seed)?;
        train_sets.insert(id, tr);
        val_sets.insert(id, va);
    }

    let mut params = match resume {
        Some(ckpt) => ckpt.params.clone(),
        None => model::init_params(schema, &config.model, config.seed, &ids)?,
    };
    let resumed_domains: Vec<usize> = params.domains.iter().map(|d| d.domain_id).collect();
    if resumed_domains != ids {
        return Err(TrainError::DomainSetMismatch {
            expected: ids,
            found: resumed_domains,
        });
    }

    let sizes: Vec<(usize, usize)> = ids.iter().map(|&id| (id, train_sets[&id].n_rows())).collect();
    let mut scheduler = Scheduler::new(config.scheduling, &sizes, config.seed);
    let mut streams: BTreeMap<usize, DomainStream> = ids
        .iter()
        .map(|&id| (id, DomainStream::new(id, train_sets[&id].n_rows(), config.seed)))
        .collect();

    let shapes: Vec<Vec<usize>> = block_tensors(&params)
        .iter()
        .map(|t| t.shape().to_vec())
        .collect();
    let mut adam = Adam::new(&shapes);
    let mut start_step = 0u64;
    if let Some(ckpt) = resume {
        let state = ckpt.train_state.as_ref().ok_or(TrainError::NoTrainState)?;
        adam.t = state.adam_t;
        adam.m = state.m.clone();
        adam.v = state.v.clone();
        start_step = state.step;
        scheduler.set_word_pos(state.scheduler_word_pos);
        for cur in &state.domain_cursors {
            if let Some(s) = streams.get_mut(&cur.domain_id) {
                s.seek(cur.epoch, cur.cursor);
            }
        }
    }

    let kinds: Vec<ParamKind> = {
        let mut k = vec![ParamKind::Embedding]; // shared table
        for d in &params.domains {
            k.extend(d.tensors().iter().map(|&(_, kind, _)| kind));
        }
        k
    };

    let mut metrics = Vec::new();
    let mut best: Option<(f64, u64, CdtmParams, BTreeMap<usize, f64>)> = None;
    let started = Instant::now();

    let maybe_eval = |step: u64,
                          params: &CdtmParams,
                          best: &mut Option<(f64, u64, CdtmParams, BTreeMap<usize, f64>)>|
     -> Result<(), TrainError> {
        if let Some(aucs) = validation_aucs(schema, params, &config.model, &val_sets)? {
            let mean = aucs.values().sum::<f64>() / aucs.len() as f64;
            let improved = best.as_ref().map_or(true, |(b, _, _, _)| mean > *b);
            if improved {
                *best = Some((mean, step, params.clone(), aucs));
            }
        }
        Ok(())
    };

    for step in start_step..config.steps {
        let domain_id = scheduler.next(step);
        let rows = streams
            .get_mut(&domain_id)
            .expect("stream per domain")
            .next_batch(config.batch_size);
        let domain = schema.domain(domain_id)?;
        let train_ds = &train_sets[&domain_id];
        let batch = encode_batch(schema, domain, train_ds, &rows)?;

        let mut tape = Tape::new();
        let nodes = model::register_unit(&mut tape, &params, domain_id);
        let trace = model::forward(&mut tape, &config.model, &nodes, &batch, GateOverride::None)?;
        let loss = model::prediction_loss(&mut tape, trace.p_hat, &batch.labels)?;
        let aux = model::auxiliary_loss(&mut tape, &config.model, &nodes, &trace, &batch)?;
        let loss_v = tape.value(loss).as_scalar().expect("scalar loss");
        let aux_v = tape.value(aux).as_scalar().expect("scalar aux");
        if !loss_v.is_finite() || !aux_v.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                domain: domain_id,
                node: tape.first_non_finite().unwrap_or_else(|| "loss".into()),
            });
        }
        let total = model::total_loss(&mut tape, &[(loss, aux, domain.alpha)])?;
        let grads = tape.backward(total).map_err(ModelError::Tensor)?;

        // full-length gradient list over block order; only the shared table
        // and this domain's blocks are present
        let node_list = nodes.all();
        let grad_of = |name: &str| {
            node_list
                .iter()
                .find(|(n, _)| *n == name)
                .and_then(|&(_, id)| grads.get(id))
        };
        let mut grad_refs: Vec<Option<&Tensor>> = Vec::with_capacity(kinds.len());
        grad_refs.push(grad_of("shared"));
        for d in &params.domains {
            if d.domain_id == domain_id {
                for (name, _, _) in d.tensors() {
                    grad_refs.push(grad_of(name));
                }
            } else {
                grad_refs.extend(std::iter::repeat(None).take(model::DOMAIN_PARAM_NAMES.len()));
            }
        }

        // the borrow of params.domains above is read-only; rebuild the
        // mutable block list only after grads are materialized
        let grad_owned: Vec<Option<Tensor>> =
            grad_refs.into_iter().map(|g| g.cloned()).collect();
        let grad_slice: Vec<Option<&Tensor>> = grad_owned.iter().map(|g| g.as_ref()).collect();
        let mut blocks = block_tensors_mut(&mut params);
        adam.step(
            &mut blocks,
            &grad_slice,
            &kinds,
            config.lr,
            config.beta1,
            config.beta2,
            config.adam_eps,
        );

        metrics.push(MetricsRecord {
            step,
            domain_id,
            loss: loss_v,
            aux: aux_v,
            wall_ms: started.elapsed().as_millis() as u64,
        });

        if config.eval_every > 0 && (step + 1) % config.eval_every == 0 && step + 1 < config.steps
        {
            maybe_eval(step + 1, &params, &mut best)?;
        }
    }

    maybe_eval(config.steps, &params, &mut best)?;

    let final_state = TrainState {
        step: config.steps,
        adam_t: adam.t,
        scheduler_word_pos: scheduler.word_pos(),
        domain_cursors: streams
            .values()
            .map(|s| DomainCursor {
                domain_id: s.domain_id,
                epoch: s.epoch,
                cursor: s.cursor,
            })
            .collect(),
        m: adam.m.clone(),
        v: adam.v.clone(),
    };

    let (best_params, best_step, best_val_auc) = match best {
        Some((_, step, p, aucs)) => (p, step, Some(aucs)),
        None => (params.clone(), config.steps, None),
    };

    Ok(TrainOutcome {
        params: best_params,
        best_step,
        best_val_auc,
        final_params: params,
        final_state,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorConfig};
    use crate::schema::{build_schema, DomainConfig, GlobalFieldConfig, SchemaConfig};

    fn schema(n_rows: usize) -> GlobalSchema {
        build_schema(&SchemaConfig {
            global_fields: vec![GlobalFieldConfig { id: 0, vocab_size: 20 }],
            domains: (0..2)
                .map(|id| DomainConfig {
                    id,
                    name: format!("d{id}"),
                    transferable: vec![0],
                    specific_vocab_sizes: vec![8],
                    n_rows,
                    base_ctr: 0.3,
                    alpha: 1.0,
                })
                .collect(),
        })
        .unwrap()
    }

    fn small_config(steps: u64) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                embedding_dim: 4,
                attention_hidden: 4,
                ..ModelConfig::default()
            },
            batch_size: 32,
            steps,
            seed: 13,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn proportional_scheduler_frequency() {
        let mut s = Scheduler::new(Scheduling::Proportional, &[(0, 9000), (1, 1000)], 3);
        let n = 10_000;
        let picks_0 = (0..n).filter(|&i| s.next(i) == 0).count();
        let frac = picks_0 as f64 / n as f64;
        assert!((frac - 0.9).abs() < 0.02, "{frac}");
    }

    #[test]
    fn round_robin_alternates_in_id_order() {
        let mut s = Scheduler::new(Scheduling::RoundRobin, &[(5, 10), (2, 99), (9, 1)], 3);
        let seq: Vec<usize> = (0..6).map(|i| s.next(i)).collect();
        assert_eq!(seq, vec![2, 5, 9, 2, 5, 9]);
    }

    #[test]
    fn scheduler_ignores_input_order() {
        let mut a = Scheduler::new(Scheduling::Proportional, &[(0, 500), (1, 500)], 7);
        let mut b = Scheduler::new(Scheduling::Proportional, &[(1, 500), (0, 500)], 7);
        for i in 0..200 {
            assert_eq!(a.next(i), b.next(i));
        }
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // minimize (x - 3)^2 by feeding Adam its gradient
        let mut x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut adam = Adam::new(&[vec![1]]);
        for _ in 0..3000 {
            let g = Tensor::new(vec![1], vec![2.0 * (x.data()[0] - 3.0)]).unwrap();
            adam.step(
                &mut [&mut x],
                &[Some(&g)],
                &[ParamKind::Dense],
                0.01,
                0.9,
                0.999,
                1e-8,
            );
        }
        assert!((x.data()[0] - 3.0).abs() < 1e-3, "{}", x.data()[0]);
    }

    #[test]
    fn lazy_rows_stay_untouched() {
        let mut table = Tensor::new(vec![3, 2], vec![1.0; 6]).unwrap();
        let mut g = Tensor::zeros(vec![3, 2]);
        g.data_mut()[2] = 0.5; // row 1 only
        g.data_mut()[3] = -0.5;
        let mut adam = Adam::new(&[vec![3, 2]]);
        adam.step(
            &mut [&mut table],
            &[Some(&g)],
            &[ParamKind::Embedding],
            0.1,
            0.9,
            0.999,
            1e-8,
        );
        assert_eq!(table.row(0), &[1.0, 1.0]);
        assert_eq!(table.row(2), &[1.0, 1.0]);
        assert_ne!(table.row(1), &[1.0, 1.0]);
    }

    #[test]
    fn epoch_stream_is_a_permutation_and_resumable() {
        let mut s = DomainStream::new(4, 10, 99);
        let mut seen: Vec<usize> = Vec::new();
        while seen.len() < 10 {
            seen.extend(s.next_batch(3));
        }
        let mut sorted = seen.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());

        // resuming from (epoch, cursor) reproduces the remaining order
        let mut a = DomainStream::new(4, 10, 99);
        let _ = a.next_batch(3);
        let _ = a.next_batch(3);
        let (epoch, cursor) = (a.epoch, a.cursor);
        let rest_a: Vec<usize> = (0..4).flat_map(|_| a.next_batch(3)).collect();
        let mut b = DomainStream::new(4, 10, 99);
        b.seek(epoch, cursor);
        let rest_b: Vec<usize> = (0..4).flat_map(|_| b.next_batch(3)).collect();
        assert_eq!(rest_a, rest_b);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let schema = schema(600);
        let (datasets, _) = generate(&schema, &GeneratorConfig::default(), 5);
        let config = small_config(120);
        let out1 = train(&schema, &datasets, &[0, 1], &config, None).unwrap();
        let out2 = train(&schema, &datasets, &[0, 1], &config, None).unwrap();
        assert_eq!(out1.final_params, out2.final_params);

        let first: f64 = out1.metrics[..20].iter().map(|m| m.loss).sum::<f64>() / 20.0;
        let last: f64 = out1.metrics[out1.metrics.len() - 20..]
            .iter()
            .map(|m| m.loss)
            .sum::<f64>()
            / 20.0;
        assert!(last < first, "loss did not fall: {first} -> {last}");
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let schema = schema(400);
        let (datasets, _) = generate(&schema, &GeneratorConfig::default(), 8);

        let full = train(&schema, &datasets, &[0, 1], &small_config(80), None).unwrap();

        let half = train(&schema, &datasets, &[0, 1], &small_config(40), None).unwrap();
        let ckpt = Checkpoint {
            schema_fingerprint: schema.fingerprint(),
            model: small_config(0).model,
            params: half.final_params,
            train_state: Some(half.final_state),
        };
        let resumed =
            train(&schema, &datasets, &[0, 1], &small_config(80), Some(&ckpt)).unwrap();
        assert_eq!(resumed.final_params, full.final_params);
        assert_eq!(resumed.final_state, full.final_state);
    }

    #[test]
    fn base_mode_never_updates_shared_table() {
        let schema = schema(300);
        let (datasets, _) = generate(&schema, &GeneratorConfig::default(), 2);
        let mut config = small_config(40);
        config.model.mode = ModelMode::Base;
        let out = train(&schema, &datasets, &[0], &config, None).unwrap();
        let init = model::init_params(&schema, &config.model, config.seed, &[0]).unwrap();
        assert_eq!(out.final_params.shared.table, init.shared.table);
        assert_ne!(out.final_params.domains[0].dse, init.domains[0].dse);
    }

    use crate::model::ModelMode;

    #[test]
    fn single_domain_training_leaves_other_domains_out() {
        let schema = schema(300);
        let (datasets, _) = generate(&schema, &GeneratorConfig::default(), 2);
        let config = small_config(30);
        let out = train(&schema, &datasets, &[1], &config, None).unwrap();
        assert_eq!(out.final_params.domains.len(), 1);
        assert_eq!(out.final_params.domains[0].domain_id, 1);
    }

    #[test]
    fn missing_dataset_is_an_error() {
        let schema = schema(300);
        let (datasets, _) = generate(&schema, &GeneratorConfig::default(), 2);
        let only_zero: Vec<Dataset> = datasets.into_iter().filter(|d| d.domain_id == 0).collect();
        let err = train(&schema, &only_zero, &[0, 1], &small_config(10), None).unwrap_err();
        assert!(matches!(err, TrainError::MissingDataset(1)));
    }

    #[test]
    fn bad_config_is_rejected() {
        let schema = schema(300);
        let (datasets, _) = generate(&schema, &GeneratorConfig::default(), 2);
        let mut config = small_config(10);
        config.batch_size = 0;
        assert!(matches!(
            train(&schema, &datasets, &[0], &config, None),
            Err(TrainError::BadConfig(_))
        ));
    }
}
