//! Synthetic heterogeneous multi-domain click datasets.
//!
//! The generator produces per-domain categorical feature rows with binary
//! labels from a known logistic-additive ground truth. Shared (transferable)
//! features carry a latent effect vector that each domain observes through its
//! own invertible linear warp — heterogeneity a linear transfer matrix can
//! undo — and domain-specific features add their own logit contributions.
//! A per-domain bias is solved so the expected click rate matches `base_ctr`.

use crate::rng::{derive_rng, sub_index, Purpose};
use crate::schema::{DomainSpec, FieldKind, GlobalSchema};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("train_frac must be in (0,1), got {0}")]
    BadTrainFrac(f64),
    #[error("split of {rows} rows at {train_frac} leaves an empty side")]
    DegenerateSplit { rows: usize, train_frac: f64 },
    #[error("row {row}: field {field} value {value} exceeds vocab {vocab}")]
    ValueOutOfVocab {
        row: usize,
        field: usize,
        value: u32,
        vocab: usize,
    },
    #[error("row {row}: label {0} is not binary", .label)]
    NonBinaryLabel { row: usize, label: u8 },
    #[error("dataset field count {got} does not match domain {domain} ({expected} fields)")]
    FieldCountMismatch {
        domain: usize,
        got: usize,
        expected: usize,
    },
}

/// One domain's rows: `values` is row-major `n_rows x field_count` of value
/// indices in schema field order, `labels` one byte per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub domain_id: usize,
    pub field_count: usize,
    pub values: Vec<u32>,
    pub labels: Vec<u8>,
}

/// A single decoded record, split into transferable and specific parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickRecord {
    /// (global_field_id, value index) per transferable field.
    pub transferable_idx: Vec<(usize, u32)>,
    /// (field_id, value index) per nontransferable field.
    pub specific_idx: Vec<(usize, u32)>,
    pub label: u8,
}

impl Dataset {
    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn row_values(&self, row: usize) -> &[u32] {
        &self.values[row * self.field_count..(row + 1) * self.field_count]
    }

    pub fn record(&self, row: usize, domain: &DomainSpec) -> ClickRecord {
        let vals = self.row_values(row);
        let mut transferable_idx = Vec::new();
        let mut specific_idx = Vec::new();
        for f in &domain.fields {
            match f.kind {
                FieldKind::Transferable => {
                    transferable_idx.push((f.global_field_id.unwrap(), vals[f.field_id]))
                }
                FieldKind::Nontransferable => specific_idx.push((f.field_id, vals[f.field_id])),
            }
        }
        ClickRecord {
            transferable_idx,
            specific_idx,
            label: self.labels[row],
        }
    }

    pub fn empirical_ctr(&self) -> f64 {
        self.labels.iter().map(|&l| l as f64).sum::<f64>() / self.labels.len() as f64
    }

    /// Checks every value against its field's vocab and every label for
    /// binarity; names the offending row.
    pub fn validate(&self, domain: &DomainSpec) -> Result<(), DataError> {
        if self.field_count != domain.field_count() {
            return Err(DataError::FieldCountMismatch {
                domain: domain.domain_id,
                got: self.field_count,
                expected: domain.field_count(),
            });
        }
        for row in 0..self.n_rows() {
            let vals = self.row_values(row);
            for f in &domain.fields {
                if vals[f.field_id] as usize >= f.vocab_size {
                    return Err(DataError::ValueOutOfVocab {
                        row,
                        field: f.field_id,
                        value: vals[f.field_id],
                        vocab: f.vocab_size,
                    });
                }
            }
            if self.labels[row] > 1 {
                return Err(DataError::NonBinaryLabel {
                    row,
                    label: self.labels[row],
                });
            }
        }
        Ok(())
    }

    /// Seeded disjoint-exhaustive shuffle split.
    pub fn split(&self, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
        if !(train_frac > 0.0 && train_frac < 1.0) {
            return Err(DataError::BadTrainFrac(train_frac));
        }
        let n = self.n_rows();
        let n_train = (n as f64 * train_frac).round() as usize;
        if n_train == 0 || n_train == n {
            return Err(DataError::DegenerateSplit {
                rows: n,
                train_frac,
            });
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = derive_rng(seed, Purpose::Split, self.domain_id as u64);
        order.shuffle(&mut rng);
        let take = |rows: &[usize]| {
            let mut values = Vec::with_capacity(rows.len() * self.field_count);
            let mut labels = Vec::with_capacity(rows.len());
            for &r in rows {
                values.extend_from_slice(self.row_values(r));
                labels.push(self.labels[r]);
            }
            Dataset {
                domain_id: self.domain_id,
                field_count: self.field_count,
                values,
                labels,
            }
        };
        Ok((take(&order[..n_train]), take(&order[n_train..])))
    }
}

/// Generator knobs beyond the schema itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Exponent of the Zipf-like long-tail value distribution.
    pub zipf_exponent: f64,
    /// Scales the per-domain latent rotation angles; 0 = homogeneous domains.
    pub warp_strength: f64,
    /// Scales shared-feature latent effects; 0 = no transferable signal.
    pub shared_signal_strength: f64,
    /// Scales domain-specific feature effects.
    pub specific_signal_strength: f64,
    /// Per-domain value permutations over the shared vocab (covariate shift).
    pub covariate_shift: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            zipf_exponent: 1.1,
            warp_strength: 0.5,
            shared_signal_strength: 1.0,
            specific_signal_strength: 0.5,
            covariate_shift: true,
        }
    }
}

/// Dimension of the latent effect space the warps act on.
pub const LATENT_DIM: usize = 2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalFieldEffects {
    pub global_field_id: usize,
    /// One latent vector per vocab value.
    pub latents: Vec<[f64; LATENT_DIM]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainWarp {
    pub domain_id: usize,
    /// Row-major invertible map applied to shared latents.
    pub matrix: [[f64; LATENT_DIM]; LATENT_DIM],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpecificEffects {
    pub domain_id: usize,
    /// Per nontransferable field: one logit contribution per vocab value.
    pub fields: Vec<(usize, Vec<f64>)>,
}

/// The generative model behind a dataset, serialized alongside it so later
/// experiments can measure recovery.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub shared_effects: Vec<GlobalFieldEffects>,
    pub domain_warps: Vec<DomainWarp>,
    pub specific_effects: Vec<DomainSpecificEffects>,
    /// (domain_id, bias) solved so expected CTR hits base_ctr.
    pub biases: Vec<(usize, f64)>,
}

impl GroundTruth {
    /// Logit contribution of a shared feature value as seen by a domain: the
    /// first coordinate of the warped latent.
    pub fn shared_logit(&self, domain_id: usize, global_field_id: usize, value: u32) -> f64 {
        let warp = self
            .domain_warps
            .iter()
            .find(|w| w.domain_id == domain_id)
            .expect("domain warp present");
        let latents = &self
            .shared_effects
            .iter()
            .find(|e| e.global_field_id == global_field_id)
            .expect("global field present")
            .latents;
        let u = latents[value as usize];
        (0..LATENT_DIM).map(|j| warp.matrix[0][j] * u[j]).sum()
    }

    pub fn specific_logit(&self, domain_id: usize, field_id: usize, value: u32) -> f64 {
        self.specific_effects
            .iter()
            .find(|e| e.domain_id == domain_id)
            .and_then(|e| e.fields.iter().find(|(f, _)| *f == field_id))
            .map(|(_, effects)| effects[value as usize])
            .unwrap_or(0.0)
    }

    pub fn bias(&self, domain_id: usize) -> f64 {
        self.biases
            .iter()
            .find(|(d, _)| *d == domain_id)
            .map(|(_, b)| *b)
            .expect("domain bias present")
    }

    /// Mean squared difference between two domains' views of the same shared
    /// effects, averaged over domain pairs and values. Monotone in warp
    /// strength by construction; measured on the ground truth itself.
    pub fn shared_divergence(&self, schema: &GlobalSchema) -> f64 {
        let ids = schema.sorted_domain_ids();
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                for gf in &schema.global_fields {
                    for v in 0..gf.vocab_size {
                        let d = self.shared_logit(a, gf.global_field_id, v as u32)
                            - self.shared_logit(b, gf.global_field_id, v as u32);
                        total += d * d;
                        count += 1;
                    }
                }
            }
        }
        total / count.max(1) as f64
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Solves for `b` such that `mean(sigmoid(b + s))` over the given pre-bias
/// logits equals `target`, by bisection.
fn solve_bias(logits: &[f64], target: f64) -> f64 {
    let mean_ctr = |b: f64| logits.iter().map(|&s| sigmoid(b + s)).sum::<f64>() / logits.len() as f64;
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean_ctr(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Generates one dataset per domain plus the ground truth that produced them.
/// Fully deterministic in (schema, config, seed); domain streams are derived
/// independently, keyed by domain id.
pub fn generate(
    schema: &GlobalSchema,
    config: &GeneratorConfig,
    seed: u64,
) -> (Vec<Dataset>, GroundTruth) {
    // Shared latents are drawn before and independently of the warps, so
    // changing warp_strength leaves them untouched.
    let mut gt_rng = derive_rng(seed, Purpose::GroundTruthEffects, 0);
    let shared_effects: Vec<GlobalFieldEffects> = schema
        .global_fields
        .iter()
        .map(|gf| GlobalFieldEffects {
            global_field_id: gf.global_field_id,
            latents: (0..gf.vocab_size)
                .map(|_| {
                    let mut u = [0.0; LATENT_DIM];
                    for slot in &mut u {
                        let z: f64 = StandardNormal.sample(&mut gt_rng);
                        *slot = z * config.shared_signal_strength;
                    }
                    u
                })
                .collect(),
        })
        .collect();

    let sorted_ids = schema.sorted_domain_ids();
    let domain_warps: Vec<DomainWarp> = sorted_ids
        .iter()
        .map(|&id| {
            let mut rng = derive_rng(seed, Purpose::DomainWarp, id as u64);
            // Base angle in (0, pi/2); warp_strength scales it linearly, so
            // pairwise angle gaps grow monotonically with strength.
            let base_angle: f64 = rng.gen_range(0.1..std::f64::consts::FRAC_PI_2);
            let theta = config.warp_strength * base_angle;
            let (s, c) = theta.sin_cos();
            DomainWarp {
                domain_id: id,
                matrix: [[c, -s], [s, c]],
            }
        })
        .collect();

    let specific_effects: Vec<DomainSpecificEffects> = sorted_ids
        .iter()
        .map(|&id| {
            let domain = schema.domain(id).expect("sorted id exists");
            let mut rng = derive_rng(seed, Purpose::GroundTruthEffects, 1 + id as u64);
            DomainSpecificEffects {
                domain_id: id,
                fields: domain
                    .nontransferable_fields()
                    .map(|f| {
                        let effects = (0..f.vocab_size)
                            .map(|_| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                z * config.specific_signal_strength
                            })
                            .collect();
                        (f.field_id, effects)
                    })
                    .collect(),
            }
        })
        .collect();

    let mut ground_truth = GroundTruth {
        shared_effects,
        domain_warps,
        specific_effects,
        biases: Vec::new(),
    };

    let mut datasets = Vec::new();
    for &id in &sorted_ids {
        let domain = schema.domain(id).expect("sorted id exists");
        let n = domain.n_rows;
        let f = domain.field_count();

        // Per-field value permutation: identity when covariate shift is off.
        let perms: Vec<Vec<u32>> = domain
            .fields
            .iter()
            .map(|field| {
                let mut perm: Vec<u32> = (0..field.vocab_size as u32).collect();
                if config.covariate_shift {
                    let mut rng = derive_rng(
                        seed,
                        Purpose::ValuePermutation,
                        sub_index(id, field.field_id as u64),
                    );
                    perm.shuffle(&mut rng);
                }
                perm
            })
            .collect();

        let mut row_rng = derive_rng(seed, Purpose::RowSampling, id as u64);
        let mut values = Vec::with_capacity(n * f);
        for _ in 0..n {
            for field in &domain.fields {
                let zipf = Zipf::new(field.vocab_size as u64, config.zipf_exponent)
                    .expect("valid zipf parameters");
                let rank = zipf.sample(&mut row_rng) as usize; // 1..=vocab
                values.push(perms[field.field_id][rank - 1]);
            }
        }

        // Pre-bias logits over the actual rows, then bias by bisection.
        let logits: Vec<f64> = (0..n)
            .map(|r| {
                let vals = &values[r * f..(r + 1) * f];
                domain
                    .fields
                    .iter()
                    .map(|field| match field.kind {
                        FieldKind::Transferable => ground_truth.shared_logit(
                            id,
                            field.global_field_id.unwrap(),
                            vals[field.field_id],
                        ),
                        FieldKind::Nontransferable => {
                            ground_truth.specific_logit(id, field.field_id, vals[field.field_id])
                        }
                    })
                    .sum()
            })
            .collect();
        let bias = solve_bias(&logits, domain.base_ctr);
        ground_truth.biases.push((id, bias));

        let mut label_rng = derive_rng(seed, Purpose::Labels, id as u64);
        let labels: Vec<u8> = logits
            .iter()
            .map(|&s| u8::from(label_rng.gen::<f64>() < sigmoid(bias + s)))
            .collect();

        datasets.push(Dataset {
            domain_id: id,
            field_count: f,
            values,
            labels,
        });
    }
    (datasets, ground_truth)
}
