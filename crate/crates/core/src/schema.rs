//! Multi-domain feature schema: which fields exist per domain, which of them
//! are transferable (shared across domains through the global embedding), and
//! how field values map onto embedding-table rows.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SchemaError {
    #[error("need at least 2 domains, got {0}")]
    TooFewDomains(usize),
    #[error("domain {domain} has no transferable field; no transfer path exists")]
    NoTransferableField { domain: usize },
    #[error("duplicate domain id {0}")]
    DuplicateDomainId(usize),
    #[error("duplicate global field id {0}")]
    DuplicateGlobalFieldId(usize),
    #[error("domain {domain} references unknown global field {global_field_id}")]
    UnknownGlobalField { domain: usize, global_field_id: usize },
    #[error("domain {domain} declares global field {global_field_id} more than once")]
    DuplicateGlobalFieldInDomain { domain: usize, global_field_id: usize },
    #[error(
        "global field {global_field_id} vocab mismatch: domain {domain} declares {declared}, global table has {expected}"
    )]
    VocabMismatch {
        domain: usize,
        global_field_id: usize,
        declared: usize,
        expected: usize,
    },
    #[error("domain {domain}: {what} must be {bound}, got {got}")]
    BadDomainValue {
        domain: usize,
        what: &'static str,
        bound: &'static str,
        got: String,
    },
    #[error("domain {domain} field {field_id}: {source}")]
    BadField {
        domain: usize,
        field_id: usize,
        #[source]
        source: FieldError,
    },
    #[error("unknown domain id {0}")]
    UnknownDomain(usize),
}

#[derive(Debug, Error, PartialEq)]
pub enum FieldError {
    #[error("vocab_size must be positive")]
    EmptyVocab,
    #[error("transferable field needs a global_field_id")]
    MissingGlobalId,
    #[error("nontransferable field must not carry a global_field_id")]
    UnexpectedGlobalId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Transferable,
    Nontransferable,
}

/// One feature field of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub field_id: usize,
    pub kind: FieldKind,
    /// Present iff the field is transferable.
    pub global_field_id: Option<usize>,
    pub vocab_size: usize,
}

impl FieldSpec {
    pub fn transferable(field_id: usize, global_field_id: usize, vocab_size: usize) -> Self {
        Self {
            field_id,
            kind: FieldKind::Transferable,
            global_field_id: Some(global_field_id),
            vocab_size,
        }
    }

    pub fn nontransferable(field_id: usize, vocab_size: usize) -> Self {
        Self {
            field_id,
            kind: FieldKind::Nontransferable,
            global_field_id: None,
            vocab_size,
        }
    }

    fn validate(&self) -> Result<(), FieldError> {
        if self.vocab_size == 0 {
            return Err(FieldError::EmptyVocab);
        }
        match (self.kind, self.global_field_id) {
            (FieldKind::Transferable, None) => Err(FieldError::MissingGlobalId),
            (FieldKind::Nontransferable, Some(_)) => Err(FieldError::UnexpectedGlobalId),
            _ => Ok(()),
        }
    }
}

/// Per-domain feature layout plus generation/training knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub name: String,
    /// Transferable fields first, then nontransferable, field_id == position.
    pub fields: Vec<FieldSpec>,
    pub n_rows: usize,
    pub base_ctr: f64,
    /// Loss balance coefficient for this domain.
    pub alpha: f64,
}

impl DomainSpec {
    /// Total number of feature fields.
    pub fn field_count(&self) -> usize {
        self.fields.len()
    }

    /// Number of transferable feature fields.
    pub fn transferable_count(&self) -> usize {
        self.fields
            .iter()
            .filter(|f| f.kind == FieldKind::Transferable)
            .count()
    }

    pub fn transferable_fields(&self) -> impl Iterator<Item = &FieldSpec> {
        self.fields
            .iter()
            .filter(|f| f.kind == FieldKind::Transferable)
    }

    pub fn nontransferable_fields(&self) -> impl Iterator<Item = &FieldSpec> {
        self.fields
            .iter()
            .filter(|f| f.kind == FieldKind::Nontransferable)
    }

    /// Row count of this domain's own embedding table (sum of field vocabs).
    pub fn table_rows(&self) -> usize {
        self.fields.iter().map(|f| f.vocab_size).sum()
    }

    /// Row offset of a field's value block inside the domain table.
    pub fn table_offset(&self, field_id: usize) -> usize {
        self.fields[..field_id].iter().map(|f| f.vocab_size).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalField {
    pub global_field_id: usize,
    pub vocab_size: usize,
}

/// The complete multi-domain schema; `p` is the total shared-feature count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalSchema {
    pub domains: Vec<DomainSpec>,
    pub global_fields: Vec<GlobalField>,
    pub p: usize,
}

impl GlobalSchema {
    /// Validates domain/global consistency and computes `p`.
    pub fn from_parts(
        mut domains: Vec<DomainSpec>,
        mut global_fields: Vec<GlobalField>,
    ) -> Result<Self, SchemaError> {
        if domains.len() < 2 {
            return Err(SchemaError::TooFewDomains(domains.len()));
        }
        // canonical order: the schema (and its fingerprint, shared-table
        // layout, every derived rng stream) must not depend on how a config
        // happened to list things
        domains.sort_by_key(|d| d.domain_id);
        global_fields.sort_by_key(|g| g.global_field_id);
        let mut seen_global = std::collections::HashSet::new();
        for gf in &global_fields {
            if !seen_global.insert(gf.global_field_id) {
                return Err(SchemaError::DuplicateGlobalFieldId(gf.global_field_id));
            }
        }
        let mut seen_domain = std::collections::HashSet::new();
        for d in &domains {
            if !seen_domain.insert(d.domain_id) {
                return Err(SchemaError::DuplicateDomainId(d.domain_id));
            }
            if d.n_rows == 0 {
                return Err(SchemaError::BadDomainValue {
                    domain: d.domain_id,
                    what: "n_rows",
                    bound: "positive",
                    got: "0".into(),
                });
            }
            if !(d.base_ctr > 0.0 && d.base_ctr < 1.0) {
                return Err(SchemaError::BadDomainValue {
                    domain: d.domain_id,
                    what: "base_ctr",
                    bound: "in (0,1)",
                    got: d.base_ctr.to_string(),
                });
            }
            if d.alpha < 0.0 {
                return Err(SchemaError::BadDomainValue {
                    domain: d.domain_id,
                    what: "alpha",
                    bound: ">= 0",
                    got: d.alpha.to_string(),
                });
            }
            if d.transferable_count() == 0 {
                return Err(SchemaError::NoTransferableField { domain: d.domain_id });
            }
            let mut seen_in_domain = std::collections::HashSet::new();
            for f in &d.fields {
                f.validate().map_err(|source| SchemaError::BadField {
                    domain: d.domain_id,
                    field_id: f.field_id,
                    source,
                })?;
                if let Some(gid) = f.global_field_id {
                    if !seen_in_domain.insert(gid) {
                        return Err(SchemaError::DuplicateGlobalFieldInDomain {
                            domain: d.domain_id,
                            global_field_id: gid,
                        });
                    }
                    let Some(gf) = global_fields.iter().find(|g| g.global_field_id == gid) else {
                        return Err(SchemaError::UnknownGlobalField {
                            domain: d.domain_id,
                            global_field_id: gid,
                        });
                    };
                    if gf.vocab_size != f.vocab_size {
                        return Err(SchemaError::VocabMismatch {
                            domain: d.domain_id,
                            global_field_id: gid,
                            declared: f.vocab_size,
                            expected: gf.vocab_size,
                        });
                    }
                }
            }
        }
        let p = global_fields.iter().map(|g| g.vocab_size).sum();
        Ok(Self {
            domains,
            global_fields,
            p,
        })
    }

    pub fn domain(&self, domain_id: usize) -> Result<&DomainSpec, SchemaError> {
        self.domains
            .iter()
            .find(|d| d.domain_id == domain_id)
            .ok_or(SchemaError::UnknownDomain(domain_id))
    }

    /// Row offset of a global field's value block inside the shared table.
    pub fn gse_offset(&self, global_field_id: usize) -> Option<usize> {
        let mut offset = 0;
        for gf in &self.global_fields {
            if gf.global_field_id == global_field_id {
                return Some(offset);
            }
            offset += gf.vocab_size;
        }
        None
    }

    /// Domain ids in ascending order; scheduling and rng derivation iterate in
    /// this order so relabeling domains in a config changes nothing.
    pub fn sorted_domain_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.domains.iter().map(|d| d.domain_id).collect();
        ids.sort_unstable();
        ids
    }

    /// Content hash over the canonical JSON form, stamped into datasets,
    /// checkpoints and reports.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serializes");
        let digest = Sha256::digest(&json);
        hex_lower(&digest)
    }
}

pub(crate) fn hex_lower(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Declarative schema description, the JSON input of `build_schema`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    pub global_fields: Vec<GlobalFieldConfig>,
    pub domains: Vec<DomainConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalFieldConfig {
    pub id: usize,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub id: usize,
    pub name: String,
    /// Global field ids this domain shares.
    pub transferable: Vec<usize>,
    /// Vocab sizes of the domain-only fields.
    #[serde(default)]
    pub specific_vocab_sizes: Vec<usize>,
    pub n_rows: usize,
    pub base_ctr: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    1.0
}

/// Expands a declarative config into a validated [`GlobalSchema`].
/// Deterministic: the same config always yields the same schema.
pub fn build_schema(config: &SchemaConfig) -> Result<GlobalSchema, SchemaError> {
    let global_fields: Vec<GlobalField> = config
        .global_fields
        .iter()
        .map(|g| GlobalField {
            global_field_id: g.id,
            vocab_size: g.vocab_size,
        })
        .collect();
    let domains = config
        .domains
        .iter()
        .map(|d| {
            let mut fields = Vec::new();
            for &gid in &d.transferable {
                let vocab = global_fields
                    .iter()
                    .find(|g| g.global_field_id == gid)
                    .map(|g| g.vocab_size)
                    .unwrap_or(0); // caught by validation
                fields.push(FieldSpec::transferable(fields.len(), gid, vocab));
            }
            for &v in &d.specific_vocab_sizes {
                fields.push(FieldSpec::nontransferable(fields.len(), v));
            }
            DomainSpec {
                domain_id: d.id,
                name: d.name.clone(),
                fields,
                n_rows: d.n_rows,
                base_ctr: d.base_ctr,
                alpha: d.alpha,
            }
        })
        .collect();
    GlobalSchema::from_parts(domains, global_fields)
}
