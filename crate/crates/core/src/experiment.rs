//! Experiment tasks: trains the configured model variants across seeds and
//! assembles comparable AUC / relative-improvement tables.
//!
//! Four tasks mirror the evaluation grid the model is designed around:
//! 1. one source at a time transferring into each target,
//! 2. all sources jointly into each target (plus the single-source runs for
//!    reference),
//! 3. variant ablation on each target: baseline, fixed 0.5 gate, full model,
//! 4. one joint run over every listed domain, scored per domain.
//!
//! Every variant is compared against a baseline trained on the same seed with
//! the same per-domain step budget, so improvements are attributable to
//! transfer rather than to extra compute on the target.

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::eval::{auc, improvement_pct, EvalError, MetricRow};
use crate::model::{ModelMode, ModelError};
use crate::schema::{GlobalSchema, SchemaError};
use crate::train::{train, TrainConfig, TrainError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown task {0}: tasks are 1..=4")]
    UnknownTask(u8),
    #[error("task {task} needs at least {needed} source domain(s), config lists {got}")]
    NotEnoughSources { task: u8, needed: usize, got: usize },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    SingleSource,
    MultiSource,
    Ablation,
    JointAll,
}

impl Task {
    pub fn from_number(n: u8) -> Result<Self, ExperimentError> {
        match n {
            1 => Ok(Task::SingleSource),
            2 => Ok(Task::MultiSource),
            3 => Ok(Task::Ablation),
            4 => Ok(Task::JointAll),
            other => Err(ExperimentError::UnknownTask(other)),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Task::SingleSource => 1,
            Task::MultiSource => 2,
            Task::Ablation => 3,
            Task::JointAll => 4,
        }
    }
}

pub const BASE_TAG: &str = "Base";

/// Mean/stddev over seeds for one (domain, variant) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub domain_id: usize,
    pub model_tag: String,
    pub n_seeds: usize,
    pub mean_auc: f64,
    pub std_auc: f64,
    /// Absent for the baseline itself.
    pub mean_imp_pct: Option<f64>,
    pub std_imp_pct: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub task: u8,
    pub config_fingerprint: String,
    /// Per (seed, domain, variant) measurements.
    pub rows: Vec<MetricRow>,
    pub summary: Vec<SummaryRow>,
    /// (domain, variant) cells whose mean improvement is negative.
    pub negative_transfer: Vec<(usize, String)>,
}

/// Trains one unit and returns the held-out AUC for `eval_domain`.
///
/// `steps` in the run config is a per-domain budget: the effective step count
/// is budget times unit size, so under round-robin scheduling every domain,
/// in particular the evaluated one, receives the same number of its own
/// batches as a baseline trained alone.
fn train_and_eval(
    schema: &GlobalSchema,
    datasets: &[Dataset],
    run: &RunConfig,
    unit: &[usize],
    mode: ModelMode,
    seed: u64,
    eval_domain: usize,
) -> Result<f64, ExperimentError> {
    let mut config: TrainConfig = run.train.clone();
    config.model.mode = mode;
    config.steps = run.train.steps * unit.len() as u64;
    config.seed = seed;
    let outcome = train(schema, datasets, unit, &config, None)?;

    let ds = datasets
        .iter()
        .find(|d| d.domain_id == eval_domain)
        .ok_or(TrainError::MissingDataset(eval_domain))?;
    let (_, val) = ds.split(config.train_frac, seed)?;
    let rows: Vec<usize> = (0..val.n_rows()).collect();
    let scores = crate::train::predict(
        schema,
        &outcome.params,
        &config.model,
        eval_domain,
        &val,
        &rows,
    )?;
    Ok(auc(&scores, &val.labels)?)
}

fn unit_with(sources: &[usize], target: usize) -> Vec<usize> {
    let mut unit = sources.to_vec();
    unit.push(target);
    unit.sort_unstable();
    unit.dedup();
    unit
}

/// All rows for one seed. Baselines come first so later rows can cite them.
fn seed_rows(
    task: Task,
    schema: &GlobalSchema,
    datasets: &[Dataset],
    run: &RunConfig,
    seed: u64,
) -> Result<Vec<MetricRow>, ExperimentError> {
    let exp = &run.experiment;
    let mut rows = Vec::new();

    let push = |rows: &mut Vec<MetricRow>,
                    domain: usize,
                    tag: String,
                    auc_v: f64,
                    base: Option<f64>|
     -> Result<(), ExperimentError> {
        let imp = match base {
            Some(b) => Some(improvement_pct(auc_v, b)?),
            None => None,
        };
        rows.push(MetricRow {
            domain_id: domain,
            model_tag: tag,
            seed,
            auc: auc_v,
            imp_pct: imp,
        });
        Ok(())
    };

    let base_for = |domain: usize| -> Result<f64, ExperimentError> {
        train_and_eval(schema, datasets, run, &[domain], ModelMode::Base, seed, domain)
    };

    match task {
        Task::SingleSource => {
            for &t in &exp.targets {
                let base = base_for(t)?;
                push(&mut rows, t, BASE_TAG.into(), base, None)?;
                for &s in &exp.sources {
                    let a = train_and_eval(
                        schema,
                        datasets,
                        run,
                        &unit_with(&[s], t),
                        ModelMode::Full,
                        seed,
                        t,
                    )?;
                    push(&mut rows, t, format!("CDTM-S{s}"), a, Some(base))?;
                }
            }
        }
        Task::MultiSource => {
            for &t in &exp.targets {
                let base = base_for(t)?;
                push(&mut rows, t, BASE_TAG.into(), base, None)?;
                for &s in &exp.sources {
                    let a = train_and_eval(
                        schema,
                        datasets,
                        run,
                        &unit_with(&[s], t),
                        ModelMode::Full,
                        seed,
                        t,
                    )?;
                    push(&mut rows, t, format!("CDTM-S{s}"), a, Some(base))?;
                }
                let a = train_and_eval(
                    schema,
                    datasets,
                    run,
                    &unit_with(&exp.sources, t),
                    ModelMode::Full,
                    seed,
                    t,
                )?;
                push(&mut rows, t, "CDTM".into(), a, Some(base))?;
            }
        }
        Task::Ablation => {
            for &t in &exp.targets {
                let base = base_for(t)?;
                push(&mut rows, t, BASE_TAG.into(), base, None)?;
                let unit = unit_with(&exp.sources, t);
                for (mode, tag) in [
                    (ModelMode::NoAttention, "CDTM-DA"),
                    (ModelMode::Full, "CDTM"),
                ] {
                    let a = train_and_eval(schema, datasets, run, &unit, mode, seed, t)?;
                    push(&mut rows, t, tag.into(), a, Some(base))?;
                }
            }
        }
        Task::JointAll => {
            let all = unit_with(&exp.sources, exp.targets[0]);
            let all = {
                let mut v = all;
                v.extend(&exp.targets);
                v.sort_unstable();
                v.dedup();
                v
            };
            let mut config: TrainConfig = run.train.clone();
            config.model.mode = ModelMode::Full;
            config.steps = run.train.steps * all.len() as u64;
            config.seed = seed;
            let outcome = train(schema, datasets, &all, &config, None)?;
            for &d in &all {
                let base = base_for(d)?;
                push(&mut rows, d, BASE_TAG.into(), base, None)?;
                let ds = datasets
                    .iter()
                    .find(|x| x.domain_id == d)
                    .ok_or(TrainError::MissingDataset(d))?;
                let (_, val) = ds.split(config.train_frac, seed)?;
                let idx: Vec<usize> = (0..val.n_rows()).collect();
                let scores =
                    crate::train::predict(schema, &outcome.params, &config.model, d, &val, &idx)?;
                let a = auc(&scores, &val.labels)?;
                push(&mut rows, d, "CDTM".into(), a, Some(base))?;
            }
        }
    }
    Ok(rows)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn summarize(rows: &[MetricRow]) -> (Vec<SummaryRow>, Vec<(usize, String)>) {
    let mut keys: Vec<(usize, String)> = rows
        .iter()
        .map(|r| (r.domain_id, r.model_tag.clone()))
        .collect();
    keys.sort();
    keys.dedup();
    // baseline first within each domain, then variants alphabetically
    keys.sort_by(|a, b| {
        (a.0, a.1 != BASE_TAG, &a.1).cmp(&(b.0, b.1 != BASE_TAG, &b.1))
    });

    let mut summary = Vec::new();
    let mut negative = Vec::new();
    for (domain, tag) in keys {
        let cell: Vec<&MetricRow> = rows
            .iter()
            .filter(|r| r.domain_id == domain && r.model_tag == tag)
            .collect();
        let (mean_auc, std_auc) = mean_std(&cell.iter().map(|r| r.auc).collect::<Vec<_>>());
        let imps: Vec<f64> = cell.iter().filter_map(|r| r.imp_pct).collect();
        let (mean_imp, std_imp) = if imps.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&imps);
            (Some(m), Some(s))
        };
        if mean_imp.is_some_and(|m| m < 0.0) {
            negative.push((domain, tag.clone()));
        }
        summary.push(SummaryRow {
            domain_id: domain,
            model_tag: tag,
            n_seeds: cell.len(),
            mean_auc,
            std_auc,
            mean_imp_pct: mean_imp,
            std_imp_pct: std_imp,
        });
    }
    (summary, negative)
}

/// Runs one task across all configured seeds (in parallel) and summarizes.
pub fn run_experiment(
    task: Task,
    schema: &GlobalSchema,
    datasets: &[Dataset],
    run: &RunConfig,
) -> Result<ExperimentResult, ExperimentError> {
    let needed = match task {
        Task::SingleSource | Task::MultiSource | Task::Ablation => 1,
        Task::JointAll => 2,
    };
    if run.experiment.sources.len() < needed {
        return Err(ExperimentError::NotEnoughSources {
            task: task.number(),
            needed,
            got: run.experiment.sources.len(),
        });
    }

    let mut seeds = run.experiment.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();

    let per_seed: Vec<Result<Vec<MetricRow>, ExperimentError>> = seeds
        .par_iter()
        .map(|&seed| seed_rows(task, schema, datasets, run, seed))
        .collect();

    let mut rows = Vec::new();
    for r in per_seed {
        rows.extend(r?);
    }
    let (summary, negative_transfer) = summarize(&rows);

    Ok(ExperimentResult {
        task: task.number(),
        config_fingerprint: run.fingerprint(),
        rows,
        summary,
        negative_transfer,
    })
}

/// Deterministic CSV: one row per domain, an AUC / Imp column pair per
/// variant. AUC has four decimals; Imp has two decimals and a percent sign.
pub fn render_csv(result: &ExperimentResult) -> String {
    let mut tags: Vec<&str> = result.summary.iter().map(|s| s.model_tag.as_str()).collect();
    tags.sort_by_key(|t| (*t != BASE_TAG, t.to_string()));
    tags.dedup();

    let mut domains: Vec<usize> = result.summary.iter().map(|s| s.domain_id).collect();
    domains.sort_unstable();
    domains.dedup();

    let mut out = String::from("domain");
    for t in &tags {
        out.push_str(&format!(",{t} AUC,{t} Imp"));
    }
    out.push('\n');

    for d in domains {
        out.push_str(&d.to_string());
        for t in &tags {
            let cell = result
                .summary
                .iter()
                .find(|s| s.domain_id == d && s.model_tag == *t);
            match cell {
                Some(s) => {
                    out.push_str(&format!(",{:.4}", s.mean_auc));
                    match s.mean_imp_pct {
                        Some(i) => out.push_str(&format!(",{i:.2}%")),
                        None => out.push(','),
                    }
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

/// Deterministic JSON with full per-seed detail.
pub fn render_json(result: &ExperimentResult) -> String {
    serde_json::to_string_pretty(result).expect("result serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::data::{generate, GeneratorConfig};
    use crate::model::ModelConfig;
    use crate::schema::{build_schema, DomainConfig, GlobalFieldConfig, SchemaConfig};
    use crate::train::Scheduling;

    fn tiny_run() -> (RunConfig, GlobalSchema) {
        let schema_cfg = SchemaConfig {
            global_fields: vec![GlobalFieldConfig { id: 0, vocab_size: 16 }],
            domains: vec![
                DomainConfig {
                    id: 0,
                    name: "src".into(),
                    transferable: vec![0],
                    specific_vocab_sizes: vec![],
                    n_rows: 1200,
                    base_ctr: 0.3,
                    alpha: 1.0,
                },
                DomainConfig {
                    id: 1,
                    name: "tgt".into(),
                    transferable: vec![0],
                    specific_vocab_sizes: vec![],
                    n_rows: 500,
                    base_ctr: 0.25,
                    alpha: 1.0,
                },
            ],
        };
        let run = RunConfig {
            schema: schema_cfg.clone(),
            generator: GeneratorConfig::default(),
            train: TrainConfig {
                model: ModelConfig {
                    embedding_dim: 4,
                    attention_hidden: 4,
                    ..ModelConfig::default()
                },
                batch_size: 64,
                steps: 30,
                scheduling: Scheduling::RoundRobin,
                ..TrainConfig::default()
            },
            experiment: ExperimentConfig {
                sources: vec![0],
                targets: vec![1],
                seeds: vec![0, 1],
            },
        };
        let schema = build_schema(&schema_cfg).unwrap();
        (run, schema)
    }

    #[test]
    fn task_numbers_round_trip_and_bad_task_errors() {
        for n in 1..=4u8 {
            assert_eq!(Task::from_number(n).unwrap().number(), n);
        }
        assert!(matches!(
            Task::from_number(5),
            Err(ExperimentError::UnknownTask(5))
        ));
    }

    #[test]
    fn single_source_task_produces_expected_grid() {
        let (run, schema) = tiny_run();
        let (datasets, _) = generate(&schema, &run.generator, 3);
        let result = run_experiment(Task::SingleSource, &schema, &datasets, &run).unwrap();

        // 2 seeds x (Base + CDTM-S0) on one target
        assert_eq!(result.rows.len(), 4);
        assert!(result.rows.iter().all(|r| r.domain_id == 1));
        assert_eq!(
            result.summary.iter().map(|s| s.model_tag.as_str()).collect::<Vec<_>>(),
            vec!["Base", "CDTM-S0"]
        );
        let base = &result.summary[0];
        assert!(base.mean_imp_pct.is_none());
        let cdtm = &result.summary[1];
        assert_eq!(cdtm.n_seeds, 2);
        assert!(cdtm.mean_imp_pct.is_some());
        assert_eq!(result.config_fingerprint, run.fingerprint());
    }

    #[test]
    fn reruns_render_byte_identical_reports() {
        let (run, schema) = tiny_run();
        let (datasets, _) = generate(&schema, &run.generator, 3);
        let a = run_experiment(Task::SingleSource, &schema, &datasets, &run).unwrap();
        let b = run_experiment(Task::SingleSource, &schema, &datasets, &run).unwrap();
        assert_eq!(render_csv(&a), render_csv(&b));
        assert_eq!(render_json(&a), render_json(&b));
    }

    #[test]
    fn csv_layout_has_auc_imp_pairs() {
        let (run, schema) = tiny_run();
        let (datasets, _) = generate(&schema, &run.generator, 3);
        let result = run_experiment(Task::SingleSource, &schema, &datasets, &run).unwrap();
        let csv = render_csv(&result);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "domain,Base AUC,Base Imp,CDTM-S0 AUC,CDTM-S0 Imp"
        );
        let row = lines.next().unwrap();
        assert!(row.starts_with("1,0."), "{row}");
        assert!(row.ends_with('%'), "{row}");
    }

    #[test]
    fn imp_formatting_matches_published_rounding() {
        let result = ExperimentResult {
            task: 1,
            config_fingerprint: "x".into(),
            rows: vec![],
            summary: vec![
                SummaryRow {
                    domain_id: 0,
                    model_tag: BASE_TAG.into(),
                    n_seeds: 1,
                    mean_auc: 0.5778,
                    std_auc: 0.0,
                    mean_imp_pct: None,
                    std_imp_pct: None,
                },
                SummaryRow {
                    domain_id: 0,
                    model_tag: "CDTM".into(),
                    n_seeds: 1,
                    mean_auc: 0.5987,
                    std_auc: 0.0,
                    mean_imp_pct: Some(improvement_pct(0.5987, 0.5778).unwrap()),
                    std_imp_pct: Some(0.0),
                },
            ],
            negative_transfer: vec![],
        };
        let csv = render_csv(&result);
        assert!(csv.contains("3.62%"), "{csv}");
        assert!(csv.contains("0.5987"), "{csv}");
    }
}
