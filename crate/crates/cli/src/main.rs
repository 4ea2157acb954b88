//! `cdtm`: generate synthetic cross-domain click data, train the transfer
//! model, run experiment grids and render reports.
//!
//! Exit codes: 0 success, 1 selftest failure, 2 configuration error,
//! 3 fingerprint mismatch, 4 missing inputs.

mod selftest;

use cdtm_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use cdtm_core::config::{ConfigError, RunConfig};
use cdtm_core::data::{generate, Dataset};
use cdtm_core::dataset_io::{
    read_dataset, sha256_hex_of_file, write_dataset, write_ground_truth,
};
use cdtm_core::experiment::{render_csv, render_json, run_experiment, ExperimentError, Task};
use cdtm_core::schema::GlobalSchema;
use cdtm_core::train::{metrics_csv_header, metrics_csv_row, train, TrainError};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cdtm", about = "Cross-domain CTR transfer model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Directory holding the generated dataset files.
    #[arg(long)]
    data_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic datasets and ground truth described by a config.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        /// Generator seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one joint model over the config's source and target domains.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Output directory for the checkpoint and metrics log.
        #[arg(long)]
        out_dir: PathBuf,
        /// Override the training seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the step count; 0 writes an initialization-only
        /// checkpoint.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run one evaluation task (1-4) across the configured seeds.
    Experiment {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        out_dir: PathBuf,
        /// 1 single-source, 2 multi-source, 3 ablation, 4 joint.
        #[arg(long)]
        task: u8,
    },
    /// Print the stored results of previously run experiments as CSV.
    Report {
        /// Directory holding task result JSON files.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Quick self-check of the numeric core (gradients, metrics, transfer).
    Selftest,
}

enum CliError {
    Selftest(String),
    Config(String),
    Fingerprint(String),
    MissingInput(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Selftest(_) => 1,
            CliError::Config(_) => 2,
            CliError::Fingerprint(_) => 3,
            CliError::MissingInput(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Selftest(m)
            | CliError::Config(m)
            | CliError::Fingerprint(m)
            | CliError::MissingInput(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(_) => CliError::MissingInput(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(_) => CliError::MissingInput(e.to_string()),
            CheckpointError::FingerprintMismatch { .. } => CliError::Fingerprint(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn io_err(context: &str, e: std::io::Error) -> CliError {
    CliError::MissingInput(format!("{context}: {e}"))
}

fn dataset_path(data_dir: &Path, domain_id: usize) -> PathBuf {
    data_dir.join(format!("domain_{domain_id}.cdtmds"))
}

/// Loads the datasets for the given domains, checking that each file was
/// generated against the configured schema.
fn load_datasets(
    data_dir: &Path,
    schema: &GlobalSchema,
    domain_ids: &[usize],
) -> Result<Vec<Dataset>, CliError> {
    let expected = schema.fingerprint();
    let mut out = Vec::new();
    for &id in domain_ids {
        let path = dataset_path(data_dir, id);
        if !path.exists() {
            return Err(CliError::MissingInput(format!(
                "dataset file {} not found; run gen-data first",
                path.display()
            )));
        }
        let (file_schema, ds) = read_dataset(&path).map_err(|e| match e {
            cdtm_core::dataset_io::DatasetIoError::Io(ioe) => {
                io_err(&format!("reading {}", path.display()), ioe)
            }
            other => CliError::Config(format!("{}: {other}", path.display())),
        })?;
        if file_schema.fingerprint() != expected {
            return Err(CliError::Fingerprint(format!(
                "dataset {} was generated with schema {}, config declares {}",
                path.display(),
                file_schema.fingerprint(),
                expected
            )));
        }
        out.push(ds);
    }
    Ok(out)
}

fn unit_domains(run: &RunConfig) -> Vec<usize> {
    let mut ids: Vec<usize> = run
        .experiment
        .sources
        .iter()
        .chain(&run.experiment.targets)
        .copied()
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

fn cmd_gen_data(common: &CommonArgs, seed: u64) -> Result<(), CliError> {
    let (run, schema) = RunConfig::load(&common.config)?;
    std::fs::create_dir_all(&common.data_dir)
        .map_err(|e| io_err("creating data dir", e))?;

    let (datasets, gt) = generate(&schema, &run.generator, seed);
    let mut files = serde_json::Map::new();
    for ds in &datasets {
        let path = dataset_path(&common.data_dir, ds.domain_id);
        write_dataset(&schema, ds, &path)
            .map_err(|e| CliError::Config(format!("writing {}: {e}", path.display())))?;
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        files.insert(
            name,
            sha256_hex_of_file(&path)
                .map_err(|e| CliError::Config(e.to_string()))?
                .into(),
        );
        log::info!(
            "wrote domain {} ({} rows, ctr {:.4})",
            ds.domain_id,
            ds.n_rows(),
            ds.empirical_ctr()
        );
    }
    let gt_path = common.data_dir.join("ground_truth.json");
    write_ground_truth(&gt, &gt_path).map_err(|e| CliError::Config(e.to_string()))?;
    files.insert(
        "ground_truth.json".into(),
        sha256_hex_of_file(&gt_path)
            .map_err(|e| CliError::Config(e.to_string()))?
            .into(),
    );

    let manifest = serde_json::json!({
        "config_fingerprint": run.fingerprint(),
        "schema_fingerprint": schema.fingerprint(),
        "seed": seed,
        "files": files,
    });
    std::fs::write(
        common.data_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| io_err("writing manifest", e))?;
    println!("generated {} datasets in {}", datasets.len(), common.data_dir.display());
    Ok(())
}

fn cmd_train(
    common: &CommonArgs,
    out_dir: &Path,
    seed: Option<u64>,
    steps: Option<u64>,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let (run, schema) = RunConfig::load(&common.config)?;
    let mut config = run.train.clone();
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(n) = steps {
        config.steps = n;
    }
    let ids = unit_domains(&run);
    let datasets = load_datasets(&common.data_dir, &schema, &ids)?;

    let resume_ckpt = match resume {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::MissingInput(format!(
                    "resume checkpoint {} not found",
                    path.display()
                )));
            }
            Some(load_checkpoint(path, Some(&schema.fingerprint()))?)
        }
        None => None,
    };

    let outcome = train(&schema, &datasets, &ids, &config, resume_ckpt.as_ref())
        .map_err(|e| match e {
            TrainError::NonFinite { .. } => CliError::Config(e.to_string()),
            other => CliError::Config(other.to_string()),
        })?;

    std::fs::create_dir_all(out_dir).map_err(|e| io_err("creating out dir", e))?;
    let ckpt = Checkpoint {
        schema_fingerprint: schema.fingerprint(),
        model: config.model.clone(),
        params: outcome.final_params.clone(),
        train_state: Some(outcome.final_state.clone()),
    };
    let ckpt_path = out_dir.join("model.cdtmck");
    save_checkpoint(&ckpt, &ckpt_path)?;

    let mut csv = String::from(metrics_csv_header());
    csv.push('\n');
    for r in &outcome.metrics {
        csv.push_str(&metrics_csv_row(r));
        csv.push('\n');
    }
    std::fs::write(out_dir.join("metrics.csv"), csv)
        .map_err(|e| io_err("writing metrics", e))?;

    match &outcome.best_val_auc {
        Some(aucs) => {
            let summary: Vec<String> = aucs
                .iter()
                .map(|(d, a)| format!("domain {d}: val AUC {a:.4}"))
                .collect();
            println!(
                "trained {} steps; best at step {}; {}",
                config.steps,
                outcome.best_step,
                summary.join(", ")
            );
        }
        None => println!("trained {} steps", config.steps),
    }
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn cmd_experiment(common: &CommonArgs, out_dir: &Path, task_no: u8) -> Result<(), CliError> {
    let task = Task::from_number(task_no)?;
    let (run, schema) = RunConfig::load(&common.config)?;
    let ids = unit_domains(&run);
    let datasets = load_datasets(&common.data_dir, &schema, &ids)?;

    let result = run_experiment(task, &schema, &datasets, &run)?;
    std::fs::create_dir_all(out_dir).map_err(|e| io_err("creating out dir", e))?;

    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .expect("clock after epoch")
        .as_secs();
    let csv_path = out_dir.join(format!("task{task_no}_{stamp}.csv"));
    let json_path = out_dir.join(format!("task{task_no}_{stamp}.json"));
    std::fs::write(&csv_path, render_csv(&result)).map_err(|e| io_err("writing csv", e))?;
    std::fs::write(&json_path, render_json(&result)).map_err(|e| io_err("writing json", e))?;

    for (domain, tag) in &result.negative_transfer {
        println!("warning: negative transfer for domain {domain} under {tag}");
    }
    print!("{}", render_csv(&result));
    println!("report: {}", csv_path.display());
    Ok(())
}

fn cmd_report(out_dir: &Path) -> Result<(), CliError> {
    let entries = std::fs::read_dir(out_dir).map_err(|e| io_err("reading out dir", e))?;
    let mut json_files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && p.file_name()
                    .is_some_and(|n| n.to_string_lossy().starts_with("task"))
        })
        .collect();
    json_files.sort();
    if json_files.is_empty() {
        return Err(CliError::MissingInput(format!(
            "no task result files in {}",
            out_dir.display()
        )));
    }
    for path in json_files {
        let text = std::fs::read_to_string(&path).map_err(|e| io_err("reading result", e))?;
        let result: cdtm_core::experiment::ExperimentResult = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        println!("# task {} ({})", result.task, path.display());
        print!("{}", render_csv(&result));
        for (domain, tag) in &result.negative_transfer {
            println!("warning: negative transfer for domain {domain} under {tag}");
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData { common, seed } => cmd_gen_data(common, *seed),
        Command::Train {
            common,
            out_dir,
            seed,
            steps,
            resume,
        } => cmd_train(common, out_dir, *seed, *steps, resume.as_deref()),
        Command::Experiment {
            common,
            out_dir,
            task,
        } => cmd_experiment(common, out_dir, *task),
        Command::Report { out_dir } => cmd_report(out_dir),
        Command::Selftest => selftest::run_selftest().map_err(CliError::Selftest),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("CDTM_LOG")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
