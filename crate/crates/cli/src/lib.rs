//! Commands behind the `fedval` binary: single runs, strategy comparisons
//! and the selection-probability calculator.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use fedval_core::metrics::write_csv;
use fedval_core::orchestrator::{malicious_round_probability, Cutoff, RoundProbability, TaskSpec};
use fedval_core::{run_experiment, ExperimentConfig, ExperimentResult, MetricRecord, MlpSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const METRICS_FILE: &str = "metrics.csv";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const MODEL_FILE: &str = "final_model.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const COMBINED_FILE: &str = "combined.csv";

/// A failed command, split by who has to fix it.
#[derive(Debug)]
pub enum CliError {
    /// Bad input: config, flags or data. Exit code 1.
    Validation(String),
    /// The run itself failed, or the file system did. Exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<fedval_core::Error> for CliError {
    fn from(e: fedval_core::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

fn io_error(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Artifact file names, relative to the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub config: String,
    pub metrics: String,
    pub rounds: String,
    pub final_model: String,
}

/// Summary of one finished run, written as `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub strategy: String,
    /// `sha256:` digest of the canonical config text.
    pub config_hash: String,
    pub rounds: usize,
    pub artifacts: Artifacts,
    pub duration_seconds: f64,
}

/// Serialized form of the final global model.
#[derive(Serialize, Deserialize)]
pub struct FinalModel {
    pub model: MlpSpec,
    pub params: Vec<f64>,
}

/// Reads and validates a config file.
pub fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let config = ExperimentConfig::from_toml_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    config
        .validate()
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok(config)
}

/// Canonical config text: every default filled in, fixed key order.
pub fn canonical_toml(config: &ExperimentConfig) -> CliResult<String> {
    Ok(config.to_toml_string()?)
}

pub fn config_hash(canonical: &str) -> String {
    format!(
        "sha256:{}",
        hex::encode(Sha256::digest(canonical.as_bytes()))
    )
}

/// Makes a relative CSV path relative to the directory holding the config.
fn resolve_paths(config: &ExperimentConfig, config_dir: &Path) -> ExperimentConfig {
    let mut out = config.clone();
    if let TaskSpec::Csv { path, .. } = &mut out.task {
        if path.is_relative() {
            *path = config_dir.join(&*path);
        }
    }
    out
}

fn config_dir(config_path: &Path) -> PathBuf {
    config_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write_file(
    path: &Path,
    write: impl FnOnce(&mut BufWriter<File>) -> CliResult<()>,
) -> CliResult<()> {
    let file = File::create(path).map_err(|e| io_error(path, e))?;
    let mut w = BufWriter::new(file);
    write(&mut w)?;
    w.flush().map_err(|e| io_error(path, e))
}

fn json_line<T: Serialize>(w: &mut impl Write, value: &T, path: &Path) -> CliResult<()> {
    serde_json::to_writer(&mut *w, value).map_err(|e| io_error(path, e))?;
    w.write_all(b"\n").map_err(|e| io_error(path, e))
}

/// Runs `config` and writes every artifact into `out_dir`.
///
/// `config` is hashed as given; `config_dir` only anchors relative data
/// paths, so moving a config and its data together keeps the hash.
pub fn execute(
    config: &ExperimentConfig,
    config_dir: &Path,
    out_dir: &Path,
    workers: usize,
) -> CliResult<(RunManifest, ExperimentResult)> {
    let canonical = canonical_toml(config)?;
    let runnable = resolve_paths(config, config_dir);
    create_dir(out_dir)?;
    let started = Instant::now();
    let result = run_experiment(&runnable, workers)?;
    let duration_seconds = started.elapsed().as_secs_f64();

    let config_path = out_dir.join(CONFIG_FILE);
    fs::write(&config_path, &canonical).map_err(|e| io_error(&config_path, e))?;

    let metrics_path = out_dir.join(METRICS_FILE);
    write_file(&metrics_path, |w| Ok(write_csv(&result.records, w)?))?;

    let rounds_path = out_dir.join(ROUNDS_FILE);
    write_file(&rounds_path, |w| {
        result
            .logs
            .iter()
            .try_for_each(|log| json_line(w, log, &rounds_path))
    })?;

    let model_path = out_dir.join(MODEL_FILE);
    let model = FinalModel {
        model: config.model.clone(),
        params: result.final_model.as_slice().to_vec(),
    };
    write_file(&model_path, |w| json_line(w, &model, &model_path))?;

    let manifest = RunManifest {
        tool: "fedval".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        strategy: config.strategy.kind.name().into(),
        config_hash: config_hash(&canonical),
        rounds: config.rounds,
        artifacts: Artifacts {
            config: CONFIG_FILE.into(),
            metrics: METRICS_FILE.into(),
            rounds: ROUNDS_FILE.into(),
            final_model: MODEL_FILE.into(),
        },
        duration_seconds,
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    write_file(&manifest_path, |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest)
            .map_err(|e| io_error(&manifest_path, e))?;
        w.write_all(b"\n").map_err(|e| io_error(&manifest_path, e))
    })?;
    Ok((manifest, result))
}

/// `fedval run`.
pub fn cmd_run(config_path: &Path, out_dir: &Path, workers: usize) -> CliResult<RunManifest> {
    let config = load_config(config_path)?;
    Ok(execute(&config, &config_dir(config_path), out_dir, workers)?.0)
}

/// One strategy of a comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareEntry {
    pub strategy: String,
    pub dir: String,
    pub manifest: RunManifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareManifest {
    pub runs: Vec<CompareEntry>,
    pub combined: String,
}

/// Directory name for a strategy override such as `fedprox:2`.
pub fn strategy_dir(strategy: &str) -> String {
    strategy
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '.' {
                c
            } else {
                '-'
            }
        })
        .collect()
}

/// Checks the strategy list before any work starts.
pub fn check_strategies(strategies: &[String]) -> CliResult<()> {
    if strategies.is_empty() || strategies.iter().any(|s| s.trim().is_empty()) {
        return Err(CliError::Validation(
            "--strategies needs at least one non-empty name".into(),
        ));
    }
    let mut dirs = BTreeSet::new();
    for s in strategies {
        if !dirs.insert(strategy_dir(s.trim())) {
            return Err(CliError::Validation(format!(
                "strategy {s:?} is listed twice"
            )));
        }
    }
    Ok(())
}

/// Long-format rows `(round, metric, value)` for one record.
pub fn long_rows(record: &MetricRecord) -> Vec<(usize, String, f64)> {
    let r = record.round;
    let mut rows = vec![
        (r, "overall_accuracy".to_string(), record.overall_accuracy),
        (r, "label_accuracy_mad".into(), record.label_accuracy_mad),
        (r, "min_label_accuracy".into(), record.min_label_accuracy()),
    ];
    for (k, a) in record.per_label_accuracy.iter().enumerate() {
        rows.push((r, format!("accuracy_label_{k}"), *a));
    }
    if let Some(groups) = &record.per_group_recall {
        for (g, v) in groups {
            rows.push((r, format!("recall_group_{g}"), *v));
        }
    }
    if let Some(b) = record.backdoor_accuracy {
        rows.push((r, "backdoor_accuracy".into(), b));
    }
    rows.push((
        r,
        "mean_validation_loss".into(),
        record.mean_validation_loss,
    ));
    rows
}

/// `fedval compare`: every strategy on the same data, seeds and attackers.
pub fn cmd_compare(
    config_path: &Path,
    strategies: &[String],
    out_dir: &Path,
    workers: usize,
) -> CliResult<CompareManifest> {
    check_strategies(strategies)?;
    let base = load_config(config_path)?;
    let configs = strategies
        .iter()
        .map(|s| {
            base.with_strategy(s.trim())
                .map(|c| (s.trim().to_string(), c))
        })
        .collect::<Result<Vec<_>, _>>()?;
    create_dir(out_dir)?;
    let dir = config_dir(config_path);
    let combined_path = out_dir.join(COMBINED_FILE);
    let mut combined =
        csv::Writer::from_path(&combined_path).map_err(|e| io_error(&combined_path, e))?;
    combined
        .write_record(["strategy", "round", "metric", "value"])
        .map_err(|e| io_error(&combined_path, e))?;
    let mut runs = Vec::new();
    for (strategy, config) in configs {
        let sub = strategy_dir(&strategy);
        log::info!("running {strategy}");
        let (manifest, result) = execute(&config, &dir, &out_dir.join(&sub), workers)?;
        for record in &result.records {
            for (round, metric, value) in long_rows(record) {
                combined
                    .write_record([
                        strategy.clone(),
                        round.to_string(),
                        metric,
                        value.to_string(),
                    ])
                    .map_err(|e| io_error(&combined_path, e))?;
            }
        }
        runs.push(CompareEntry {
            strategy,
            dir: sub,
            manifest,
        });
    }
    combined.flush().map_err(|e| io_error(&combined_path, e))?;
    let manifest = CompareManifest {
        runs,
        combined: COMBINED_FILE.into(),
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| io_error(&manifest_path, e))?;
    fs::write(&manifest_path, text + "\n").map_err(|e| io_error(&manifest_path, e))?;
    Ok(manifest)
}

/// `fedval prob`: one row per requested round count.
pub fn cmd_prob(
    n_selected: usize,
    p: f64,
    cutoff: Cutoff,
    rounds: &[u64],
) -> CliResult<Vec<RoundProbability>> {
    if rounds.is_empty() {
        return Err(CliError::Validation(
            "--rounds needs at least one value".into(),
        ));
    }
    rounds
        .iter()
        .map(|&r| Ok(malicious_round_probability(n_selected, p, cutoff, r)?))
        .collect()
}

/// Tab-separated table of [`cmd_prob`] rows.
pub fn format_prob_table(rows: &[RoundProbability]) -> String {
    let mut out = String::from("k0\trounds\tper_round_p\tat_least_once_p\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{:.6e}\t{:.6e}\n",
            r.k0, r.rounds, r.per_round, r.at_least_once
        ));
    }
    out
}
