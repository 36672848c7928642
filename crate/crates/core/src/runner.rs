//! Runs configured experiments and writes their results.
//!
//! Output directory layout:
//!
//! - `run_seed<N>.csv`: one row per (epoch, task) with columns
//!   `epoch, task_id, mean_loss, conflict_fraction, mean_cosine, prob_assigned, wallclock_s`.
//!   `conflict_fraction` and `mean_cosine` are per epoch and repeat on every
//!   task row of that epoch.
//! - `summary.json`: see [`Summary`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::harness::{train, Divergence, MetricsRecord, TrainOutcome};
use crate::problem::make_problem;
use crate::rng::RNG_ALGORITHM;
use crate::weighting::TaskDistribution;
use crate::{Error, Result};

pub const SUMMARY_FILE: &str = "summary.json";
pub const CSV_COLUMNS: [&str; 7] =
    ["epoch", "task_id", "mean_loss", "conflict_fraction", "mean_cosine", "prob_assigned", "wallclock_s"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub epoch: usize,
    pub task_id: usize,
    pub mean_loss: f64,
    pub conflict_fraction: f64,
    pub mean_cosine: f64,
    pub prob_assigned: f64,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub csv: String,
    /// Held-out loss per task; absent when the run diverged.
    pub final_losses: Option<Vec<f64>>,
    pub diverged: Option<Divergence>,
    pub epochs_completed: usize,
    pub distribution_history: Vec<TaskDistribution>,
}

/// Mean and sample standard deviation across completed runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub completed_runs: usize,
    pub final_loss_mean: Vec<f64>,
    pub final_loss_std: Vec<f64>,
    pub summed_loss_mean: Option<f64>,
    pub summed_loss_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub rng_algorithm: String,
    pub config: ExperimentConfig,
    pub runs: Vec<RunSummary>,
    pub aggregate: Aggregate,
}

impl Summary {
    pub fn all_completed(&self) -> bool {
        self.runs.iter().all(|r| r.diverged.is_none())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub summary: Summary,
    pub summary_path: PathBuf,
}

impl RunReport {
    /// 0 iff every repeat finished without diverging.
    pub fn exit_code(&self) -> i32 {
        if self.summary.all_completed() {
            0
        } else {
            1
        }
    }
}

fn csv_name(seed: u64) -> String {
    format!("run_seed{seed}.csv")
}

/// Executes every repeat of `config`, in parallel threads, and writes one CSV
/// per run plus the summary. Output files are opened before any training so
/// an unwritable destination fails fast.
pub fn run(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let dir = &config.output;
    fs::create_dir_all(dir).map_err(|e| io_context(e, dir))?;
    let summary_path = dir.join(SUMMARY_FILE);
    let summary_file = fs::File::create(&summary_path).map_err(|e| io_context(e, &summary_path))?;

    let seeds: Vec<u64> = config.run_seeds().collect();
    let mut writers = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let path = dir.join(csv_name(seed));
        let file = fs::File::create(&path).map_err(|e| io_context(e, &path))?;
        writers.push(csv::WriterBuilder::new().has_headers(false).from_writer(file));
    }

    let outcomes: Vec<Result<TrainOutcome>> = std::thread::scope(|s| {
        let handles: Vec<_> =
            seeds.iter().zip(writers).map(|(&seed, writer)| s.spawn(move || run_one(config, seed, writer))).collect();
        handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
    });

    let mut runs = Vec::with_capacity(seeds.len());
    for (seed, outcome) in seeds.iter().zip(outcomes) {
        let outcome = outcome?;
        runs.push(RunSummary {
            seed: *seed,
            csv: csv_name(*seed),
            final_losses: outcome.diverged.is_none().then(|| outcome.final_losses.clone()),
            epochs_completed: outcome.records.len(),
            distribution_history: outcome.distribution_history(),
            diverged: outcome.diverged,
        });
    }

    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        rng_algorithm: RNG_ALGORITHM.to_string(),
        config: config.clone(),
        aggregate: aggregate(&runs, config.problem.task_count),
        runs,
    };
    let mut out = std::io::BufWriter::new(summary_file);
    serde_json::to_writer_pretty(&mut out, &summary)?;
    std::io::Write::write_all(&mut out, b"\n")?;
    Ok(RunReport { summary, summary_path })
}

fn io_context(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn run_one(config: &ExperimentConfig, seed: u64, mut writer: csv::Writer<fs::File>) -> Result<TrainOutcome> {
    let (learner, problem) = make_problem(config.problem.clone(), seed)?;
    let mut policy = config.build_policy()?;
    let outcome = train(learner, &problem, &mut policy, &config.train_options(seed))?;
    writer.write_record(CSV_COLUMNS)?;
    for row in records_to_rows(&outcome.records) {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(outcome)
}

pub fn records_to_rows(records: &[MetricsRecord]) -> Vec<CsvRow> {
    records
        .iter()
        .flat_map(|r| {
            r.per_task_mean_loss.iter().enumerate().map(move |(task, &loss)| CsvRow {
                epoch: r.epoch,
                task_id: task,
                mean_loss: loss,
                conflict_fraction: r.conflict_fraction,
                mean_cosine: r.mean_pairwise_cosine,
                prob_assigned: r.distribution_used.prob(task),
                wallclock_s: r.wallclock_seconds,
            })
        })
        .collect()
}

/// Reassembles per-epoch records from a run CSV.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut records: Vec<MetricsRecord> = Vec::new();
    let mut probs: Vec<Vec<f64>> = Vec::new();
    for row in reader.deserialize::<CsvRow>() {
        let row = row?;
        let expected_task = match records.last() {
            Some(r) if r.epoch == row.epoch => r.per_task_mean_loss.len(),
            _ => {
                if row.epoch != records.len() {
                    return Err(Error::InvalidArgument(format!(
                        "unexpected epoch {} in {}",
                        row.epoch,
                        path.display()
                    )));
                }
                records.push(MetricsRecord {
                    epoch: row.epoch,
                    per_task_mean_loss: Vec::new(),
                    conflict_fraction: row.conflict_fraction,
                    mean_pairwise_cosine: row.mean_cosine,
                    distribution_used: TaskDistribution::uniform(2)?,
                    wallclock_seconds: row.wallclock_s,
                });
                probs.push(Vec::new());
                0
            }
        };
        if row.task_id != expected_task {
            return Err(Error::InvalidArgument(format!(
                "epoch {}: expected task {expected_task}, got {}",
                row.epoch, row.task_id
            )));
        }
        records.last_mut().expect("pushed above").per_task_mean_loss.push(row.mean_loss);
        probs.last_mut().expect("pushed above").push(row.prob_assigned);
    }
    for (record, p) in records.iter_mut().zip(probs) {
        record.distribution_used = TaskDistribution::new(p)?;
    }
    Ok(records)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate(runs: &[RunSummary], task_count: usize) -> Aggregate {
    let done: Vec<&Vec<f64>> = runs.iter().filter_map(|r| r.final_losses.as_ref()).collect();
    if done.is_empty() {
        return Aggregate {
            completed_runs: 0,
            final_loss_mean: Vec::new(),
            final_loss_std: Vec::new(),
            summed_loss_mean: None,
            summed_loss_std: None,
        };
    }
    let (means, stds) = (0..task_count).map(|t| mean_std(&done.iter().map(|l| l[t]).collect::<Vec<_>>())).unzip();
    let (sm, ss) = mean_std(&done.iter().map(|l| l.iter().sum()).collect::<Vec<f64>>());
    Aggregate {
        completed_runs: done.len(),
        final_loss_mean: means,
        final_loss_std: stds,
        summed_loss_mean: Some(sm),
        summed_loss_std: Some(ss),
    }
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let text = fs::read_to_string(path).map_err(|e| io_context(e, path))?;
    Ok(serde_json::from_str(&text)?)
}

/// `(new - base) / base * 100`, rounded to one decimal; `None` when base is 0.
pub fn percent_delta(base: f64, new: f64) -> Option<f64> {
    if base == 0.0 {
        return None;
    }
    let raw = (new - base) / base * 100.0;
    // round half away from zero at one decimal, then clear a negative zero
    Some((raw * 10.0).round() / 10.0 + 0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub label: String,
    pub mean: f64,
    pub std: f64,
    pub delta_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparedSummary {
    pub path: PathBuf,
    pub method: String,
    /// Per-task rows followed by the summed loss.
    pub rows: Vec<CompareRow>,
}

/// Final-loss means and stddevs of each summary, with percent deltas relative
/// to the first.
pub fn compare(paths: &[PathBuf]) -> Result<Vec<ComparedSummary>> {
    if paths.len() < 2 {
        return Err(Error::Usage(format!("compare needs at least 2 summary files, got {}", paths.len())));
    }
    let summaries = paths.iter().map(|p| read_summary(p)).collect::<Result<Vec<_>>>()?;
    let base = &summaries[0];
    for (path, s) in paths.iter().zip(&summaries).skip(1) {
        if s.config.problem != base.config.problem {
            return Err(Error::SummaryMismatch(format!(
                "{} uses a different problem than {}",
                path.display(),
                paths[0].display()
            )));
        }
    }
    let stats = |s: &Summary| -> Result<Vec<(String, f64, f64)>> {
        let a = &s.aggregate;
        let (Some(sm), Some(ss)) = (a.summed_loss_mean, a.summed_loss_std) else {
            return Err(Error::SummaryMismatch("summary has no completed runs".into()));
        };
        let mut rows: Vec<(String, f64, f64)> = a
            .final_loss_mean
            .iter()
            .zip(&a.final_loss_std)
            .enumerate()
            .map(|(t, (&m, &sd))| (format!("task {t}"), m, sd))
            .collect();
        rows.push(("summed".into(), sm, ss));
        Ok(rows)
    };
    let base_rows = stats(base)?;
    paths
        .iter()
        .zip(&summaries)
        .map(|(path, s)| {
            let rows = stats(s)?
                .into_iter()
                .zip(&base_rows)
                .map(|((label, mean, std), (_, b, _))| CompareRow {
                    label,
                    mean,
                    std,
                    delta_pct: percent_delta(*b, mean),
                })
                .collect();
            Ok(ComparedSummary { path: path.clone(), method: method_label(&s.config), rows })
        })
        .collect()
}

fn method_label(c: &ExperimentConfig) -> String {
    let method = serde_json::to_value(c.method).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
    match &c.policy {
        Some(p) if c.method == crate::harness::Method::Wpcgrad => {
            let kind =
                serde_json::to_value(p).ok().and_then(|v| v.get("kind").and_then(|k| k.as_str().map(str::to_owned)));
            format!("{method}+{}", kind.unwrap_or_default())
        }
        _ => method,
    }
}

pub fn render_comparison(compared: &[ComparedSummary]) -> String {
    let mut out = String::new();
    for c in compared {
        out.push_str(&format!("{} ({})\n", c.path.display(), c.method));
        for row in &c.rows {
            let delta = match row.delta_pct {
                Some(d) => format!("{d:+.1}%"),
                None => "n/a".into(),
            };
            out.push_str(&format!("  {:<8} {:>12.6} ± {:<10.6} {delta}\n", row.label, row.mean, row.std));
        }
    }
    out
}
