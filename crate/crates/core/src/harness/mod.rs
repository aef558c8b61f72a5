//! Seeded multi-run experiments with CSV telemetry.
//!
//! Output layout under the chosen directory:
//!
//! ```text
//! plan.toml                  the plan that produced the outputs
//! events/<mode>_seed<s>.csv  one row per optimizer step
//! runs.csv                   one row per (mode, seed)
//! summary.csv                mean and sample std per mode
//! ```

pub mod plan;
pub mod score;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::control::{initial_network, train, RunMode, StepEvent, TrainReport};
use crate::error::{Error, Result};
use crate::task::SyntheticTask;

pub use plan::ExperimentPlan;
pub use score::{efficiency_score, mem_pct};

pub const RUNS_HEADER: [&str; 9] = [
    "mode",
    "seed",
    "accuracy_pct",
    "sim_time_units",
    "peak_mem_bytes",
    "peak_mem_pct",
    "efficiency_score",
    "aborted",
    "event_log",
];

pub const SUMMARY_HEADER: [&str; 10] = [
    "mode",
    "seeds",
    "acc_mean",
    "acc_std",
    "time_mean",
    "time_std",
    "peakmem_mean",
    "peakmem_std",
    "score_mean",
    "score_std",
];

/// Result of one (mode, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub mode: RunMode,
    pub seed: u64,
    pub accuracy_pct: f64,
    pub sim_time_units: f64,
    pub peak_mem_bytes: u64,
    pub peak_mem_pct: f64,
    pub efficiency_score: f64,
    /// Relative to the output directory.
    pub event_log_path: PathBuf,
    pub aborted: Option<String>,
}

impl RunRecord {
    pub fn from_report(
        report: &TrainReport,
        reference_bytes: u64,
        event_log_path: PathBuf,
    ) -> Result<Self> {
        let pct = mem_pct(report.peak_mem_bytes as f64, reference_bytes as f64)?;
        let time = report.sim_time_units;
        Ok(RunRecord {
            mode: report.mode,
            seed: report.seed,
            accuracy_pct: report.accuracy_pct,
            sim_time_units: time,
            peak_mem_bytes: report.peak_mem_bytes,
            peak_mem_pct: pct,
            efficiency_score: efficiency_score(report.accuracy_pct, time, pct)?,
            event_log_path,
            aborted: report.aborted.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub mode: RunMode,
    /// Seeds in ascending order.
    pub seeds: Vec<u64>,
    pub accuracy: MeanStd,
    pub time: MeanStd,
    /// Peak memory as a percentage of the reference.
    pub peak_mem: MeanStd,
    pub score: MeanStd,
}

/// Aggregates records per mode, in the order modes first appear. Records of
/// a mode are combined in ascending seed order, so the result does not
/// depend on the order runs were listed.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut modes: Vec<RunMode> = Vec::new();
    for r in records {
        if !modes.contains(&r.mode) {
            modes.push(r.mode);
        }
    }
    modes
        .into_iter()
        .map(|mode| {
            let mut rs: Vec<&RunRecord> = records.iter().filter(|r| r.mode == mode).collect();
            rs.sort_by_key(|r| r.seed);
            let col = |f: fn(&RunRecord) -> f64| {
                MeanStd::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            SummaryRow {
                mode,
                seeds: rs.iter().map(|r| r.seed).collect(),
                accuracy: col(|r| r.accuracy_pct),
                time: col(|r| r.sim_time_units),
                peak_mem: col(|r| r.peak_mem_pct),
                score: col(|r| r.efficiency_score),
            }
        })
        .collect()
}

fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// Per-step telemetry as CSV.
///
/// Columns: `step, loss, batch, usage_bytes, precision_l<i>..., lr_l<i>...,
/// curvature_event, recovery, control_phases`. `control_phases` lists the
/// phases of a control tick in execution order, separated by `>`, and is
/// empty on steps without a tick.
pub fn write_event_log<W: std::io::Write>(writer: W, events: &[StepEvent]) -> Result<()> {
    let layers = events.first().map_or(0, |e| e.layers.len());
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["step", "loss", "batch", "usage_bytes"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..layers).map(|l| format!("precision_l{l}")));
    header.extend((0..layers).map(|l| format!("lr_l{l}")));
    header.extend(
        ["curvature_event", "recovery", "control_phases"]
            .iter()
            .map(|s| s.to_string()),
    );
    w.write_record(&header)?;
    for e in events {
        let mut rec: Vec<String> = vec![
            e.step.to_string(),
            fmt_f64(e.loss),
            e.batch.to_string(),
            e.usage.to_string(),
        ];
        rec.extend(e.layers.iter().map(|s| s.precision.to_string()));
        rec.extend(e.layers.iter().map(|s| fmt_f64(s.effective_lr)));
        rec.push(u8::from(e.curvature_event()).to_string());
        rec.push(u8::from(e.recovery).to_string());
        rec.push(
            e.tick
                .as_ref()
                .map(|t| {
                    t.phases
                        .iter()
                        .map(|p| p.as_str())
                        .collect::<Vec<_>>()
                        .join(">")
                })
                .unwrap_or_default(),
        );
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<event log>", e))?;
    Ok(())
}

pub fn write_runs<W: std::io::Write>(writer: W, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RUNS_HEADER)?;
    for r in records {
        w.write_record([
            r.mode.to_string(),
            r.seed.to_string(),
            fmt_f64(r.accuracy_pct),
            fmt_f64(r.sim_time_units),
            r.peak_mem_bytes.to_string(),
            fmt_f64(r.peak_mem_pct),
            fmt_f64(r.efficiency_score),
            r.aborted.clone().unwrap_or_default(),
            r.event_log_path.to_string_lossy().replace('\\', "/"),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<runs>", e))?;
    Ok(())
}

pub fn write_summary<W: std::io::Write>(writer: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        let seeds = r
            .seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            r.mode.to_string(),
            seeds,
            fmt_f64(r.accuracy.mean),
            fmt_f64(r.accuracy.std),
            fmt_f64(r.time.mean),
            fmt_f64(r.time.std),
            fmt_f64(r.peak_mem.mean),
            fmt_f64(r.peak_mem.std),
            fmt_f64(r.score.mean),
            fmt_f64(r.score.std),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<summary>", e))?;
    Ok(())
}

/// Human-readable summary table.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<24} {:>16} {:>22} {:>16} {:>16}",
        "mode", "acc (%)", "sim time", "peak mem (%)", "score"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<24} {:>7.2} ± {:<6.2} {:>11.4e} ± {:<8.2e} {:>7.2} ± {:<6.2} {:>7.3e} ± {:<6.1e}",
            r.mode.as_str(),
            r.accuracy.mean,
            r.accuracy.std,
            r.time.mean,
            r.time.std,
            r.peak_mem.mean,
            r.peak_mem.std,
            r.score.mean,
            r.score.std
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub records: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
    pub out_dir: PathBuf,
}

impl ExperimentOutcome {
    pub fn any_aborted(&self) -> bool {
        self.records.iter().any(|r| r.aborted.is_some())
    }
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn event_log_name(mode: RunMode, seed: u64) -> PathBuf {
    Path::new("events").join(format!("{}_seed{seed}.csv", mode.as_str()))
}

/// Runs one (mode, seed) pair and writes its event log under `out_dir`.
pub fn run_one(
    plan: &ExperimentPlan,
    task: &SyntheticTask,
    mode: RunMode,
    seed: u64,
    out_dir: &Path,
) -> Result<(RunRecord, TrainReport)> {
    let settings = plan.settings();
    let mut net = initial_network(task, &settings, seed)?;
    let report = train(&mut net, task, &settings, mode, seed)?;
    let rel = event_log_name(mode, seed);
    write_file(&out_dir.join(&rel), |buf| {
        write_event_log(buf, &report.events)
    })?;
    let record = RunRecord::from_report(&report, plan.mem_reference(), rel)?;
    Ok((record, report))
}

/// Executes every (mode, seed) pair of `plan` and writes all artifacts.
///
/// The output directory is created and checked for writability before any
/// run starts.
pub fn run_experiment(plan: &ExperimentPlan, out_dir: &Path) -> Result<ExperimentOutcome> {
    plan.validate()?;
    let events_dir = out_dir.join("events");
    fs::create_dir_all(&events_dir).map_err(|e| Error::io(&events_dir, e))?;
    plan.save(&out_dir.join("plan.toml"))?;

    let task = SyntheticTask::generate(&plan.task)?;
    let jobs: Vec<(RunMode, u64)> = plan
        .plan
        .modes
        .iter()
        .flat_map(|&m| plan.plan.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.plan.workers)
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
    let records: Vec<RunRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|&(mode, seed)| run_one(plan, &task, mode, seed, out_dir).map(|(r, _)| r))
            .collect::<Result<Vec<_>>>()
    })?;

    let summary = summarize(&records);
    write_file(&out_dir.join("runs.csv"), |buf| write_runs(buf, &records))?;
    write_file(&out_dir.join("summary.csv"), |buf| {
        write_summary(buf, &summary)
    })?;
    Ok(ExperimentOutcome {
        records,
        summary,
        out_dir: out_dir.to_path_buf(),
    })
}

/// One line of a re-scored CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Rescored {
    pub label: String,
    pub stored: f64,
    pub recomputed: f64,
    /// `Some(ok)` when the stored value must equal the recomputed one
    /// (per-run rows); `None` for summary rows, whose stored value is a mean
    /// of per-run scores.
    pub consistent: Option<bool>,
}

/// Relative tolerance for stored-versus-recomputed scores.
pub const RESCORE_TOLERANCE: f64 = 1e-9;

/// Recomputes efficiency scores from a `runs.csv` or `summary.csv`.
pub fn rescore(path: &Path) -> Result<Vec<Rescored>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::config(format!("{}: {other:?}", path.display())),
    })?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let parse = |rec: &csv::StringRecord, idx: usize| -> Result<f64> {
        rec.get(idx)
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| {
                Error::config(format!(
                    "{}: bad numeric field in column {idx}",
                    path.display()
                ))
            })
    };
    let mut out = Vec::new();
    if let (Some(mode), Some(seed), Some(acc), Some(time), Some(pct), Some(score)) = (
        col("mode"),
        col("seed"),
        col("accuracy_pct"),
        col("sim_time_units"),
        col("peak_mem_pct"),
        col("efficiency_score"),
    ) {
        for rec in rdr.records() {
            let rec = rec?;
            let stored = parse(&rec, score)?;
            let recomputed =
                efficiency_score(parse(&rec, acc)?, parse(&rec, time)?, parse(&rec, pct)?)?;
            let ok = (stored - recomputed).abs() <= RESCORE_TOLERANCE * recomputed.abs();
            out.push(Rescored {
                label: format!("{} seed {}", &rec[mode], &rec[seed]),
                stored,
                recomputed,
                consistent: Some(ok),
            });
        }
    } else if let (Some(mode), Some(acc), Some(time), Some(pct), Some(score)) = (
        col("mode"),
        col("acc_mean"),
        col("time_mean"),
        col("peakmem_mean"),
        col("score_mean"),
    ) {
        for rec in rdr.records() {
            let rec = rec?;
            out.push(Rescored {
                label: rec[mode].to_string(),
                stored: parse(&rec, score)?,
                recomputed: efficiency_score(
                    parse(&rec, acc)?,
                    parse(&rec, time)?,
                    parse(&rec, pct)?,
                )?,
                consistent: None,
            });
        }
    } else {
        return Err(Error::config(format!(
            "{}: neither a runs nor a summary CSV",
            path.display()
        )));
    }
    Ok(out)
}
