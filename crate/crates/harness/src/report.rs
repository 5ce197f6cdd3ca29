//! Report files.
//!
//! * `report.json`: the full [`ComparisonReport`].
//! * `runs.csv`: one row per run, columns [`RUN_COLUMNS`].
//! * `lr_trace.csv`: per-batch DBS-Adam learning rate, columns [`TRACE_COLUMNS`].
//!
//! Output is a pure function of the report, so re-emitting gives identical bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{HarnessError, Result};
use crate::experiments::ComparisonReport;
use crate::training::RunResult;

pub const REPORT_FILE: &str = "report.json";
pub const RUNS_FILE: &str = "runs.csv";
pub const TRACE_FILE: &str = "lr_trace.csv";

pub const RUN_COLUMNS: [&str; 21] = [
    "group",
    "optimizer",
    "seed",
    "ema_beta",
    "alpha",
    "epochs_run",
    "best_epoch",
    "best_validation_loss",
    "accuracy",
    "precision",
    "recall",
    "f1",
    "macro_precision",
    "macro_recall",
    "macro_f1",
    "test_loss",
    "lr_min",
    "lr_mean",
    "lr_max",
    "train_rows",
    "wall_clock_seconds",
];

pub const TRACE_COLUMNS: [&str; 7] = ["group", "optimizer", "seed", "ema_beta", "alpha", "step", "lr"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn run_row(group: &str, r: &RunResult) -> Vec<String> {
    let m = &r.test_metrics;
    let lr = r.lr_summary.as_ref();
    vec![
        group.to_string(),
        r.optimizer.to_string(),
        r.seed.to_string(),
        opt(r.ema_beta),
        opt(r.alpha),
        r.epochs_run.to_string(),
        r.best_epoch.to_string(),
        r.best_validation_loss.to_string(),
        m.accuracy.to_string(),
        m.weighted_precision.to_string(),
        m.weighted_recall.to_string(),
        m.weighted_f1.to_string(),
        m.macro_precision.to_string(),
        m.macro_recall.to_string(),
        m.macro_f1.to_string(),
        opt(m.mean_loss),
        opt(lr.map(|l| l.min)),
        opt(lr.map(|l| l.mean)),
        opt(lr.map(|l| l.max)),
        r.train_class_counts.iter().sum::<usize>().to_string(),
        r.wall_clock_seconds.to_string(),
    ]
}

fn csv_bytes<I: IntoIterator<Item = Vec<String>>>(header: &[&str], rows: I) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let wrap = |e: csv::Error| HarnessError::Data(format!("csv encoding: {e}"));
    w.write_record(header).map_err(wrap)?;
    for row in rows {
        w.write_record(&row).map_err(wrap)?;
    }
    w.into_inner().map_err(|e| HarnessError::Data(format!("csv encoding: {e}")))
}

pub fn runs_csv(report: &ComparisonReport) -> Result<Vec<u8>> {
    csv_bytes(&RUN_COLUMNS, report.all_runs().map(|(g, r)| run_row(g, r)))
}

pub fn trace_csv(report: &ComparisonReport) -> Result<Vec<u8>> {
    let rows = report.all_runs().flat_map(|(g, r)| {
        r.lr_trace.iter().enumerate().map(move |(step, lr)| {
            vec![
                g.to_string(),
                r.optimizer.to_string(),
                r.seed.to_string(),
                opt(r.ema_beta),
                opt(r.alpha),
                step.to_string(),
                lr.to_string(),
            ]
        })
    });
    csv_bytes(&TRACE_COLUMNS, rows)
}

pub fn report_json(report: &ComparisonReport) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn read_report(path: &Path) -> Result<ComparisonReport> {
    let text = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(serde_json::from_slice(&text)?)
}

/// Writes the three report files into `dir`, creating it if needed.
pub fn emit_report(report: &ComparisonReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let files = [
        (REPORT_FILE, report_json(report)?),
        (RUNS_FILE, runs_csv(report)?),
        (TRACE_FILE, trace_csv(report)?),
    ];
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| HarnessError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

fn pm(s: Option<&dbs_core::evaluation::Summary>) -> String {
    match s {
        Some(s) => format!("{:.4} ± {:.4}", s.mean, s.std.unwrap_or(0.0)),
        None => "-".into(),
    }
}

/// Human-readable summary tables.
pub fn render_text(report: &ComparisonReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", report.name);
    if let Some(load) = &report.load {
        let _ = writeln!(
            out,
            "rows: {} raw, {} dropped (missing), {} dropped (label filter), {} loaded",
            load.raw_rows, load.dropped_missing, load.dropped_by_label_filter, load.loaded
        );
    }
    if !report.aggregates.is_empty() {
        let _ = writeln!(
            out,
            "\n{:<10} {:>5} {:>18} {:>18} {:>18} {:>18}",
            "optimizer", "runs", "accuracy", "precision", "recall", "f1"
        );
        for a in &report.aggregates {
            let _ = writeln!(
                out,
                "{:<10} {:>5} {:>18} {:>18} {:>18} {:>18}",
                a.optimizer.to_string(),
                a.runs,
                pm(a.metrics.get("accuracy")),
                pm(a.metrics.get("precision")),
                pm(a.metrics.get("recall")),
                pm(a.metrics.get("f1")),
            );
        }
    }
    let acc: Vec<_> = report.significance.iter().filter(|s| s.metric == "accuracy").collect();
    if !acc.is_empty() {
        let _ = writeln!(out, "\naccuracy, paired by seed (a − b):");
        for s in acc {
            let r = &s.result;
            let _ = writeln!(
                out,
                "  {:<9} vs {:<9} Δ={:+.4} t={:.3} p={:.4} d={:.3}{}",
                s.a.to_string(),
                s.b.to_string(),
                r.mean_difference,
                r.t_statistic,
                r.p_value,
                r.cohens_d,
                if r.significant { " *" } else { "" }
            );
        }
    }
    if let Some(sweep) = &report.sweep {
        let _ = writeln!(
            out,
            "\n{:>6} {:>5} {:>18} {:>18} {:>18}",
            "beta", "alpha", "accuracy", "precision", "recall"
        );
        for c in &sweep.cells {
            let _ = writeln!(
                out,
                "{:>6} {:>5} {:>18} {:>18} {:>18}",
                c.ema_beta,
                c.alpha,
                pm(c.metrics.get("accuracy")),
                pm(c.metrics.get("precision")),
                pm(c.metrics.get("recall")),
            );
        }
        let _ = writeln!(out, "accuracy spread across cells: {:.4}", sweep.accuracy_spread);
    }
    out
}
