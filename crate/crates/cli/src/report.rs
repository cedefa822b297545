//! Summaries computed from `metrics.csv` and `runs.csv` of a results directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use inclearn::engine::OFFLINE_METHOD;
use inclearn::metrics::{divergence_ratio, MetricsRow};
use serde::{Deserialize, Serialize};

pub const METRICS_FILE: &str = "metrics.csv";
pub const RUNS_FILE: &str = "runs.csv";

/// Status line of one planned run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub order: usize,
    pub method: String,
    #[serde(rename = "S")]
    pub holdout: usize,
    pub status: String,
    pub steps: usize,
    pub message: String,
}

pub const STATUS_OK: &str = "ok";
pub const STATUS_FAILED: &str = "failed";

/// Mean and sample standard deviation (0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn aggregate(values: &[f64]) -> Option<Aggregate> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Some(Aggregate { n, mean, std })
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    reader
        .deserialize()
        .collect::<Result<Vec<MetricsRow>, _>>()
        .with_context(|| format!("reading {}", path.display()))
}

pub fn read_runs(path: &Path) -> Result<Vec<RunStatus>> {
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    reader
        .deserialize()
        .collect::<Result<Vec<RunStatus>, _>>()
        .with_context(|| format!("reading {}", path.display()))
}

type RunKey = (String, usize, usize);

/// Rows of every successful run, grouped by `(method, S)` in first-seen order.
struct Grouped {
    methods: Vec<String>,
    /// (method, S) → order → rows sorted by step
    runs: BTreeMap<(String, usize), BTreeMap<usize, Vec<MetricsRow>>>,
}

fn group(rows: Vec<MetricsRow>, failed: &BTreeSet<RunKey>) -> Grouped {
    let mut methods: Vec<String> = Vec::new();
    let mut runs: BTreeMap<(String, usize), BTreeMap<usize, Vec<MetricsRow>>> = BTreeMap::new();
    for row in rows {
        if failed.contains(&(row.method.clone(), row.holdout, row.order)) {
            continue;
        }
        if !methods.contains(&row.method) {
            methods.push(row.method.clone());
        }
        runs.entry((row.method.clone(), row.holdout))
            .or_default()
            .entry(row.order)
            .or_default()
            .push(row);
    }
    for orders in runs.values_mut() {
        for rows in orders.values_mut() {
            rows.sort_by_key(|r| r.step);
        }
    }
    // the joint-training reference goes last
    if let Some(i) = methods.iter().position(|m| m == OFFLINE_METHOD) {
        let m = methods.remove(i);
        methods.push(m);
    }
    Grouped { methods, runs }
}

impl Grouped {
    fn finals(&self, method: &str, holdout: usize) -> Vec<&MetricsRow> {
        self.runs
            .get(&(method.to_owned(), holdout))
            .map(|orders| orders.values().filter_map(|rows| rows.last()).collect())
            .unwrap_or_default()
    }

    fn final_stat(
        &self,
        method: &str,
        holdout: usize,
        f: impl Fn(&MetricsRow) -> f64,
    ) -> Option<Aggregate> {
        aggregate(
            &self
                .finals(method, holdout)
                .into_iter()
                .map(f)
                .collect::<Vec<_>>(),
        )
    }

    fn holdouts_of(&self, method: &str) -> Vec<usize> {
        self.runs
            .keys()
            .filter(|(m, _)| m == method)
            .map(|&(_, s)| s)
            .collect()
    }

    /// Per-step values across orders for one (method, S).
    fn per_step(
        &self,
        method: &str,
        holdout: usize,
        f: impl Fn(&MetricsRow) -> Option<f64>,
    ) -> BTreeMap<usize, Vec<f64>> {
        let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        if let Some(orders) = self.runs.get(&(method.to_owned(), holdout)) {
            for row in orders.values().flatten() {
                let slot = out.entry(row.step).or_default();
                if let Some(v) = f(row) {
                    slot.push(v);
                }
            }
        }
        out
    }
}

/// Which S columns the summary tables compare.
fn summary_holdouts(method: &str, fixed: usize) -> Vec<usize> {
    if method == OFFLINE_METHOD || fixed == 0 {
        vec![0]
    } else {
        vec![0, fixed]
    }
}

fn cell(a: Option<Aggregate>) -> String {
    a.map_or_else(
        || "n/a".to_owned(),
        |a| format!("{:.4} ± {:.4}", a.mean, a.std),
    )
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub runs_found: usize,
    pub failed_runs: usize,
    pub methods: Vec<String>,
}

/// Writes every summary file into `dir` and returns what was found.
pub fn report(dir: &Path, fixed_holdout: usize) -> Result<ReportSummary> {
    let metrics_path = dir.join(METRICS_FILE);
    let rows = if metrics_path.exists() {
        read_metrics(&metrics_path)?
    } else {
        Vec::new()
    };
    let runs_path = dir.join(RUNS_FILE);
    let statuses = if runs_path.exists() {
        read_runs(&runs_path)?
    } else {
        Vec::new()
    };
    let failed: BTreeSet<RunKey> = statuses
        .iter()
        .filter(|s| s.status != STATUS_OK)
        .map(|s| (s.method.clone(), s.holdout, s.order))
        .collect();
    let grouped = group(rows, &failed);
    let runs_found = grouped.runs.values().map(BTreeMap::len).sum();

    write_summary(dir, &grouped, fixed_holdout, runs_found, failed.len())?;
    write_divergence(dir, &grouped, fixed_holdout)?;
    write_holdout_sweep(dir, &grouped)?;
    write_forgetting(dir, &grouped)?;
    write_breakdown(dir, &grouped)?;
    Ok(ReportSummary {
        runs_found,
        failed_runs: failed.len(),
        methods: grouped.methods.clone(),
    })
}

fn csv_writer(dir: &Path, name: &str) -> Result<csv::Writer<std::fs::File>> {
    let path = dir.join(name);
    csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))
}

fn agg_fields(a: Option<Aggregate>) -> [String; 2] {
    match a {
        Some(a) => [a.mean.to_string(), a.std.to_string()],
        None => [String::new(), String::new()],
    }
}

fn write_summary(
    dir: &Path,
    g: &Grouped,
    fixed: usize,
    runs_found: usize,
    failed: usize,
) -> Result<()> {
    let mut w = csv_writer(dir, "summary.csv")?;
    w.write_record([
        "method",
        "S",
        "n",
        "micro_mean",
        "micro_std",
        "macro_mean",
        "macro_std",
    ])?;
    for m in &g.methods {
        for s in summary_holdouts(m, fixed) {
            let micro = g.final_stat(m, s, |r| r.overall_micro);
            let macro_ = g.final_stat(m, s, |r| r.overall_macro);
            let mut rec = vec![
                m.clone(),
                s.to_string(),
                micro.map_or(0, |a| a.n).to_string(),
            ];
            rec.extend(agg_fields(micro));
            rec.extend(agg_fields(macro_));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;

    let mut md = String::from("# Summary\n\n");
    if runs_found == 0 {
        md.push_str("No runs found.\n");
    } else {
        let _ = writeln!(
            md,
            "Final-step overall scores, mean ± standard deviation over task orders.\n"
        );
        let _ = writeln!(
            md,
            "| Method | Micro-F1 (S = 0) | Macro-F1 (S = 0) | Micro-F1 (S = {fixed}) | Macro-F1 (S = {fixed}) | Orders |"
        );
        md.push_str("|---|---|---|---|---|---|\n");
        for m in &g.methods {
            let (a0, m0) = (
                g.final_stat(m, 0, |r| r.overall_micro),
                g.final_stat(m, 0, |r| r.overall_macro),
            );
            let (af, mf) = if m == OFFLINE_METHOD {
                (None, None)
            } else {
                (
                    g.final_stat(m, fixed, |r| r.overall_micro),
                    g.final_stat(m, fixed, |r| r.overall_macro),
                )
            };
            let n = a0.or(af).map_or(0, |a| a.n);
            let _ = writeln!(
                md,
                "| {m} | {} | {} | {} | {} | {n} |",
                cell(a0),
                cell(m0),
                cell(af),
                cell(mf)
            );
        }
    }
    if failed > 0 {
        let _ = writeln!(
            md,
            "\n{failed} run(s) failed and are excluded; see `{RUNS_FILE}`."
        );
    }
    std::fs::write(dir.join("summary.md"), md)?;
    Ok(())
}

fn write_divergence(dir: &Path, g: &Grouped, fixed: usize) -> Result<()> {
    let mut w = csv_writer(dir, "divergence.csv")?;
    w.write_record(["method", "S", "micro_mean", "macro_mean", "ratio"])?;
    let mut md = String::from(
        "# Micro/macro divergence\n\n`100 · mean micro-F1 / mean macro-F1` at the final step.\n\n",
    );
    md.push_str(&format!(
        "| Method | S = 0 | S = {fixed} |\n|---|---|---|\n"
    ));
    let ratio_of = |m: &str, s: usize| {
        let micro = g.final_stat(m, s, |r| r.overall_micro).map(|a| a.mean);
        let macro_ = g.final_stat(m, s, |r| r.overall_macro).map(|a| a.mean);
        (
            micro,
            macro_,
            micro.zip(macro_).and_then(|(a, b)| divergence_ratio(a, b)),
        )
    };
    for m in &g.methods {
        let holdouts = summary_holdouts(m, fixed);
        for &s in &holdouts {
            let (micro, macro_, ratio) = ratio_of(m, s);
            w.write_record([
                m.clone(),
                s.to_string(),
                opt(micro),
                opt(macro_),
                opt(ratio),
            ])?;
        }
        let shown = |s: usize| match ratio_of(m, s).2 {
            Some(r) if holdouts.contains(&s) => format!("{r:.2}"),
            _ => "n/a".to_owned(),
        };
        md.push_str(&format!("| {m} | {} | {} |\n", shown(0), shown(fixed)));
    }
    w.flush()?;
    std::fs::write(dir.join("divergence.md"), md)?;
    Ok(())
}

fn write_holdout_sweep(dir: &Path, g: &Grouped) -> Result<()> {
    let mut w = csv_writer(dir, "holdout_sweep.csv")?;
    w.write_record([
        "method",
        "S",
        "n",
        "micro_mean",
        "micro_std",
        "macro_mean",
        "macro_std",
    ])?;
    for m in g.methods.iter().filter(|m| *m != OFFLINE_METHOD) {
        for s in g.holdouts_of(m) {
            let micro = g.final_stat(m, s, |r| r.overall_micro);
            let mut rec = vec![
                m.clone(),
                s.to_string(),
                micro.map_or(0, |a| a.n).to_string(),
            ];
            rec.extend(agg_fields(micro));
            rec.extend(agg_fields(g.final_stat(m, s, |r| r.overall_macro)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_forgetting(dir: &Path, g: &Grouped) -> Result<()> {
    let mut w = csv_writer(dir, "forgetting_curves.csv")?;
    w.write_record(["method", "S", "step", "n", "mean", "std"])?;
    for m in g.methods.iter().filter(|m| *m != OFFLINE_METHOD) {
        for s in g.holdouts_of(m) {
            for (step, values) in g.per_step(m, s, |r| r.forgetting) {
                if let Some(a) = aggregate(&values) {
                    w.write_record([
                        m.clone(),
                        s.to_string(),
                        step.to_string(),
                        a.n.to_string(),
                        a.mean.to_string(),
                        a.std.to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_breakdown(dir: &Path, g: &Grouped) -> Result<()> {
    let mut w = csv_writer(dir, "breakdown.csv")?;
    w.write_record(["method", "S", "step", "n", "base", "old", "new", "overall"])?;
    let mean = |v: &[f64]| aggregate(v).map(|a| a.mean);
    for m in g.methods.iter().filter(|m| *m != OFFLINE_METHOD) {
        for s in g.holdouts_of(m) {
            let base = g.per_step(m, s, |r| r.base);
            let old = g.per_step(m, s, |r| r.old);
            let new = g.per_step(m, s, |r| r.new);
            let overall = g.per_step(m, s, |r| Some(r.overall_micro));
            for (step, values) in &overall {
                w.write_record([
                    m.clone(),
                    s.to_string(),
                    step.to_string(),
                    values.len().to_string(),
                    opt(mean(&base[step])),
                    opt(mean(&old[step])),
                    opt(mean(&new[step])),
                    opt(mean(values)),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
