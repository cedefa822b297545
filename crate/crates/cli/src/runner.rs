//! Expands a config into runs, executes them on a worker pool and streams
//! results to disk in plan order.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use anyhow::{Context, Result};
use inclearn::data::{load_csv, split, synthetic_gaussians, FeatureDataset, Standardizer};
use inclearn::engine::{
    generate_task_sequences, run_incremental, run_offline_upper_bound, RunConfig, RunRecord,
    TaskSequence, OFFLINE_METHOD,
};
use inclearn::losses::Method;
use inclearn::metrics::MetricsRow;

use crate::config::{DataSource, ExperimentConfig};
use crate::report::{report, RunStatus, METRICS_FILE, RUNS_FILE, STATUS_FAILED, STATUS_OK};

pub const OUTPUT_DIR_ENV: &str = "INCLEARN_OUTPUT_DIR";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const CONFIG_COPY: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunKind {
    Incremental { method: Method, holdout: usize },
    Offline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedRun {
    pub order: usize,
    pub kind: RunKind,
}

impl PlannedRun {
    pub fn method_name(&self) -> &'static str {
        match self.kind {
            RunKind::Incremental { method, .. } => method.name(),
            RunKind::Offline => OFFLINE_METHOD,
        }
    }

    pub fn holdout(&self) -> usize {
        match self.kind {
            RunKind::Incremental { holdout, .. } => holdout,
            RunKind::Offline => 0,
        }
    }
}

/// Order-major cross product of orders × methods × S, offline run last per order.
pub fn plan(config: &ExperimentConfig) -> Vec<PlannedRun> {
    let mut runs = Vec::new();
    for order in 0..config.n_orders {
        for &method in &config.methods {
            for &holdout in &config.holdouts {
                runs.push(PlannedRun {
                    order,
                    kind: RunKind::Incremental { method, holdout },
                });
            }
        }
        if config.offline {
            runs.push(PlannedRun {
                order,
                kind: RunKind::Offline,
            });
        }
    }
    runs
}

/// Train and test sides after splitting and optional standardisation.
pub fn load_data(config: &ExperimentConfig) -> Result<(FeatureDataset, FeatureDataset)> {
    let ds = &config.dataset;
    let (mut train, mut test) = match &ds.source {
        DataSource::Csv { path, schema } => {
            let full =
                load_csv(path, schema).with_context(|| format!("loading {}", path.display()))?;
            let s = split(&full, &ds.split)?;
            (s.train, s.test)
        }
        DataSource::Files {
            train,
            test,
            schema,
        } => {
            let tr =
                load_csv(train, schema).with_context(|| format!("loading {}", train.display()))?;
            let schema = inclearn::data::CsvSchema {
                class_names: Some(tr.class_names().to_vec()),
                ..schema.clone()
            };
            let te =
                load_csv(test, &schema).with_context(|| format!("loading {}", test.display()))?;
            (tr, te)
        }
        DataSource::Synthetic(spec) => {
            let full = synthetic_gaussians(spec)?;
            let s = split(&full, &ds.split)?;
            (s.train, s.test)
        }
    };
    if ds.standardize {
        let st = Standardizer::fit(&train)?;
        st.apply(&mut train)?;
        st.apply(&mut test)?;
    }
    Ok((train, test))
}

/// Classes with training and test samples; others are dropped with a warning.
pub fn usable_classes(train: &FeatureDataset, test: &FeatureDataset) -> Vec<usize> {
    (0..train.n_classes())
        .filter(|&c| {
            let ok = train.labels().contains(&c) && test.labels().contains(&c);
            if !ok {
                log::warn!(
                    "class `{}` lacks train or test samples and is left out",
                    train.class_names()[c]
                );
            }
            ok
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub planned: usize,
    pub failed: usize,
}

fn execute(
    run: &PlannedRun,
    sequences: &[TaskSequence],
    train: &FeatureDataset,
    test: &FeatureDataset,
    config: &ExperimentConfig,
) -> RunRecord {
    let sequence = &sequences[run.order];
    match run.kind {
        RunKind::Incremental { method, holdout } => {
            let rc = RunConfig {
                hidden: config.network.hidden.clone(),
                train: config.train.clone(),
                loss: config.hyperparameters.loss_config(method),
                holdout,
            };
            run_incremental(train, test, sequence, &rc)
        }
        RunKind::Offline => {
            let rc = RunConfig {
                hidden: config.network.hidden.clone(),
                train: config.train.clone(),
                loss: config.hyperparameters.loss_config(Method::Ce),
                holdout: 0,
            };
            run_offline_upper_bound(train, test, sequence, &rc)
        }
    }
}

struct Sinks {
    metrics: csv::Writer<File>,
    runs: csv::Writer<File>,
    timings: csv::Writer<File>,
}

impl Sinks {
    fn create(dir: &Path) -> Result<Self> {
        let open = |name: &str| -> Result<csv::Writer<File>> {
            let path = dir.join(name);
            let file =
                File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            Ok(csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(file))
        };
        let mut sinks = Self {
            metrics: open(METRICS_FILE)?,
            runs: open(RUNS_FILE)?,
            timings: open(TIMINGS_FILE)?,
        };
        sinks.metrics.write_record([
            "order",
            "step",
            "method",
            "S",
            "overall_micro",
            "overall_macro",
            "base",
            "old",
            "new",
            "forgetting",
        ])?;
        sinks
            .runs
            .write_record(["order", "method", "S", "status", "steps", "message"])?;
        sinks
            .timings
            .write_record(["order", "method", "S", "seconds"])?;
        Ok(sinks)
    }

    fn write(&mut self, run: &PlannedRun, record: &RunRecord, seconds: f64) -> Result<()> {
        for row in &record.rows {
            self.metrics.serialize(row)?;
        }
        self.runs.serialize(RunStatus {
            order: run.order,
            method: run.method_name().to_owned(),
            holdout: run.holdout(),
            status: if record.succeeded() {
                STATUS_OK
            } else {
                STATUS_FAILED
            }
            .to_owned(),
            steps: record.rows.len(),
            message: record.failure.clone().unwrap_or_default(),
        })?;
        self.timings.write_record([
            run.order.to_string(),
            run.method_name().to_owned(),
            run.holdout().to_string(),
            format!("{seconds:.3}"),
        ])?;
        self.metrics.flush()?;
        self.runs.flush()?;
        self.timings.flush()?;
        Ok(())
    }
}

/// Runs the whole plan, writes the raw CSVs, then the summaries.
pub fn run(config: &ExperimentConfig, output_dir: &Path) -> Result<RunOutcome> {
    std::fs::create_dir_all(output_dir)
        .with_context(|| format!("creating {}", output_dir.display()))?;
    std::fs::write(output_dir.join(CONFIG_COPY), config.to_toml())?;
    let (train, test) = load_data(config)?;
    let classes = usable_classes(&train, &test);
    let sequences = generate_task_sequences(&classes, config.n_orders, config.seed)?;
    let planned = plan(config);
    let workers = config
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, planned.len().max(1));
    log::info!(
        "{} runs over {} orders, {} classes, {} train / {} test samples, {workers} workers",
        planned.len(),
        sequences.len(),
        classes.len(),
        train.len(),
        test.len()
    );

    let mut sinks = Sinks::create(output_dir)?;
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, RunRecord, f64)>();
    let failed = std::thread::scope(|scope| -> Result<usize> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, planned, sequences, train, test) =
                (&next, &planned, &sequences, &train, &test);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(run) = planned.get(i) else { break };
                let start = Instant::now();
                let record = execute(run, sequences, train, test, config);
                if tx.send((i, record, start.elapsed().as_secs_f64())).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let writer = scope.spawn(|| -> Result<usize> {
            let mut pending: BTreeMap<usize, (RunRecord, f64)> = BTreeMap::new();
            let mut cursor = 0;
            let mut failed = 0;
            for (i, record, secs) in rx {
                pending.insert(i, (record, secs));
                while let Some((record, secs)) = pending.remove(&cursor) {
                    let run = &planned[cursor];
                    if !record.succeeded() {
                        failed += 1;
                    }
                    log::info!(
                        "[{}/{}] order={} method={} S={} {}",
                        cursor + 1,
                        planned.len(),
                        run.order,
                        run.method_name(),
                        run.holdout(),
                        final_summary(&record)
                    );
                    sinks.write(run, &record, secs)?;
                    cursor += 1;
                }
            }
            Ok(failed)
        });
        writer.join().expect("writer thread panicked")
    })?;

    let fixed = config.fixed_holdout;
    report(output_dir, fixed)?;
    Ok(RunOutcome {
        output_dir: output_dir.to_owned(),
        planned: planned.len(),
        failed,
    })
}

fn final_summary(record: &RunRecord) -> String {
    match (&record.failure, record.final_row()) {
        (Some(e), _) => format!("FAILED: {e}"),
        (
            None,
            Some(MetricsRow {
                overall_micro,
                overall_macro,
                ..
            }),
        ) => {
            format!("micro={overall_micro:.4} macro={overall_macro:.4}")
        }
        (None, None) => "no rows".to_owned(),
    }
}

/// Output directory: explicit override, then the environment, then the config.
pub fn resolve_output_dir(config: &ExperimentConfig, cli_override: Option<&Path>) -> PathBuf {
    if let Some(p) = cli_override {
        return p.to_owned();
    }
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => config.output_dir.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn config(extra: &str) -> ExperimentConfig {
        let text = format!(
            "n_orders = 2\nmethods = [\"CE\", \"LwF\"]\nholdouts = [0, 2]\nfixed_holdout = 2\nworkers = 3\n{extra}\n\
             [network]\nhidden = [6]\n[train]\nepochs = 3\nbatch_size = 10\nlearning_rate = 0.05\nweight_decay = 1e-4\n\
             scheduler = {{ effective_after = 50, step = 40, factor = 0.01 }}\n\
             [dataset.source]\nkind = \"synthetic\"\nn_classes = 4\ndim = 3\nseparation = 4.0\nsamples_per_class = 20\n"
        );
        ExperimentConfig::from_toml(&text, Path::new("t.toml")).unwrap()
    }

    #[test]
    fn plan_covers_cross_product_once() {
        let p = plan(&config(""));
        assert_eq!(p.len(), 2 * (2 * 2 + 1));
        assert_eq!(
            p[4],
            PlannedRun {
                order: 0,
                kind: RunKind::Offline
            }
        );
        assert_eq!(p[5].order, 1);
    }

    #[test]
    fn run_writes_every_planned_run_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config("");
        let out = run(&cfg, dir.path()).unwrap();
        assert_eq!((out.planned, out.failed), (10, 0));
        let statuses = crate::report::read_runs(&dir.path().join(RUNS_FILE)).unwrap();
        let got: Vec<(usize, String, usize)> = statuses
            .iter()
            .map(|s| (s.order, s.method.clone(), s.holdout))
            .collect();
        let want: Vec<(usize, String, usize)> = plan(&cfg)
            .iter()
            .map(|r| (r.order, r.method_name().to_owned(), r.holdout()))
            .collect();
        assert_eq!(got, want);
        for f in [
            "summary.md",
            "summary.csv",
            "forgetting_curves.csv",
            "breakdown.csv",
            "holdout_sweep.csv",
            "divergence.csv",
            "divergence.md",
            CONFIG_COPY,
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn cli_override_beats_config() {
        let cfg = config("output_dir = \"from-config\"");
        assert_eq!(
            resolve_output_dir(&cfg, Some(Path::new("x"))),
            PathBuf::from("x")
        );
    }
}
