use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureDataset;
use crate::engine::{ReplayMemory, TaskSequence};
use crate::error::{Error, Result};
use crate::losses::{
    estimate_fisher, mas_importance, objective, reexpress_importance, rwc_rotate, ImportanceKind,
    LossConfig, Method, ParameterImportance, PreviousTasks, RotationContext, TrainingBatch,
};
use crate::metrics::{macro_f1, micro_f1, restricted_micro_f1, AccuracyMatrix, MetricsRow};
use crate::nn::{Matrix, MlpNetwork, OptimizerState, ParamSet, StepScheduler, TeacherSnapshot};

/// Called after every epoch with the epoch index and the current network.
pub type EpochObserver<'a> = &'a mut dyn FnMut(usize, &MlpNetwork);

/// Minibatch SGD settings applied to every task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub scheduler: StepScheduler,
}

impl TrainSettings {
    pub fn ws() -> Self {
        Self {
            epochs: 200,
            batch_size: 15,
            learning_rate: 0.01,
            weight_decay: 1e-4,
            scheduler: StepScheduler {
                effective_after: 50,
                step: 40,
                factor: 0.01,
            },
        }
    }

    pub fn dsads() -> Self {
        Self {
            batch_size: 20,
            scheduler: StepScheduler {
                effective_after: 50,
                step: 50,
                factor: 0.01,
            },
            ..Self::ws()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch size must be positive".into(),
            ));
        }
        if self.scheduler.step == 0 {
            return Err(Error::InvalidConfig(
                "scheduler step must be positive".into(),
            ));
        }
        OptimizerState::new(self.learning_rate, self.weight_decay, self.scheduler).map(|_| ())
    }

    fn optimizer(&self) -> Result<OptimizerState> {
        OptimizerState::new(self.learning_rate, self.weight_decay, self.scheduler)
    }
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self::ws()
    }
}

/// Everything a single (order, method, S) run needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub hidden: Vec<usize>,
    pub train: TrainSettings,
    pub loss: LossConfig,
    pub holdout: usize,
}

/// Independent random streams of one run. Initialisation and shuffling never
/// share a stream with the estimators, so methods agree until their losses differ.
#[derive(Debug, Clone)]
pub struct RunRngs {
    pub init: ChaCha8Rng,
    pub shuffle: ChaCha8Rng,
    pub memory: ChaCha8Rng,
    pub estimator: ChaCha8Rng,
}

impl RunRngs {
    pub fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            rng
        };
        Self {
            init: stream(0),
            shuffle: stream(1),
            memory: stream(2),
            estimator: stream(3),
        }
    }
}

/// Model and old-task knowledge carried from one task to the next.
#[derive(Debug, Clone)]
pub struct IncrementalState {
    net: MlpNetwork,
    teacher: Option<TeacherSnapshot>,
    anchor: Option<ParamSet>,
    importance: Option<ParameterImportance>,
    seen_classes: Vec<usize>,
    rotation: Option<RotationContext>,
}

impl IncrementalState {
    /// Fresh network whose head covers `first_task`.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        first_task: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            net: MlpNetwork::new(input_dim, hidden, first_task.len(), rng)?,
            teacher: None,
            anchor: None,
            importance: None,
            seen_classes: first_task.to_vec(),
            rotation: None,
        })
    }

    /// Grows the head (and any per-parameter state) for the next task's classes.
    pub fn expand_for(&mut self, classes: &[usize], rng: &mut ChaCha8Rng) {
        let count = classes.len();
        self.net.expand_head(count, rng);
        if let Some(a) = self.anchor.as_mut() {
            a.expand_head(count, 0.0);
        }
        if let Some(i) = self.importance.as_mut() {
            i.expand_head(count);
        }
        self.seen_classes.extend_from_slice(classes);
    }

    pub fn network(&self) -> &MlpNetwork {
        &self.net
    }

    pub fn teacher(&self) -> Option<&TeacherSnapshot> {
        self.teacher.as_ref()
    }

    pub fn anchor(&self) -> Option<&ParamSet> {
        self.anchor.as_ref()
    }

    pub fn importance(&self) -> Option<&ParameterImportance> {
        self.importance.as_ref()
    }

    /// Original class ids in head order.
    pub fn seen_classes(&self) -> &[usize] {
        &self.seen_classes
    }

    pub fn rotation(&self) -> Option<&RotationContext> {
        self.rotation.as_ref()
    }

    fn previous(&self) -> Option<PreviousTasks<'_>> {
        self.teacher.as_ref().map(|teacher| PreviousTasks {
            teacher,
            anchor: self.anchor.as_ref().zip(self.importance.as_ref()),
        })
    }

    /// Refreshes importance and rotation from the task just learned, then
    /// freezes the teacher.
    fn consolidate(
        &mut self,
        task_inputs: &Matrix,
        loss: &LossConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let kind = loss.method.importance_kind();
        let fresh = if loss.method.rotates() {
            let from: Vec<_> = self
                .net
                .layers()
                .iter()
                .map(|l| l.rotation().cloned())
                .collect();
            let (rotated, ctx) = rwc_rotate(&self.net, task_inputs, rng)?;
            let fisher = estimate_fisher(&rotated, task_inputs, rng)?;
            if let Some(acc) = self.importance.take() {
                let moved = reexpress_importance(acc.weights(), &from, &ctx)?;
                self.importance = Some(ParameterImportance::new(moved, ImportanceKind::Fisher)?);
            }
            self.net = rotated;
            self.rotation = Some(ctx);
            Some(fisher)
        } else {
            match kind {
                Some(ImportanceKind::Fisher) => Some(estimate_fisher(&self.net, task_inputs, rng)?),
                Some(ImportanceKind::Mas) => {
                    Some(mas_importance(&self.net, task_inputs, loss.mas_functional)?)
                }
                None => None,
            }
        };
        if let Some(fresh) = fresh {
            match self.importance.as_mut() {
                Some(acc) => acc.accumulate(&fresh)?,
                None => self.importance = Some(fresh),
            }
            self.anchor = Some(self.net.params());
        }
        self.teacher = Some(self.net.snapshot());
        Ok(())
    }
}

/// Training rows of one task. `targets` maps every row of `features` to its
/// head index; `task_rows` and the memory index into the same rows.
#[derive(Debug, Clone, Copy)]
pub struct TaskData<'a> {
    pub features: &'a Matrix,
    pub targets: &'a [usize],
    pub task_rows: &'a [usize],
    pub memory: &'a ReplayMemory,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TaskReport {
    /// Mean batch loss of the last epoch.
    pub final_loss: f64,
    /// Loss terms beyond cross-entropy evaluated during the task.
    pub extra_terms: usize,
    /// Batches hitting a zero-norm feature in the LUCIR terms.
    pub degenerate: usize,
}

/// Trains on the task rows mixed with the replay memory, then refreshes the
/// importance estimate and the teacher. `observer` sees the network after
/// every epoch.
pub fn train_task(
    state: &mut IncrementalState,
    data: TaskData<'_>,
    loss: &LossConfig,
    settings: &TrainSettings,
    rngs: &mut RunRngs,
    mut observer: Option<EpochObserver<'_>>,
) -> Result<TaskReport> {
    if data.task_rows.is_empty() {
        return Err(Error::Empty("task training rows"));
    }
    let n_seen = state.net.output_dim();
    let mut pool: Vec<(usize, bool)> = data.task_rows.iter().map(|&r| (r, false)).collect();
    pool.extend(data.memory.samples().map(|(r, _)| (r, true)));
    if let Some(&(r, _)) = pool.iter().find(|&&(r, _)| data.targets[r] >= n_seen) {
        return Err(Error::shape(
            "train_task",
            format!("target < {n_seen}"),
            data.targets[r],
        ));
    }

    let mut opt = settings.optimizer()?;
    let mut report = TaskReport::default();
    for epoch in 0..settings.epochs {
        pool.shuffle(&mut rngs.shuffle);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in pool.chunks(settings.batch_size) {
            let rows: Vec<usize> = chunk.iter().map(|&(r, _)| r).collect();
            let targets: Vec<usize> = rows.iter().map(|&r| data.targets[r]).collect();
            let replayed: Vec<bool> = chunk.iter().map(|&(_, m)| m).collect();
            let inputs = data.features.select_rows(&rows);
            let batch = TrainingBatch {
                inputs: &inputs,
                targets: &targets,
                replayed: &replayed,
            };
            let obj = objective(&state.net, batch, state.previous(), loss)?;
            opt.sgd_step(&mut state.net, &obj.grads)?;
            report.extra_terms += obj.extra_terms;
            report.degenerate += obj.degenerate;
            epoch_loss += obj.loss;
            batches += 1;
        }
        opt.scheduler_step();
        report.final_loss = epoch_loss / batches as f64;
        if let Some(obs) = observer.as_mut() {
            obs(epoch, &state.net);
        }
    }
    let task_inputs = data.features.select_rows(data.task_rows);
    state.consolidate(&task_inputs, loss, &mut rngs.estimator)?;
    Ok(report)
}

/// Outcome of one (order, method, S) run. A failed run keeps the rows it
/// produced before aborting.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub order: usize,
    pub method: String,
    pub holdout: usize,
    pub rows: Vec<MetricsRow>,
    pub accuracy: AccuracyMatrix,
    /// Per-class memory counts after each step.
    pub memory_counts: Vec<Vec<usize>>,
    pub extra_terms: usize,
    pub failure: Option<String>,
}

impl RunRecord {
    fn new(order: usize, method: &str, holdout: usize) -> Self {
        Self {
            order,
            method: method.to_owned(),
            holdout,
            rows: Vec::new(),
            accuracy: AccuracyMatrix::new(),
            memory_counts: Vec::new(),
            extra_terms: 0,
            failure: None,
        }
    }

    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }

    pub fn final_row(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}

/// Method label used for the joint-training reference.
pub const OFFLINE_METHOD: &str = "offline";

/// Head index of every row, `None` for classes outside the sequence.
fn head_targets(labels: &[usize], sequence: &TaskSequence) -> Vec<Option<usize>> {
    let order = sequence.class_order();
    let max = labels.iter().chain(&order).max().map_or(0, |m| m + 1);
    let mut position = vec![None; max];
    for (i, &c) in order.iter().enumerate() {
        position[c] = Some(i);
    }
    labels.iter().map(|&l| position[l]).collect()
}

struct Prepared {
    train_targets: Vec<usize>,
    test_rows: Vec<usize>,
    test_targets: Vec<usize>,
}

fn prepare(
    train: &FeatureDataset,
    test: &FeatureDataset,
    sequence: &TaskSequence,
) -> Result<Prepared> {
    if train.dim() != test.dim() {
        return Err(Error::shape(
            "train/test feature dimension",
            train.dim(),
            test.dim(),
        ));
    }
    let train_targets = head_targets(train.labels(), sequence)
        .into_iter()
        .map(|t| t.unwrap_or(usize::MAX))
        .collect();
    let (test_rows, test_targets) = head_targets(test.labels(), sequence)
        .into_iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|t| (i, t)))
        .unzip();
    Ok(Prepared {
        train_targets,
        test_rows,
        test_targets,
    })
}

struct StepEval {
    row: MetricsRow,
    task_scores: Vec<f64>,
}

fn evaluate(
    net: &MlpNetwork,
    test: &FeatureDataset,
    prep: &Prepared,
    sequence: &TaskSequence,
    step: usize,
) -> Result<StepEval> {
    let n_seen = sequence.task_range(step).end;
    let (rows, labels): (Vec<usize>, Vec<usize>) = prep
        .test_rows
        .iter()
        .zip(&prep.test_targets)
        .filter(|&(_, &t)| t < n_seen)
        .map(|(&r, &t)| (r, t))
        .unzip();
    if rows.is_empty() {
        return Err(Error::Empty("test samples of the seen classes"));
    }
    let preds = net.predict(&test.features().select_rows(&rows))?;
    let classes = |range: std::ops::Range<usize>| range.collect::<Vec<_>>();
    let base = restricted_micro_f1(&preds, &labels, &classes(sequence.task_range(0)))?;
    let old = if step >= 2 {
        restricted_micro_f1(
            &preds,
            &labels,
            &classes(sequence.task_range(1).start..sequence.task_range(step).start),
        )?
    } else {
        None
    };
    let new = restricted_micro_f1(&preds, &labels, &classes(sequence.task_range(step)))?;
    let task_scores = (0..=step)
        .map(|j| {
            restricted_micro_f1(&preds, &labels, &classes(sequence.task_range(j)))?
                .ok_or(Error::Empty("test samples of an earlier task"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StepEval {
        row: MetricsRow {
            order: sequence.order_id,
            step,
            method: String::new(),
            holdout: 0,
            overall_micro: micro_f1(&preds, &labels)?,
            overall_macro: macro_f1(&preds, &labels, n_seen)?,
            base,
            old,
            new,
            forgetting: None,
        },
        task_scores,
    })
}

/// The full task-incremental protocol on one class order: train task by
/// task, evaluate on all seen classes, then refresh the replay memory.
pub fn run_incremental(
    train: &FeatureDataset,
    test: &FeatureDataset,
    sequence: &TaskSequence,
    config: &RunConfig,
) -> RunRecord {
    let mut record = RunRecord::new(sequence.order_id, config.loss.method.name(), config.holdout);
    if let Err(e) = incremental_steps(train, test, sequence, config, &mut record) {
        log::warn!(
            "run order={} method={} S={} aborted: {e}",
            record.order,
            record.method,
            record.holdout
        );
        record.failure = Some(e.to_string());
    }
    record
}

fn incremental_steps(
    train: &FeatureDataset,
    test: &FeatureDataset,
    sequence: &TaskSequence,
    config: &RunConfig,
    record: &mut RunRecord,
) -> Result<()> {
    config.loss.validate()?;
    config.train.validate()?;
    let prep = prepare(train, test, sequence)?;
    let mut rngs = RunRngs::new(sequence.seed);
    let mut memory = ReplayMemory::new(config.holdout, sequence.class_count());
    let mut state: Option<IncrementalState> = None;
    let class_rows = |c: usize| -> Vec<usize> {
        (0..train.len())
            .filter(|&r| prep.train_targets[r] == c)
            .collect()
    };

    for (step, task) in sequence.tasks.iter().enumerate() {
        let state = match state.as_mut() {
            None => state.insert(IncrementalState::new(
                train.dim(),
                &config.hidden,
                task,
                &mut rngs.init,
            )?),
            Some(s) => {
                s.expand_for(task, &mut rngs.init);
                s
            }
        };
        let range = sequence.task_range(step);
        let per_class: Vec<Vec<usize>> = range.clone().map(class_rows).collect();
        let task_rows: Vec<usize> = {
            let mut rows: Vec<usize> = per_class.iter().flatten().copied().collect();
            rows.sort_unstable();
            rows
        };
        let data = TaskData {
            features: train.features(),
            targets: &prep.train_targets,
            task_rows: &task_rows,
            memory: &memory,
        };
        let report = train_task(state, data, &config.loss, &config.train, &mut rngs, None)?;
        record.extra_terms += report.extra_terms;
        log::debug!(
            "order={} method={} S={} step={step} loss={:.5} degenerate={}",
            record.order,
            record.method,
            record.holdout,
            report.final_loss,
            report.degenerate
        );

        let eval = evaluate(state.network(), test, &prep, sequence, step)?;
        record.accuracy.push_step(eval.task_scores)?;
        record.rows.push(MetricsRow {
            method: record.method.clone(),
            holdout: record.holdout,
            forgetting: record.accuracy.forgetting(step + 1),
            ..eval.row
        });

        memory.update(&per_class, &mut rngs.memory)?;
        let available: Vec<usize> = (0..range.end).map(|c| class_rows(c).len()).collect();
        memory.check_invariant(&available)?;
        record.memory_counts.push(memory.counts());
    }
    Ok(())
}

/// Joint training on every class at once, scored like the last step of
/// `sequence`. Forgetting is undefined and left empty.
pub fn run_offline_upper_bound(
    train: &FeatureDataset,
    test: &FeatureDataset,
    sequence: &TaskSequence,
    config: &RunConfig,
) -> RunRecord {
    let mut record = RunRecord::new(sequence.order_id, OFFLINE_METHOD, 0);
    if let Err(e) = offline_steps(train, test, sequence, config, &mut record) {
        log::warn!("offline run order={} aborted: {e}", record.order);
        record.failure = Some(e.to_string());
    }
    record
}

fn offline_steps(
    train: &FeatureDataset,
    test: &FeatureDataset,
    sequence: &TaskSequence,
    config: &RunConfig,
    record: &mut RunRecord,
) -> Result<()> {
    config.train.validate()?;
    let prep = prepare(train, test, sequence)?;
    let mut rngs = RunRngs::new(sequence.seed);
    let classes = sequence.class_order();
    let mut state = IncrementalState::new(train.dim(), &config.hidden, &classes, &mut rngs.init)?;
    let rows: Vec<usize> = (0..train.len())
        .filter(|&r| prep.train_targets[r] != usize::MAX)
        .collect();
    let memory = ReplayMemory::new(0, classes.len());
    let data = TaskData {
        features: train.features(),
        targets: &prep.train_targets,
        task_rows: &rows,
        memory: &memory,
    };
    train_task(
        &mut state,
        data,
        &LossConfig::new(Method::Ce),
        &config.train,
        &mut rngs,
        None,
    )?;
    let last = sequence.tasks.len() - 1;
    let eval = evaluate(state.network(), test, &prep, sequence, last)?;
    record.rows.push(MetricsRow {
        method: record.method.clone(),
        holdout: 0,
        ..eval.row
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_gaussians, ImbalanceProfile, SyntheticSpec};

    fn blobs(seed: u64) -> FeatureDataset {
        synthetic_gaussians(&SyntheticSpec {
            n_classes: 4,
            dim: 5,
            separation: 6.0,
            samples_per_class: 30,
            imbalance: ImbalanceProfile::Balanced,
            subjects: 0,
            seed,
        })
        .unwrap()
    }

    fn config(method: Method, holdout: usize) -> RunConfig {
        RunConfig {
            hidden: vec![8],
            train: TrainSettings {
                epochs: 5,
                ..TrainSettings::ws()
            },
            loss: LossConfig::new(method),
            holdout,
        }
    }

    fn sequence() -> TaskSequence {
        TaskSequence {
            order_id: 2,
            seed: 99,
            tasks: vec![vec![3, 1], vec![0, 2]],
        }
    }

    #[test]
    fn schedules_match_hyperparameter_table() {
        let ws = TrainSettings::ws();
        assert_eq!((ws.batch_size, ws.epochs), (15, 200));
        let decays: Vec<usize> = (1..=200).filter(|&e| ws.scheduler.fires_at(e)).collect();
        assert_eq!(decays, vec![90, 130, 170]);
        assert_eq!(TrainSettings::dsads().batch_size, 20);
    }

    #[test]
    fn every_method_completes_a_run() {
        let (train, test) = (blobs(1), blobs(2));
        for method in Method::ALL {
            let rec = run_incremental(&train, &test, &sequence(), &config(method, 2));
            assert!(rec.succeeded(), "{method}: {:?}", rec.failure);
            assert_eq!(rec.rows.len(), 2);
            assert_eq!(rec.memory_counts, vec![vec![4, 4], vec![2, 2, 2, 2]]);
            let last = rec.final_row().unwrap();
            assert_eq!(last.step, 1);
            assert!(last.forgetting.is_some());
            assert_eq!(rec.rows[0].forgetting, None);
        }
    }

    #[test]
    fn ce_without_replay_never_adds_terms() {
        let rec = run_incremental(&blobs(1), &blobs(2), &sequence(), &config(Method::Ce, 0));
        assert_eq!(rec.extra_terms, 0);
        assert!(rec.memory_counts.iter().flatten().all(|&c| c == 0));
        let lwf = run_incremental(&blobs(1), &blobs(2), &sequence(), &config(Method::Lwf, 0));
        assert!(lwf.extra_terms > 0);
    }

    #[test]
    fn teacher_is_detached_from_live_network() {
        let train = blobs(1);
        let mut rngs = RunRngs::new(5);
        let mut state = IncrementalState::new(5, &[4], &[0, 1], &mut rngs.init).unwrap();
        let targets: Vec<usize> = train
            .labels()
            .iter()
            .map(|&l| if l < 2 { l } else { usize::MAX })
            .collect();
        let rows: Vec<usize> = (0..train.len())
            .filter(|&r| targets[r] != usize::MAX)
            .collect();
        let memory = ReplayMemory::new(0, 4);
        let data = TaskData {
            features: train.features(),
            targets: &targets,
            task_rows: &rows,
            memory: &memory,
        };
        let cfg = config(Method::Ce, 0);
        train_task(&mut state, data, &cfg.loss, &cfg.train, &mut rngs, None).unwrap();
        let frozen = state.teacher().unwrap().params();
        state.net.set_param(0, 123.0);
        assert_eq!(state.teacher().unwrap().params(), frozen);
        assert_ne!(state.network().params(), frozen);
    }

    #[test]
    fn single_task_run_equals_offline() {
        let seq = TaskSequence {
            order_id: 0,
            seed: 4,
            tasks: vec![vec![1, 0]],
        };
        let cfg = config(Method::Ce, 0);
        let inc = run_incremental(&blobs(1), &blobs(2), &seq, &cfg);
        let off = run_offline_upper_bound(&blobs(1), &blobs(2), &seq, &cfg);
        let (a, b) = (inc.final_row().unwrap(), off.final_row().unwrap());
        assert_eq!(
            (a.overall_micro, a.overall_macro),
            (b.overall_micro, b.overall_macro)
        );
        assert_eq!(b.forgetting, None);
    }

    #[test]
    fn mismatched_dimensions_fail_the_run() {
        let other = synthetic_gaussians(&SyntheticSpec {
            dim: 3,
            ..SyntheticSpec {
                n_classes: 4,
                dim: 5,
                separation: 6.0,
                samples_per_class: 5,
                imbalance: ImbalanceProfile::Balanced,
                subjects: 0,
                seed: 0,
            }
        })
        .unwrap();
        let rec = run_incremental(&blobs(1), &other, &sequence(), &config(Method::Ce, 0));
        assert!(rec.failure.is_some());
        assert!(rec.rows.is_empty());
    }
}
