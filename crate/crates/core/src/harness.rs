//! End-to-end online class-incremental protocol.
//!
//! For each task in schedule order the learner consumes that task's training
//! stream once, in minibatches, and is then evaluated on the test records of
//! every class seen so far. Average accuracy is the mean over steps; last
//! accuracy is the final step.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{er_step, finetune_step, BaselineError, ExemplarBuffer, TrainPolicy};
use crate::classifiers::{argmax_class, full_ncm_predict, ncm_predict, select_candidates, ClassifyError};
use crate::embedding_store::{build_task_schedule, Dataset, EmbeddingRecord, StoreError, TaskSchedule};
use crate::linear_head::{HeadError, LinearHead, SoftmaxScope, TrainBatch};
use crate::mean_tracker::{ClassMeanTable, MeanError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("tasks must run in order: expected task {expected}, got {got}")]
    OutOfOrderTask { expected: usize, got: usize },
    #[error("record of class {class} appeared in the stream of task {task}")]
    ForeignClass { class: u32, task: usize },
    #[error("nothing to evaluate: no task has been trained")]
    NotTrained,
    #[error("single-pass violation: {0}")]
    SinglePass(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Mean(#[from] MeanError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Per-task candidates from the frozen-block head, then nearest class mean.
    CandidateNcm,
    /// Nearest class mean over all seen classes.
    FullNcm,
    /// Every row trained on new data only; argmax prediction.
    Finetune,
    /// Fine-tuning with reservoir replay; argmax prediction.
    Er,
    /// Reservoir buffer, nearest mean of buffered exemplars.
    NmeBuffer,
    /// Offline reference: a fresh head trained jointly on every seen class.
    UpperBound,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::CandidateNcm => "candidate_ncm",
            Method::FullNcm => "full_ncm",
            Method::Finetune => "finetune",
            Method::Er => "er",
            Method::NmeBuffer => "nme_buffer",
            Method::UpperBound => "upper_bound",
        }
    }

    pub fn is_exemplar_free(self) -> bool {
        matches!(self, Method::CandidateNcm | Method::FullNcm)
    }

    pub fn uses_buffer(self) -> bool {
        matches!(self, Method::Er | Method::NmeBuffer)
    }

    pub fn policy(self) -> TrainPolicy {
        match self {
            Method::CandidateNcm | Method::FullNcm => TrainPolicy::FrozenOld,
            Method::Finetune | Method::UpperBound => TrainPolicy::FineTune,
            Method::Er | Method::NmeBuffer => TrainPolicy::ExperienceReplay,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub class_seed: u64,
    pub shuffle_seed: u64,
    pub init_seed: u64,
    pub buffer_seed: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { class_seed: 1993, shuffle_seed: 0, init_seed: 0, buffer_seed: 0 }
    }
}

fn default_step_size() -> usize {
    5
}
fn default_lr() -> f64 {
    0.1
}
fn default_batch() -> usize {
    16
}
fn default_epochs() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_replay_ratio() -> f64 {
    1.0
}

/// One experiment. JSON keys match the field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset manifest; relative paths resolve against the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub method: Method,
    #[serde(default = "default_step_size")]
    pub step_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Always 1 for online methods; the upper-bound reference may use more.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Total exemplar budget Q across all classes.
    #[serde(default)]
    pub exemplar_budget: usize,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub softmax_scope: SoftmaxScope,
    #[serde(default = "default_true")]
    pub bias: bool,
    /// Replay records drawn per incoming record (experience replay only).
    #[serde(default = "default_replay_ratio")]
    pub replay_ratio: f64,
}

impl RunConfig {
    /// Defaults: M = 5, lr 0.1, batch 16, one epoch, no buffer.
    pub fn new(method: Method) -> Self {
        Self {
            manifest: None,
            method,
            step_size: default_step_size(),
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            exemplar_budget: 0,
            seeds: Seeds::default(),
            softmax_scope: SoftmaxScope::All,
            bias: true,
            replay_ratio: default_replay_ratio(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.step_size == 0 {
            return bad("step_size must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive and finite".into());
        }
        if !(self.replay_ratio >= 0.0 && self.replay_ratio.is_finite()) {
            return bad("replay_ratio must be non-negative and finite".into());
        }
        if self.method == Method::UpperBound {
            if self.epochs == 0 {
                return bad("epochs must be positive".into());
            }
        } else if self.epochs != 1 {
            return bad(format!("online method {} must use exactly 1 epoch", self.method));
        }
        if self.exemplar_budget > 0 && !self.method.uses_buffer() {
            if self.method.is_exemplar_free() {
                return bad("exemplar-free method cannot take a buffer".into());
            }
            return bad(format!("method {} takes no exemplar buffer", self.method));
        }
        Ok(())
    }
}

/// Accuracy after each step plus the two summary scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub per_step: Vec<f64>,
    pub avg: f64,
    pub last: f64,
    /// Per class, accuracy at each step (`null` before the class is seen).
    pub per_class: BTreeMap<u32, Vec<Option<f64>>>,
}

impl RunMetrics {
    pub fn from_steps(steps: &[StepEval]) -> Self {
        let per_step: Vec<f64> = steps.iter().map(|s| s.accuracy).collect();
        let avg = if per_step.is_empty() { 0.0 } else { per_step.iter().sum::<f64>() / per_step.len() as f64 };
        let last = per_step.last().copied().unwrap_or(0.0);
        let mut per_class: BTreeMap<u32, Vec<Option<f64>>> = BTreeMap::new();
        for (t, step) in steps.iter().enumerate() {
            for (c, (correct, total)) in &step.per_class {
                let row = per_class.entry(*c).or_insert_with(|| vec![None; steps.len()]);
                row[t] = Some(*correct as f64 / *total as f64);
            }
        }
        Self { per_step, avg, last, per_class }
    }

    pub fn to_json(&self) -> Result<String, HarnessError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// `step,accuracy` rows, steps numbered from 1.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,accuracy\n");
        for (i, a) in self.per_step.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i + 1, a));
        }
        s
    }
}

/// Result of one evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepEval {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `(correct, total)` per class.
    pub per_class: BTreeMap<u32, (usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: usize,
    pub records: usize,
    pub sgd_steps: usize,
}

/// Online learner state: head, class means, and (for replay baselines) the
/// exemplar buffer.
#[derive(Debug, Clone)]
pub struct Learner {
    method: Method,
    step_size: usize,
    batch_size: usize,
    lr: f32,
    replay_ratio: f64,
    init_seed: u64,
    head: LinearHead<f32>,
    means: ClassMeanTable,
    buffer: Option<ExemplarBuffer>,
    replay_rng: ChaCha8Rng,
    row_classes: Vec<u32>,
    row_of: BTreeMap<u32, usize>,
    tasks_done: usize,
    peak_buffer: usize,
}

impl Learner {
    pub fn new(config: &RunConfig, dim: usize) -> Result<Self, HarnessError> {
        config.validate()?;
        let mut replay_rng = ChaCha8Rng::seed_from_u64(config.seeds.buffer_seed);
        replay_rng.set_stream(1);
        Ok(Self {
            method: config.method,
            step_size: config.step_size,
            batch_size: config.batch_size,
            lr: config.learning_rate as f32,
            replay_ratio: config.replay_ratio,
            init_seed: config.seeds.init_seed,
            head: LinearHead::new(dim).with_bias(config.bias).with_scope(config.softmax_scope),
            means: ClassMeanTable::with_dim(dim),
            buffer: config
                .method
                .uses_buffer()
                .then(|| ExemplarBuffer::new(config.exemplar_budget, config.seeds.buffer_seed)),
            replay_rng,
            row_classes: Vec::new(),
            row_of: BTreeMap::new(),
            tasks_done: 0,
            peak_buffer: 0,
        })
    }

    pub fn head(&self) -> &LinearHead<f32> {
        &self.head
    }

    pub fn means(&self) -> &ClassMeanTable {
        &self.means
    }

    pub fn buffer(&self) -> Option<&ExemplarBuffer> {
        self.buffer.as_ref()
    }

    pub fn tasks_done(&self) -> usize {
        self.tasks_done
    }

    /// Classes seen so far, in head row order.
    pub fn seen_classes(&self) -> &[u32] {
        &self.row_classes
    }

    /// Largest number of records the exemplar buffer ever held.
    pub fn peak_buffer_records(&self) -> usize {
        self.peak_buffer
    }

    /// Consumes the training stream of task `task` (introducing `classes`)
    /// exactly once. The stream is never retained beyond one minibatch.
    pub fn run_task<'a>(
        &mut self,
        task: usize,
        classes: &[u32],
        stream: impl IntoIterator<Item = &'a EmbeddingRecord>,
    ) -> Result<TaskReport, HarnessError> {
        if task != self.tasks_done {
            return Err(HarnessError::OutOfOrderTask { expected: self.tasks_done, got: task });
        }
        if classes.len() != self.step_size {
            return Err(HarnessError::Config(format!(
                "task {task} introduces {} classes, step size is {}",
                classes.len(),
                self.step_size
            )));
        }
        self.head.expand(task, classes.len(), self.init_seed)?;
        for &c in classes {
            if self.row_of.insert(c, self.row_classes.len()).is_some() {
                return Err(HarnessError::Config(format!("class {c} introduced twice")));
            }
            self.row_classes.push(c);
        }

        let first_row = self.row_classes.len() - classes.len();
        let mut pending: Vec<&EmbeddingRecord> = Vec::with_capacity(self.batch_size);
        let mut records = 0;
        let mut steps = 0;
        for record in stream {
            match self.row_of.get(&record.label) {
                Some(&row) if row >= first_row => {}
                _ => return Err(HarnessError::ForeignClass { class: record.label, task }),
            }
            self.means.update_record(record)?;
            pending.push(record);
            records += 1;
            if pending.len() == self.batch_size {
                self.train_batch(&pending)?;
                steps += 1;
                pending.clear();
            }
        }
        if !pending.is_empty() {
            self.train_batch(&pending)?;
            steps += 1;
        }
        self.tasks_done += 1;
        Ok(TaskReport { task, records, sgd_steps: steps })
    }

    fn train_batch(&mut self, pending: &[&EmbeddingRecord]) -> Result<(), HarnessError> {
        let rows: Vec<(&EmbeddingRecord, usize)> = pending.iter().map(|r| (*r, self.row_of[&r.label])).collect();
        match self.method.policy() {
            TrainPolicy::FrozenOld => {
                let batch = to_batch(self.head.dim(), &rows);
                let (_, grads) = self.head.ce_loss_and_grad(&batch)?;
                self.head.sgd_step(&grads, self.lr)?;
            }
            TrainPolicy::FineTune => {
                let batch = to_batch(self.head.dim(), &rows);
                finetune_step(&mut self.head, &batch, self.lr)?;
            }
            TrainPolicy::ExperienceReplay => {
                let replay = (self.replay_ratio * rows.len() as f64).round() as usize;
                let buffer = self.buffer.as_mut().expect("replay methods own a buffer");
                let row_of = &self.row_of;
                er_step(&mut self.head, buffer, &rows, replay, |c| row_of[&c], self.lr, &mut self.replay_rng)?;
                self.peak_buffer = self.peak_buffer.max(buffer.len());
            }
        }
        Ok(())
    }

    /// Prediction under the configured rule.
    pub fn predict(&self, query: &[f32]) -> Result<u32, HarnessError> {
        if self.tasks_done == 0 {
            return Err(HarnessError::NotTrained);
        }
        Ok(match self.method {
            Method::CandidateNcm => {
                let z = self.head.logits(query)?;
                let cand = select_candidates(&z, &self.row_classes, self.step_size)?;
                ncm_predict(&self.means, &cand, query)?
            }
            Method::FullNcm => full_ncm_predict(&self.means, query)?,
            Method::Finetune | Method::Er | Method::UpperBound => {
                argmax_class(&self.head.logits(query)?, &self.row_classes)?
            }
            Method::NmeBuffer => self.buffer.as_ref().expect("nme owns a buffer").nme_predict(query)?,
        })
    }
}

fn to_batch(dim: usize, rows: &[(&EmbeddingRecord, usize)]) -> TrainBatch<f32> {
    let mut batch = TrainBatch::new(dim);
    for (r, row) in rows {
        batch.push(&r.vector, *row);
    }
    batch
}

/// Top-1 accuracy of `predict` over `records`. Predictions run in parallel;
/// counts are reduced in record order.
pub fn evaluate<F>(records: &[&EmbeddingRecord], predict: F) -> Result<StepEval, HarnessError>
where
    F: Fn(&[f32]) -> Result<u32, HarnessError> + Sync,
{
    let predictions: Vec<u32> =
        records.par_iter().map(|r| predict(&r.vector)).collect::<Result<_, _>>()?;
    let mut per_class: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (r, p) in records.iter().zip(&predictions) {
        let e = per_class.entry(r.label).or_default();
        e.1 += 1;
        if *p == r.label {
            e.0 += 1;
            correct += 1;
        }
    }
    let total = records.len();
    let accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    Ok(StepEval { accuracy, correct, total, per_class })
}

/// How often each training record was handed to the learner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadAudit {
    pub training_records: usize,
    pub total_reads: u64,
    pub min_reads: u32,
    pub max_reads: u32,
    pub single_pass: bool,
}

impl ReadAudit {
    fn from_counts(counts: &[u32], train: &[Vec<usize>]) -> Self {
        let idx: Vec<usize> = train.iter().flatten().copied().collect();
        let reads: Vec<u32> = idx.iter().map(|&i| counts[i]).collect();
        let min_reads = reads.iter().copied().min().unwrap_or(0);
        let max_reads = reads.iter().copied().max().unwrap_or(0);
        let total_reads = counts.iter().map(|&c| c as u64).sum();
        Self {
            training_records: idx.len(),
            total_reads,
            min_reads,
            max_reads,
            single_pass: min_reads == 1 && max_reads == 1 && total_reads == idx.len() as u64,
        }
    }
}

/// Everything about a run that is not a metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub crate_version: String,
    pub config: RunConfig,
    pub num_tasks: usize,
    pub class_order: Vec<u32>,
    /// False only for the upper-bound reference, which revisits data.
    pub online: bool,
    pub exemplar_free: bool,
    pub exemplar_capacity: usize,
    pub peak_buffer_records: usize,
    pub reads: ReadAudit,
    pub tasks: Vec<TaskReport>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub manifest: RunManifest,
    pub steps: Vec<StepEval>,
}

impl RunOutcome {
    /// Writes `metrics.json`, `metrics.csv` and `run_manifest.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), HarnessError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.json"), self.metrics.to_json()?)?;
        fs::write(dir.join("metrics.csv"), self.metrics.to_csv())?;
        let mut m = serde_json::to_string_pretty(&self.manifest)?;
        m.push('\n');
        fs::write(dir.join("run_manifest.json"), m)?;
        Ok(())
    }
}

/// Loads the manifest named in `config` and runs it.
pub fn run_experiment(config: &RunConfig) -> Result<RunOutcome, HarnessError> {
    config.validate()?;
    let path = config.manifest.as_ref().ok_or_else(|| HarnessError::Config("no dataset manifest given".into()))?;
    let dataset = Dataset::load(path)?;
    run_on_dataset(&dataset, config)
}

/// Runs the protocol over an already loaded dataset.
pub fn run_on_dataset(dataset: &Dataset, config: &RunConfig) -> Result<RunOutcome, HarnessError> {
    config.validate()?;
    let schedule = build_task_schedule(dataset, config.step_size, config.seeds.class_seed, config.seeds.shuffle_seed)?;
    if config.method == Method::UpperBound {
        return run_upper_bound(dataset, &schedule, config);
    }

    let mut learner = Learner::new(config, dataset.dim())?;
    let mut reads = vec![0u32; dataset.records.len()];
    let mut steps = Vec::with_capacity(schedule.num_tasks);
    let mut tasks = Vec::with_capacity(schedule.num_tasks);
    for t in 0..schedule.num_tasks {
        let stream = schedule.train[t].iter().map(|&i| {
            reads[i] += 1;
            &dataset.records[i]
        });
        tasks.push(learner.run_task(t, schedule.task_classes(t), stream)?);
        let test = seen_test_records(dataset, &schedule, t);
        steps.push(evaluate(&test, |q| learner.predict(q))?);
    }

    let audit = ReadAudit::from_counts(&reads, &schedule.train);
    if !audit.single_pass {
        return Err(HarnessError::SinglePass(format!(
            "training reads per record ranged {}..={}",
            audit.min_reads, audit.max_reads
        )));
    }
    let capacity = learner.buffer().map_or(0, |b| b.capacity());
    if config.method.is_exemplar_free() && (capacity != 0 || learner.peak_buffer_records() != 0) {
        return Err(HarnessError::Config("exemplar-free run allocated exemplar storage".into()));
    }
    let manifest = RunManifest {
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        num_tasks: schedule.num_tasks,
        class_order: schedule.class_order.clone(),
        online: true,
        exemplar_free: capacity == 0 && learner.peak_buffer_records() == 0,
        exemplar_capacity: capacity,
        peak_buffer_records: learner.peak_buffer_records(),
        reads: audit,
        tasks,
    };
    Ok(RunOutcome { metrics: RunMetrics::from_steps(&steps), manifest, steps })
}

fn seen_test_records<'a>(dataset: &'a Dataset, schedule: &TaskSchedule, t: usize) -> Vec<&'a EmbeddingRecord> {
    let mut idx: Vec<usize> = schedule.test[..=t].iter().flatten().copied().collect();
    idx.sort_unstable();
    idx.into_iter().map(|i| &dataset.records[i]).collect()
}

/// At every step, trains a fresh all-trainable head on the union of all seen
/// classes' training data for `config.epochs` shuffled epochs, then predicts
/// by argmax.
fn run_upper_bound(dataset: &Dataset, schedule: &TaskSchedule, config: &RunConfig) -> Result<RunOutcome, HarnessError> {
    let dim = dataset.dim();
    let lr = config.learning_rate as f32;
    let mut reads = vec![0u32; dataset.records.len()];
    let mut steps = Vec::with_capacity(schedule.num_tasks);
    let mut tasks = Vec::with_capacity(schedule.num_tasks);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seeds.shuffle_seed);
    rng.set_stream(2);

    for t in 0..schedule.num_tasks {
        let seen = schedule.seen_classes(t);
        let row_of: BTreeMap<u32, usize> = seen.iter().enumerate().map(|(r, c)| (*c, r)).collect();
        let mut head = LinearHead::<f32>::new(dim).with_bias(config.bias);
        for task in 0..=t {
            head.expand(task, config.step_size, config.seeds.init_seed)?;
        }
        head.unfreeze_all();

        let mut pool: Vec<usize> = schedule.train[..=t].iter().flatten().copied().collect();
        let mut sgd_steps = 0;
        for _ in 0..config.epochs {
            pool.shuffle(&mut rng);
            for chunk in pool.chunks(config.batch_size) {
                let mut batch = TrainBatch::new(dim);
                for &i in chunk {
                    reads[i] += 1;
                    let r = &dataset.records[i];
                    batch.push(&r.vector, row_of[&r.label]);
                }
                finetune_step(&mut head, &batch, lr)?;
                sgd_steps += 1;
            }
        }
        tasks.push(TaskReport { task: t, records: pool.len(), sgd_steps });
        let test = seen_test_records(dataset, schedule, t);
        steps.push(evaluate(&test, |q| Ok(argmax_class(&head.logits(q)?, seen)?))?);
    }

    let manifest = RunManifest {
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        num_tasks: schedule.num_tasks,
        class_order: schedule.class_order.clone(),
        online: false,
        exemplar_free: false,
        exemplar_capacity: 0,
        peak_buffer_records: 0,
        reads: ReadAudit::from_counts(&reads, &schedule.train),
        tasks,
    };
    Ok(RunOutcome { metrics: RunMetrics::from_steps(&steps), manifest, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_store::SyntheticSpec;

    fn tiny() -> Dataset {
        SyntheticSpec { num_classes: 10, dim: 8, per_class_train: 20, per_class_test: 5, ..SyntheticSpec::standard() }
            .generate()
            .unwrap()
            .into_dataset()
    }

    #[test]
    fn config_defaults_from_minimal_json() {
        let c = RunConfig::from_json(r#"{"method":"candidate_ncm"}"#).unwrap();
        assert_eq!(c, RunConfig::new(Method::CandidateNcm));
        assert_eq!((c.learning_rate, c.batch_size, c.epochs, c.step_size), (0.1, 16, 1, 5));
    }

    #[test]
    fn config_rejections() {
        let err = RunConfig::from_json(r#"{"method":"candidate_ncm","exemplar_budget":2000}"#).unwrap_err();
        assert!(err.to_string().contains("exemplar-free method cannot take a buffer"));
        assert!(RunConfig::from_json(r#"{"method":"full_ncm","exemplar_budget":1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"method":"er","epochs":2}"#).is_err());
        assert!(RunConfig::from_json(r#"{"method":"upper_bound","epochs":5}"#).is_ok());
        assert!(RunConfig::from_json(r#"{"method":"er","exemplar_budget":200}"#).is_ok());
        assert!(RunConfig::from_json(r#"{"method":"er","typo":1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"method":"er","learning_rate":0}"#).is_err());
    }

    #[test]
    fn hundred_records_make_seven_steps() {
        let records: Vec<_> = (0..100).map(|i| EmbeddingRecord::new(vec![i as f32 / 100.0, 1.0], i % 5)).collect();
        let mut learner = Learner::new(&RunConfig::new(Method::CandidateNcm), 2).unwrap();
        let report = learner.run_task(0, &[0, 1, 2, 3, 4], &records).unwrap();
        assert_eq!(report.sgd_steps, 7);
        assert_eq!(report.records, 100);
        for c in 0..5 {
            assert_eq!(learner.means().count(c), 20);
        }
    }

    #[test]
    fn task_order_and_foreign_classes() {
        let records = vec![EmbeddingRecord::new(vec![0.0, 1.0], 7)];
        let mut learner = Learner::new(&RunConfig { step_size: 2, ..RunConfig::new(Method::CandidateNcm) }, 2).unwrap();
        assert!(matches!(learner.run_task(1, &[0, 1], &records), Err(HarnessError::OutOfOrderTask { .. })));
        assert!(matches!(
            learner.run_task(0, &[0, 1], &records),
            Err(HarnessError::ForeignClass { class: 7, task: 0 })
        ));
        assert!(matches!(learner.predict(&[0.0, 0.0]), Err(HarnessError::NotTrained)));
    }

    #[test]
    fn old_class_records_are_foreign_to_later_tasks() {
        let mut learner = Learner::new(&RunConfig { step_size: 1, ..RunConfig::new(Method::CandidateNcm) }, 1).unwrap();
        learner.run_task(0, &[3], &[EmbeddingRecord::new(vec![1.0], 3)]).unwrap();
        let err = learner.run_task(1, &[4], &[EmbeddingRecord::new(vec![1.0], 3)]).unwrap_err();
        assert!(matches!(err, HarnessError::ForeignClass { class: 3, task: 1 }));
    }

    #[test]
    fn evaluate_fixtures() {
        let records: Vec<_> = (0..12).map(|i| EmbeddingRecord::new(vec![i as f32], i % 4)).collect();
        let refs: Vec<_> = records.iter().collect();
        let perfect = evaluate(&refs, |q| Ok(q[0] as u32 % 4)).unwrap();
        assert_eq!(perfect.accuracy, 1.0);
        let constant = evaluate(&refs, |_| Ok(2)).unwrap();
        assert_eq!(constant.accuracy, 0.25);
        assert_eq!(constant.per_class[&2], (3, 3));
        assert_eq!(constant.per_class[&0], (0, 3));
    }

    #[test]
    fn metric_identities() {
        let ds = tiny();
        let out = run_on_dataset(&ds, &RunConfig { step_size: 2, ..RunConfig::new(Method::CandidateNcm) }).unwrap();
        let m = &out.metrics;
        assert_eq!(m.per_step.len(), 5);
        let mean = m.per_step.iter().sum::<f64>() / 5.0;
        assert!((m.avg - mean).abs() <= 1e-12);
        assert_eq!(m.last, m.per_step[4]);
        // step t covers exactly (t + 1) * M classes
        for (t, s) in out.steps.iter().enumerate() {
            assert_eq!(s.per_class.len(), (t + 1) * 2);
        }
        assert!(out.manifest.reads.single_pass);
        assert!(out.manifest.exemplar_free);
    }

    #[test]
    fn single_task_avg_equals_last() {
        let ds = tiny();
        let out = run_on_dataset(&ds, &RunConfig { step_size: 10, ..RunConfig::new(Method::FullNcm) }).unwrap();
        assert_eq!(out.metrics.per_step.len(), 1);
        assert_eq!(out.metrics.avg, out.metrics.last);
    }

    #[test]
    fn reruns_are_bit_identical() {
        let ds = tiny();
        for method in [Method::CandidateNcm, Method::Er, Method::NmeBuffer] {
            let mut c = RunConfig { step_size: 2, ..RunConfig::new(method) };
            if method.uses_buffer() {
                c.exemplar_budget = 30;
            }
            let a = run_on_dataset(&ds, &c).unwrap();
            let b = run_on_dataset(&ds, &c).unwrap();
            assert_eq!(a.metrics.to_json().unwrap(), b.metrics.to_json().unwrap());
        }
        let c = RunConfig { step_size: 2, ..RunConfig::new(Method::CandidateNcm) };
        let schedule = build_task_schedule(&ds, 2, c.seeds.class_seed, c.seeds.shuffle_seed).unwrap();
        let run = || {
            let mut l = Learner::new(&c, ds.dim()).unwrap();
            for t in 0..schedule.num_tasks {
                l.run_task(t, schedule.task_classes(t), schedule.train[t].iter().map(|&i| &ds.records[i])).unwrap();
            }
            l
        };
        let (x, y) = (run(), run());
        assert_eq!(x.head(), y.head());
        assert_eq!(x.means(), y.means());
    }

    #[test]
    fn er_buffer_respects_budget() {
        let ds = tiny();
        let c = RunConfig { step_size: 2, exemplar_budget: 17, ..RunConfig::new(Method::Er) };
        let out = run_on_dataset(&ds, &c).unwrap();
        assert_eq!(out.manifest.peak_buffer_records, 17);
        assert!(!out.manifest.exemplar_free);
    }

    #[test]
    fn csv_layout() {
        let m = RunMetrics::from_steps(&[
            StepEval { accuracy: 1.0, correct: 1, total: 1, per_class: BTreeMap::from([(0, (1, 1))]) },
            StepEval { accuracy: 0.5, correct: 1, total: 2, per_class: BTreeMap::from([(0, (0, 1)), (1, (1, 1))]) },
        ]);
        assert_eq!(m.to_csv(), "step,accuracy\n1,1\n2,0.5\n");
        assert_eq!(m.avg, 0.75);
        assert_eq!(m.per_class[&1], vec![None, Some(1.0)]);
    }
}
