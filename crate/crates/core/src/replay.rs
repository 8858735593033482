//! Episodic memory, sparse replay and the sequential training driver.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::embed::EmbeddingSet;
use crate::error::{Error, Result};
use crate::learner::{adam_step, backward, save_checkpoint, AdamConfig, AdamState, Checkpoint, Model};
use crate::rng::{self, EngineRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredExample {
    pub input: Vec<f64>,
    pub label: u32,
    pub source_task: usize,
}

/// The memory `M`: every stream example is offered once and kept with
/// probability `γ`.
#[derive(Debug, Clone)]
pub struct MemoryBuffer {
    entries: Vec<StoredExample>,
    storage_rate: f64,
    rng: EngineRng,
}

impl MemoryBuffer {
    pub fn new(storage_rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&storage_rate) {
            return Err(Error::Spec(format!("storage rate {storage_rate} outside [0, 1]")));
        }
        Ok(MemoryBuffer {
            entries: Vec::new(),
            storage_rate,
            rng: rng::stream(seed, &[0x3e30]),
        })
    }

    pub fn storage_rate(&self) -> f64 {
        self.storage_rate
    }

    /// Offers one live stream example; returns whether it was kept.
    pub fn consider_store(&mut self, example: StoredExample) -> bool {
        // One draw per offer keeps the stream aligned for every γ.
        let u: f64 = self.rng.random();
        let keep = u < self.storage_rate;
        if keep {
            self.entries.push(example);
        }
        keep
    }

    pub fn entries(&self) -> &[StoredExample] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `N_tr`: stream examples between replays, or never (SEQ).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayInterval {
    Every(u64),
    Never,
}

impl FromStr for ReplayInterval {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "seq" | "inf" | "infinite" | "never" => Ok(ReplayInterval::Never),
            other => match other.replace('_', "").parse::<u64>() {
                Ok(0) | Err(_) => Err(Error::Spec(format!(
                    "replay interval must be a positive count or \"seq\", got {s:?}"
                ))),
                Ok(n) => Ok(ReplayInterval::Every(n)),
            },
        }
    }
}

impl fmt::Display for ReplayInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReplayInterval::Every(n) => write!(f, "{n}"),
            ReplayInterval::Never => f.write_str("seq"),
        }
    }
}

impl Serialize for ReplayInterval {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ReplayInterval::Every(n) => s.serialize_u64(*n),
            ReplayInterval::Never => s.serialize_str("seq"),
        }
    }
}

impl<'de> Deserialize<'de> for ReplayInterval {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(u64),
            Text(String),
        }
        let text = match Raw::deserialize(d)? {
            Raw::Count(n) => n.to_string(),
            Raw::Text(s) => s,
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplaySchedule {
    pub interval: ReplayInterval,
    pub rate: f64,
}

impl ReplaySchedule {
    pub fn seq() -> Self {
        ReplaySchedule {
            interval: ReplayInterval::Never,
            rate: 0.0,
        }
    }

    pub fn every(interval: u64, rate: f64) -> Self {
        ReplaySchedule {
            interval: ReplayInterval::Every(interval),
            rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.interval == ReplayInterval::Every(0) {
            return Err(Error::Spec("replay interval must be positive".into()));
        }
        if !(self.rate >= 0.0 && self.rate.is_finite()) {
            return Err(Error::Spec(format!("replay rate {} must be >= 0", self.rate)));
        }
        Ok(())
    }
}

/// `⌊r·N_tr⌋`, or `None` when the schedule never replays.
pub fn replay_quota(schedule: &ReplaySchedule) -> Option<usize> {
    match schedule.interval {
        ReplayInterval::Every(n) => Some((schedule.rate * n as f64 + 1e-9).floor() as usize),
        ReplayInterval::Never => None,
    }
}

/// Indices into the buffer of a uniform sample without replacement, in draw
/// order.
pub fn draw_replay_batch(buffer: &MemoryBuffer, quota: usize, rng: &mut EngineRng) -> Vec<usize> {
    let k = quota.min(buffer.len());
    rand::seq::index::sample(rng, buffer.len(), k).into_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointPlan {
    pub cadence: u64,
    pub batch_size: usize,
}

impl Default for CheckpointPlan {
    fn default() -> Self {
        CheckpointPlan {
            cadence: 5000,
            batch_size: 32,
        }
    }
}

impl CheckpointPlan {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.cadence < self.batch_size as u64 {
            return Err(Error::Spec(format!(
                "checkpoint cadence {} must be >= batch size {} > 0",
                self.cadence, self.batch_size
            )));
        }
        Ok(())
    }
}

/// Batch indices (1-based counts of batches) closest to each multiple of
/// the cadence, assuming full batches throughout.
pub fn checkpoint_batches(plan: &CheckpointPlan, total_examples: u64) -> Vec<u64> {
    let bs = plan.batch_size.max(1) as u64;
    let boundaries: Vec<u64> = (1..=total_examples.div_ceil(bs))
        .map(|b| (b * bs).min(total_examples))
        .collect();
    nearest_boundaries(&boundaries, plan.cadence)
}

/// For cumulative example counts after each batch, the 1-based batch index
/// nearest each multiple of `cadence`; ties go to the earlier batch.
pub fn nearest_boundaries(boundaries: &[u64], cadence: u64) -> Vec<u64> {
    let Some(&total) = boundaries.last() else {
        return Vec::new();
    };
    let mut out: Vec<u64> = Vec::new();
    let mut j = 0usize;
    let mut k = 1u64;
    while cadence > 0 && k * cadence <= total {
        let point = k * cadence;
        while j + 1 < boundaries.len() && boundaries[j + 1] <= point {
            j += 1;
        }
        let mut best = j;
        if boundaries[j] < point && j + 1 < boundaries.len() {
            let below = point - boundaries[j];
            let above = boundaries[j + 1] - point;
            if above < below {
                best = j + 1;
            }
        }
        let b = best as u64 + 1;
        if out.last().is_none_or(|&last| b > last) {
            out.push(b);
        }
        k += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub id: usize,
    /// Stream batches consumed so far.
    pub batch: u64,
    pub examples_seen: u64,
    /// Task being trained when the snapshot was taken.
    pub task: usize,
    pub location: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEvent {
    pub event: usize,
    pub task: usize,
    pub batch: u64,
    pub examples_seen: u64,
    pub task_examples: u64,
    pub buffer_size: usize,
    pub sampled: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    pub name: String,
    pub first_batch: u64,
    pub last_batch: u64,
    pub stream_examples: u64,
    pub stored: usize,
    pub replay_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub options: TrainOptions,
    pub storage_rate: f64,
    pub checkpoints: Vec<CheckpointRecord>,
    pub replay_events: Vec<ReplayEvent>,
    pub tasks: Vec<TaskRecord>,
    pub optimizer_steps: u64,
    pub memory_size: usize,
}

impl RunLog {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub schedule: ReplaySchedule,
    pub plan: CheckpointPlan,
    pub epochs_per_task: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            schedule: ReplaySchedule::seq(),
            plan: CheckpointPlan::default(),
            epochs_per_task: 1,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl Default for ReplaySchedule {
    fn default() -> Self {
        ReplaySchedule::seq()
    }
}

/// Where checkpoints go. Returns a location string for the run log.
pub trait CheckpointStore {
    fn save(&mut self, id: usize, ckpt: &Checkpoint) -> Result<String>;
}

/// Writes `ckpt_<id>.ckpt` files into a directory.
pub struct DirStore {
    dir: PathBuf,
}

impl DirStore {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(DirStore { dir })
    }

    pub fn file_name(id: usize) -> String {
        format!("ckpt_{id:04}.ckpt")
    }
}

impl CheckpointStore for DirStore {
    fn save(&mut self, id: usize, ckpt: &Checkpoint) -> Result<String> {
        let name = Self::file_name(id);
        save_checkpoint(ckpt, self.dir.join(&name))?;
        Ok(name)
    }
}

/// Keeps checkpoints in memory, mainly for tests and in-process pipelines.
#[derive(Default)]
pub struct MemoryStore {
    pub checkpoints: Vec<Checkpoint>,
}

impl CheckpointStore for MemoryStore {
    fn save(&mut self, id: usize, ckpt: &Checkpoint) -> Result<String> {
        // Store what a file round trip would give back.
        self.checkpoints.push(Checkpoint::from_bytes(&ckpt.to_bytes()?)?);
        Ok(format!("memory:{id}"))
    }
}

/// Hooks around each replay pass.
pub trait TrainObserver {
    fn before_replay(&mut self, _event: &ReplayEvent, _model: &Model) -> Result<()> {
        Ok(())
    }

    fn after_replay(&mut self, _event: &ReplayEvent, _model: &Model) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Trains `model` on `tasks` in order. Every task must be labeled with
/// classes the model's decoder knows.
///
/// Per stream batch: offer each example to memory (first epoch only), take
/// one Adam step, run a replay pass if the task's stream counter crossed a
/// multiple of `N_tr`, then snapshot if the batch is scheduled. A replay
/// pass splits the sampled items into `batch_size` chunks with one step
/// each, sharing the stream's Adam state. An initial snapshot (id 0) is
/// taken before any training.
pub fn sequential_train(
    tasks: &[EmbeddingSet],
    model: &mut Model,
    options: &TrainOptions,
    buffer: &mut MemoryBuffer,
    store: &mut dyn CheckpointStore,
    observer: &mut dyn TrainObserver,
) -> Result<RunLog> {
    options.schedule.validate()?;
    options.plan.validate()?;
    options.adam.validate()?;
    if tasks.is_empty() {
        return Err(Error::EmptySet("no tasks to train on".into()));
    }
    if options.epochs_per_task == 0 {
        return Err(Error::Spec("epochs_per_task must be >= 1".into()));
    }
    for task in tasks {
        if task.is_empty() {
            return Err(Error::EmptySet(format!("task {} has no examples", task.task_id())));
        }
        if task.dim() != model.encoder.input_dim() {
            return Err(Error::dim(model.encoder.input_dim(), task.dim()));
        }
        let labels = task.labels().ok_or(Error::MissingLabels)?;
        model.decoder.local_labels(labels)?;
    }

    let bs = options.plan.batch_size;
    let mut boundaries = Vec::new();
    let mut seen = 0u64;
    for task in tasks {
        for _ in 0..options.epochs_per_task {
            for chunk in (0..task.len()).step_by(bs) {
                seen += (task.len() - chunk).min(bs) as u64;
                boundaries.push(seen);
            }
        }
    }
    let mut scheduled = nearest_boundaries(&boundaries, options.plan.cadence).into_iter().peekable();

    let quota = replay_quota(&options.schedule);
    let mut replay_rng = rng::stream(options.seed, &[0x2e91]);
    let mut adam = AdamState::new(options.adam);
    let mut log = RunLog {
        options: options.clone(),
        storage_rate: buffer.storage_rate(),
        checkpoints: Vec::new(),
        replay_events: Vec::new(),
        tasks: Vec::new(),
        optimizer_steps: 0,
        memory_size: 0,
    };
    let mut batch = 0u64;
    let mut examples_seen = 0u64;

    let mut snapshot = |log: &mut RunLog, model: &Model, batch: u64, seen: u64, task: usize| -> Result<()> {
        let id = log.checkpoints.len();
        let ckpt = Checkpoint {
            step: batch,
            examples_seen: seen,
            model: model.clone(),
        };
        let location = store.save(id, &ckpt)?;
        log.checkpoints.push(CheckpointRecord {
            id,
            batch,
            examples_seen: seen,
            task,
            location,
        });
        Ok(())
    };
    snapshot(&mut log, model, 0, 0, 0)?;

    for (t, task) in tasks.iter().enumerate() {
        let labels = task.labels().expect("checked above");
        let mut record = TaskRecord {
            task: t,
            name: task.task_id().to_owned(),
            first_batch: batch + 1,
            last_batch: batch,
            stream_examples: 0,
            stored: 0,
            replay_events: 0,
        };
        for epoch in 0..options.epochs_per_task {
            let mut order: Vec<usize> = (0..task.len()).collect();
            order.shuffle(&mut rng::stream(options.seed, &[0x0bde, t as u64, epoch as u64]));
            for chunk in order.chunks(bs) {
                if epoch == 0 {
                    for &i in chunk {
                        let kept = buffer.consider_store(StoredExample {
                            input: task.row(i).to_vec(),
                            label: labels[i],
                            source_task: t,
                        });
                        record.stored += usize::from(kept);
                    }
                }
                let xs: Vec<&[f64]> = chunk.iter().map(|&i| task.row(i)).collect();
                let ys: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
                train_step(model, &mut adam, &xs, &ys)?;
                log.optimizer_steps += 1;
                batch += 1;
                examples_seen += chunk.len() as u64;
                let before = record.stream_examples;
                record.stream_examples += chunk.len() as u64;

                if let (ReplayInterval::Every(n), Some(quota)) = (options.schedule.interval, quota) {
                    let crossed = record.stream_examples / n - before / n;
                    for _ in 0..crossed {
                        let event = ReplayEvent {
                            event: log.replay_events.len(),
                            task: t,
                            batch,
                            examples_seen,
                            task_examples: record.stream_examples,
                            buffer_size: buffer.len(),
                            sampled: draw_replay_batch(buffer, quota, &mut replay_rng),
                        };
                        observer.before_replay(&event, model)?;
                        for part in event.sampled.chunks(bs) {
                            let entries: Vec<&StoredExample> =
                                part.iter().map(|&i| &buffer.entries()[i]).collect();
                            let xs: Vec<&[f64]> = entries.iter().map(|e| &e.input[..]).collect();
                            let ys: Vec<u32> = entries.iter().map(|e| e.label).collect();
                            train_step(model, &mut adam, &xs, &ys)?;
                            log.optimizer_steps += 1;
                        }
                        observer.after_replay(&event, model)?;
                        record.replay_events += 1;
                        log.replay_events.push(event);
                    }
                }

                if scheduled.peek() == Some(&batch) {
                    scheduled.next();
                    snapshot(&mut log, model, batch, examples_seen, t)?;
                }
            }
        }
        record.last_batch = batch;
        log.tasks.push(record);
    }
    log.memory_size = buffer.len();
    Ok(log)
}

fn train_step(model: &mut Model, adam: &mut AdamState, xs: &[&[f64]], ys: &[u32]) -> Result<()> {
    let g = backward(model, xs, ys)?;
    let grads: Vec<&[f64]> = g.grad.tensors().into_iter().map(|t| t.2).collect();
    adam_step(adam, &mut model.tensors_mut(), &grads)
}
