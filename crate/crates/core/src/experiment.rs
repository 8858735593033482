//! One resolved experiment: where the data comes from, how the model is
//! shaped and trained, and how it is probed and measured.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embed::{load_embeddings, EmbeddingSet};
use crate::error::{Error, Result};
use crate::geometry::ConeFitConfig;
use crate::learner::{AdamConfig, Model};
use crate::probe::{ProbeConfig, ProbeTask};
use crate::replay::{
    sequential_train, CheckpointStore, MemoryBuffer, RunLog, TrainObserver, TrainOptions,
};
use crate::synth::{build_scenario, ScenarioSpec, TaskData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFiles {
    pub name: String,
    pub train: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ScenarioSource {
    Synthetic { spec: ScenarioSpec },
    Files { tasks: Vec<TaskFiles> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    /// Widths of the hidden layers between input and representation.
    pub hidden: Vec<usize>,
    pub rep_dim: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            hidden: vec![64],
            rep_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricSelection {
    pub topo_ns: Vec<usize>,
    pub rotation: bool,
    pub cone: ConeFitConfig,
    pub cosdist_samples: u64,
    pub cosdist_bins: usize,
}

impl Default for MetricSelection {
    fn default() -> Self {
        MetricSelection {
            topo_ns: vec![5, 10, 25],
            rotation: true,
            cone: ConeFitConfig::default(),
            cosdist_samples: 10_000,
            cosdist_bins: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scenario: ScenarioSource,
    /// Indices into the scenario's tasks; empty keeps the natural order.
    pub task_order: Vec<usize>,
    pub model: ModelShape,
    pub train: TrainOptions,
    pub probe: ProbeConfig,
    pub metrics: MetricSelection,
    pub output_dir: PathBuf,
}

/// Desk-scale defaults: two interfering tasks of 30k training rows each, a
/// 32→64→16 encoder and sequential fine-tuning.
impl Default for ExperimentConfig {
    fn default() -> Self {
        let seed = 1;
        ExperimentConfig {
            seed,
            scenario: ScenarioSource::Synthetic {
                spec: ScenarioSpec::interfering(15_000, 1_000, 80.0, seed),
            },
            task_order: Vec::new(),
            model: ModelShape::default(),
            train: TrainOptions {
                adam: AdamConfig::with_lr(4e-4),
                seed,
                ..TrainOptions::default()
            },
            probe: ProbeConfig {
                seed,
                ..ProbeConfig::default()
            },
            metrics: MetricSelection::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Pushes the master seed into every component that draws randomness.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.probe.seed = seed;
        if let ScenarioSource::Synthetic { spec } = &mut self.scenario {
            spec.seed = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.train.schedule.validate()?;
        self.train.plan.validate()?;
        self.train.adam.validate()?;
        self.probe.validate()?;
        self.metrics.cone.validate()?;
        if self.train.epochs_per_task == 0 {
            return Err(Error::Spec("epochs_per_task must be at least 1".into()));
        }
        if self.model.rep_dim == 0 || self.model.hidden.contains(&0) {
            return Err(Error::Spec("layer widths must be positive".into()));
        }
        if self.metrics.topo_ns.contains(&0) {
            return Err(Error::Spec("topo neighborhood sizes must be positive".into()));
        }
        let n_tasks = match &self.scenario {
            ScenarioSource::Synthetic { spec } => spec.tasks.len(),
            ScenarioSource::Files { tasks } => {
                for t in tasks {
                    for p in [&t.train, &t.test] {
                        if !p.exists() {
                            return Err(Error::MissingFile(p.clone()));
                        }
                    }
                }
                tasks.len()
            }
        };
        if n_tasks == 0 {
            return Err(Error::Spec("scenario has no tasks".into()));
        }
        let mut seen = vec![false; n_tasks];
        for &t in &self.task_order {
            match seen.get_mut(t) {
                Some(s) if !*s => *s = true,
                _ => {
                    return Err(Error::Spec(format!(
                        "task_order entry {t} is out of range or repeated"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Generates or loads every task, in training order.
    pub fn load_tasks(&self) -> Result<Vec<TaskData>> {
        let tasks = match &self.scenario {
            ScenarioSource::Synthetic { spec } => build_scenario(spec)?.tasks,
            ScenarioSource::Files { tasks } => tasks
                .iter()
                .map(|t| {
                    Ok(TaskData {
                        name: t.name.clone(),
                        train: load_embeddings(&t.train)?,
                        test: load_embeddings(&t.test)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        };
        if self.task_order.is_empty() {
            return Ok(tasks);
        }
        Ok(self.task_order.iter().map(|&i| tasks[i].clone()).collect())
    }

    pub fn init_model(&self, tasks: &[TaskData]) -> Result<Model> {
        let first = tasks
            .first()
            .ok_or_else(|| Error::EmptySet("no tasks to train on".into()))?;
        let mut dims = vec![first.train.dim()];
        dims.extend(&self.model.hidden);
        dims.push(self.model.rep_dim);
        let mut classes: Vec<u32> = tasks
            .iter()
            .flat_map(|t| t.train.class_space().iter().copied())
            .collect();
        classes.sort_unstable();
        classes.dedup();
        Model::init(&dims, &classes, false, self.seed)
    }

    /// Builds a fresh model and runs the sequential schedule over `tasks`.
    pub fn train(
        &self,
        tasks: &[TaskData],
        store: &mut dyn CheckpointStore,
        observer: &mut dyn TrainObserver,
    ) -> Result<(Model, RunLog)> {
        let mut model = self.init_model(tasks)?;
        let mut buffer = MemoryBuffer::new(self.train.schedule.rate, self.seed)?;
        let train: Vec<EmbeddingSet> = tasks.iter().map(|t| t.train.clone()).collect();
        let log = sequential_train(&train, &mut model, &self.train, &mut buffer, store, observer)?;
        Ok((model, log))
    }
}

pub fn probe_tasks(tasks: &[TaskData]) -> Vec<ProbeTask> {
    tasks
        .iter()
        .map(|t| ProbeTask::Classes {
            train: t.train.clone(),
            test: t.test.clone(),
        })
        .collect()
}

/// Test rows of every task stacked into one labeled set, for measuring every
/// class cone at once.
pub fn stacked_test_sets(tasks: &[TaskData]) -> Result<EmbeddingSet> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::EmptySet("no tasks".into()))?;
    let dim = first.test.dim();
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    let mut classes = Vec::new();
    for t in tasks {
        if t.test.dim() != dim {
            return Err(Error::dim(dim, t.test.dim()));
        }
        vectors.extend_from_slice(t.test.matrix());
        labels.extend_from_slice(t.test.labels().ok_or(Error::MissingLabels)?);
        classes.extend_from_slice(t.test.class_space());
    }
    classes.sort_unstable();
    classes.dedup();
    EmbeddingSet::new("all-tests", dim, vectors, Some(labels), classes)
}
