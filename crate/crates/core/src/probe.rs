//! Frozen-encoder probing: a fresh one-layer decoder per (checkpoint, task),
//! trained on the task's training data and scored on its test data.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingSet;
use crate::error::{Error, Result};
use crate::learner::{
    adam_step, decoder_backward, load_checkpoint, predict_span, span_decoder_backward, span_f1,
    span_scores, AdamConfig, AdamState, Checkpoint, DecoderParams, EncoderParams, SpanDecoderParams,
    SpanExample,
};
use crate::replay::RunLog;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassScope {
    /// Only the task's own classes.
    TaskLocal,
    /// Every class of the checkpoint's decoder.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop once train accuracy moved less than this over `plateau_window`
    /// epochs.
    pub plateau_tol: f64,
    pub plateau_window: usize,
    pub class_scope: ClassScope,
    pub max_span_len: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 20,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
            plateau_tol: 1e-4,
            plateau_window: 3,
            class_scope: ClassScope::TaskLocal,
            max_span_len: 30,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.max_span_len == 0 {
            return Err(Error::Spec(
                "probe learning rate, batch size and span length must be positive".into(),
            ));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.learning_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMetric {
    Accuracy,
    SpanF1,
}

/// One task as the probe sees it: raw inputs, labels or gold spans.
#[derive(Debug, Clone)]
pub enum ProbeTask {
    Classes {
        train: EmbeddingSet,
        test: EmbeddingSet,
    },
    Spans {
        name: String,
        train: Vec<SpanExample>,
        test: Vec<SpanExample>,
    },
}

impl ProbeTask {
    pub fn name(&self) -> &str {
        match self {
            ProbeTask::Classes { train, .. } => train.task_id(),
            ProbeTask::Spans { name, .. } => name,
        }
    }

    pub fn metric(&self) -> ProbeMetric {
        match self {
            ProbeTask::Classes { .. } => ProbeMetric::Accuracy,
            ProbeTask::Spans { .. } => ProbeMetric::SpanF1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Probe {
    Classifier(DecoderParams),
    Span(SpanDecoderParams),
}

pub fn encode_rows(encoder: &EncoderParams, set: &EmbeddingSet) -> Result<Vec<Vec<f64>>> {
    set.rows().map(|x| encoder.encode(x)).collect()
}

/// Encodes every row, keeping labels and class space. Fails if a row maps to
/// the zero vector.
pub fn encode_set(encoder: &EncoderParams, set: &EmbeddingSet) -> Result<EmbeddingSet> {
    let reps = encode_rows(encoder, set)?;
    EmbeddingSet::new(
        set.task_id(),
        encoder.output_dim(),
        reps.concat(),
        set.labels().map(<[u32]>::to_vec),
        set.class_space().to_vec(),
    )
}

fn encode_spans(encoder: &EncoderParams, examples: &[SpanExample]) -> Result<Vec<SpanExample>> {
    examples
        .iter()
        .map(|ex| {
            Ok(SpanExample {
                tokens: ex.tokens.iter().map(|t| encoder.encode(t)).collect::<Result<_>>()?,
                golds: ex.golds.clone(),
            })
        })
        .collect()
}

/// Trains a fresh decoder on top of `encoder`, which is only read.
/// `global_classes` is the class list used under [`ClassScope::Global`].
pub fn train_probe(
    encoder: &EncoderParams,
    task: &ProbeTask,
    global_classes: &[u32],
    config: &ProbeConfig,
) -> Result<Probe> {
    config.validate()?;
    let d = encoder.output_dim();
    match task {
        ProbeTask::Classes { train, .. } => {
            let labels = train.labels().ok_or(Error::MissingLabels)?;
            let classes = match config.class_scope {
                ClassScope::TaskLocal => train.class_space(),
                ClassScope::Global => global_classes,
            };
            let dec = DecoderParams::init(classes, d, config.seed)?;
            let reps = encode_rows(encoder, train)?;
            Ok(Probe::Classifier(fit_classifier(dec, &reps, labels, config)?))
        }
        ProbeTask::Spans { train, .. } => {
            let sd = SpanDecoderParams::init(d, config.seed);
            let reps = encode_spans(encoder, train)?;
            Ok(Probe::Span(fit_span(sd, &reps, config)?))
        }
    }
}

/// Minibatch Adam on fixed representations with plateau early stopping.
pub fn fit_classifier(
    mut dec: DecoderParams,
    reps: &[Vec<f64>],
    labels: &[u32],
    config: &ProbeConfig,
) -> Result<DecoderParams> {
    if reps.is_empty() {
        return Err(Error::EmptySet("probe training set".into()));
    }
    dec.local_labels(labels)?;
    let mut adam = AdamState::new(config.adam());
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..reps.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(config.seed, &[0x9b0e, epoch as u64]));
        for chunk in order.chunks(config.batch_size) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| &reps[i][..]).collect();
            let ys: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
            let (_, g) = decoder_backward(&dec, &xs, &ys)?;
            adam_step(&mut adam, &mut [dec.columns_mut()], &[g.columns()])?;
        }
        history.push(accuracy_on(&dec, reps.iter().map(Vec::as_slice), labels)?);
        if plateaued(&history, config) {
            break;
        }
    }
    Ok(dec)
}

fn fit_span(mut sd: SpanDecoderParams, reps: &[SpanExample], config: &ProbeConfig) -> Result<SpanDecoderParams> {
    if reps.is_empty() {
        return Err(Error::EmptySet("probe training set".into()));
    }
    let mut adam = AdamState::new(config.adam());
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..reps.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(config.seed, &[0x9b0e, epoch as u64]));
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<SpanExample> = chunk.iter().map(|&i| reps[i].clone()).collect();
            let (_, g) = span_decoder_backward(&sd, &batch)?;
            adam_step(
                &mut adam,
                &mut [&mut sd.w_start[..], &mut sd.w_end[..]],
                &[&g.w_start[..], &g.w_end[..]],
            )?;
        }
        history.push(span_score_on(&sd, reps, config.max_span_len)?);
        if plateaued(&history, config) {
            break;
        }
    }
    Ok(sd)
}

fn plateaued(history: &[f64], config: &ProbeConfig) -> bool {
    let w = config.plateau_window;
    w > 0 && history.len() > w && {
        let last = history[history.len() - 1];
        (last - history[history.len() - 1 - w]).abs() < config.plateau_tol
    }
}

/// Fraction of rows whose argmax class equals the label.
pub fn accuracy_on<'a>(
    dec: &DecoderParams,
    reps: impl IntoIterator<Item = &'a [f64]>,
    labels: &[u32],
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptySet("evaluation set".into()));
    }
    let mut correct = 0usize;
    let mut n = 0usize;
    for (v, &y) in reps.into_iter().zip(labels) {
        correct += usize::from(dec.predict(v)? == y);
        n += 1;
    }
    if n != labels.len() {
        return Err(Error::dim(labels.len(), n));
    }
    Ok(correct as f64 / n as f64)
}

fn span_score_on(sd: &SpanDecoderParams, reps: &[SpanExample], max_len: usize) -> Result<f64> {
    if reps.is_empty() {
        return Err(Error::EmptySet("evaluation set".into()));
    }
    let mut total = 0.0;
    for ex in reps {
        let (ps, pe) = span_scores(sd, &ex.tokens)?;
        total += span_f1(predict_span(&ps, &pe, max_len), &ex.golds);
    }
    Ok(total / reps.len() as f64)
}

/// Accuracy or mean span F1 of `probe` on the task's test data.
pub fn evaluate_probe(
    encoder: &EncoderParams,
    probe: &Probe,
    task: &ProbeTask,
    config: &ProbeConfig,
) -> Result<f64> {
    match (probe, task) {
        (Probe::Classifier(dec), ProbeTask::Classes { test, .. }) => {
            let labels = test.labels().ok_or(Error::MissingLabels)?;
            let reps = encode_rows(encoder, test)?;
            accuracy_on(dec, reps.iter().map(Vec::as_slice), labels)
        }
        (Probe::Span(sd), ProbeTask::Spans { test, .. }) => {
            span_score_on(sd, &encode_spans(encoder, test)?, config.max_span_len)
        }
        _ => Err(Error::Validation("probe kind does not match the task".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub checkpoint_id: usize,
    pub examples_seen: u64,
    pub task_id: String,
    pub probe_score: f64,
    pub original_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTimeline {
    pub rows: Vec<TimelineRow>,
}

impl ProbeTimeline {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("checkpoint_id,examples_seen,task_id,probe_score,original_score\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6}",
                r.checkpoint_id, r.examples_seen, r.task_id, r.probe_score, r.original_score
            );
        }
        s
    }

    pub fn get(&self, checkpoint_id: usize, task_id: &str) -> Option<&TimelineRow> {
        self.rows
            .iter()
            .find(|r| r.checkpoint_id == checkpoint_id && r.task_id == task_id)
    }
}

/// Probe score and original-decoder score for one (checkpoint, task) cell.
pub fn probe_cell(
    ckpt: &Checkpoint,
    task: &ProbeTask,
    config: &ProbeConfig,
) -> Result<(f64, f64)> {
    let model = &ckpt.model;
    let probe = train_probe(&model.encoder, task, model.decoder.class_ids(), config)?;
    let probe_score = evaluate_probe(&model.encoder, &probe, task, config)?;
    let original = match task {
        ProbeTask::Classes { .. } => Probe::Classifier(model.decoder.clone()),
        ProbeTask::Spans { .. } => Probe::Span(
            model
                .span
                .clone()
                .ok_or_else(|| Error::Validation("checkpoint has no span decoder".into()))?,
        ),
    };
    let original_score = evaluate_probe(&model.encoder, &original, task, config)?;
    Ok((probe_score, original_score))
}

/// Every checkpoint × task cell, in parallel, each with its own derived
/// seed. Rows are ordered by checkpoint id, then task order.
pub fn probe_timeline(
    checkpoints: &[(usize, Checkpoint)],
    tasks: &[ProbeTask],
    config: &ProbeConfig,
) -> Result<ProbeTimeline> {
    config.validate()?;
    let cells: Vec<(usize, usize)> = (0..checkpoints.len())
        .flat_map(|c| (0..tasks.len()).map(move |t| (c, t)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(c, t)| {
            let (id, ckpt) = &checkpoints[c];
            let cell = ProbeConfig {
                seed: rng::derive_seed(config.seed, &[*id as u64, t as u64]),
                ..config.clone()
            };
            let (probe_score, original_score) = probe_cell(ckpt, &tasks[t], &cell)?;
            Ok(TimelineRow {
                checkpoint_id: *id,
                examples_seen: ckpt.examples_seen,
                task_id: tasks[t].name().to_owned(),
                probe_score,
                original_score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeTimeline { rows })
}

/// Loads every checkpoint named in `log` (relative to `dir`) and probes it.
pub fn probe_timeline_from_log(
    log: &RunLog,
    dir: &Path,
    tasks: &[ProbeTask],
    config: &ProbeConfig,
) -> Result<ProbeTimeline> {
    let checkpoints = log
        .checkpoints
        .iter()
        .map(|c| Ok((c.id, load_checkpoint(dir.join(&c.location))?)))
        .collect::<Result<Vec<_>>>()?;
    probe_timeline(&checkpoints, tasks, config)
}
