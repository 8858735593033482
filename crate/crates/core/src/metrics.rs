//! Forgetting diagnostics: neighborhood order preservation inside a class
//! and rotation of class cones toward their decoder columns.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::embed::{split_by_class, EmbeddingSet};
use crate::error::{Error, Result};
use crate::geometry::{fit_cone, ConeFitConfig};
use crate::learner::Model;
use crate::linalg;
use crate::replay::{ReplayEvent, TrainObserver};

/// Exact nearest neighbors of every row within one class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborhoodIndex {
    pub n: usize,
    pub lists: Vec<Vec<usize>>,
}

/// Euclidean `n`-nearest neighbors, self excluded, ties by row index.
pub fn knn_index(vectors: &[&[f64]], n: usize) -> Result<NeighborhoodIndex> {
    if vectors.len() < 2 {
        return Err(Error::EmptySet("neighborhoods need at least 2 rows".into()));
    }
    let dim = vectors[0].len();
    if let Some(bad) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::dim(dim, bad.len()));
    }
    let k = n.min(vectors.len() - 1);
    let lists = (0..vectors.len())
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..vectors.len())
                .filter(|&j| j != i)
                .map(|j| (squared_distance(vectors[i], vectors[j]), j))
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < cand.len() {
                cand.select_nth_unstable_by(k, cmp);
                cand.truncate(k);
            }
            cand.sort_unstable_by(cmp);
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    Ok(NeighborhoodIndex { n: k, lists })
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(Error::UndefinedCorrelation(format!(
            "{} points; at least 3 are needed",
            x.len()
        )));
    }
    if !x.iter().chain(y).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation between each instance's cosine to the after-space axis and
/// the summed cosines of its before-space neighbors. Rows of `before` and
/// `after` must describe the same instances.
pub fn topo_pearson(before: &[&[f64]], after: &[&[f64]], axis: &[f64], n: usize) -> Result<f64> {
    if before.len() != after.len() {
        return Err(Error::dim(before.len(), after.len()));
    }
    if before.len() < 3 {
        return Err(Error::UndefinedCorrelation(format!(
            "{} instances; at least 3 are needed",
            before.len()
        )));
    }
    let index = knn_index(before, n)?;
    let x = after
        .iter()
        .map(|v| {
            if v.len() != axis.len() {
                return Err(Error::dim(axis.len(), v.len()));
            }
            if linalg::is_zero(v) {
                return Err(Error::Validation("zero vector has no direction".into()));
            }
            Ok(linalg::cosine(v, axis))
        })
        .collect::<Result<Vec<f64>>>()?;
    let y: Vec<f64> = index
        .lists
        .iter()
        .map(|nb| nb.iter().map(|&k| x[k]).sum())
        .collect();
    pearson(&x, &y)
}

fn nonzero(v: &[f64]) -> Result<()> {
    if linalg::is_zero(v) {
        Err(Error::Validation("zero vector has no direction".into()))
    } else {
        Ok(())
    }
}

/// `cos(c_after, w) − cos(c_before, w)`: positive when the axis moved toward
/// the decoder column.
pub fn rotation_delta(c_before: &[f64], c_after: &[f64], w: &[f64]) -> Result<f64> {
    for v in [c_before, c_after] {
        if v.len() != w.len() {
            return Err(Error::dim(w.len(), v.len()));
        }
        nonzero(v)?;
    }
    nonzero(w)?;
    Ok(linalg::cosine(c_after, w) - linalg::cosine(c_before, w))
}

/// Angle in radians between two decoder columns.
pub fn decoder_drift(w_before: &[f64], w_after: &[f64]) -> Result<f64> {
    if w_before.len() != w_after.len() {
        return Err(Error::dim(w_before.len(), w_after.len()));
    }
    nonzero(w_before)?;
    nonzero(w_after)?;
    // Same angle as acos of the cosine, without its loss of precision near 0.
    let a = linalg::normalized(w_before);
    let b = linalg::normalized(w_after);
    let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    Ok(2.0 * linalg::norm(&diff).atan2(linalg::norm(&sum)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopoRow {
    pub class: u32,
    pub n: usize,
    pub size: usize,
    pub pearson: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopoReport {
    pub rows: Vec<TopoRow>,
}

impl TopoReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,n,pearson\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.6}", r.class, r.n, r.pearson);
        }
        s
    }
}

/// Topological-order coefficient for every class and neighbor count.
/// `before` and `after` are row-aligned; cones are fitted on `after`.
pub fn topo_report(
    before: &EmbeddingSet,
    after: &EmbeddingSet,
    ns: &[usize],
    cone: &ConeFitConfig,
) -> Result<TopoReport> {
    if before.len() != after.len() {
        return Err(Error::dim(before.len(), after.len()));
    }
    if before.labels() != after.labels() {
        return Err(Error::Validation("before and after sets are not row-aligned".into()));
    }
    let mut rows = Vec::new();
    for view in split_by_class(after)? {
        let idx = view.row_indices();
        let v1 = view.vectors();
        let v0: Vec<&[f64]> = idx.iter().map(|&i| before.row(i)).collect();
        let fit = fit_cone(&v1, cone, None)?;
        for &n in ns {
            rows.push(TopoRow {
                class: view.class_id(),
                n,
                size: idx.len(),
                pearson: topo_pearson(&v0, &v1, &fit.cone.axis, n)?,
            });
        }
    }
    Ok(TopoReport { rows })
}

/// Mean and sample standard deviation, for aggregating runs over seeds.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationRow {
    pub event: usize,
    pub class: u32,
    pub delta_zeta: f64,
    pub drift: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RotationReport {
    pub rows: Vec<RotationRow>,
}

impl RotationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("event,class,delta_zeta\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.9}", r.event, r.class, r.delta_zeta);
        }
        s
    }

    pub fn drift_csv(&self) -> String {
        let mut s = String::from("event,class,drift_rad\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.9e}", r.event, r.class, r.drift);
        }
        s
    }

    pub fn events(&self) -> Vec<usize> {
        let mut e: Vec<usize> = self.rows.iter().map(|r| r.event).collect();
        e.dedup();
        e
    }

    pub fn for_event(&self, event: usize) -> impl Iterator<Item = &RotationRow> {
        self.rows.iter().filter(move |r| r.event == event)
    }
}

/// Cone axis of every class of `probe_inputs` under the model's encoder,
/// plus the matching decoder columns.
pub fn class_axes(
    model: &Model,
    probe_inputs: &EmbeddingSet,
    cone: &ConeFitConfig,
) -> Result<BTreeMap<u32, (Vec<f64>, Vec<f64>)>> {
    let labels = probe_inputs.labels().ok_or(Error::MissingLabels)?;
    let reps = probe_inputs
        .rows()
        .map(|x| model.encoder.encode(x))
        .collect::<Result<Vec<_>>>()?;
    let mut by_class: BTreeMap<u32, Vec<&[f64]>> = BTreeMap::new();
    for (v, &y) in reps.iter().zip(labels) {
        by_class.entry(y).or_default().push(v);
    }
    by_class
        .into_iter()
        .map(|(class, vs)| {
            let axis = fit_cone(&vs, cone, None)?.cone.axis;
            let w = model.decoder.column_of(class).ok_or_else(|| {
                Error::Validation(format!("class {class} has no decoder column"))
            })?;
            Ok((class, (axis, w.to_vec())))
        })
        .collect()
}

/// Observer that fits class cones before and after every replay pass and
/// records `Δζ` against the post-replay decoder column plus column drift.
pub struct RotationTracker {
    pub probe_inputs: EmbeddingSet,
    pub cone: ConeFitConfig,
    /// Only events for which this returns true are measured.
    pub select: Box<dyn Fn(&ReplayEvent) -> bool + Send>,
    pub report: RotationReport,
    pending: Option<BTreeMap<u32, (Vec<f64>, Vec<f64>)>>,
}

impl RotationTracker {
    pub fn new(probe_inputs: EmbeddingSet, cone: ConeFitConfig) -> Self {
        RotationTracker {
            probe_inputs,
            cone,
            select: Box::new(|_| true),
            report: RotationReport::default(),
            pending: None,
        }
    }

    pub fn only_task(mut self, task: usize) -> Self {
        self.select = Box::new(move |e| e.task == task);
        self
    }

    /// Skips replay events that fire while the first `task` tasks train.
    pub fn from_task(mut self, task: usize) -> Self {
        self.select = Box::new(move |e| e.task >= task);
        self
    }
}

fn rotation_rows(
    event: usize,
    before: BTreeMap<u32, (Vec<f64>, Vec<f64>)>,
    after: &BTreeMap<u32, (Vec<f64>, Vec<f64>)>,
) -> Result<Vec<RotationRow>> {
    before
        .into_iter()
        .map(|(class, (c_before, w_before))| {
            let (c_after, w_after) = after
                .get(&class)
                .ok_or_else(|| Error::Validation(format!("class {class} vanished")))?;
            Ok(RotationRow {
                event,
                class,
                delta_zeta: rotation_delta(&c_before, c_after, w_after)?,
                drift: decoder_drift(&w_before, w_after)?,
            })
        })
        .collect()
}

/// `Δζ` and drift for every class between two saved models, as if a single
/// replay event separated them.
pub fn rotation_between(
    before: &Model,
    after: &Model,
    probe_inputs: &EmbeddingSet,
    cone: &ConeFitConfig,
    event: usize,
) -> Result<RotationReport> {
    let b = class_axes(before, probe_inputs, cone)?;
    let a = class_axes(after, probe_inputs, cone)?;
    Ok(RotationReport {
        rows: rotation_rows(event, b, &a)?,
    })
}

impl TrainObserver for RotationTracker {
    fn before_replay(&mut self, event: &ReplayEvent, model: &Model) -> Result<()> {
        if (self.select)(event) {
            self.pending = Some(class_axes(model, &self.probe_inputs, &self.cone)?);
        }
        Ok(())
    }

    fn after_replay(&mut self, event: &ReplayEvent, model: &Model) -> Result<()> {
        let Some(before) = self.pending.take() else {
            return Ok(());
        };
        let after = class_axes(model, &self.probe_inputs, &self.cone)?;
        self.report
            .rows
            .extend(rotation_rows(event.event, before, &after)?);
        Ok(())
    }
}
