//! Synthetic scenarios with known geometry: classes drawn uniformly from
//! spherical caps, multi-task streams built from them, and controlled
//! rotations of existing sets.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embed::{save_embeddings, EmbeddingSet};
use crate::error::{Error, Result};
use crate::linalg::{self, dot};
use crate::rng::{self, EngineRng};

/// Smallest half-angle the sampler will use.
pub const MIN_HALF_ANGLE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapSpec {
    pub axis: Vec<f64>,
    /// Radians, in (0, π/2).
    pub half_angle: f64,
    pub count: usize,
    pub seed: u64,
}

impl CapSpec {
    pub fn dimension(&self) -> usize {
        self.axis.len()
    }

    fn validate(&self) -> Result<()> {
        if self.axis.len() < 2 {
            return Err(Error::Spec("caps need dimension >= 2".into()));
        }
        if (linalg::norm(&self.axis) - 1.0).abs() > 1e-9 {
            return Err(Error::Spec("cap axis must be unit-norm".into()));
        }
        if !(self.half_angle > 0.0 && self.half_angle < std::f64::consts::FRAC_PI_2) {
            return Err(Error::Spec(format!(
                "half-angle {} is outside (0, π/2)",
                self.half_angle
            )));
        }
        Ok(())
    }
}

/// Draws `spec.count` unit vectors uniformly from the cap, as unlabeled rows.
pub fn sample_cap(spec: &CapSpec) -> Result<EmbeddingSet> {
    let rows = sample_cap_rows(spec)?;
    EmbeddingSet::from_rows("cap", &rows, None, vec![])
}

pub fn sample_cap_rows(spec: &CapSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut rng = rng::rng_from(spec.seed);
    let h = spec.half_angle.max(MIN_HALF_ANGLE);
    Ok((0..spec.count)
        .map(|_| {
            let theta = polar_angle(&mut rng, h, spec.dimension());
            let dir = random_orthogonal(&mut rng, &spec.axis);
            let mut x: Vec<f64> = spec
                .axis
                .iter()
                .zip(&dir)
                .map(|(a, w)| theta.cos() * a + theta.sin() * w)
                .collect();
            linalg::normalize_in_place(&mut x);
            x
        })
        .collect())
}

/// Polar angle with density proportional to `sin^(d-2) θ` on `[0, h]`, the
/// surface measure of the cap.
///
/// Rejection sampling against a truncated exponential: `ln sin` is concave,
/// so its tangent at `h` bounds it from above.
fn polar_angle(rng: &mut EngineRng, h: f64, dim: usize) -> f64 {
    let power = (dim - 2) as f64;
    if power == 0.0 {
        return rng.random_range(0.0..h);
    }
    let rate = power / h.tan();
    let log_sin_h = h.sin().ln();
    let tail = (-rate * h).exp();
    loop {
        let u: f64 = rng.random();
        let theta = (h + (1.0 - u * (1.0 - tail)).ln() / rate).clamp(0.0, h);
        let log_accept = power * (theta.sin().ln() - log_sin_h) - rate * (theta - h);
        let v: f64 = rng.random();
        if v.ln() <= log_accept {
            return theta;
        }
    }
}

/// Uniform unit vector orthogonal to the unit vector `axis`.
fn random_orthogonal(rng: &mut EngineRng, axis: &[f64]) -> Vec<f64> {
    loop {
        let mut w: Vec<f64> = (0..axis.len()).map(|_| rng.sample(StandardNormal)).collect();
        let along = dot(&w, axis);
        linalg::axpy(-along, axis, &mut w);
        let n = linalg::norm(&w);
        if n > 1e-8 {
            w.iter_mut().for_each(|x| *x /= n);
            return w;
        }
    }
}

/// Uniform unit vector in `dim` dimensions.
pub fn random_unit(rng: &mut EngineRng, dim: usize) -> Vec<f64> {
    loop {
        let w: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = linalg::norm(&w);
        if n > 1e-8 {
            return w.into_iter().map(|x| x / n).collect();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: u32,
    pub half_angle_deg: f64,
    pub train_count: usize,
    pub test_count: usize,
    /// Drawn at random (respecting the separation) when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub classes: Vec<ClassSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub dimension: usize,
    pub min_separation_deg: f64,
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
}

impl ScenarioSpec {
    /// Two tasks of two classes each: the desk-scale stand-in for a pair of
    /// text-classification tasks sharing one label space.
    pub fn two_task(train_per_class: usize, test_per_class: usize, seed: u64) -> Self {
        let class = |class_id| ClassSpec {
            class_id,
            half_angle_deg: 30.0,
            train_count: train_per_class,
            test_count: test_per_class,
            axis: None,
        };
        ScenarioSpec {
            dimension: 16,
            min_separation_deg: 70.0,
            seed,
            tasks: vec![
                TaskSpec {
                    name: "task-a".into(),
                    classes: vec![class(0), class(1)],
                },
                TaskSpec {
                    name: "task-b".into(),
                    classes: vec![class(2), class(3)],
                },
            ],
        }
    }

    /// Two tasks whose classes lean on each other. Task-a axes are `e0` and
    /// `e1`; task-b axes are those tilted by `tilt_deg` toward `e2` and `e3`,
    /// so training on task-b drags the shared directions away from task-a.
    /// Caps have a 20° half-angle in 32 dimensions.
    pub fn interfering(
        train_per_class: usize,
        test_per_class: usize,
        tilt_deg: f64,
        seed: u64,
    ) -> Self {
        const DIM: usize = 32;
        let (s, c) = tilt_deg.to_radians().sin_cos();
        let axis = |pairs: &[(usize, f64)]| {
            let mut v = vec![0.0; DIM];
            for &(k, x) in pairs {
                v[k] = x;
            }
            v
        };
        let axes = [
            axis(&[(0, 1.0)]),
            axis(&[(1, 1.0)]),
            axis(&[(0, c), (2, s)]),
            axis(&[(1, c), (3, s)]),
        ];
        let mut spec = Self::two_task(train_per_class, test_per_class, seed);
        spec.dimension = DIM;
        spec.min_separation_deg = tilt_deg.min(90.0) / 2.0;
        for (class, axis) in spec.tasks.iter_mut().flat_map(|t| &mut t.classes).zip(axes) {
            class.half_angle_deg = 20.0;
            class.axis = Some(axis);
        }
        spec
    }

    fn classes(&self) -> impl Iterator<Item = (usize, &ClassSpec)> {
        self.tasks
            .iter()
            .enumerate()
            .flat_map(|(t, task)| task.classes.iter().map(move |c| (t, c)))
    }
}

/// True geometry of one generated class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_id: u32,
    pub task: usize,
    pub axis: Vec<f64>,
    pub half_angle: f64,
}

#[derive(Debug, Clone)]
pub struct TaskData {
    pub name: String,
    pub train: EmbeddingSet,
    pub test: EmbeddingSet,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub tasks: Vec<TaskData>,
    pub truth: Vec<GroundTruth>,
}

impl Scenario {
    /// Sorted global class ids across all tasks.
    pub fn class_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.truth.iter().map(|g| g.class_id).collect();
        ids.sort_unstable();
        ids
    }

    /// Writes `task_<k>_train.emb`, `task_<k>_test.emb` and
    /// `ground_truth.json` into `dir`, returning the written paths.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for (k, task) in self.tasks.iter().enumerate() {
            for (split, set) in [("train", &task.train), ("test", &task.test)] {
                let path = dir.join(format!("task_{k}_{split}.emb"));
                save_embeddings(set, &path)?;
                written.push(path);
            }
        }
        let path = dir.join("ground_truth.json");
        let json = serde_json::to_string_pretty(&self.truth)?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(written)
    }
}

/// Generates every task's train/test sets plus the true cone per class.
pub fn build_scenario(spec: &ScenarioSpec) -> Result<Scenario> {
    if spec.tasks.is_empty() {
        return Err(Error::Spec("scenario has no tasks".into()));
    }
    if spec.dimension < 2 {
        return Err(Error::Spec("scenario dimension must be >= 2".into()));
    }
    let mut ids: Vec<u32> = spec.classes().map(|(_, c)| c.class_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Spec("class ids must be unique across tasks".into()));
    }
    let min_cos = spec.min_separation_deg.to_radians().cos();

    let mut axis_rng = rng::stream(spec.seed, &[0xa715]);
    let mut axes: Vec<Vec<f64>> = Vec::new();
    for (_, class) in spec.classes() {
        let axis = match &class.axis {
            Some(a) => {
                if a.len() != spec.dimension {
                    return Err(Error::dim(spec.dimension, a.len()));
                }
                if linalg::is_zero(a) {
                    return Err(Error::Spec(format!("class {} has a zero axis", class.class_id)));
                }
                let a = linalg::normalized(a);
                if axes.iter().any(|b| dot(&a, b) > min_cos + 1e-12) {
                    return Err(Error::Spec(format!(
                        "class {} axis is closer than {}° to another class",
                        class.class_id, spec.min_separation_deg
                    )));
                }
                a
            }
            None => {
                let mut found = None;
                for _ in 0..100_000 {
                    let a = random_unit(&mut axis_rng, spec.dimension);
                    if axes.iter().all(|b| dot(&a, b) <= min_cos) {
                        found = Some(a);
                        break;
                    }
                }
                found.ok_or_else(|| {
                    Error::Spec(format!(
                        "could not place class {} at least {}° from the others",
                        class.class_id, spec.min_separation_deg
                    ))
                })?
            }
        };
        axes.push(axis);
    }

    let mut truth = Vec::new();
    let mut tasks = Vec::new();
    let mut axis_iter = axes.into_iter();
    for (t, task) in spec.tasks.iter().enumerate() {
        let class_space: Vec<u32> = task.classes.iter().map(|c| c.class_id).collect();
        let mut train_rows = Vec::new();
        let mut test_rows = Vec::new();
        for class in &task.classes {
            let axis = axis_iter.next().expect("one axis per class");
            let half_angle = class.half_angle_deg.to_radians();
            for (split, count, out) in [
                (0u64, class.train_count, &mut train_rows),
                (1u64, class.test_count, &mut test_rows),
            ] {
                let rows = sample_cap_rows(&CapSpec {
                    axis: axis.clone(),
                    half_angle,
                    count,
                    seed: rng::derive_seed(spec.seed, &[u64::from(class.class_id), split]),
                })?;
                out.extend(rows.into_iter().map(|r| (r, class.class_id)));
            }
            truth.push(GroundTruth {
                class_id: class.class_id,
                task: t,
                axis,
                half_angle,
            });
        }
        let mut shuffle = rng::stream(spec.seed, &[0x5fe1, t as u64]);
        train_rows.shuffle(&mut shuffle);
        test_rows.shuffle(&mut shuffle);
        let build = |rows: Vec<(Vec<f64>, u32)>| {
            let (vectors, labels): (Vec<Vec<f64>>, Vec<u32>) = rows.into_iter().unzip();
            EmbeddingSet::new(
                task.name.clone(),
                spec.dimension,
                vectors.concat(),
                Some(labels),
                class_space.clone(),
            )
        };
        tasks.push(TaskData {
            name: task.name.clone(),
            train: build(train_rows)?,
            test: build(test_rows)?,
        });
    }
    Ok(Scenario { tasks, truth })
}

/// An orthogonal map applied by [`rotate_set`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rotation {
    Identity,
    /// Row-major `dim × dim` matrix.
    Matrix { dim: usize, data: Vec<f64> },
    /// Rotation by `angle` radians in the coordinate plane `(i, j)`.
    Plane { i: usize, j: usize, angle: f64 },
    /// Rotation by `angle` radians in a random 2-plane drawn from `seed`.
    Random { angle: f64, seed: u64 },
}

impl Rotation {
    pub fn matrix(&self, dim: usize) -> Result<Vec<f64>> {
        let mut m = identity(dim);
        match self {
            Rotation::Identity => {}
            Rotation::Matrix { dim: md, data } => {
                if *md != dim || data.len() != dim * dim {
                    return Err(Error::dim(dim, *md));
                }
                m.clone_from(data);
            }
            Rotation::Plane { i, j, angle } => {
                if *i >= dim || *j >= dim || i == j {
                    return Err(Error::Spec(format!("bad rotation plane ({i}, {j})")));
                }
                let (s, c) = angle.sin_cos();
                m[i * dim + i] = c;
                m[j * dim + j] = c;
                m[i * dim + j] = -s;
                m[j * dim + i] = s;
            }
            Rotation::Random { angle, seed } => {
                let mut r = rng::rng_from(*seed);
                let a = random_unit(&mut r, dim);
                let b = random_orthogonal(&mut r, &a);
                let (s, c) = angle.sin_cos();
                // R = I + (c - 1)(aaᵀ + bbᵀ) + s(baᵀ - abᵀ)
                for r in 0..dim {
                    for col in 0..dim {
                        m[r * dim + col] += (c - 1.0) * (a[r] * a[col] + b[r] * b[col])
                            + s * (b[r] * a[col] - a[r] * b[col]);
                    }
                }
            }
        }
        Ok(m)
    }
}

fn identity(dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim * dim];
    for i in 0..dim {
        m[i * dim + i] = 1.0;
    }
    m
}

/// Largest entry of `|MᵀM - I|`.
pub fn orthogonality_error(m: &[f64], dim: usize) -> f64 {
    let mut worst = 0.0f64;
    for a in 0..dim {
        for b in 0..dim {
            let g: f64 = (0..dim).map(|k| m[k * dim + a] * m[k * dim + b]).sum();
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((g - target).abs());
        }
    }
    worst
}

/// Rotates every row, deflects each by `jitter` radians toward a random
/// perpendicular direction, and renormalizes. Row order is preserved.
pub fn rotate_set(
    set: &EmbeddingSet,
    rotation: &Rotation,
    jitter: f64,
    seed: u64,
) -> Result<EmbeddingSet> {
    let dim = set.dim();
    let m = rotation.matrix(dim)?;
    let err = orthogonality_error(&m, dim);
    if err > 1e-9 {
        return Err(Error::Validation(format!(
            "rotation is not orthogonal (error {err:.3e})"
        )));
    }
    let mut rng = rng::rng_from(seed);
    let mut out = Vec::with_capacity(set.matrix().len());
    let mut y = vec![0.0; dim];
    for row in set.rows() {
        linalg::matvec(&m, row, &mut y);
        linalg::normalize_in_place(&mut y);
        if jitter != 0.0 {
            let w = random_orthogonal(&mut rng, &y);
            let (s, c) = jitter.sin_cos();
            for (yi, wi) in y.iter_mut().zip(&w) {
                *yi = c * *yi + s * wi;
            }
            linalg::normalize_in_place(&mut y);
        }
        out.extend_from_slice(&y);
    }
    set.with_vectors(dim, out)
}
