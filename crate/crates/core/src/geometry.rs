//! Narrowest covering cones for class sub-spaces and the pairwise-cosine
//! anisotropy diagnostic.
//!
//! A cone with unit axis `c` and aperture `δ` covers every `x` with
//! `cos(x, c) >= δ`. Fitting maximizes `δ` over unit axes, then repeatedly
//! peels the worst-covered vectors until only the coverage target remains:
//!
//! ```text
//! V <- all vectors, target <- ceil(ρ·n)
//! loop
//!     ascend c on min_i cos(v_i, c) over V        (backtracking line search)
//!     if |V| <= target: stop
//!     drop the m = ceil((|V| - target) / 2) lowest-cosine vectors from V
//! ```
//!
//! The ascent steps along the normalized direction of the worst-covered
//! vector. When several vectors are within reach of the current minimum, the
//! step uses the minimum-norm combination of their tangent directions instead,
//! which keeps the search from zig-zagging along a ridge where two
//! constraints tie.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::ClassView;
use crate::error::{Error, Result};
use crate::linalg::{self, dot, normalize_in_place};

/// Tolerance used by [`cone_membership`].
pub const MEMBERSHIP_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConeFitConfig {
    pub learning_rate: f64,
    pub epsilon: f64,
    pub coverage: f64,
    pub max_inner_iters: usize,
    pub line_search_shrink: f64,
}

impl Default for ConeFitConfig {
    fn default() -> Self {
        ConeFitConfig {
            learning_rate: 0.1,
            epsilon: 1e-6,
            coverage: 0.95,
            max_inner_iters: 10_000,
            line_search_shrink: 0.5,
        }
    }
}

impl ConeFitConfig {
    pub fn with_coverage(mut self, coverage: f64) -> Self {
        self.coverage = coverage;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.learning_rate > 0.0
            && self.epsilon > 0.0
            && self.coverage > 0.0
            && self.max_inner_iters > 0;
        if !positive {
            return Err(Error::Validation(
                "cone fit parameters must be positive".into(),
            ));
        }
        if self.coverage > 1.0 {
            return Err(Error::Validation(format!(
                "coverage {} exceeds 1",
                self.coverage
            )));
        }
        if !(self.line_search_shrink > 0.0 && self.line_search_shrink < 1.0) {
            return Err(Error::Validation(format!(
                "line search shrink {} is not in (0, 1)",
                self.line_search_shrink
            )));
        }
        Ok(())
    }

    /// Number of vectors the fitted cone must keep: `ceil(coverage · n)`.
    pub fn keep_target(&self, n: usize) -> usize {
        // The slack absorbs representation error in products like 0.95 · 100.
        let raw = (self.coverage * n as f64 - 1e-9).ceil();
        (raw.max(1.0) as usize).min(n)
    }
}

/// Axis and aperture describing one class sub-space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cone {
    pub axis: Vec<f64>,
    pub aperture: f64,
    pub coverage_target: f64,
    pub kept_count: usize,
    pub converged: bool,
}

impl Cone {
    pub fn dim(&self) -> usize {
        self.axis.len()
    }

    /// Half-angle of the cone in radians.
    pub fn half_angle(&self) -> f64 {
        self.aperture.clamp(-1.0, 1.0).acos()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-round record of the inner ascent.
#[derive(Debug, Clone, Default)]
pub struct RoundTrace {
    /// Size of the working set during this round.
    pub set_size: usize,
    /// Objective after the initial axis and after every accepted step.
    pub objective: Vec<f64>,
    /// Line-search trials spent (accepted and rejected).
    pub iterations: usize,
    pub converged: bool,
    /// Largest deviation of `‖c‖₂` from 1 seen after any step.
    pub max_norm_error: f64,
}

/// A fitted cone plus the bookkeeping needed to audit the fit.
#[derive(Debug, Clone)]
pub struct ConeFit {
    pub cone: Cone,
    /// Input positions covered by the final working set, ascending.
    pub kept: Vec<usize>,
    /// Number of peeling rounds performed.
    pub peel_rounds: usize,
    pub rounds: Vec<RoundTrace>,
}

/// Fits the narrowest cone covering at least `ceil(coverage · n)` vectors.
///
/// `init` overrides the default starting axis (the normalized sum of the
/// inputs). Hitting `max_inner_iters` does not fail the fit; the best cone
/// found is returned with `converged == false`.
pub fn fit_cone(
    vectors: &[&[f64]],
    config: &ConeFitConfig,
    init: Option<&[f64]>,
) -> Result<ConeFit> {
    config.validate()?;
    let first = vectors
        .first()
        .ok_or_else(|| Error::EmptySet("cone fit needs at least one vector".into()))?;
    let dim = first.len();
    let mut units = Vec::with_capacity(vectors.len());
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(Error::dim(dim, v.len()));
        }
        if linalg::is_zero(v) {
            return Err(Error::Validation(format!("vector {i} is zero")));
        }
        units.push(linalg::normalized(v));
    }

    let mut axis = match init {
        Some(c) => {
            if c.len() != dim {
                return Err(Error::dim(dim, c.len()));
            }
            if linalg::is_zero(c) {
                return Err(Error::Validation("initial axis is zero".into()));
            }
            linalg::normalized(c)
        }
        None => initial_axis(vectors, &units),
    };

    let n = units.len();
    let target = config.keep_target(n);
    let mut working: Vec<usize> = (0..n).collect();
    let mut rounds = Vec::new();
    let mut peel_rounds = 0;

    loop {
        rounds.push(ascend(&units, &working, &mut axis, config));
        if working.len() <= target {
            break;
        }
        let m = (working.len() - target).div_ceil(2);
        // Boundary vectors tie at the optimum; rank on a 1e-9 grid so that
        // ties fall to the row index rather than to rounding noise.
        let mut ranked: Vec<(i64, usize)> = working
            .iter()
            .map(|&i| (tie_key(dot(&units[i], &axis)), i))
            .collect();
        ranked.sort_unstable();
        working = ranked[m..].iter().map(|&(_, i)| i).collect();
        working.sort_unstable();
        peel_rounds += 1;
    }

    let aperture = min_cosine(&units, &working, &axis);
    let converged = rounds.iter().all(|r| r.converged);
    Ok(ConeFit {
        cone: Cone {
            axis,
            aperture,
            coverage_target: config.coverage,
            kept_count: working.len(),
            converged,
        },
        kept: working,
        peel_rounds,
        rounds,
    })
}

/// [`fit_cone`] over the rows of one class.
pub fn fit_cone_view(
    view: &ClassView<'_>,
    config: &ConeFitConfig,
    init: Option<&[f64]>,
) -> Result<ConeFit> {
    fit_cone(&view.vectors(), config, init)
}

fn initial_axis(vectors: &[&[f64]], units: &[Vec<f64>]) -> Vec<f64> {
    let dim = units[0].len();
    let mut sum = vec![0.0; dim];
    for v in vectors {
        linalg::axpy(1.0, v, &mut sum);
    }
    if linalg::norm(&sum) > 0.0 {
        normalize_in_place(&mut sum);
        return sum;
    }
    // Raw vectors cancel out; fall back to the sum of directions, then to
    // the first vector.
    let mut sum = vec![0.0; dim];
    for u in units {
        linalg::axpy(1.0, u, &mut sum);
    }
    if linalg::norm(&sum) > 1e-12 {
        normalize_in_place(&mut sum);
        sum
    } else {
        units[0].clone()
    }
}

fn tie_key(cos: f64) -> i64 {
    (cos * 1e9).round() as i64
}

fn min_cosine(units: &[Vec<f64>], working: &[usize], axis: &[f64]) -> f64 {
    working
        .iter()
        .map(|&i| dot(&units[i], axis))
        .fold(f64::INFINITY, f64::min)
}

/// Backtracking ascent of `min_i cos(u_i, c)` over the working set.
fn ascend(
    units: &[Vec<f64>],
    working: &[usize],
    axis: &mut Vec<f64>,
    config: &ConeFitConfig,
) -> RoundTrace {
    let alpha_max = config.learning_rate;
    let mut alpha = alpha_max;
    let mut cosines: Vec<f64> = working.iter().map(|&i| dot(&units[i], axis)).collect();
    let mut objective = cosines.iter().copied().fold(f64::INFINITY, f64::min);
    let mut trace = RoundTrace {
        set_size: working.len(),
        objective: vec![objective],
        ..RoundTrace::default()
    };
    let mut trial = vec![0.0; axis.len()];

    while trace.iterations < config.max_inner_iters {
        trace.iterations += 1;
        // Anything closer than 2α to the minimum can become the minimum
        // within one step of length α.
        let reach = 2.0 * alpha;
        let Some(direction) = ascent_direction(units, working, &cosines, objective, reach, axis)
        else {
            alpha *= config.line_search_shrink;
            if alpha < config.epsilon {
                trace.converged = true;
                break;
            }
            continue;
        };

        trial.copy_from_slice(axis);
        linalg::axpy(alpha, &direction, &mut trial);
        normalize_in_place(&mut trial);
        let trial_objective = min_cosine(units, working, &trial);

        if trial_objective >= objective {
            let change = trial
                .iter()
                .zip(axis.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            axis.copy_from_slice(&trial);
            trace.max_norm_error = trace.max_norm_error.max((linalg::norm(axis) - 1.0).abs());
            for (s, &i) in cosines.iter_mut().zip(working) {
                *s = dot(&units[i], axis);
            }
            objective = trial_objective;
            trace.objective.push(objective);
            if change < config.epsilon {
                trace.converged = true;
                break;
            }
            alpha = (alpha / config.line_search_shrink).min(alpha_max);
        } else {
            alpha *= config.line_search_shrink;
            // No step can move a coordinate by epsilon any more.
            if alpha < config.epsilon {
                trace.converged = true;
                break;
            }
        }
    }
    polish(units, working, axis, &mut objective, config, &mut trace);
    trace
}

/// Replaces the axis with the exact optimum of the near-active constraints
/// when that does not lower the objective over the whole working set.
///
/// For unit vectors in an open half-space, the best axis of a set is the
/// direction of the minimum-norm point of its convex hull, and the optimal
/// aperture is that point's norm.
fn polish(
    units: &[Vec<f64>],
    working: &[usize],
    axis: &mut Vec<f64>,
    objective: &mut f64,
    config: &ConeFitConfig,
    trace: &mut RoundTrace,
) {
    let reach = 100.0 * config.epsilon;
    let active: Vec<&[f64]> = working
        .iter()
        .filter(|&&i| dot(&units[i], axis) <= *objective + reach)
        .map(|&i| units[i].as_slice())
        .collect();
    let x = min_norm_point(&active);
    if linalg::norm(&x) < 1e-12 {
        return;
    }
    let candidate = linalg::normalized(&x);
    let value = min_cosine(units, working, &candidate);
    if value >= *objective {
        *axis = candidate;
        *objective = value;
        trace.objective.push(value);
        trace.max_norm_error = trace.max_norm_error.max((linalg::norm(axis) - 1.0).abs());
    }
}

/// Minimum-norm point of the convex hull of `points` (Wolfe's method).
fn min_norm_point(points: &[&[f64]]) -> Vec<f64> {
    let scale = points.iter().map(|p| dot(p, p)).fold(0.0, f64::max);
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let start = (0..points.len())
        .min_by(|&a, &b| dot(points[a], points[a]).total_cmp(&dot(points[b], points[b])))
        .expect("min_norm_point needs points");
    let mut support = vec![start];
    let mut weights = vec![1.0];
    let mut x = points[start].to_vec();

    for _ in 0..(50 + 10 * points.len()) {
        let (j, pj_x) = (0..points.len())
            .map(|j| (j, dot(points[j], &x)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("nonempty");
        if dot(&x, &x) - pj_x <= tol || support.contains(&j) {
            break;
        }
        support.push(j);
        weights.push(0.0);

        loop {
            let Some(w) = affine_min_norm(points, &support) else {
                return x;
            };
            if w.iter().all(|&wi| wi > 1e-12) {
                weights = w;
                break;
            }
            // Walk from the current weights toward the affine minimizer until
            // the first weight hits zero, then drop it.
            let theta = weights
                .iter()
                .zip(&w)
                .filter(|(_, &wi)| wi <= 1e-12)
                .map(|(&li, &wi)| li / (li - wi))
                .fold(1.0, f64::min);
            for (li, wi) in weights.iter_mut().zip(&w) {
                *li += theta * (wi - *li);
            }
            let mut k = 0;
            while k < support.len() {
                if weights[k] <= 1e-12 {
                    support.remove(k);
                    weights.remove(k);
                } else {
                    k += 1;
                }
            }
            if support.len() <= 1 {
                weights = vec![1.0; support.len()];
                break;
            }
        }
        let total: f64 = weights.iter().sum();
        x.iter_mut().for_each(|v| *v = 0.0);
        for (&i, &w) in support.iter().zip(&weights) {
            linalg::axpy(w / total, points[i], &mut x);
        }
    }
    x
}

/// Weights (summing to 1) of the point of minimum norm in the affine hull of
/// the supporting points, or `None` if they are affinely dependent.
fn affine_min_norm(points: &[&[f64]], support: &[usize]) -> Option<Vec<f64>> {
    let k = support.len();
    // [G 1; 1ᵀ 0] [w; μ] = [0; 1]
    let size = k + 1;
    let mut a = vec![0.0; size * (size + 1)];
    let cols = size + 1;
    for (r, &i) in support.iter().enumerate() {
        for (c, &j) in support.iter().enumerate() {
            a[r * cols + c] = dot(points[i], points[j]);
        }
        a[r * cols + k] = 1.0;
        a[k * cols + r] = 1.0;
    }
    a[k * cols + size] = 1.0;
    let solution = solve_augmented(&mut a, size)?;
    Some(solution[..k].to_vec())
}

/// Gaussian elimination with partial pivoting on an `n × (n + 1)` augmented
/// matrix.
fn solve_augmented(a: &mut [f64], n: usize) -> Option<Vec<f64>> {
    let cols = n + 1;
    let magnitude = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&r, &s| a[r * cols + col].abs().total_cmp(&a[s * cols + col].abs()))?;
        if a[pivot * cols + col].abs() <= 1e-13 * magnitude {
            return None;
        }
        if pivot != col {
            for c in 0..cols {
                a.swap(pivot * cols + c, col * cols + c);
            }
        }
        for r in col + 1..n {
            let f = a[r * cols + col] / a[col * cols + col];
            if f != 0.0 {
                for c in col..cols {
                    a[r * cols + c] -= f * a[col * cols + c];
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut acc = a[r * cols + n];
        for c in r + 1..n {
            acc -= a[r * cols + c] * x[c];
        }
        x[r] = acc / a[r * cols + r];
    }
    Some(x)
}

/// Unit steepest-ascent direction for the minimum over the near-active set,
/// or `None` when the current axis is stationary for that set.
fn ascent_direction(
    units: &[Vec<f64>],
    working: &[usize],
    cosines: &[f64],
    objective: f64,
    reach: f64,
    axis: &[f64],
) -> Option<Vec<f64>> {
    // Tangent components of the near-active vectors. With a single one this
    // is exactly the worst-covered vector's direction.
    let tangents: Vec<Vec<f64>> = working
        .iter()
        .zip(cosines)
        .filter(|(_, &s)| s <= objective + reach)
        .map(|(&i, &s)| {
            let mut p = units[i].clone();
            linalg::axpy(-s, axis, &mut p);
            p
        })
        .collect();

    let refs: Vec<&[f64]> = tangents.iter().map(Vec::as_slice).collect();
    let mut x = min_norm_point(&refs);
    let len = linalg::norm(&x);
    if len < 1e-12 {
        return None;
    }
    x.iter_mut().for_each(|v| *v /= len);
    Some(x)
}

/// Whether `x` lies inside the cone (with a `1e-12` slack on the aperture).
pub fn cone_membership(x: &[f64], cone: &Cone) -> Result<bool> {
    Ok(relative_position(x, cone)? >= cone.aperture - MEMBERSHIP_SLACK)
}

/// Cosine between `v` and the cone axis.
pub fn relative_position(v: &[f64], cone: &Cone) -> Result<f64> {
    if v.len() != cone.dim() {
        return Err(Error::dim(cone.dim(), v.len()));
    }
    if linalg::is_zero(v) {
        return Err(Error::Validation("zero vector has no direction".into()));
    }
    Ok(linalg::cosine(v, &cone.axis))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub sample_count: u64,
    pub class_pair: (u32, u32),
}

impl CosineHistogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    /// Fraction of samples in bins lying entirely inside `[lo, hi]`.
    pub fn mass_within(&self, lo: f64, hi: f64) -> f64 {
        let inside: u64 = self
            .counts
            .iter()
            .enumerate()
            .filter(|(k, _)| self.bin_edges[*k] >= lo - 1e-12 && self.bin_edges[k + 1] <= hi + 1e-12)
            .map(|(_, &c)| c)
            .sum();
        inside as f64 / self.sample_count as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (k, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", self.bin_edges[k], self.bin_edges[k + 1], c);
        }
        out
    }
}

/// Bin index for a cosine on equal-width bins over [-1, 1]; bins are
/// half-open except the last, which also holds 1.0.
pub fn cosine_bin(cos: f64, bins: usize) -> usize {
    let t = ((cos.clamp(-1.0, 1.0) + 1.0) / 2.0 * bins as f64).floor() as usize;
    t.min(bins - 1)
}

/// Histogram of cosines between uniformly drawn pairs, one row from each
/// class, with replacement.
pub fn cosine_pair_distribution(
    a: &ClassView<'_>,
    b: &ClassView<'_>,
    samples: u64,
    bins: usize,
    seed: u64,
) -> Result<CosineHistogram> {
    let mut hist = cosine_pair_distribution_rows(&a.vectors(), &b.vectors(), samples, bins, seed)?;
    hist.class_pair = (a.class_id(), b.class_id());
    Ok(hist)
}

/// [`cosine_pair_distribution`] over raw row lists.
pub fn cosine_pair_distribution_rows(
    a: &[&[f64]],
    b: &[&[f64]],
    samples: u64,
    bins: usize,
    seed: u64,
) -> Result<CosineHistogram> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet("cosine sampling needs two nonempty classes".into()));
    }
    if samples == 0 || bins == 0 {
        return Err(Error::Validation("samples and bins must be at least 1".into()));
    }
    let dim = a[0].len();
    if let Some(bad) = a.iter().chain(b).find(|v| v.len() != dim) {
        return Err(Error::dim(dim, bad.len()));
    }
    let unit_a: Vec<Vec<f64>> = a.iter().map(|v| linalg::normalized(v)).collect();
    let unit_b: Vec<Vec<f64>> = b.iter().map(|v| linalg::normalized(v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u64; bins];
    for _ in 0..samples {
        let i = rng.random_range(0..unit_a.len());
        let j = rng.random_range(0..unit_b.len());
        let cos = dot(&unit_a[i], &unit_b[j]);
        counts[cosine_bin(cos, bins)] += 1;
    }
    let bin_edges = (0..=bins)
        .map(|k| -1.0 + 2.0 * k as f64 / bins as f64)
        .collect();
    Ok(CosineHistogram {
        bin_edges,
        counts,
        sample_count: samples,
        class_pair: (0, 0),
    })
}
