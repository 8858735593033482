//! The trainable model: a feed-forward encoder, a unified softmax decoder
//! with one bias-free column per global class, and a start/end span decoder.

mod adam;
mod backward;
mod checkpoint;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use backward::{backward, decoder_backward, span_backward, span_decoder_backward, Gradients};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, dot};
use crate::rng;

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        linalg::matvec(&self.weight, x, out);
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
    }
}

/// Stack of dense layers with `tanh` between consecutive layers; the last
/// layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    layers: Vec<Dense>,
}

impl EncoderParams {
    /// Uniform `±1/√fan_in` initialization. `dims` lists every width from
    /// input to representation, e.g. `[d_in, h, d_rep]`.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        let mut enc = Self::zeros(dims)?;
        let mut rng = rng::stream(seed, &[0xe1c]);
        for layer in &mut enc.layers {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            for w in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *w = rng.random_range(-bound..=bound);
            }
        }
        Ok(enc)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Spec(format!("bad encoder widths {dims:?}")));
        }
        Ok(EncoderParams {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        })
    }

    /// Single linear layer that returns its input.
    pub fn identity(dim: usize) -> Result<Self> {
        let mut enc = Self::zeros(&[dim, dim])?;
        for i in 0..dim {
            enc.layers[0].weight[i * dim + i] = 1.0;
        }
        Ok(enc)
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Spec("encoder needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.inputs == 0 || l.outputs == 0 {
                return Err(Error::Spec(format!("layer {i} has a zero width")));
            }
            if l.weight.len() != l.inputs * l.outputs {
                return Err(Error::dim(l.inputs * l.outputs, l.weight.len()));
            }
            if l.bias.len() != l.outputs {
                return Err(Error::dim(l.outputs, l.bias.len()));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(Error::dim(layers[i - 1].outputs, l.inputs));
            }
            if !l.weight.iter().chain(&l.bias).all(|x| x.is_finite()) {
                return Err(Error::Validation(format!("layer {i} has non-finite entries")));
            }
        }
        Ok(EncoderParams { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dim(self.input_dim(), x.len()));
        }
        let out = self.trace(x).pop().expect("trace includes the output");
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("encoder output".into()));
        }
        Ok(out)
    }

    /// Activations `a_0 = x, …, a_L = output`; hidden ones are post-`tanh`.
    pub(crate) fn trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.outputs];
            layer.forward(&acts[i], &mut out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out);
        }
        acts
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }
}

/// Unified classification decoder: `p(y|v) ∝ exp(W_yᵀ v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    class_ids: Vec<u32>,
    dim: usize,
    /// Row `k` is the column vector `W_y` for `class_ids[k]`.
    columns: Vec<f64>,
}

impl DecoderParams {
    pub fn init(class_ids: &[u32], dim: usize, seed: u64) -> Result<Self> {
        let mut dec = Self::zeros(class_ids, dim)?;
        let mut rng = rng::stream(seed, &[0xdec]);
        let bound = 1.0 / (dim as f64).sqrt();
        for w in &mut dec.columns {
            *w = rng.random_range(-bound..=bound);
        }
        Ok(dec)
    }

    pub fn zeros(class_ids: &[u32], dim: usize) -> Result<Self> {
        Self::from_columns(class_ids.to_vec(), dim, vec![0.0; class_ids.len() * dim])
    }

    pub fn from_columns(class_ids: Vec<u32>, dim: usize, columns: Vec<f64>) -> Result<Self> {
        if class_ids.is_empty() || dim == 0 {
            return Err(Error::Spec("decoder needs at least one class and dimension".into()));
        }
        let mut sorted = class_ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Spec("decoder class ids repeat".into()));
        }
        if columns.len() != class_ids.len() * dim {
            return Err(Error::dim(class_ids.len() * dim, columns.len()));
        }
        if !columns.iter().all(|x| x.is_finite()) {
            return Err(Error::Validation("decoder has non-finite entries".into()));
        }
        Ok(DecoderParams {
            class_ids,
            dim,
            columns,
        })
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn columns(&self) -> &[f64] {
        &self.columns
    }

    pub fn column(&self, k: usize) -> &[f64] {
        &self.columns[k * self.dim..(k + 1) * self.dim]
    }

    pub fn column_of(&self, class_id: u32) -> Option<&[f64]> {
        self.index_of(class_id).map(|k| self.column(k))
    }

    pub fn index_of(&self, class_id: u32) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }

    pub(crate) fn local_labels(&self, labels: &[u32]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|&y| {
                self.index_of(y).ok_or_else(|| {
                    Error::Validation(format!("label {y} is not a decoder class"))
                })
            })
            .collect()
    }

    pub(crate) fn columns_mut(&mut self) -> &mut [f64] {
        &mut self.columns
    }

    pub fn logits(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(Error::dim(self.dim, v.len()));
        }
        let mut out = vec![0.0; self.len()];
        linalg::matvec(&self.columns, v, &mut out);
        Ok(out)
    }

    /// Global class id with the largest logit; ties go to the first column.
    pub fn predict(&self, v: &[f64]) -> Result<u32> {
        Ok(self.class_ids[linalg::argmax(&self.logits(v)?)])
    }
}

pub fn class_probabilities(dec: &DecoderParams, v: &[f64]) -> Result<Vec<f64>> {
    let logits = dec.logits(v)?;
    let mut p = vec![0.0; logits.len()];
    linalg::softmax(&logits, &mut p);
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Loss {
    pub value: f64,
    /// Examples whose true-class probability hit [`PROB_FLOOR`].
    pub clamped: usize,
}

/// Mean of `-ln p[label]` over the batch. `labels` index into each row.
pub fn nll_loss(probs: &[Vec<f64>], labels: &[usize]) -> Result<Loss> {
    if probs.is_empty() {
        return Err(Error::EmptySet("loss over an empty batch".into()));
    }
    if probs.len() != labels.len() {
        return Err(Error::dim(probs.len(), labels.len()));
    }
    let mut total = 0.0;
    let mut clamped = 0;
    for (p, &y) in probs.iter().zip(labels) {
        let py = *p.get(y).ok_or_else(|| Error::dim(p.len(), y + 1))?;
        total -= clamp_log(py, &mut clamped);
    }
    Ok(Loss {
        value: total / probs.len() as f64,
        clamped,
    })
}

pub(crate) fn clamp_log(p: f64, clamped: &mut usize) -> f64 {
    if p < PROB_FLOOR {
        *clamped += 1;
        PROB_FLOOR.ln()
    } else {
        p.ln()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanDecoderParams {
    pub w_start: Vec<f64>,
    pub w_end: Vec<f64>,
}

impl SpanDecoderParams {
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[0x5ba2]);
        let bound = 1.0 / (dim as f64).sqrt();
        let mut draw = || (0..dim).map(|_| rng.random_range(-bound..=bound)).collect();
        SpanDecoderParams {
            w_start: draw(),
            w_end: draw(),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        SpanDecoderParams {
            w_start: vec![0.0; dim],
            w_end: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.w_start.len()
    }
}

/// One extractive-QA example: per-token vectors (raw inputs or
/// representations, depending on the caller) and inclusive gold spans. The
/// first gold span is the training target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanExample {
    pub tokens: Vec<Vec<f64>>,
    pub golds: Vec<(usize, usize)>,
}

impl SpanExample {
    pub(crate) fn target(&self) -> Result<(usize, usize)> {
        let &(s, e) = self
            .golds
            .first()
            .ok_or_else(|| Error::Validation("span example has no gold span".into()))?;
        if s > e || e >= self.tokens.len() {
            return Err(Error::Validation(format!(
                "gold span ({s}, {e}) outside a context of {} tokens",
                self.tokens.len()
            )));
        }
        Ok((s, e))
    }
}

/// Start and end distributions over the `L` context tokens.
pub fn span_scores(sd: &SpanDecoderParams, tokens: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if tokens.is_empty() {
        return Err(Error::EmptySet("span context has no tokens".into()));
    }
    let d = sd.dim();
    if let Some(t) = tokens.iter().find(|t| t.len() != d) {
        return Err(Error::dim(d, t.len()));
    }
    let dist = |w: &[f64]| {
        let logits: Vec<f64> = tokens.iter().map(|t| dot(w, t)).collect();
        let mut p = vec![0.0; logits.len()];
        linalg::softmax(&logits, &mut p);
        p
    };
    Ok((dist(&sd.w_start), dist(&sd.w_end)))
}

/// Most probable `(s, e)` with `s ≤ e < s + max_len`; ties keep the smallest
/// `s`, then the smallest `e`.
pub fn predict_span(start: &[f64], end: &[f64], max_len: usize) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_score = f64::NEG_INFINITY;
    let max_len = max_len.max(1);
    for (s, ps) in start.iter().enumerate() {
        for (e, pe) in end.iter().enumerate().skip(s).take(max_len) {
            let score = ps * pe;
            if score > best_score {
                best_score = score;
                best = (s, e);
            }
        }
    }
    best
}

/// Token-overlap F1 against the best-matching gold span (inclusive bounds).
pub fn span_f1(pred: (usize, usize), golds: &[(usize, usize)]) -> f64 {
    golds
        .iter()
        .map(|&gold| {
            let lo = pred.0.max(gold.0);
            let hi = pred.1.min(gold.1);
            if hi < lo {
                return 0.0;
            }
            let overlap = (hi - lo + 1) as f64;
            let p = overlap / (pred.1 - pred.0 + 1) as f64;
            let r = overlap / (gold.1 - gold.0 + 1) as f64;
            2.0 * p * r / (p + r)
        })
        .fold(0.0, f64::max)
}

/// Everything that is trained and checkpointed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<SpanDecoderParams>,
}

impl Model {
    pub fn init(dims: &[usize], class_ids: &[u32], with_span: bool, seed: u64) -> Result<Self> {
        let encoder = EncoderParams::init(dims, rng::derive_seed(seed, &[1]))?;
        let d = encoder.output_dim();
        Ok(Model {
            decoder: DecoderParams::init(class_ids, d, rng::derive_seed(seed, &[2]))?,
            span: with_span.then(|| SpanDecoderParams::init(d, rng::derive_seed(seed, &[3]))),
            encoder,
        })
    }

    pub fn new(
        encoder: EncoderParams,
        decoder: DecoderParams,
        span: Option<SpanDecoderParams>,
    ) -> Result<Self> {
        let d = encoder.output_dim();
        if decoder.dim() != d {
            return Err(Error::dim(d, decoder.dim()));
        }
        if let Some(sd) = &span {
            if sd.w_start.len() != d || sd.w_end.len() != d {
                return Err(Error::dim(d, sd.w_start.len().min(sd.w_end.len())));
            }
        }
        Ok(Model {
            encoder,
            decoder,
            span,
        })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Named tensors with shapes, in a fixed order shared with
    /// [`Model::tensors_mut`].
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.layers.iter().enumerate() {
            out.push((format!("enc.{i}.weight"), vec![l.outputs, l.inputs], &l.weight[..]));
            out.push((format!("enc.{i}.bias"), vec![l.outputs], &l.bias[..]));
        }
        out.push((
            "dec.columns".into(),
            vec![self.decoder.len(), self.decoder.dim],
            &self.decoder.columns[..],
        ));
        if let Some(sd) = &self.span {
            out.push(("span.start".into(), vec![sd.dim()], &sd.w_start[..]));
            out.push(("span.end".into(), vec![sd.dim()], &sd.w_end[..]));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.encoder.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.decoder.columns);
        if let Some(sd) = &mut self.span {
            out.push(&mut sd.w_start);
            out.push(&mut sd.w_end);
        }
        out
    }

    /// Predicted global class for a raw input.
    pub fn classify(&self, x: &[f64]) -> Result<u32> {
        self.decoder.predict(&self.encoder.encode(x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_network_encodes_to_zero() {
        let enc = EncoderParams::zeros(&[3, 5, 2]).unwrap();
        assert_eq!(enc.encode(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_encoder_reproduces_input() {
        let enc = EncoderParams::identity(4).unwrap();
        let x = [0.5, -1.0, 2.0, 3.5];
        assert_eq!(enc.encode(&x).unwrap(), x.to_vec());
        assert!(matches!(enc.encode(&[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn encoder_jacobian_matches_finite_differences() {
        let enc = EncoderParams::init(&[4, 6, 3], 12).unwrap();
        let x = [0.3, -0.7, 0.2, 0.9];
        let h = 1e-5;
        // Directional derivative along a fixed perturbation.
        let dx = [0.4, 0.1, -0.3, 0.2];
        let shift = |s: f64| -> Vec<f64> {
            let xs: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + s * b).collect();
            enc.encode(&xs).unwrap()
        };
        let (plus, minus) = (shift(h), shift(-h));
        let fd: Vec<f64> = plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        // Analytic: J dx via the chain rule on the trace.
        let acts = enc.trace(&x);
        let mut t = dx.to_vec();
        for (i, layer) in enc.layers().iter().enumerate() {
            let mut next = vec![0.0; layer.outputs];
            linalg::matvec(&layer.weight, &t, &mut next);
            if i + 1 < enc.layers().len() {
                for (n, a) in next.iter_mut().zip(&acts[i + 1]) {
                    *n *= 1.0 - a * a;
                }
            }
            t = next;
        }
        for (a, b) in t.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-4 * a.abs().max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn probabilities_from_zero_columns_are_uniform() {
        let dec = DecoderParams::zeros(&[0, 1, 2, 3], 3).unwrap();
        let p = class_probabilities(&dec, &[1.0, 2.0, 3.0]).unwrap();
        for q in p {
            assert!((q - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn two_class_softmax_by_hand() {
        let dec = DecoderParams::from_columns(vec![0, 1], 1, vec![3f64.ln(), 0.0]).unwrap();
        let p = class_probabilities(&dec, &[1.0]).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn shifting_every_column_by_v_keeps_probabilities() {
        let dec = DecoderParams::init(&[5, 6, 7], 4, 3).unwrap();
        let v = [0.2, -0.4, 1.0, 0.3];
        let k = 2.5;
        let shifted: Vec<f64> = dec
            .columns()
            .chunks(4)
            .flat_map(|c| c.iter().zip(&v).map(|(a, b)| a + k * b).collect::<Vec<_>>())
            .collect();
        let dec2 = DecoderParams::from_columns(vec![5, 6, 7], 4, shifted).unwrap();
        let p = class_probabilities(&dec, &v).unwrap();
        let q = class_probabilities(&dec2, &v).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nll_cases() {
        let uniform = vec![vec![0.25; 4]; 3];
        let l = nll_loss(&uniform, &[0, 1, 3]).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-12);
        let onehot = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(nll_loss(&onehot, &[1, 0]).unwrap().value, 0.0);
        let l = nll_loss(&[vec![0.75, 0.25]], &[1]).unwrap();
        assert!((l.value - 1.3862944).abs() < 1e-7);
        let l = nll_loss(&[vec![1.0, 0.0]], &[1]).unwrap();
        assert_eq!(l.clamped, 1);
        assert!((l.value + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn span_score_cases() {
        let sd = SpanDecoderParams {
            w_start: vec![1.0, 0.0],
            w_end: vec![0.0, 1.0],
        };
        let (s, e) = span_scores(&sd, &[vec![0.3, 0.4]]).unwrap();
        assert_eq!((s, e), (vec![1.0], vec![1.0]));

        let tokens = vec![vec![0.0, 1.0], vec![0.0, -2.0], vec![0.0, 5.0]];
        let (s, _) = span_scores(&sd, &tokens).unwrap();
        for p in s {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let tokens = vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![-1.0, 0.0]];
        let (s, _) = span_scores(&sd, &tokens).unwrap();
        for (p, want) in s.iter().zip([0.6652, 0.2447, 0.0900]) {
            assert!((p - want).abs() < 1e-4);
        }
        assert!(matches!(span_scores(&sd, &[]), Err(Error::EmptySet(_))));
    }

    #[test]
    fn span_prediction_cases() {
        assert_eq!(predict_span(&[1.0], &[1.0], 5), (0, 0));
        let start = [0.05, 0.05, 0.8, 0.05, 0.05];
        let end = [0.05, 0.05, 0.05, 0.05, 0.8];
        assert_eq!(predict_span(&start, &end, 3), (2, 4));
        // Too long for max_len 2: the best legal pair changes.
        assert_ne!(predict_span(&start, &end, 2), (2, 4));
        let u = [0.25; 4];
        assert_eq!(predict_span(&u, &u, 4), (0, 0));
    }

    #[test]
    fn span_f1_cases() {
        assert_eq!(span_f1((2, 4), &[(0, 0), (2, 4)]), 1.0);
        assert_eq!(span_f1((0, 1), &[(3, 5)]), 0.0);
        assert!((span_f1((2, 4), &[(3, 5)]) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tensor_order_is_stable() {
        let mut m = Model::init(&[3, 4, 2], &[0, 1], true, 1).unwrap();
        let names: Vec<String> = m.tensors().into_iter().map(|t| t.0).collect();
        assert_eq!(
            names,
            [
                "enc.0.weight",
                "enc.0.bias",
                "enc.1.weight",
                "enc.1.bias",
                "dec.columns",
                "span.start",
                "span.end"
            ]
        );
        let lens: Vec<usize> = m.tensors().iter().map(|t| t.2.len()).collect();
        let lens_mut: Vec<usize> = m.tensors_mut().iter().map(|t| t.len()).collect();
        assert_eq!(lens, lens_mut);
    }
}
