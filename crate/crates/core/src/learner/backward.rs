//! Exact gradients of the averaged negative log-likelihood.

use super::{clamp_log, DecoderParams, EncoderParams, Loss, Model, SpanDecoderParams, SpanExample};
use crate::error::{Error, Result};
use crate::linalg::{self, dot};

/// Loss at the current parameters plus its gradient, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: Loss,
    pub grad: Model,
}

/// Classification loss gradient through decoder and encoder. `labels` are
/// global class ids that must belong to the decoder.
pub fn backward(model: &Model, batch: &[&[f64]], labels: &[u32]) -> Result<Gradients> {
    check_batch(batch.len(), labels.len())?;
    let local = model.decoder.local_labels(labels)?;
    let mut grad = model.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut clamped = 0;
    for (x, &y) in batch.iter().zip(&local) {
        if x.len() != model.encoder.input_dim() {
            return Err(Error::dim(model.encoder.input_dim(), x.len()));
        }
        let acts = model.encoder.trace(x);
        let v = acts.last().expect("trace includes the output");
        let (l, dv) = decoder_example(&model.decoder, v, y, scale, &mut grad.decoder, &mut clamped);
        loss += l;
        encoder_backprop(&model.encoder, &acts, dv, &mut grad.encoder);
    }
    Ok(Gradients {
        loss: Loss {
            value: loss * scale,
            clamped,
        },
        grad,
    })
}

/// Decoder-only gradient on fixed representations.
pub fn decoder_backward(
    dec: &DecoderParams,
    reps: &[&[f64]],
    labels: &[u32],
) -> Result<(Loss, DecoderParams)> {
    check_batch(reps.len(), labels.len())?;
    let local = dec.local_labels(labels)?;
    let mut grad = DecoderParams::zeros(dec.class_ids(), dec.dim())?;
    let scale = 1.0 / reps.len() as f64;
    let mut loss = 0.0;
    let mut clamped = 0;
    for (v, &y) in reps.iter().zip(&local) {
        if v.len() != dec.dim() {
            return Err(Error::dim(dec.dim(), v.len()));
        }
        loss += decoder_example(dec, v, y, scale, &mut grad, &mut clamped).0;
    }
    Ok((
        Loss {
            value: loss * scale,
            clamped,
        },
        grad,
    ))
}

/// Span loss `(-ln p_start[s] - ln p_end[e]) / 2`, averaged over examples,
/// differentiated through the span decoder and the encoder (applied per
/// token). The classification decoder receives no gradient.
pub fn span_backward(model: &Model, examples: &[SpanExample]) -> Result<Gradients> {
    let sd = model
        .span
        .as_ref()
        .ok_or_else(|| Error::Validation("model has no span decoder".into()))?;
    if examples.is_empty() {
        return Err(Error::EmptySet("empty span batch".into()));
    }
    let mut grad = model.zeros_like();
    let scale = 1.0 / examples.len() as f64;
    let mut loss = 0.0;
    let mut clamped = 0;
    for ex in examples {
        let target = ex.target()?;
        let mut traces = Vec::with_capacity(ex.tokens.len());
        for t in &ex.tokens {
            if t.len() != model.encoder.input_dim() {
                return Err(Error::dim(model.encoder.input_dim(), t.len()));
            }
            traces.push(model.encoder.trace(t));
        }
        let reps: Vec<&[f64]> = traces.iter().map(|a| &a[a.len() - 1][..]).collect();
        let span_grad = grad.span.as_mut().expect("zeros_like keeps the span decoder");
        let (l, dreps) = span_example(sd, &reps, target, scale, span_grad, &mut clamped);
        loss += l;
        for (acts, dv) in traces.iter().zip(dreps) {
            encoder_backprop(&model.encoder, acts, dv, &mut grad.encoder);
        }
    }
    Ok(Gradients {
        loss: Loss {
            value: loss * scale,
            clamped,
        },
        grad,
    })
}

/// Span-decoder-only gradient; `tokens` of each example are representations.
pub fn span_decoder_backward(
    sd: &SpanDecoderParams,
    examples: &[SpanExample],
) -> Result<(Loss, SpanDecoderParams)> {
    if examples.is_empty() {
        return Err(Error::EmptySet("empty span batch".into()));
    }
    let mut grad = SpanDecoderParams::zeros(sd.dim());
    let scale = 1.0 / examples.len() as f64;
    let mut loss = 0.0;
    let mut clamped = 0;
    for ex in examples {
        let target = ex.target()?;
        if let Some(t) = ex.tokens.iter().find(|t| t.len() != sd.dim()) {
            return Err(Error::dim(sd.dim(), t.len()));
        }
        let reps: Vec<&[f64]> = ex.tokens.iter().map(Vec::as_slice).collect();
        loss += span_example(sd, &reps, target, scale, &mut grad, &mut clamped).0;
    }
    Ok((
        Loss {
            value: loss * scale,
            clamped,
        },
        grad,
    ))
}

fn check_batch(n: usize, labels: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::EmptySet("empty batch".into()));
    }
    if n != labels {
        return Err(Error::dim(n, labels));
    }
    Ok(())
}

/// Accumulates `scale·(p − onehot) ⊗ v` into `grad` and returns the
/// example's loss and `∂loss/∂v` (already scaled).
fn decoder_example(
    dec: &DecoderParams,
    v: &[f64],
    y: usize,
    scale: f64,
    grad: &mut DecoderParams,
    clamped: &mut usize,
) -> (f64, Vec<f64>) {
    let d = dec.dim();
    let mut logits = vec![0.0; dec.len()];
    linalg::matvec(dec.columns(), v, &mut logits);
    let mut p = vec![0.0; logits.len()];
    linalg::softmax(&logits, &mut p);
    let loss = -clamp_log(p[y], clamped);
    let mut dv = vec![0.0; d];
    let gcols = grad.columns_mut();
    for (k, pk) in p.iter().enumerate() {
        let g = scale * (pk - if k == y { 1.0 } else { 0.0 });
        linalg::axpy(g, v, &mut gcols[k * d..(k + 1) * d]);
        linalg::axpy(g, dec.column(k), &mut dv);
    }
    (loss, dv)
}

fn span_example(
    sd: &SpanDecoderParams,
    reps: &[&[f64]],
    (s, e): (usize, usize),
    scale: f64,
    grad: &mut SpanDecoderParams,
    clamped: &mut usize,
) -> (f64, Vec<Vec<f64>>) {
    let mut dreps = vec![vec![0.0; sd.dim()]; reps.len()];
    let mut loss = 0.0;
    let half = 0.5 * scale;
    for (w, gw, target) in [
        (&sd.w_start, &mut grad.w_start, s),
        (&sd.w_end, &mut grad.w_end, e),
    ] {
        let logits: Vec<f64> = reps.iter().map(|r| dot(w, r)).collect();
        let mut p = vec![0.0; logits.len()];
        linalg::softmax(&logits, &mut p);
        loss -= 0.5 * clamp_log(p[target], clamped);
        for (t, (r, dr)) in reps.iter().zip(&mut dreps).enumerate() {
            let g = half * (p[t] - if t == target { 1.0 } else { 0.0 });
            linalg::axpy(g, r, gw);
            linalg::axpy(g, w, dr);
        }
    }
    (loss, dreps)
}

/// Backpropagates `dv = ∂loss/∂output` through the recorded activations.
fn encoder_backprop(enc: &EncoderParams, acts: &[Vec<f64>], dv: Vec<f64>, grad: &mut EncoderParams) {
    let layers = enc.layers();
    let mut delta = dv;
    for (i, layer) in layers.iter().enumerate().rev() {
        let input = &acts[i];
        let g = &mut grad.layers_mut()[i];
        for (o, &dz) in delta.iter().enumerate() {
            if dz == 0.0 {
                continue;
            }
            linalg::axpy(dz, input, &mut g.weight[o * layer.inputs..(o + 1) * layer.inputs]);
            g.bias[o] += dz;
        }
        if i == 0 {
            break;
        }
        let mut prev = vec![0.0; layer.inputs];
        for (o, &dz) in delta.iter().enumerate() {
            if dz != 0.0 {
                linalg::axpy(dz, &layer.weight[o * layer.inputs..(o + 1) * layer.inputs], &mut prev);
            }
        }
        for (p, a) in prev.iter_mut().zip(input) {
            *p *= 1.0 - a * a;
        }
        delta = prev;
    }
}
