//! Toy autoregressive conditional model over motion tokens.
//!
//! The condition is summarised as the mean of its serialized token
//! embeddings. Each step maps `[context; embed(prev)]` through one affine
//! layer to logits over the motion vocabulary plus an end-of-motion class.
//! Decoding starts from the begin-motion sentinel.

use rand::Rng;

use crate::dataset::{serialize_condition, Condition, MotionSequence};
use crate::error::{invalid, Error, Result};
use crate::numeric::{axpy, softmax_in_place};
use crate::vocab::{TokenId, VocabSpec};

/// Offsets of the parameter blocks in the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelLayout {
    pub vocab_size: usize,
    /// Motion vocabulary size plus one (end class / begin input).
    pub classes: usize,
    pub d: usize,
}

impl ModelLayout {
    fn new(vocab: &VocabSpec, d: usize) -> Self {
        ModelLayout {
            vocab_size: vocab.size(),
            classes: vocab.motion_size() + 1,
            d,
        }
    }

    fn cond_offset(&self) -> usize {
        0
    }

    fn prev_offset(&self) -> usize {
        self.vocab_size * self.d
    }

    fn weight_offset(&self) -> usize {
        self.prev_offset() + self.classes * self.d
    }

    fn bias_offset(&self) -> usize {
        self.weight_offset() + self.classes * 2 * self.d
    }

    pub fn len(&self) -> usize {
        self.bias_offset() + self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn cond_row(&self, id: usize) -> std::ops::Range<usize> {
        let s = self.cond_offset() + id * self.d;
        s..s + self.d
    }

    fn prev_row(&self, idx: usize) -> std::ops::Range<usize> {
        let s = self.prev_offset() + idx * self.d;
        s..s + self.d
    }

    /// Output row of `class`: first `d` entries act on the context, the next
    /// `d` on the previous-token embedding.
    fn weight_row(&self, class: usize) -> std::ops::Range<usize> {
        let s = self.weight_offset() + class * 2 * self.d;
        s..s + 2 * self.d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    vocab: VocabSpec,
    layout: ModelLayout,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    layout: ModelLayout,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(vocab: &VocabSpec, d: usize) -> Self {
        let layout = ModelLayout::new(vocab, d);
        ModelParams {
            vocab: *vocab,
            layout,
            values: vec![0.0; layout.len()],
        }
    }

    /// Small uniform initialisation in `[-scale, scale]`.
    pub fn random<R: Rng>(vocab: &VocabSpec, d: usize, scale: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(vocab, d);
        for v in p.values.iter_mut() {
            *v = rng.gen_range(-scale..=scale);
        }
        p
    }

    /// Reassembles parameters from a flat vector (checkpoint loading).
    pub fn from_values(vocab: &VocabSpec, d: usize, values: Vec<f64>) -> Result<Self> {
        let layout = ModelLayout::new(vocab, d);
        if values.len() != layout.len() {
            return invalid(format!(
                "expected {} model parameters, got {}",
                layout.len(),
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(ModelParams {
            vocab: *vocab,
            layout,
            values,
        })
    }

    pub fn vocab(&self) -> &VocabSpec {
        &self.vocab
    }

    pub fn layout(&self) -> ModelLayout {
        self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.d
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn zero_gradient(&self) -> Gradient {
        Gradient {
            layout: self.layout,
            values: vec![0.0; self.layout.len()],
        }
    }

    /// Overwrites one entry of the output bias (test fixtures).
    pub fn set_bias(&mut self, class: usize, value: f64) {
        let off = self.layout.bias_offset();
        self.values[off + class] = value;
    }

    fn cond_row(&self, id: TokenId) -> &[f64] {
        &self.values[self.layout.cond_row(id as usize)]
    }

    fn prev_row(&self, idx: usize) -> &[f64] {
        &self.values[self.layout.prev_row(idx)]
    }

    fn bias(&self) -> &[f64] {
        let off = self.layout.bias_offset();
        &self.values[off..off + self.layout.classes]
    }

    fn end_class(&self) -> usize {
        self.layout.classes - 1
    }

    /// Maps a global motion id or the begin sentinel to a previous-token row.
    fn prev_index(&self, prev: TokenId) -> Result<usize> {
        if prev == self.vocab.special.begin_motion {
            Ok(self.end_class())
        } else {
            self.vocab
                .motion
                .index_of(prev)
                .ok_or_else(|| Error::InvalidArgument(format!("previous token {prev} is neither a motion id nor begin-motion")))
        }
    }

    /// `W_ctx · context + b` for every class; reused across decoding steps.
    fn context_logits(&self, context: &[f64]) -> Vec<f64> {
        let d = self.layout.d;
        let bias = self.bias();
        (0..self.layout.classes)
            .map(|k| {
                let row = &self.values[self.layout.weight_row(k)];
                bias[k] + row[..d].iter().zip(context).map(|(w, c)| w * c).sum::<f64>()
            })
            .collect()
    }

    fn step_logits(&self, base: &[f64], prev_idx: usize, out: &mut [f64]) {
        let d = self.layout.d;
        let e = self.prev_row(prev_idx);
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.values[self.layout.weight_row(k)];
            *o = base[k] + row[d..].iter().zip(e).map(|(w, x)| w * x).sum::<f64>();
        }
    }
}

impl Gradient {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> ModelLayout {
        self.layout
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_scaled(&mut self, s: f64, other: &Gradient) {
        assert_eq!(self.layout, other.layout, "gradient shape mismatch");
        axpy(s, &other.values, &mut self.values);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Mean of the condition-embedding rows over the serialized active tokens.
pub fn encode_condition(params: &ModelParams, cond: &Condition) -> Vec<f64> {
    let tokens = serialize_condition(cond, &params.vocab);
    let mut ctx = vec![0.0; params.dim()];
    if tokens.is_empty() {
        return ctx;
    }
    for &t in &tokens {
        axpy(1.0, params.cond_row(t), &mut ctx);
    }
    let inv = 1.0 / tokens.len() as f64;
    ctx.iter_mut().for_each(|c| *c *= inv);
    ctx
}

/// Logits over motion ids (local order) followed by the end class.
pub fn next_token_logits(params: &ModelParams, context: &[f64], prev: TokenId) -> Result<Vec<f64>> {
    if context.len() != params.dim() {
        return invalid(format!("context has dimension {}, model expects {}", context.len(), params.dim()));
    }
    let prev_idx = params.prev_index(prev)?;
    let base = params.context_logits(context);
    let mut out = vec![0.0; params.layout.classes];
    params.step_logits(&base, prev_idx, &mut out);
    Ok(out)
}

/// Per-step target classes: the motion tokens then the end class.
fn targets(params: &ModelParams, motion: &MotionSequence) -> Result<Vec<usize>> {
    if motion.tokens.is_empty() {
        return invalid("log-likelihood of an empty motion");
    }
    let mut out = Vec::with_capacity(motion.tokens.len() + 1);
    for &t in &motion.tokens {
        out.push(
            params
                .vocab
                .motion
                .index_of(t)
                .ok_or_else(|| Error::InvalidArgument(format!("motion token {t} outside the motion range")))?,
        );
    }
    out.push(params.end_class());
    Ok(out)
}

/// Length-normalised teacher-forced log-likelihood, end step included.
pub fn sequence_loglik(params: &ModelParams, cond: &Condition, motion: &MotionSequence) -> Result<f64> {
    let targets = targets(params, motion)?;
    let ctx = encode_condition(params, cond);
    let base = params.context_logits(&ctx);
    let mut logits = vec![0.0; params.layout.classes];
    let mut prev = params.end_class();
    let mut total = 0.0;
    for &y in &targets {
        params.step_logits(&base, prev, &mut logits);
        let lse = crate::numeric::logsumexp(&logits);
        total += logits[y] - lse;
        prev = y;
    }
    let ll = total / targets.len() as f64;
    if !ll.is_finite() {
        return Err(Error::NonFinite(format!("log-likelihood of `{}`", motion.motion_id)));
    }
    Ok(ll)
}

/// Adds `scale · ∇ sequence_loglik` into `grad` and returns the
/// log-likelihood.
pub fn accumulate_loglik_gradient(
    params: &ModelParams,
    cond: &Condition,
    motion: &MotionSequence,
    scale: f64,
    grad: &mut Gradient,
) -> Result<f64> {
    assert_eq!(grad.layout, params.layout, "gradient shape mismatch");
    let lay = params.layout;
    let d = lay.d;
    let targets = targets(params, motion)?;
    let tokens = serialize_condition(cond, &params.vocab);
    let ctx = encode_condition(params, cond);
    let base = params.context_logits(&ctx);
    let n = targets.len() as f64;

    let mut probs = vec![0.0; lay.classes];
    // Σ_t dℓ/dlogits_t, shared by the context half of W and the bias
    let mut g_sum = vec![0.0; lay.classes];
    let mut d_ctx = vec![0.0; d];
    let mut prev = params.end_class();
    for &y in &targets {
        params.step_logits(&base, prev, &mut probs);
        softmax_in_place(&mut probs);
        // dℓ/dlogit_k = (1[k=y] - p_k) / n
        let e_prev: Vec<f64> = params.prev_row(prev).to_vec();
        let mut d_prev = vec![0.0; d];
        for k in 0..lay.classes {
            let g = ((k == y) as u8 as f64 - probs[k]) * scale / n;
            if g == 0.0 {
                continue;
            }
            g_sum[k] += g;
            let wr = lay.weight_row(k);
            let row = &params.values[wr.clone()];
            axpy(g, &row[d..], &mut d_prev);
            axpy(g, &e_prev, &mut grad.values[wr.start + d..wr.end]);
        }
        axpy(1.0, &d_prev, &mut grad.values[lay.prev_row(prev)]);
        prev = y;
    }
    let bias_off = lay.bias_offset();
    for k in 0..lay.classes {
        let g = g_sum[k];
        if g == 0.0 {
            continue;
        }
        grad.values[bias_off + k] += g;
        let wr = lay.weight_row(k);
        axpy(g, &params.values[wr.start..wr.start + d], &mut d_ctx);
        axpy(g, &ctx, &mut grad.values[wr.start..wr.start + d]);
    }
    if !tokens.is_empty() {
        let inv = 1.0 / tokens.len() as f64;
        for &t in &tokens {
            axpy(inv, &d_ctx, &mut grad.values[lay.cond_row(t as usize)]);
        }
    }
    sequence_loglik(params, cond, motion)
}

pub fn loglik_gradient(params: &ModelParams, cond: &Condition, motion: &MotionSequence) -> Result<Gradient> {
    let mut grad = params.zero_gradient();
    accumulate_loglik_gradient(params, cond, motion, 1.0, &mut grad)?;
    if !grad.is_finite() {
        return Err(Error::NonFinite("log-likelihood gradient".into()));
    }
    Ok(grad)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn decode<F>(params: &ModelParams, cond: &Condition, max_len: usize, mut pick: F) -> Vec<usize>
where
    F: FnMut(&[f64]) -> usize,
{
    let ctx = encode_condition(params, cond);
    let base = params.context_logits(&ctx);
    let mut logits = vec![0.0; params.layout.classes];
    let mut prev = params.end_class();
    let mut out = Vec::new();
    while out.len() < max_len {
        params.step_logits(&base, prev, &mut logits);
        let k = pick(&logits);
        if k == params.end_class() {
            break;
        }
        out.push(k);
        prev = k;
    }
    out
}

/// Most likely single motion token after the begin sentinel.
fn fallback_token(params: &ModelParams, cond: &Condition) -> usize {
    let ctx = encode_condition(params, cond);
    let base = params.context_logits(&ctx);
    let mut logits = vec![0.0; params.layout.classes];
    params.step_logits(&base, params.end_class(), &mut logits);
    argmax(&logits[..params.end_class()])
}

fn to_motion(params: &ModelParams, local: Vec<usize>) -> MotionSequence {
    MotionSequence {
        motion_id: "generated".to_string(),
        tokens: local.into_iter().map(|k| params.vocab.motion.id_at(k)).collect(),
    }
}

/// Greedy decoding with the same empty-output fallback as sampling.
pub fn greedy_motion(params: &ModelParams, cond: &Condition, max_len: usize) -> Result<MotionSequence> {
    if max_len == 0 {
        return invalid("max_len must be at least 1");
    }
    let mut seq = decode(params, cond, max_len, argmax);
    if seq.is_empty() {
        seq.push(fallback_token(params, cond));
    }
    Ok(to_motion(params, seq))
}

/// Ancestral sampling at `temperature`. An immediately terminated sample is
/// redrawn once; a second empty draw falls back to the most likely token.
pub fn sample_motion<R: Rng>(
    params: &ModelParams,
    cond: &Condition,
    max_len: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<MotionSequence> {
    if !(temperature > 0.0) {
        return invalid(format!("temperature must be positive, got {temperature}"));
    }
    if max_len == 0 {
        return invalid("max_len must be at least 1");
    }
    let mut probs = Vec::new();
    let mut draw = |logits: &[f64]| {
        probs.clear();
        probs.extend(logits.iter().map(|l| l / temperature));
        softmax_in_place(&mut probs);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (k, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        // u landed in the rounding gap above the cumulative sum
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    };
    for _ in 0..2 {
        let seq = decode(params, cond, max_len, &mut draw);
        if !seq.is_empty() {
            return Ok(to_motion(params, seq));
        }
    }
    Ok(to_motion(params, vec![fallback_token(params, cond)]))
}
