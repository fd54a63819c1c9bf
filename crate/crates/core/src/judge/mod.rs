//! Multimodal judge.
//!
//! Every branch embeds its tokens, attention-pools them with a learned query
//! and projects the pooled vector to a unit-norm score-space embedding. The
//! masked mean of a branch's embeddings is its fusion summary; the fusion
//! head attention-pools the active summaries (plus type and mode embeddings)
//! into the fused condition embedding. Scores are `exp(τ)·cos`.

mod loss;
mod train;

pub use loss::{
    contrastive_loss, infonce_group_loss, judge_loss_gradient, judge_total_loss, LossWeights,
};
pub use train::{train_judge, train_judge_until, JudgeConfig, JudgeStepLog, JudgeTrainState};

use rand::Rng;

use crate::dataset::{Condition, Modality, Mode, MotionSequence};
use crate::error::{invalid, Error, Result};
use crate::numeric::{dot, softmax_in_place};
use crate::vocab::{TokenId, VocabSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Text,
    Audio,
    Emotion,
    Motion,
}

impl Branch {
    pub const ALL: [Branch; 4] = [Branch::Text, Branch::Audio, Branch::Emotion, Branch::Motion];

    pub fn index(self) -> usize {
        match self {
            Branch::Text => 0,
            Branch::Audio => 1,
            Branch::Emotion => 2,
            Branch::Motion => 3,
        }
    }

    pub fn of(m: Modality) -> Branch {
        match m {
            Modality::Text => Branch::Text,
            Modality::Audio => Branch::Audio,
            Modality::Emotion => Branch::Emotion,
        }
    }
}

/// Named parameter blocks, for direct construction of fixtures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    /// `rows × d` embedding table of a branch.
    Embed(Branch),
    Query(Branch),
    /// `d_o × d` projection matrix, row-major.
    ProjWeight(Branch),
    ProjBias(Branch),
    /// Three rows (text, audio, emotion).
    TypeEmbed,
    /// Seven rows indexed by `Mode::index`.
    ModeEmbed,
    FusionQuery,
    FusionWeight,
    FusionBias,
    Tau,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JudgeLayout {
    /// Embedding rows per branch. The emotion table has one extra row for
    /// the unknown sentinel.
    pub rows: [usize; 4],
    pub d: usize,
    pub d_o: usize,
    embed: [usize; 4],
    query: [usize; 4],
    proj: [usize; 4],
    type_embed: usize,
    mode_embed: usize,
    fusion_query: usize,
    fusion_proj: usize,
    tau: usize,
    len: usize,
}

impl JudgeLayout {
    pub fn new(vocab: &VocabSpec, d: usize, d_o: usize) -> Self {
        let rows = [
            vocab.text.len(),
            vocab.audio.len(),
            vocab.emotion.len() + 1,
            vocab.motion.len(),
        ];
        let proj_len = d_o * d + d_o;
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let embed = rows.map(|r| take(r * d));
        let query = [(); 4].map(|_| take(d));
        let proj = [(); 4].map(|_| take(proj_len));
        let type_embed = take(3 * d);
        let mode_embed = take(7 * d);
        let fusion_query = take(d);
        let fusion_proj = take(proj_len);
        let tau = take(1);
        JudgeLayout {
            rows,
            d,
            d_o,
            embed,
            query,
            proj,
            type_embed,
            mode_embed,
            fusion_query,
            fusion_proj,
            tau,
            len: off,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn range(&self, block: Block) -> std::ops::Range<usize> {
        let (d, d_o) = (self.d, self.d_o);
        let (start, n) = match block {
            Block::Embed(b) => (self.embed[b.index()], self.rows[b.index()] * d),
            Block::Query(b) => (self.query[b.index()], d),
            Block::ProjWeight(b) => (self.proj[b.index()], d_o * d),
            Block::ProjBias(b) => (self.proj[b.index()] + d_o * d, d_o),
            Block::TypeEmbed => (self.type_embed, 3 * d),
            Block::ModeEmbed => (self.mode_embed, 7 * d),
            Block::FusionQuery => (self.fusion_query, d),
            Block::FusionWeight => (self.fusion_proj, d_o * d),
            Block::FusionBias => (self.fusion_proj + d_o * d, d_o),
            Block::Tau => (self.tau, 1),
        };
        start..start + n
    }

    fn embed_row(&self, b: Branch, row: usize) -> usize {
        self.embed[b.index()] + row * self.d
    }
}

/// Bank of constant motion embeddings used as extra negatives. Entries carry
/// a multiplicity so that repeated draws of one motion are stored once.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MotionBank {
    pub entries: Vec<(Vec<f64>, u32)>,
}

impl MotionBank {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of drawn items.
    pub fn size(&self) -> usize {
        self.entries.iter().map(|e| e.1 as usize).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeParams {
    vocab: VocabSpec,
    layout: JudgeLayout,
    values: Vec<f64>,
    pub bank: MotionBank,
}

impl JudgeParams {
    pub fn zeros(vocab: &VocabSpec, d: usize, d_o: usize) -> Self {
        let layout = JudgeLayout::new(vocab, d, d_o);
        JudgeParams {
            vocab: *vocab,
            layout,
            values: vec![0.0; layout.len()],
            bank: MotionBank::default(),
        }
    }

    /// Uniform `[-scale, scale]` weights with `τ = tau`.
    pub fn random<R: Rng>(vocab: &VocabSpec, d: usize, d_o: usize, scale: f64, tau: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(vocab, d, d_o);
        for v in p.values.iter_mut() {
            *v = rng.gen_range(-scale..=scale);
        }
        p.set_tau(tau);
        p
    }

    pub fn from_values(vocab: &VocabSpec, d: usize, d_o: usize, values: Vec<f64>, bank: MotionBank) -> Result<Self> {
        let layout = JudgeLayout::new(vocab, d, d_o);
        if values.len() != layout.len() {
            return invalid(format!(
                "expected {} judge parameters, got {}",
                layout.len(),
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("judge parameters".into()));
        }
        if bank.entries.iter().any(|(z, _)| z.len() != d_o) {
            return invalid("bank embedding width does not match the judge");
        }
        Ok(JudgeParams {
            vocab: *vocab,
            layout,
            values,
            bank,
        })
    }

    pub fn vocab(&self) -> &VocabSpec {
        &self.vocab
    }

    pub fn layout(&self) -> JudgeLayout {
        self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn block(&self, block: Block) -> &[f64] {
        &self.values[self.layout.range(block)]
    }

    pub fn block_mut(&mut self, block: Block) -> &mut [f64] {
        let r = self.layout.range(block);
        &mut self.values[r]
    }

    pub fn tau(&self) -> f64 {
        self.values[self.layout.tau]
    }

    pub fn set_tau(&mut self, tau: f64) {
        let i = self.layout.tau;
        self.values[i] = tau;
    }

    /// Embedding-table row of `token` in `branch`.
    fn row_of(&self, branch: Branch, token: TokenId) -> Result<usize> {
        let v = &self.vocab;
        let row = match branch {
            Branch::Text => v.text.index_of(token),
            Branch::Audio => v.audio.index_of(token),
            Branch::Emotion if token == v.special.unknown_emotion => Some(v.emotion.len()),
            Branch::Emotion => v.emotion.index_of(token),
            Branch::Motion => v.motion.index_of(token),
        };
        row.ok_or_else(|| Error::InvalidArgument(format!("token {token} outside the {branch:?} branch range")))
    }
}

/// Softmax-weighted average of `vals` with scores `q·v`.
fn attention_pool(q: &[f64], vals: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let mut alpha: Vec<f64> = vals.iter().map(|v| dot(q, v)).collect();
    softmax_in_place(&mut alpha);
    let mut pooled = vec![0.0; q.len()];
    for (a, v) in alpha.iter().zip(vals) {
        for (p, x) in pooled.iter_mut().zip(v.iter()) {
            *p += a * x;
        }
    }
    (alpha, pooled)
}

/// Backward of `attention_pool`: adds into `dq` and returns `dL/dv_i`.
fn attention_pool_backward(
    q: &[f64],
    vals: &[&[f64]],
    alpha: &[f64],
    pooled: &[f64],
    dp: &[f64],
    dq: &mut [f64],
) -> Vec<Vec<f64>> {
    let dp_pooled = dot(dp, pooled);
    vals.iter()
        .zip(alpha)
        .map(|(v, &a)| {
            let ds = a * (dot(dp, v) - dp_pooled);
            for (g, x) in dq.iter_mut().zip(v.iter()) {
                *g += ds * x;
            }
            dp.iter().zip(q).map(|(g, qi)| a * g + ds * qi).collect()
        })
        .collect()
}

/// `normalize(W·p + b)`; returns the unit vector and the pre-normalisation
/// norm.
fn project(w: &[f64], b: &[f64], p: &[f64]) -> Result<(Vec<f64>, f64)> {
    let d = p.len();
    let mut y: Vec<f64> = b.iter().enumerate().map(|(i, bi)| bi + dot(&w[i * d..(i + 1) * d], p)).collect();
    let n = dot(&y, &y).sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::NonFinite("projection has zero or non-finite norm".into()));
    }
    y.iter_mut().for_each(|x| *x /= n);
    Ok((y, n))
}

/// Backward of `project`: adds into `dw`, `db` and returns `dL/dp`.
fn project_backward(w: &[f64], p: &[f64], z: &[f64], n: f64, dz: &[f64], dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let d = p.len();
    let zdz = dot(z, dz);
    let mut dp = vec![0.0; d];
    for (i, (&zi, &dzi)) in z.iter().zip(dz).enumerate() {
        let dy = (dzi - zi * zdz) / n;
        if dy == 0.0 {
            continue;
        }
        db[i] += dy;
        let row = &w[i * d..(i + 1) * d];
        for j in 0..d {
            dw[i * d + j] += dy * p[j];
            dp[j] += dy * row[j];
        }
    }
    dp
}

/// Forward state of one branch, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BranchCache {
    branch: Branch,
    /// Offsets of the embedding rows of the valid positions.
    rows: Vec<usize>,
    alpha: Vec<f64>,
    pooled: Vec<f64>,
    norm: f64,
    pub(crate) z: Vec<f64>,
    pub(crate) hbar: Vec<f64>,
}

impl BranchCache {
    fn is_null(&self) -> bool {
        self.rows.is_empty()
    }
}

pub(crate) fn encode_branch(
    params: &JudgeParams,
    branch: Branch,
    tokens: &[TokenId],
    mask: &[bool],
) -> Result<BranchCache> {
    if tokens.len() != mask.len() {
        return invalid("token and mask lengths differ");
    }
    let l = params.layout;
    let mut rows = Vec::new();
    for (&t, &m) in tokens.iter().zip(mask) {
        if m {
            rows.push(l.embed_row(branch, params.row_of(branch, t)?));
        }
    }
    if rows.is_empty() {
        return Ok(BranchCache {
            branch,
            rows,
            alpha: Vec::new(),
            pooled: vec![0.0; l.d],
            norm: 0.0,
            z: vec![0.0; l.d_o],
            hbar: vec![0.0; l.d],
        });
    }
    let vals: Vec<&[f64]> = rows.iter().map(|&o| &params.values[o..o + l.d]).collect();
    let mut hbar = vec![0.0; l.d];
    for v in &vals {
        for (h, x) in hbar.iter_mut().zip(v.iter()) {
            *h += x;
        }
    }
    let inv = 1.0 / vals.len() as f64;
    hbar.iter_mut().for_each(|h| *h *= inv);
    let (alpha, pooled) = attention_pool(params.block(Block::Query(branch)), &vals);
    let (z, norm) = project(
        params.block(Block::ProjWeight(branch)),
        params.block(Block::ProjBias(branch)),
        &pooled,
    )?;
    Ok(BranchCache {
        branch,
        rows,
        alpha,
        pooled,
        norm,
        z,
        hbar,
    })
}

fn backward_branch(params: &JudgeParams, c: &BranchCache, dz: Option<&[f64]>, dhbar: Option<&[f64]>, grad: &mut [f64]) {
    if c.is_null() {
        return;
    }
    let l = params.layout;
    let d = l.d;
    let mut dvals = vec![vec![0.0; d]; c.rows.len()];
    if let Some(dz) = dz {
        let w = params.block(Block::ProjWeight(c.branch));
        let (wr, br) = (l.range(Block::ProjWeight(c.branch)), l.range(Block::ProjBias(c.branch)));
        let (head, tail) = grad.split_at_mut(br.start);
        let dp = project_backward(w, &c.pooled, &c.z, c.norm, dz, &mut head[wr], &mut tail[..l.d_o]);
        let vals: Vec<&[f64]> = c.rows.iter().map(|&o| &params.values[o..o + d]).collect();
        let qr = l.range(Block::Query(c.branch));
        let q = &params.values[qr.clone()];
        dvals = attention_pool_backward(q, &vals, &c.alpha, &c.pooled, &dp, &mut grad[qr]);
    }
    if let Some(dh) = dhbar {
        let inv = 1.0 / c.rows.len() as f64;
        for dv in dvals.iter_mut() {
            for (g, h) in dv.iter_mut().zip(dh) {
                *g += inv * h;
            }
        }
    }
    for (&o, dv) in c.rows.iter().zip(&dvals) {
        for (g, x) in grad[o..o + d].iter_mut().zip(dv) {
            *g += x;
        }
    }
}

/// Embeds one token sequence. Returns the unit score-space vector and the
/// masked mean embedding; an all-false mask gives zeros for both.
pub fn encode_modality(
    params: &JudgeParams,
    branch: Branch,
    tokens: &[TokenId],
    mask: &[bool],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = encode_branch(params, branch, tokens, mask)?;
    Ok((c.z, c.hbar))
}

/// Replaces every modality outside `mode` with its null input.
pub fn strict_l2_nullify(cond: &Condition, vocab: &VocabSpec, mode: Mode) -> Result<Condition> {
    cond.restrict(vocab, mode)
}

#[derive(Debug, Clone)]
pub(crate) struct FusionCache {
    mode: Mode,
    active: Vec<usize>,
    u: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    pooled: Vec<f64>,
    norm: f64,
    pub(crate) z: Vec<f64>,
}

fn fuse_cached(params: &JudgeParams, summaries: [&[f64]; 3], mode: Mode) -> Result<FusionCache> {
    let l = params.layout;
    let d = l.d;
    for s in summaries {
        if s.len() != d {
            return invalid("fusion summary width does not match the judge");
        }
    }
    let types = params.block(Block::TypeEmbed);
    let mode_row = &params.block(Block::ModeEmbed)[mode.index() * d..(mode.index() + 1) * d];
    let active: Vec<usize> = mode.modalities().map(|m| m.index()).collect();
    let u: Vec<Vec<f64>> = active
        .iter()
        .map(|&k| (0..d).map(|j| summaries[k][j] + types[k * d + j] + mode_row[j]).collect())
        .collect();
    let refs: Vec<&[f64]> = u.iter().map(|v| v.as_slice()).collect();
    let (alpha, pooled) = attention_pool(params.block(Block::FusionQuery), &refs);
    let (z, norm) = project(params.block(Block::FusionWeight), params.block(Block::FusionBias), &pooled)?;
    Ok(FusionCache {
        mode,
        active,
        u,
        alpha,
        pooled,
        norm,
        z,
    })
}

/// Backward of the fusion head; returns `dL/dh̄_k` for every modality
/// (zero for inactive ones).
fn backward_fusion(params: &JudgeParams, c: &FusionCache, dz: &[f64], grad: &mut [f64]) -> [Vec<f64>; 3] {
    let l = params.layout;
    let d = l.d;
    let (wr, br) = (l.range(Block::FusionWeight), l.range(Block::FusionBias));
    let (head, tail) = grad.split_at_mut(br.start);
    let dp = project_backward(
        params.block(Block::FusionWeight),
        &c.pooled,
        &c.z,
        c.norm,
        dz,
        &mut head[wr],
        &mut tail[..l.d_o],
    );
    let refs: Vec<&[f64]> = c.u.iter().map(|v| v.as_slice()).collect();
    let qr = l.range(Block::FusionQuery);
    let du = attention_pool_backward(&params.values[qr.clone()], &refs, &c.alpha, &c.pooled, &dp, &mut grad[qr]);
    let type_off = l.range(Block::TypeEmbed).start;
    let mode_off = l.range(Block::ModeEmbed).start + c.mode.index() * d;
    let mut dh = [vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    for (&k, g) in c.active.iter().zip(&du) {
        for j in 0..d {
            grad[type_off + k * d + j] += g[j];
            grad[mode_off + j] += g[j];
            dh[k][j] = g[j];
        }
    }
    dh
}

/// Fused condition embedding from the three branch summaries.
pub fn fuse(params: &JudgeParams, summaries: [&[f64]; 3], mode: Mode) -> Result<Vec<f64>> {
    Ok(fuse_cached(params, summaries, mode)?.z)
}

pub(crate) fn check_unit(z: &[f64]) -> Result<()> {
    let n = dot(z, z).sqrt();
    if (n - 1.0).abs() > 1e-6 {
        return invalid(format!("expected a unit vector, got norm {n}"));
    }
    Ok(())
}

/// `exp(τ)·⟨z, z_m⟩` for unit inputs.
pub fn compatibility(z: &[f64], z_m: &[f64], tau: f64) -> Result<f64> {
    if z.len() != z_m.len() {
        return invalid("embedding widths differ");
    }
    check_unit(z)?;
    check_unit(z_m)?;
    Ok(tau.exp() * dot(z, z_m))
}

/// Full forward state of one condition under one mode.
#[derive(Debug, Clone)]
pub(crate) struct ConditionCache {
    pub(crate) branches: [BranchCache; 3],
    pub(crate) fusion: FusionCache,
}

impl ConditionCache {
    pub(crate) fn mode(&self) -> Mode {
        self.fusion.mode
    }
}

pub(crate) fn encode_condition_cached(params: &JudgeParams, cond: &Condition, mode: Mode) -> Result<ConditionCache> {
    let c = strict_l2_nullify(cond, &params.vocab, mode)?;
    let emotion_mask = [c.mode.contains(Modality::Emotion)];
    let branches = [
        encode_branch(params, Branch::Text, &c.text_tokens, &c.text_mask)?,
        encode_branch(params, Branch::Audio, &c.audio_tokens, &c.audio_mask)?,
        encode_branch(params, Branch::Emotion, &[c.emotion], &emotion_mask)?,
    ];
    let fusion = fuse_cached(
        params,
        [&branches[0].hbar, &branches[1].hbar, &branches[2].hbar],
        c.mode,
    )?;
    Ok(ConditionCache { branches, fusion })
}

/// Backward through a condition encoding given gradients on the fused
/// embedding and on the active branch embeddings.
pub(crate) fn backward_condition(
    params: &JudgeParams,
    c: &ConditionCache,
    dz_fused: &[f64],
    dz_branch: &[Option<Vec<f64>>; 3],
    grad: &mut [f64],
) {
    let dh = backward_fusion(params, &c.fusion, dz_fused, grad);
    for k in 0..3 {
        backward_branch(params, &c.branches[k], dz_branch[k].as_deref(), Some(&dh[k]), grad);
    }
}

pub(crate) fn encode_motion_cached(params: &JudgeParams, motion: &MotionSequence) -> Result<BranchCache> {
    let mask = vec![true; motion.tokens.len()];
    let c = encode_branch(params, Branch::Motion, &motion.tokens, &mask)?;
    if c.is_null() {
        return invalid("motion sequence is empty");
    }
    Ok(c)
}

pub(crate) fn backward_motion(params: &JudgeParams, c: &BranchCache, dz: &[f64], grad: &mut [f64]) {
    backward_branch(params, c, Some(dz), None, grad);
}

/// Unit score-space embedding of a motion.
pub fn encode_motion(params: &JudgeParams, motion: &MotionSequence) -> Result<Vec<f64>> {
    Ok(encode_motion_cached(params, motion)?.z)
}

/// Fused embedding and per-modality embeddings (`None` when inactive) of a
/// condition under `mode`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    pub mode: Mode,
    pub fused: Vec<f64>,
    pub branches: [Option<Vec<f64>>; 3],
}

pub fn encode_condition(params: &JudgeParams, cond: &Condition, mode: Mode) -> Result<ConditionEmbedding> {
    let c = encode_condition_cached(params, cond, mode)?;
    let m = c.mode();
    let [t, a, e] = c.branches;
    let pick = |b: BranchCache, k: Modality| m.contains(k).then_some(b.z);
    Ok(ConditionEmbedding {
        mode: m,
        fused: c.fusion.z,
        branches: [
            pick(t, Modality::Text),
            pick(a, Modality::Audio),
            pick(e, Modality::Emotion),
        ],
    })
}

/// Fused score and auxiliary per-modality scores of one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JudgeScore {
    pub fused: f64,
    pub per_modality: [Option<f64>; 3],
}

pub fn judge_score_detailed(
    params: &JudgeParams,
    cond: &Condition,
    motion: &MotionSequence,
    mode: Mode,
) -> Result<JudgeScore> {
    let c = encode_condition(params, cond, mode)?;
    let zm = encode_motion(params, motion)?;
    score_embeddings(params, &c, &zm)
}

pub(crate) fn score_embeddings(params: &JudgeParams, c: &ConditionEmbedding, zm: &[f64]) -> Result<JudgeScore> {
    let tau = params.tau();
    let mut per_modality = [None; 3];
    for (k, z) in c.branches.iter().enumerate() {
        if let Some(z) = z {
            per_modality[k] = Some(compatibility(z, zm, tau)?);
        }
    }
    let fused = compatibility(&c.fused, zm, tau)?;
    if !fused.is_finite() {
        return Err(Error::NonFinite("judge score".into()));
    }
    Ok(JudgeScore { fused, per_modality })
}

/// Fused compatibility score `s_ψ` of one condition/motion pair.
pub fn judge_score(params: &JudgeParams, cond: &Condition, motion: &MotionSequence, mode: Mode) -> Result<f64> {
    Ok(judge_score_detailed(params, cond, motion, mode)?.fused)
}

/// Scores every motion against one condition, encoding the condition once.
pub fn judge_scores(
    params: &JudgeParams,
    cond: &Condition,
    motions: &[&MotionSequence],
    mode: Mode,
) -> Result<Vec<f64>> {
    let c = encode_condition(params, cond, mode)?;
    motions
        .iter()
        .map(|m| Ok(score_embeddings(params, &c, &encode_motion(params, m)?)?.fused))
        .collect()
}

#[cfg(test)]
mod tests;
