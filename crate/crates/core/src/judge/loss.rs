//! Group-wise InfoNCE with a constant motion bank, and its gradient.

use serde::{Deserialize, Serialize};

use super::{
    backward_condition, backward_motion, encode_condition_cached, encode_motion_cached, Block, BranchCache,
    JudgeParams, MotionBank,
};
use crate::dataset::{Group, Mode, Tier};
use crate::error::{invalid, Error, Result};
use crate::numeric::{dot, logsumexp};

/// Weights of the fused and per-modality contrastive terms, and the bank
/// logit scale `β`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub fused: f64,
    pub text: f64,
    pub audio: f64,
    pub emotion: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            fused: 1.0,
            text: 0.5,
            audio: 0.5,
            emotion: 0.2,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    fn branch(&self, k: usize) -> f64 {
        [self.text, self.audio, self.emotion][k]
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.fused, self.text, self.audio, self.emotion, self.beta];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return invalid("loss weights must be finite and non-negative");
        }
        Ok(())
    }
}

/// `-log Σ_P e^s / (Σ_U e^s + Σ_bank count·e^b)` from precomputed logits.
/// `bank` holds `(logit, multiplicity)` pairs.
pub fn contrastive_loss(scores: &[f64], positive: &[bool], bank: &[(f64, u32)]) -> Result<f64> {
    if scores.len() != positive.len() {
        return invalid("score and positive-flag lengths differ");
    }
    let pos: Vec<f64> = scores.iter().zip(positive).filter_map(|(&s, &p)| p.then_some(s)).collect();
    if pos.is_empty() {
        return invalid("positive set is empty");
    }
    let all: Vec<f64> = scores
        .iter()
        .copied()
        .chain(bank.iter().map(|&(b, c)| b + (c as f64).ln()))
        .collect();
    // P = U with no bank is exactly zero, not a rounding residue
    if bank.is_empty() && pos.len() == scores.len() {
        return Ok(0.0);
    }
    Ok((logsumexp(&all) - logsumexp(&pos)).max(0.0))
}

struct AnchorGrad {
    loss: f64,
    dz: Vec<f64>,
    dzm: Vec<Vec<f64>>,
    dtau: f64,
}

fn anchor_loss(z: &[f64], zms: &[&[f64]], positive: &[bool], bank: &MotionBank, tau: f64, beta: f64) -> Result<AnchorGrad> {
    let alpha = tau.exp();
    let s: Vec<f64> = zms.iter().map(|zm| alpha * dot(z, zm)).collect();
    let b: Vec<(f64, u32)> = bank.entries.iter().map(|(e, c)| (beta * alpha * dot(z, e), *c)).collect();
    let loss = contrastive_loss(&s, positive, &b)?;
    let mut all: Vec<f64> = s.clone();
    all.extend(b.iter().map(|&(x, c)| x + (c as f64).ln()));
    let lse_all = logsumexp(&all);
    let pos: Vec<f64> = s.iter().zip(positive).filter_map(|(&x, &p)| p.then_some(x)).collect();
    let lse_pos = logsumexp(&pos);

    let mut dz = vec![0.0; z.len()];
    let mut dzm = Vec::with_capacity(zms.len());
    let mut dtau = 0.0;
    for ((&si, zm), &p) in s.iter().zip(zms).zip(positive) {
        let mut g = (si - lse_all).exp();
        if p {
            g -= (si - lse_pos).exp();
        }
        dtau += g * si;
        for (d, x) in dz.iter_mut().zip(zm.iter()) {
            *d += g * alpha * x;
        }
        dzm.push(z.iter().map(|x| g * alpha * x).collect());
    }
    for ((e, _), &(logit, c)) in bank.entries.iter().zip(&b) {
        let h = (logit + (c as f64).ln() - lse_all).exp();
        dtau += h * logit;
        for (d, x) in dz.iter_mut().zip(e) {
            *d += h * beta * alpha * x;
        }
    }
    Ok(AnchorGrad { loss, dz, dzm, dtau })
}

fn positive_flags(group: &Group, positives: &[Tier]) -> Result<Vec<bool>> {
    if positives.is_empty() {
        return invalid("positive tier set is empty");
    }
    let flags: Vec<bool> = group.candidates.iter().map(|c| positives.contains(&c.tier)).collect();
    if !flags.iter().any(|&f| f) {
        return Err(Error::MissingTier {
            group_id: group.group_id.clone(),
            tier: positives[0].name(),
        });
    }
    Ok(flags)
}

/// Weighted contrastive loss of one group; accumulates `scale·∇` into
/// `grad` when given.
fn group_loss(
    params: &JudgeParams,
    group: &Group,
    mode: Mode,
    positives: &[Tier],
    w: &LossWeights,
    scale: f64,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let flags = positive_flags(group, positives)?;
    let cc = encode_condition_cached(params, &group.condition, mode)?;
    let motions: Vec<BranchCache> = group
        .candidates
        .iter()
        .map(|c| encode_motion_cached(params, &c.motion))
        .collect::<Result<_>>()?;
    let zms: Vec<&[f64]> = motions.iter().map(|m| m.z.as_slice()).collect();
    let tau = params.tau();

    let active = cc.mode();
    let mut anchors: Vec<(Option<usize>, f64, &[f64])> = vec![(None, w.fused, &cc.fusion.z)];
    for m in active.modalities() {
        let k = m.index();
        anchors.push((Some(k), w.branch(k), &cc.branches[k].z));
    }

    let d_o = params.layout.d_o;
    let mut total = 0.0;
    let mut dz_fused = vec![0.0; d_o];
    let mut dz_branch: [Option<Vec<f64>>; 3] = [None, None, None];
    let mut dzm = vec![vec![0.0; d_o]; zms.len()];
    let mut dtau = 0.0;
    for (which, weight, z) in anchors {
        if weight == 0.0 {
            continue;
        }
        let a = anchor_loss(z, &zms, &flags, &params.bank, tau, w.beta)?;
        total += weight * a.loss;
        let c = weight * scale;
        let target = match which {
            None => &mut dz_fused,
            Some(k) => dz_branch[k].get_or_insert_with(|| vec![0.0; d_o]),
        };
        target.iter_mut().zip(&a.dz).for_each(|(t, x)| *t += c * x);
        for (acc, g) in dzm.iter_mut().zip(&a.dzm) {
            acc.iter_mut().zip(g).for_each(|(t, x)| *t += c * x);
        }
        dtau += c * a.dtau;
    }
    if let Some(grad) = grad {
        backward_condition(params, &cc, &dz_fused, &dz_branch, grad);
        for (m, g) in motions.iter().zip(&dzm) {
            backward_motion(params, m, g, grad);
        }
        grad[params.layout.range(Block::Tau).start] += dtau;
    }
    Ok(total)
}

/// Contrastive loss of the fused embedding of `group` under `mode`, against
/// the group's candidates and the current bank.
pub fn infonce_group_loss(params: &JudgeParams, group: &Group, positives: &[Tier], mode: Mode, beta: f64) -> Result<f64> {
    let w = LossWeights {
        fused: 1.0,
        text: 0.0,
        audio: 0.0,
        emotion: 0.0,
        beta,
    };
    group_loss(params, group, mode, positives, &w, 1.0, None)
}

/// Batch mean of the weighted fused and per-modality contrastive terms.
pub fn judge_total_loss(
    params: &JudgeParams,
    batch: &[(&Group, Mode)],
    positives: &[Tier],
    weights: &LossWeights,
) -> Result<f64> {
    weights.validate()?;
    if batch.is_empty() {
        return invalid("empty batch");
    }
    let mut total = 0.0;
    for (g, mode) in batch {
        total += group_loss(params, g, *mode, positives, weights, 1.0, None)?;
    }
    Ok(total / batch.len() as f64)
}

/// `judge_total_loss` together with its gradient over the flat parameters.
/// The bank is treated as constant.
pub fn judge_loss_gradient(
    params: &JudgeParams,
    batch: &[(&Group, Mode)],
    positives: &[Tier],
    weights: &LossWeights,
) -> Result<(f64, Vec<f64>)> {
    weights.validate()?;
    if batch.is_empty() {
        return invalid("empty batch");
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; params.layout.len()];
    let mut total = 0.0;
    for (g, mode) in batch {
        total += group_loss(params, g, *mode, positives, weights, scale, Some(&mut grad))?;
    }
    let loss = total * scale;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("judge loss".into()));
    }
    Ok((loss, grad))
}
