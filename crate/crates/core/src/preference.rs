//! Group-wise preference objective, modality dropout and the trainer.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{group_weight, Candidate, Condition, Dataset, FrequencyTable, Group, Modality, Mode, Tier};
use crate::error::{invalid, Error, Result};
use crate::numeric::{logsumexp, sigmoid, softmax_in_place, softplus};
use crate::optim::{AdamW, OptimizerConfig};
use crate::rng::{stream, tag};
use crate::seq_model::{accumulate_loglik_gradient, sequence_loglik, Gradient, ModelParams};
use crate::vocab::VocabSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Gold likelihood plus the tier ranking loss.
    Ranking,
    /// Ablation: likelihood of a single Gold target per group.
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreferenceConfig {
    pub margin: f64,
    pub lambda_rank: f64,
    pub lambda_gn: f64,
    pub samples_per_tier: usize,
    pub modality_dropout_p: f64,
    /// Inverse-frequency group weights; uniform weights when off.
    pub reweight: bool,
    pub objective: ObjectiveKind,
    pub optimizer: OptimizerConfig,
}

impl Default for PreferenceConfig {
    fn default() -> Self {
        PreferenceConfig {
            margin: 0.5,
            lambda_rank: 0.25,
            lambda_gn: 0.25,
            samples_per_tier: 2,
            modality_dropout_p: 0.3,
            reweight: true,
            objective: ObjectiveKind::Ranking,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl PreferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return invalid(format!("margin must be a finite value >= 0, got {}", self.margin));
        }
        if !(self.lambda_rank >= 0.0) || !(self.lambda_gn >= 0.0) {
            return invalid("ranking weights must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.modality_dropout_p) {
            return invalid(format!("dropout probability {} outside [0, 1]", self.modality_dropout_p));
        }
        if self.samples_per_tier == 0 {
            return invalid("samples_per_tier must be positive");
        }
        self.optimizer.validate()
    }
}

/// Aggregated tier log-likelihoods of one group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TierScores {
    pub gold: f64,
    pub silver: f64,
    pub negative: f64,
}

/// `log((1/n) Σ exp ℓ_k)`.
pub fn aggregate_tier(logliks: &[f64]) -> Result<f64> {
    if logliks.is_empty() {
        return invalid("cannot aggregate an empty tier");
    }
    Ok(logsumexp(logliks) - (logliks.len() as f64).ln())
}

/// Partial derivatives of `aggregate_tier` (a softmax over the inputs).
pub fn aggregate_tier_grad(logliks: &[f64]) -> Vec<f64> {
    let mut w = logliks.to_vec();
    softmax_in_place(&mut w);
    w
}

pub fn ranking_loss(t: TierScores, margin: f64, lambda_gn: f64) -> f64 {
    softplus(margin - (t.gold - t.silver))
        + softplus(margin - (t.silver - t.negative))
        + lambda_gn * softplus(margin - (t.gold - t.negative))
}

/// `(∂L/∂ℓ_G, ∂L/∂ℓ_S, ∂L/∂ℓ_N)` of the ranking loss.
pub fn ranking_loss_grad(t: TierScores, margin: f64, lambda_gn: f64) -> [f64; 3] {
    let gs = sigmoid(margin - (t.gold - t.silver));
    let sn = sigmoid(margin - (t.silver - t.negative));
    let gn = lambda_gn * sigmoid(margin - (t.gold - t.negative));
    [-gs - gn, gs - sn, sn + gn]
}

/// Objective value with the batch means of the tier aggregates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub loss: f64,
    pub mean_gold: f64,
    pub mean_silver: Option<f64>,
    pub mean_negative: Option<f64>,
}

fn tier_logliks(params: &ModelParams, group: &Group, tier: Tier) -> Result<Vec<(usize, f64)>> {
    group
        .candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.tier == tier)
        .map(|(i, c)| Ok((i, sequence_loglik(params, &group.condition, &c.motion)?)))
        .collect()
}

fn objective_impl(
    groups: &[(Group, f64)],
    params: &ModelParams,
    cfg: &PreferenceConfig,
    mut grad: Option<&mut Gradient>,
) -> Result<ObjectiveValue> {
    if groups.is_empty() {
        return invalid("objective over an empty batch");
    }
    let wsum: f64 = groups.iter().map(|(_, w)| w).sum();
    if !(wsum > 0.0) {
        return invalid(format!("group weights sum to {wsum}"));
    }
    let ranking = cfg.objective == ObjectiveKind::Ranking;
    let n = groups.len() as f64;
    let mut loss = 0.0;
    let (mut mg, mut ms, mut mn) = (0.0, 0.0, 0.0);
    for (group, w) in groups {
        if ranking {
            group.require_all_tiers()?;
        } else if group.tier_count(Tier::Gold) == 0 {
            return Err(Error::MissingTier {
                group_id: group.group_id.clone(),
                tier: Tier::Gold.name(),
            });
        }
        let wn = w / wsum;
        let gold = tier_logliks(params, group, Tier::Gold)?;
        let gold_vals: Vec<f64> = gold.iter().map(|p| p.1).collect();
        let lg = aggregate_tier(&gold_vals)?;
        mg += lg / n;
        // d(per-group term)/dℓ_G, ℓ_S, ℓ_N
        let mut d = [-1.0, 0.0, 0.0];
        let mut term = -lg;
        let mut others = Vec::new();
        if ranking {
            let silver = tier_logliks(params, group, Tier::Silver)?;
            let negative = tier_logliks(params, group, Tier::Negative)?;
            let ls = aggregate_tier(&silver.iter().map(|p| p.1).collect::<Vec<_>>())?;
            let ln = aggregate_tier(&negative.iter().map(|p| p.1).collect::<Vec<_>>())?;
            ms += ls / n;
            mn += ln / n;
            let t = TierScores {
                gold: lg,
                silver: ls,
                negative: ln,
            };
            term += cfg.lambda_rank * ranking_loss(t, cfg.margin, cfg.lambda_gn);
            let r = ranking_loss_grad(t, cfg.margin, cfg.lambda_gn);
            for k in 0..3 {
                d[k] += cfg.lambda_rank * r[k];
            }
            others.push((d[1], silver));
            others.push((d[2], negative));
        }
        loss += wn * term;
        if let Some(g) = grad.as_deref_mut() {
            for (dt, members) in std::iter::once((d[0], gold)).chain(others) {
                let vals: Vec<f64> = members.iter().map(|p| p.1).collect();
                let soft = aggregate_tier_grad(&vals);
                for ((idx, _), s) in members.iter().zip(soft) {
                    let c = &group.candidates[*idx];
                    accumulate_loglik_gradient(params, &group.condition, &c.motion, wn * dt * s, g)?;
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("preference objective".into()));
    }
    Ok(ObjectiveValue {
        loss,
        mean_gold: mg,
        mean_silver: ranking.then_some(ms),
        mean_negative: ranking.then_some(mn),
    })
}

/// Weighted mean of `-ℓ_G + λ_rank·L_rank` over `(group, weight)` pairs.
pub fn total_objective(groups: &[(Group, f64)], params: &ModelParams, cfg: &PreferenceConfig) -> Result<f64> {
    Ok(objective_impl(groups, params, cfg, None)?.loss)
}

pub fn objective_with_gradient(
    groups: &[(Group, f64)],
    params: &ModelParams,
    cfg: &PreferenceConfig,
) -> Result<(ObjectiveValue, Gradient)> {
    let mut grad = params.zero_gradient();
    let value = objective_impl(groups, params, cfg, Some(&mut grad))?;
    if !grad.is_finite() {
        return Err(Error::NonFinite("objective gradient".into()));
    }
    Ok((value, grad))
}

pub fn objective_gradient(groups: &[(Group, f64)], params: &ModelParams, cfg: &PreferenceConfig) -> Result<Gradient> {
    Ok(objective_with_gradient(groups, params, cfg)?.1)
}

/// Drops each active modality with probability `p`. When every modality
/// would be dropped one of them, chosen uniformly, is kept.
pub fn apply_modality_dropout<R: Rng>(cond: &Condition, vocab: &VocabSpec, p: f64, rng: &mut R) -> Condition {
    let active: Vec<Modality> = cond.mode.modalities().collect();
    let mut kept: Vec<Modality> = active.iter().copied().filter(|_| !rng.gen_bool(p)).collect();
    if kept.is_empty() {
        kept.push(active[rng.gen_range(0..active.len())]);
    }
    let mode = Mode::from_modalities(kept).expect("at least one modality is kept");
    cond.restrict(vocab, mode).expect("kept modalities are active")
}

/// Probability that a given modality is dropped when `n` are active.
pub fn guarded_drop_probability(p: f64, n: usize) -> f64 {
    p - p.powi(n as i32) / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub l_g: f64,
    pub l_s: Option<f64>,
    pub l_n: Option<f64>,
    pub grad_norm: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: AdamW,
    pub step: u64,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let n = params.values().len();
        TrainState {
            params,
            optimizer: AdamW::new(n),
            step: 0,
        }
    }
}

fn sample_tier<R: Rng>(group: &Group, tier: Tier, k: usize, rng: &mut R) -> Vec<Candidate> {
    let members: Vec<&Candidate> = group.tier(tier).collect();
    let k = k.min(members.len());
    let mut picked = index::sample(rng, members.len(), k).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| members[i].clone()).collect()
}

/// Builds the per-step batch: a subset of groups, each reduced to a few
/// candidates per tier with dropout applied to its condition.
fn sample_batch<R: Rng>(
    dataset: &Dataset,
    cfg: &PreferenceConfig,
    table: &FrequencyTable,
    rng: &mut R,
) -> Result<Vec<(Group, f64)>> {
    let groups = &dataset.train;
    let bs = cfg.optimizer.batch_size.min(groups.len());
    let mut chosen = index::sample(rng, groups.len(), bs).into_vec();
    chosen.sort_unstable();
    let mut batch = Vec::with_capacity(bs);
    for i in chosen {
        let g = &groups[i];
        let candidates: Vec<Candidate> = match cfg.objective {
            ObjectiveKind::Ranking => Tier::ALL
                .iter()
                .flat_map(|&t| sample_tier(g, t, cfg.samples_per_tier, rng))
                .collect(),
            ObjectiveKind::CrossEntropy => sample_tier(g, Tier::Gold, 1, rng),
        };
        let condition = apply_modality_dropout(&g.condition, &dataset.vocab, cfg.modality_dropout_p, rng);
        let weight = if cfg.reweight {
            group_weight(g, table)?
        } else {
            1.0
        };
        batch.push((
            Group {
                group_id: g.group_id.clone(),
                condition,
                candidates,
            },
            weight,
        ));
    }
    Ok(batch)
}

/// Continues `state` up to (excluding) step `until`. Each step draws from
/// its own stream derived from `(seed, step)`, so a run split into pieces
/// matches an uninterrupted one.
pub fn train_until(
    mut state: TrainState,
    dataset: &Dataset,
    cfg: &PreferenceConfig,
    seed: u64,
    until: u64,
) -> Result<(TrainState, Vec<StepLog>)> {
    cfg.validate()?;
    if state.params.vocab() != &dataset.vocab {
        return invalid("model vocabulary does not match the dataset");
    }
    if until <= state.step {
        return Ok((state, Vec::new()));
    }
    if dataset.train.is_empty() {
        return invalid("training split is empty");
    }
    for g in &dataset.train {
        match cfg.objective {
            ObjectiveKind::Ranking => g.require_all_tiers()?,
            ObjectiveKind::CrossEntropy if g.tier_count(Tier::Gold) == 0 => {
                return Err(Error::MissingTier {
                    group_id: g.group_id.clone(),
                    tier: Tier::Gold.name(),
                })
            }
            ObjectiveKind::CrossEntropy => {}
        }
    }
    let table = FrequencyTable::build(&dataset.train);
    let mut log = Vec::with_capacity((until - state.step) as usize);
    while state.step < until {
        let step = state.step;
        let mut rng = stream(seed, &[tag::TRAIN_STEP, step]);
        let batch = sample_batch(dataset, cfg, &table, &mut rng)?;
        let (value, grad) = match objective_with_gradient(&batch, &state.params, cfg) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { step }),
            Err(e) => return Err(e),
        };
        let lr = cfg.optimizer.lr_at(step);
        state
            .optimizer
            .step(state.params.values_mut(), grad.values(), lr, &cfg.optimizer);
        if state.params.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step });
        }
        log.push(StepLog {
            step,
            loss: value.loss,
            l_g: value.mean_gold,
            l_s: value.mean_silver,
            l_n: value.mean_negative,
            grad_norm: grad.norm(),
        });
        state.step += 1;
    }
    Ok((state, log))
}

pub fn train(
    params: ModelParams,
    dataset: &Dataset,
    cfg: &PreferenceConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<StepLog>)> {
    let (state, log) = train_until(TrainState::new(params), dataset, cfg, seed, cfg.optimizer.total_steps)?;
    Ok((state.params, log))
}

/// Whether `ℓ_G > ℓ_S > ℓ_N` holds for the full candidate sets of `group`.
pub fn tier_ordering(params: &ModelParams, group: &Group) -> Result<(TierScores, bool)> {
    let agg = |tier| -> Result<f64> {
        let vals: Vec<f64> = tier_logliks(params, group, tier)?.into_iter().map(|p| p.1).collect();
        aggregate_tier(&vals)
    };
    let t = TierScores {
        gold: agg(Tier::Gold)?,
        silver: agg(Tier::Silver)?,
        negative: agg(Tier::Negative)?,
    };
    Ok((t, t.gold > t.silver && t.silver > t.negative))
}

/// Fraction of groups whose aggregated tier scores are strictly ordered.
pub fn ordering_rate(params: &ModelParams, groups: &[Group]) -> Result<f64> {
    if groups.is_empty() {
        return invalid("ordering rate over no groups");
    }
    let mut ok = 0usize;
    for g in groups {
        if tier_ordering(params, g)?.1 {
            ok += 1;
        }
    }
    Ok(ok as f64 / groups.len() as f64)
}
