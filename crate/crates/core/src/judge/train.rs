use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{encode_motion, judge_loss_gradient, JudgeParams, LossWeights, MotionBank};
use crate::dataset::{Dataset, Group, Mode, MotionSequence, Tier};
use crate::error::{invalid, Error, Result};
use crate::optim::{AdamW, OptimizerConfig};
use crate::rng::{stream, tag};
use crate::vocab::VocabSpec;

fn default_positives() -> Vec<Tier> {
    vec![Tier::Gold]
}

fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig {
        lr: 3e-3,
        ..OptimizerConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeConfig {
    pub d: usize,
    pub d_o: usize,
    pub init_scale: f64,
    /// Initial log-scale; `exp(τ)` is the inverse temperature.
    pub tau_init: f64,
    pub weights: LossWeights,
    /// Number of bank draws per step; 0 disables the bank.
    pub bank_size: usize,
    #[serde(default = "default_positives")]
    pub positives: Vec<Tier>,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig {
            d: 32,
            d_o: 16,
            init_scale: 0.1,
            tau_init: (1.0f64 / 0.07).ln(),
            weights: LossWeights::default(),
            bank_size: 4096,
            positives: default_positives(),
            optimizer: default_optimizer(),
        }
    }
}

impl JudgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_o == 0 {
            return invalid("judge dimensions must be positive");
        }
        if !(self.init_scale >= 0.0 && self.tau_init.is_finite()) {
            return invalid("init scale must be non-negative and tau finite");
        }
        if self.positives.is_empty() {
            return invalid("positive tier set is empty");
        }
        self.weights.validate()?;
        self.optimizer.validate()
    }

    /// Fresh parameters drawn from the init stream of `seed`.
    pub fn init_params(&self, vocab: &VocabSpec, seed: u64) -> JudgeParams {
        let mut rng = stream(seed, &[tag::INIT, 1]);
        JudgeParams::random(vocab, self.d, self.d_o, self.init_scale, self.tau_init, &mut rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeStepLog {
    pub step: u64,
    pub loss: f64,
    pub mode: Mode,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeTrainState {
    pub params: JudgeParams,
    pub optimizer: AdamW,
    pub step: u64,
}

impl JudgeTrainState {
    pub fn new(params: JudgeParams) -> Self {
        let n = params.values().len();
        JudgeTrainState {
            params,
            optimizer: AdamW::new(n),
            step: 0,
        }
    }
}

fn training_motions(groups: &[Group]) -> Vec<&MotionSequence> {
    let mut seen: BTreeMap<&str, &MotionSequence> = BTreeMap::new();
    for g in groups {
        for c in &g.candidates {
            seen.entry(c.motion.motion_id.as_str()).or_insert(&c.motion);
        }
    }
    seen.into_values().collect()
}

/// Draws `size` training motions uniformly with replacement and embeds the
/// distinct ones with the current parameters.
fn refresh_bank<R: Rng>(params: &JudgeParams, motions: &[&MotionSequence], size: usize, rng: &mut R) -> Result<MotionBank> {
    let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
    for _ in 0..size {
        *counts.entry(rng.gen_range(0..motions.len())).or_default() += 1;
    }
    let entries = counts
        .into_iter()
        .map(|(i, c)| Ok((encode_motion(params, motions[i])?, c)))
        .collect::<Result<_>>()?;
    Ok(MotionBank { entries })
}

/// Continues training up to (excluding) step `until`. Each step samples a
/// mode, a batch of groups and a fresh bank from its own stream.
pub fn train_judge_until(
    mut state: JudgeTrainState,
    dataset: &Dataset,
    cfg: &JudgeConfig,
    seed: u64,
    until: u64,
) -> Result<(JudgeTrainState, Vec<JudgeStepLog>)> {
    cfg.validate()?;
    if state.params.vocab() != &dataset.vocab {
        return invalid("judge vocabulary does not match the dataset");
    }
    if until <= state.step {
        return Ok((state, Vec::new()));
    }
    if dataset.train.is_empty() {
        return invalid("training split is empty");
    }
    let motions = training_motions(&dataset.train);
    let mut log = Vec::with_capacity((until - state.step) as usize);
    while state.step < until {
        let step = state.step;
        let mut rng = stream(seed, &[tag::JUDGE_STEP, step]);
        let mode = Mode::EVAL_MODES[rng.gen_range(0..Mode::EVAL_MODES.len())];
        let bs = cfg.optimizer.batch_size.min(dataset.train.len());
        let mut chosen = index::sample(&mut rng, dataset.train.len(), bs).into_vec();
        chosen.sort_unstable();
        state.params.bank = if cfg.bank_size > 0 {
            refresh_bank(&state.params, &motions, cfg.bank_size, &mut rng)?
        } else {
            MotionBank::default()
        };
        let batch: Vec<(&Group, Mode)> = chosen.iter().map(|&i| (&dataset.train[i], mode)).collect();
        let (loss, grad) = match judge_loss_gradient(&state.params, &batch, &cfg.positives, &cfg.weights) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { step }),
            Err(e) => return Err(e),
        };
        let lr = cfg.optimizer.lr_at(step);
        state.optimizer.step(state.params.values_mut(), &grad, lr, &cfg.optimizer);
        if state.params.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step });
        }
        log.push(JudgeStepLog {
            step,
            loss,
            mode,
            grad_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
        });
        state.step += 1;
    }
    Ok((state, log))
}

pub fn train_judge(
    params: JudgeParams,
    dataset: &Dataset,
    cfg: &JudgeConfig,
    seed: u64,
) -> Result<(JudgeParams, Vec<JudgeStepLog>)> {
    let (state, log) = train_judge_until(JudgeTrainState::new(params), dataset, cfg, seed, cfg.optimizer.total_steps)?;
    Ok((state.params, log))
}
