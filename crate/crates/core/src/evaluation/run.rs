use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    diversity, estimate_gaussian, frechet_distance, gen_at_k_rate, mean_ndcg, mrr_gold, win_rate, Aggregate, Gain,
    GroupScores, MetricsReport, Origin, ScoredCandidate,
};
use crate::dataset::{Group, Mode, MotionSequence, Tier};
use crate::error::{invalid, Error, Result};
use crate::judge::{encode_motion, judge_scores, JudgeParams};
use crate::rng::{stream, tag};
use crate::seq_model::{sample_motion, ModelParams};
use crate::synth::PlantedFeatures;

/// Feature map standing in for a pretrained motion evaluator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    #[default]
    Planted,
    Judge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generated samples per group.
    pub samples_per_group: usize,
    pub mode: Mode,
    /// Cutoff of Gen@K.
    pub k: usize,
    /// Subset size of the diversity estimate.
    pub s_d: usize,
    pub feature_source: FeatureSource,
    pub aggregate: Aggregate,
    pub gain: Gain,
    pub temperature: f64,
    /// Defaults to the vocabulary's maximum motion length.
    pub max_len: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples_per_group: 5,
            mode: Mode::TAE,
            k: 3,
            s_d: 32,
            feature_source: FeatureSource::Planted,
            aggregate: Aggregate::Mean,
            gain: Gain::Linear,
            temperature: 1.0,
            max_len: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_group == 0 || self.k == 0 || self.s_d == 0 {
            return invalid("samples per group, k and S_d must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return invalid("temperature must be positive");
        }
        if self.max_len == Some(0) {
            return invalid("max_len must be positive");
        }
        Ok(())
    }
}

/// Every metric of a report from per-group scores and feature sets. Groups
/// must either all carry generated candidates or none.
pub fn metrics_from_scores(
    groups: &[GroupScores],
    real: &[Vec<f64>],
    generated: &[Vec<f64>],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let agg = cfg.aggregate;
    let win = |l, r| win_rate(groups, l, r, agg);
    let has_generated = groups
        .iter()
        .any(|g| g.candidates.iter().any(|c| c.origin == Origin::Generated));
    let gen_win = |r| has_generated.then(|| win(Origin::Generated, r)).transpose();
    let fid = if real.len() >= 2 && generated.len() >= 2 {
        Some(frechet_distance(&estimate_gaussian(real)?, &estimate_gaussian(generated)?)?)
    } else {
        None
    };
    let diversity = if generated.len() >= 2 * cfg.s_d {
        let mut rng = stream(seed, &[tag::DIVERSITY, 0]);
        Some(diversity(generated, cfg.s_d, &mut rng)?)
    } else {
        None
    };
    Ok(MetricsReport {
        win_g_gt_n: gen_win(Origin::Negative)?,
        win_g_gt_s: gen_win(Origin::Silver)?,
        win_g_gt_g: gen_win(Origin::Gold)?,
        win_G_gt_S: win(Origin::Gold, Origin::Silver)?,
        win_G_gt_N: win(Origin::Gold, Origin::Negative)?,
        win_S_gt_N: win(Origin::Silver, Origin::Negative)?,
        gen_at_k: has_generated.then(|| gen_at_k_rate(groups, cfg.k)).transpose()?,
        mrr_gold: mrr_gold(groups)?,
        ndcg_at_3: mean_ndcg(groups, 3, cfg.gain)?,
        ndcg_at_5: mean_ndcg(groups, 5, cfg.gain)?,
        ndcg_at_10: mean_ndcg(groups, 10, cfg.gain)?,
        fid,
        diversity,
        n_groups: groups.len(),
        config: serde_json::to_value(cfg)?,
    })
}

/// Generated candidates are named `gen-000`, `gen-001`, ... within a group.
pub fn generated_id(j: usize) -> String {
    format!("gen-{j:03}")
}

/// Judge scores and feature sets of one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRun {
    pub groups: Vec<GroupScores>,
    /// Features of the distinct Gold and Silver motions.
    pub real: Vec<Vec<f64>>,
    /// Features of every generated sample, in group order.
    pub generated: Vec<Vec<f64>>,
}

/// Samples `K` motions per group from `model` and scores them together with
/// the annotated candidates under `cfg.mode`.
pub fn score_generation(
    model: &ModelParams,
    judge: &JudgeParams,
    groups: &[Group],
    planted: Option<&PlantedFeatures>,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<ScoredRun> {
    cfg.validate()?;
    if groups.is_empty() {
        return invalid("evaluation split is empty");
    }
    if model.vocab() != judge.vocab() {
        return invalid("model and judge vocabularies differ");
    }
    let vocab = model.vocab();
    let features = |m: &MotionSequence| -> Result<Vec<f64>> {
        match cfg.feature_source {
            FeatureSource::Planted => planted
                .ok_or_else(|| Error::InvalidArgument("planted features requested but not supplied".into()))?
                .features(&m.tokens),
            FeatureSource::Judge => encode_motion(judge, m),
        }
    };
    let max_len = cfg.max_len.unwrap_or(vocab.max_motion_len);

    let mut scored = Vec::with_capacity(groups.len());
    let mut generated_features = Vec::new();
    let mut real: BTreeMap<&str, &MotionSequence> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        let mut rng = stream(seed, &[tag::EVAL_GROUP, i as u64]);
        let cond = g.condition.restrict(vocab, cfg.mode)?;
        let mut samples = Vec::with_capacity(cfg.samples_per_group);
        for j in 0..cfg.samples_per_group {
            let mut m = sample_motion(model, &cond, max_len, cfg.temperature, &mut rng)?;
            m.motion_id = generated_id(j);
            samples.push(m);
        }
        let refs: Vec<&MotionSequence> = g.candidates.iter().map(|c| &c.motion).chain(&samples).collect();
        let scores = judge_scores(judge, &g.condition, &refs, cfg.mode)?;
        let origins = g.candidates.iter().map(|c| Origin::from(c.tier)).chain(samples.iter().map(|_| Origin::Generated));
        let candidates = refs
            .iter()
            .zip(origins)
            .zip(scores)
            .map(|((m, origin), score)| ScoredCandidate {
                id: m.motion_id.clone(),
                origin,
                score,
            })
            .collect();
        scored.push(GroupScores {
            group_id: g.group_id.clone(),
            candidates,
        });
        for m in &samples {
            generated_features.push(features(m)?);
        }
        for c in g.candidates.iter().filter(|c| c.tier != Tier::Negative) {
            real.entry(c.motion.motion_id.as_str()).or_insert(&c.motion);
        }
    }
    let real = real.values().map(|m| features(m)).collect::<Result<Vec<_>>>()?;
    Ok(ScoredRun {
        groups: scored,
        real,
        generated: generated_features,
    })
}

/// `score_generation` followed by `metrics_from_scores`. FID compares the
/// generated features with the distinct Gold and Silver motions of `groups`.
pub fn evaluate_generation(
    model: &ModelParams,
    judge: &JudgeParams,
    groups: &[Group],
    planted: Option<&PlantedFeatures>,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<MetricsReport> {
    let run = score_generation(model, judge, groups, planted, cfg, seed)?;
    metrics_from_scores(&run.groups, &run.real, &run.generated, cfg, seed)
}
