//! Planted-structure synthetic worlds.
//!
//! Concepts are orthonormal directions and every group is built around one
//! hidden concept. Condition tokens and motion tokens are nearest-codeword
//! snaps of noisy copies of concept vectors, and the planted feature of a
//! motion is the mean codeword of its tokens. Blended motions mix tokens of
//! their own concept with tokens of a partner concept, which is what makes
//! them partially relevant. Tiers come from `assign_tier` over a similarity agent and a noise
//! agent, so the ground truth is known exactly.

pub mod oracle;

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{assign_tier, Candidate, Condition, Dataset, Group, Mode, MotionSequence, Split, Thresholds, Tier};
use crate::error::{invalid, Error, Result};
use crate::judge::{Block, Branch, JudgeParams, MotionBank};
use crate::numeric::{dot, norm};
use crate::rng::{stream, tag};
use crate::vocab::{TokenId, VocabSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierCounts {
    pub gold: usize,
    pub silver: usize,
    pub negative: usize,
}

impl TierCounts {
    pub fn get(&self, tier: Tier) -> usize {
        match tier {
            Tier::Gold => self.gold,
            Tier::Silver => self.silver,
            Tier::Negative => self.negative,
        }
    }

    pub fn total(&self) -> usize {
        self.gold + self.silver + self.negative
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_concepts: usize,
    pub motions_per_concept: usize,
    pub train_groups: usize,
    pub val_groups: usize,
    pub test_groups: usize,
    pub candidates_per_tier: TierCounts,
    pub motion_len_min: usize,
    pub motion_len_max: usize,
    pub text_len: usize,
    pub audio_len: usize,
    pub text_size: usize,
    pub motion_size: usize,
    pub audio_size: usize,
    pub emotion_size: usize,
    /// Weight of the uniform noise agent in tier assignment.
    pub noise: f64,
    pub feature_dim: usize,
    /// Cosine between a motion's latent direction and its concept.
    pub alignment: f64,
    /// Fraction of each concept's motions that blend the concept with a
    /// randomly chosen other concept.
    pub blended_share: f64,
    /// Probability that a token of a blended motion comes from its own
    /// concept rather than the partner.
    pub blend_alignment: f64,
    /// Cosine between a motion codeword and the concept it was drawn around.
    pub codeword_alignment: f64,
    /// Per-token jitter added before snapping to a codeword.
    pub jitter: f64,
    pub thresholds: Thresholds,
    /// When set, one motion is injected as a Negative into training groups
    /// until it accounts for this share of training Negative occurrences.
    pub dominant_negative_share: Option<f64>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            n_concepts: 8,
            motions_per_concept: 32,
            train_groups: 240,
            val_groups: 40,
            test_groups: 400,
            candidates_per_tier: TierCounts {
                gold: 3,
                silver: 11,
                negative: 35,
            },
            motion_len_min: 4,
            motion_len_max: 10,
            text_len: 8,
            audio_len: 12,
            text_size: 64,
            motion_size: 64,
            audio_size: 32,
            emotion_size: 6,
            noise: 0.1,
            feature_dim: 16,
            alignment: 0.95,
            blended_share: 0.75,
            blend_alignment: 0.5,
            codeword_alignment: 0.9,
            jitter: 0.6,
            thresholds: Thresholds::default(),
            dominant_negative_share: None,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_concepts < 2 {
            return invalid("a world needs at least 2 concepts");
        }
        if self.n_concepts > self.feature_dim {
            return Err(Error::Infeasible(format!(
                "{} orthogonal concepts need feature_dim >= {}",
                self.n_concepts, self.n_concepts
            )));
        }
        if !(0.0..=1.0).contains(&self.blended_share) || !(0.0..=1.0).contains(&self.blend_alignment) {
            return invalid("blend share and blend alignment must lie in [0, 1]");
        }
        let c = self.candidates_per_tier;
        if c.gold == 0 || c.silver == 0 || c.negative == 0 {
            return invalid("every tier needs at least one candidate per group");
        }
        if !(0.0..1.0).contains(&self.noise) {
            return invalid(format!("noise level {} outside [0, 1)", self.noise));
        }
        if self.motion_len_min == 0 || self.motion_len_min > self.motion_len_max {
            return invalid("motion length range is empty");
        }
        if self.text_len == 0 || self.audio_len == 0 || self.feature_dim == 0 || self.motions_per_concept == 0 {
            return invalid("lengths and dimensions must be positive");
        }
        if !(0.0..=1.0).contains(&self.alignment) || !(0.0..=1.0).contains(&self.codeword_alignment) || self.jitter < 0.0 {
            return invalid("alignment must lie in [0, 1] and jitter must be non-negative");
        }
        if let Some(s) = self.dominant_negative_share {
            if !(s > 0.0 && s <= 1.0) {
                return invalid(format!("dominant negative share {s} outside (0, 1]"));
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<VocabSpec> {
        Ok(
            VocabSpec::contiguous(self.text_size, self.motion_size, self.audio_size, self.emotion_size)?
                .with_max_motion_len(self.motion_len_max),
        )
    }
}

/// Feature map of the planted world: mean motion codeword of a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedFeatures {
    pub motion_start: TokenId,
    pub codebook: Vec<Vec<f64>>,
}

impl PlantedFeatures {
    pub fn dim(&self) -> usize {
        self.codebook.first().map_or(0, Vec::len)
    }

    pub fn features(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return invalid("feature of an empty motion");
        }
        let mut f = vec![0.0; self.dim()];
        for &t in tokens {
            let row = t
                .checked_sub(self.motion_start)
                .and_then(|k| self.codebook.get(k as usize))
                .ok_or_else(|| Error::InvalidArgument(format!("token {t} outside the motion codebook")))?;
            for (a, b) in f.iter_mut().zip(row) {
                *a += b;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        f.iter_mut().for_each(|x| *x *= inv);
        Ok(f)
    }
}

/// Hidden structure shared by all groups of a world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldStructure {
    pub concepts: Vec<Vec<f64>>,
    pub text_codebook: Vec<Vec<f64>>,
    pub audio_codebook: Vec<Vec<f64>>,
    pub motion: PlantedFeatures,
    /// Concept index of every group.
    pub group_concepts: BTreeMap<String, usize>,
    /// Concept each pooled motion was generated from.
    pub motion_concepts: BTreeMap<String, usize>,
    pub dominant_motion: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedWorld {
    pub config: WorldConfig,
    pub structure: WorldStructure,
    /// The full motion pool every group draws its candidates from.
    pub motions: Vec<MotionSequence>,
    /// Planted feature of each pooled motion.
    pub features: BTreeMap<String, Vec<f64>>,
    /// Ground-truth tier of every (group, pooled motion) pair, in pool order.
    pub pool_tiers: BTreeMap<String, Vec<Tier>>,
    pub dataset: Dataset,
}

fn unit_gaussian<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `n` orthonormal directions (Gram-Schmidt on Gaussian draws).
fn orthonormal<R: Rng>(n: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v = unit_gaussian(d, rng);
        for u in &out {
            let p = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
        }
        let l = norm(&v);
        if l > 1e-6 {
            out.push(v.into_iter().map(|x| x / l).collect());
        }
    }
    out
}

/// Unit vector at cosine `a` from unit `center` in a random direction.
fn tilt<R: Rng>(center: &[f64], a: f64, rng: &mut R) -> Vec<f64> {
    let r = unit_gaussian(center.len(), rng);
    let v: Vec<f64> = center.iter().zip(&r).map(|(x, y)| a * x + (1.0 - a * a).sqrt() * y).collect();
    let l = norm(&v);
    v.into_iter().map(|x| x / l).collect()
}

fn nearest(codebook: &[Vec<f64>], v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (k, c) in codebook.iter().enumerate() {
        let s = dot(c, v);
        if s > best_score {
            best = k;
            best_score = s;
        }
    }
    best
}

/// Snaps `len` jittered copies of `center` to codewords.
fn snap<R: Rng>(codebook: &[Vec<f64>], center: &[f64], len: usize, jitter: f64, rng: &mut R) -> Vec<usize> {
    let scale = jitter / (center.len() as f64).sqrt();
    (0..len)
        .map(|_| {
            let v: Vec<f64> = center
                .iter()
                .map(|c| c + scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            nearest(codebook, &v)
        })
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

fn group_id(split: Split, i: usize) -> String {
    format!("{}-{i:05}", split.name())
}

pub fn generate_world(cfg: &WorldConfig) -> Result<PlantedWorld> {
    cfg.validate()?;
    let vocab = cfg.vocab()?;
    let d = cfg.feature_dim;
    let mut rng = stream(cfg.seed, &[tag::WORLD, 0]);
    let concepts = orthonormal(cfg.n_concepts, d, &mut rng);
    // codewords sit around the concepts, like codebooks fitted to data
    let mut fitted = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|k| tilt(&concepts[k % cfg.n_concepts], cfg.codeword_alignment, &mut rng))
            .collect()
    };
    let text_codebook = fitted(cfg.text_size);
    let audio_codebook = fitted(cfg.audio_size);
    let motion_codebook = fitted(cfg.motion_size);
    let planted = PlantedFeatures {
        motion_start: vocab.motion.start,
        codebook: motion_codebook,
    };

    let mut rng = stream(cfg.seed, &[tag::WORLD, 1]);
    let mut motions = Vec::new();
    let mut motion_concepts = BTreeMap::new();
    let a = cfg.alignment;
    let blended = (cfg.blended_share * cfg.motions_per_concept as f64).round() as usize;
    for (ci, c) in concepts.iter().enumerate() {
        for j in 0..cfg.motions_per_concept {
            let len = rng.gen_range(cfg.motion_len_min..=cfg.motion_len_max);
            let own = tilt(c, a, &mut rng);
            let indices = if j < blended {
                // each token comes from the own latent or from a partner's
                let mut other = rng.gen_range(0..cfg.n_concepts - 1);
                if other >= ci {
                    other += 1;
                }
                let partner = tilt(&concepts[other], a, &mut rng);
                (0..len)
                    .map(|_| {
                        let src = if rng.gen::<f64>() < cfg.blend_alignment { &own } else { &partner };
                        snap(&planted.codebook, src, 1, cfg.jitter, &mut rng)[0]
                    })
                    .collect()
            } else {
                snap(&planted.codebook, &own, len, cfg.jitter, &mut rng)
            };
            let tokens = indices.into_iter().map(|k| vocab.motion.id_at(k)).collect();
            let id = format!("m{:05}", motions.len());
            motion_concepts.insert(id.clone(), ci);
            motions.push(MotionSequence::new(&vocab, id, tokens)?);
        }
    }
    let mut features = BTreeMap::new();
    for m in &motions {
        features.insert(m.motion_id.clone(), planted.features(&m.tokens)?);
    }

    let mut dataset = Dataset::empty(vocab);
    let mut pool_tiers = BTreeMap::new();
    let mut group_concepts = BTreeMap::new();
    let mut seen_conditions: HashSet<Condition> = HashSet::new();
    let weights = [1.0 - cfg.noise, cfg.noise];
    let splits = [
        (Split::Train, cfg.train_groups),
        (Split::Val, cfg.val_groups),
        (Split::Test, cfg.test_groups),
    ];
    let mut ordinal = 0u64;
    for (split, count) in splits {
        for i in 0..count {
            let mut rng = stream(cfg.seed, &[tag::WORLD, 2, ordinal]);
            ordinal += 1;
            let id = group_id(split, i);
            let ci = rng.gen_range(0..cfg.n_concepts);
            let concept = &concepts[ci];
            let mut condition = None;
            for _ in 0..32 {
                let text: Vec<TokenId> = snap(&text_codebook, concept, cfg.text_len, cfg.jitter * 2.0, &mut rng)
                    .into_iter()
                    .map(|k| vocab.text.id_at(k))
                    .collect();
                let audio: Vec<TokenId> = snap(&audio_codebook, concept, cfg.audio_len, cfg.jitter * 2.0, &mut rng)
                    .into_iter()
                    .map(|k| vocab.audio.id_at(k))
                    .collect();
                let emotion = vocab.emotion.id_at(ci % cfg.emotion_size);
                let c = Condition::new(&vocab, text, audio, emotion, Mode::TAE)?;
                if seen_conditions.insert(c.clone()) {
                    condition = Some(c);
                    break;
                }
            }
            let condition = condition
                .ok_or_else(|| Error::Infeasible(format!("could not draw a fresh condition for `{id}`")))?;

            let mut tiers = Vec::with_capacity(motions.len());
            let mut by_tier: [Vec<usize>; 3] = Default::default();
            for (k, m) in motions.iter().enumerate() {
                let sim = cosine(concept, &features[&m.motion_id]);
                let scores = [sim.clamp(0.0, 1.0), rng.gen::<f64>()];
                let tier = assign_tier(&scores, &weights, cfg.thresholds)?;
                by_tier[tier as usize].push(k);
                tiers.push(tier);
            }
            let mut candidates = Vec::with_capacity(cfg.candidates_per_tier.total());
            for tier in Tier::ALL {
                let want = cfg.candidates_per_tier.get(tier);
                let pool = &by_tier[tier as usize];
                if pool.len() < want {
                    return Err(Error::Infeasible(format!(
                        "group `{id}` has {} {} motions in the pool, {want} requested",
                        pool.len(),
                        tier.name()
                    )));
                }
                for &k in pool.choose_multiple(&mut rng, want) {
                    candidates.push(Candidate {
                        motion: motions[k].clone(),
                        tier,
                    });
                }
            }
            candidates.shuffle(&mut rng);
            pool_tiers.insert(id.clone(), tiers);
            group_concepts.insert(id.clone(), ci);
            let group = Group {
                group_id: id,
                condition,
                candidates,
            };
            match split {
                Split::Train => dataset.train.push(group),
                Split::Val => dataset.val.push(group),
                Split::Test => dataset.test.push(group),
            }
        }
    }

    let dominant_motion = match cfg.dominant_negative_share {
        Some(share) => Some(inject_dominant_negative(&mut dataset, &motions, &concepts, &features, &group_concepts, share, cfg.seed)?),
        None => None,
    };

    Ok(PlantedWorld {
        config: cfg.clone(),
        structure: WorldStructure {
            concepts,
            text_codebook,
            audio_codebook,
            motion: planted,
            group_concepts,
            motion_concepts,
            dominant_motion,
        },
        motions,
        features,
        pool_tiers,
        dataset,
    })
}

/// Picks the pooled motion with the highest mean similarity to all concepts
/// and substitutes it for a Negative candidate in as many training groups as
/// needed to reach `share` of the training Negative occurrences.
fn inject_dominant_negative(
    dataset: &mut Dataset,
    motions: &[MotionSequence],
    concepts: &[Vec<f64>],
    features: &BTreeMap<String, Vec<f64>>,
    group_concepts: &BTreeMap<String, usize>,
    share: f64,
    seed: u64,
) -> Result<String> {
    let generic = motions
        .iter()
        .map(|m| {
            let f = &features[&m.motion_id];
            let mean: f64 = concepts.iter().map(|c| cosine(c, f)).sum::<f64>() / concepts.len() as f64;
            (mean, m)
        })
        .max_by(|a, b| a.0.total_cmp(&b.0).then_with(|| b.1.motion_id.cmp(&a.1.motion_id)))
        .map(|(_, m)| m.clone())
        .ok_or_else(|| Error::Infeasible("empty motion pool".into()))?;
    let negatives: usize = dataset.train.iter().map(|g| g.tier_count(Tier::Negative)).sum();
    let need = (share * negatives as f64).ceil() as usize;
    let eligible: Vec<usize> = dataset
        .train
        .iter()
        .enumerate()
        .filter(|(_, g)| !g.candidates.iter().any(|c| c.motion.motion_id == generic.motion_id))
        .map(|(i, _)| i)
        .collect();
    if eligible.len() < need {
        return Err(Error::Infeasible(format!(
            "dominant negative needs {need} training groups, only {} are available",
            eligible.len()
        )));
    }
    let mut rng = stream(seed, &[tag::WORLD, 3]);
    let mut chosen: Vec<usize> = eligible.choose_multiple(&mut rng, need).copied().collect();
    chosen.sort_unstable();
    for i in chosen {
        let g = &mut dataset.train[i];
        debug_assert!(group_concepts.contains_key(&g.group_id));
        let slot = g
            .candidates
            .iter()
            .position(|c| c.tier == Tier::Negative)
            .expect("every group has a Negative candidate");
        g.candidates[slot].motion = generic.clone();
    }
    Ok(generic.motion_id)
}

impl PlantedWorld {
    /// Planted similarity between a group's concept and a motion's feature.
    pub fn similarity(&self, group_id: &str, motion_id: &str) -> Result<f64> {
        let ci = *self
            .structure
            .group_concepts
            .get(group_id)
            .ok_or_else(|| Error::InvalidArgument(format!("group `{group_id}` is not from this world")))?;
        let f = self
            .features
            .get(motion_id)
            .ok_or_else(|| Error::InvalidArgument(format!("motion `{motion_id}` is not from this world")))?;
        Ok(cosine(&self.structure.concepts[ci], f))
    }

    /// Tier totals per split.
    pub fn tier_counts(&self, split: Split) -> TierCounts {
        let groups = self.dataset.split(split);
        let count = |t| groups.iter().map(|g| g.tier_count(t)).sum();
        TierCounts {
            gold: count(Tier::Gold),
            silver: count(Tier::Silver),
            negative: count(Tier::Negative),
        }
    }

    /// Sidecar content: planted feature of every pooled motion.
    pub fn features_json(&self) -> Vec<u8> {
        serde_json::to_vec(&self.features).expect("features serialize")
    }

    pub fn structure_json(&self) -> Vec<u8> {
        serde_json::to_vec(&self.structure).expect("world structure serializes")
    }
}

/// A judge wired directly to the planted structure: condition tokens embed
/// as the concept their codeword was drawn around, motion tokens as their
/// codeword, and every pooling is a plain mean. Its motion embedding is the
/// normalized planted feature, so its scores are planted cosines whenever
/// the condition summary points at the group's concept.
pub fn planted_judge(world: &PlantedWorld) -> Result<JudgeParams> {
    planted_judge_from(&world.config, &world.structure)
}

/// `planted_judge` from a world's configuration and saved structure.
pub fn planted_judge_from(cfg: &WorldConfig, structure: &WorldStructure) -> Result<JudgeParams> {
    cfg.validate()?;
    let vocab = cfg.vocab()?;
    let d = cfg.feature_dim;
    let concepts = &structure.concepts;
    if concepts.len() != cfg.n_concepts || structure.motion.codebook.len() != cfg.motion_size {
        return invalid("world structure does not match its configuration");
    }
    let mut p = JudgeParams::zeros(&vocab, d, d);
    let fill = |p: &mut JudgeParams, branch: Branch, rows: &[Vec<f64>]| {
        let block = p.block_mut(Block::Embed(branch));
        for (r, row) in rows.iter().enumerate() {
            block[r * d..(r + 1) * d].copy_from_slice(row);
        }
    };
    let anchored = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|k| concepts[k % cfg.n_concepts].clone()).collect() };
    fill(&mut p, Branch::Text, &anchored(cfg.text_size));
    fill(&mut p, Branch::Audio, &anchored(cfg.audio_size));
    let emotions: Vec<Vec<f64>> = (0..cfg.emotion_size)
        .map(|e| {
            let mut v = vec![0.0; d];
            for c in (e..cfg.n_concepts).step_by(cfg.emotion_size) {
                v.iter_mut().zip(&concepts[c]).for_each(|(a, b)| *a += b);
            }
            v
        })
        .collect();
    fill(&mut p, Branch::Emotion, &emotions);
    fill(&mut p, Branch::Motion, &structure.motion.codebook);
    let identity: Vec<f64> = (0..d * d).map(|i| f64::from(u8::from(i % (d + 1) == 0))).collect();
    for b in Branch::ALL {
        p.block_mut(Block::ProjWeight(b)).copy_from_slice(&identity);
    }
    p.block_mut(Block::FusionWeight).copy_from_slice(&identity);
    p.set_tau(0.0);
    p.bank = MotionBank::default();
    Ok(p)
}
