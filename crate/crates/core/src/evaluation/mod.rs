//! Tier-aware ranking metrics, Fréchet distance and diversity.

mod run;

pub use run::{
    evaluate_generation, generated_id, metrics_from_scores, score_generation, EvalConfig, FeatureSource, ScoredRun,
};

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Tier;
use crate::error::{invalid, Error, Result};

/// Where a scored candidate came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Gold,
    Silver,
    Negative,
    Generated,
}

impl Origin {
    pub fn tier(self) -> Option<Tier> {
        match self {
            Origin::Gold => Some(Tier::Gold),
            Origin::Silver => Some(Tier::Silver),
            Origin::Negative => Some(Tier::Negative),
            Origin::Generated => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Origin::Gold => "gold",
            Origin::Silver => "silver",
            Origin::Negative => "negative",
            Origin::Generated => "generated",
        }
    }
}

impl From<Tier> for Origin {
    fn from(t: Tier) -> Origin {
        match t {
            Tier::Gold => Origin::Gold,
            Tier::Silver => Origin::Silver,
            Tier::Negative => Origin::Negative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub id: String,
    pub origin: Origin,
    pub score: f64,
}

/// Judge scores of every candidate of one group, generated ones included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub group_id: String,
    pub candidates: Vec<ScoredCandidate>,
}

impl GroupScores {
    fn of(&self, origin: Origin) -> impl Iterator<Item = &ScoredCandidate> {
        self.candidates.iter().filter(move |c| c.origin == origin)
    }

    /// Arithmetic mean of one partition.
    pub fn mean(&self, origin: Origin) -> Option<f64> {
        let (n, sum) = self.of(origin).fold((0usize, 0.0), |(n, s), c| (n + 1, s + c.score));
        (n > 0).then(|| sum / n as f64)
    }

    /// Aggregate of a partition; `Best` only changes the generated side.
    pub fn aggregate(&self, origin: Origin, agg: Aggregate) -> Option<f64> {
        match (origin, agg) {
            (Origin::Generated, Aggregate::Best) => self.of(origin).map(|c| c.score).reduce(f64::max),
            _ => self.mean(origin),
        }
    }

    /// The annotated pool, generated candidates removed.
    pub fn annotated(&self) -> Vec<ScoredCandidate> {
        self.candidates.iter().filter(|c| c.origin != Origin::Generated).cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    #[default]
    Mean,
    Best,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gain {
    #[default]
    Linear,
    Exponential,
}

impl Gain {
    fn of(self, rel: u32) -> f64 {
        match self {
            Gain::Linear => rel as f64,
            Gain::Exponential => 2f64.powi(rel as i32) - 1.0,
        }
    }
}

pub fn kappa(u: f64, v: f64) -> Result<f64> {
    if !u.is_finite() || !v.is_finite() {
        return Err(Error::NonFinite(format!("kappa({u}, {v})")));
    }
    Ok(if u > v {
        1.0
    } else if u == v {
        0.5
    } else {
        0.0
    })
}

/// Mean over groups of `kappa(left, right)` on the partition aggregates.
pub fn win_rate(groups: &[GroupScores], left: Origin, right: Origin, agg: Aggregate) -> Result<f64> {
    if groups.is_empty() {
        return invalid("win rate over no groups");
    }
    let mut total = 0.0;
    for g in groups {
        let side = |o: Origin| {
            g.aggregate(o, agg).ok_or_else(|| Error::InvalidArgument(format!(
                "group `{}` has no {} candidates",
                g.group_id,
                o.name()
            )))
        };
        total += kappa(side(left)?, side(right)?)?;
    }
    Ok(total / groups.len() as f64)
}

/// 1-based ranks aligned with the input: descending score, ties by id.
pub fn rank_group(scores: &[ScoredCandidate]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .score
            .partial_cmp(&scores[a].score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| scores[a].id.cmp(&scores[b].id))
            .then(a.cmp(&b))
    });
    let mut ranks = vec![0; scores.len()];
    for (r, i) in order.into_iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

fn best_rank(pool: &[ScoredCandidate], origin: Origin) -> Option<usize> {
    let ranks = rank_group(pool);
    pool.iter().zip(ranks).filter(|(c, _)| c.origin == origin).map(|(_, r)| r).min()
}

/// Whether some generated candidate ranks within the top `k` of the pooled
/// candidate set.
pub fn gen_at_k(group: &GroupScores, k: usize) -> Result<bool> {
    best_rank(&group.candidates, Origin::Generated)
        .map(|r| r <= k)
        .ok_or_else(|| Error::InvalidArgument(format!("group `{}` has no generated candidates", group.group_id)))
}

pub fn gen_at_k_rate(groups: &[GroupScores], k: usize) -> Result<f64> {
    if groups.is_empty() {
        return invalid("Gen@K over no groups");
    }
    let mut hits = 0usize;
    for g in groups {
        hits += usize::from(gen_at_k(g, k)?);
    }
    Ok(hits as f64 / groups.len() as f64)
}

/// Mean reciprocal rank of the best Gold candidate in the annotated pool.
pub fn mrr_gold(groups: &[GroupScores]) -> Result<f64> {
    if groups.is_empty() {
        return invalid("MRR over no groups");
    }
    let mut total = 0.0;
    for g in groups {
        let r = best_rank(&g.annotated(), Origin::Gold).ok_or_else(|| Error::MissingTier {
            group_id: g.group_id.clone(),
            tier: Tier::Gold.name(),
        })?;
        total += 1.0 / r as f64;
    }
    Ok(total / groups.len() as f64)
}

fn dcg(tiers: impl Iterator<Item = Tier>, k: usize, gain: Gain) -> f64 {
    tiers
        .take(k)
        .enumerate()
        .map(|(i, t)| gain.of(t.relevance()) / ((i + 2) as f64).log2())
        .sum()
}

/// nDCG@k of tiers listed in ranked order. Zero when the ideal DCG is zero.
pub fn ndcg_at_k(ranked: &[Tier], k: usize, gain: Gain) -> Result<f64> {
    if ranked.is_empty() {
        return invalid("nDCG of an empty ranking");
    }
    let mut ideal = ranked.to_vec();
    ideal.sort_by_key(|t| std::cmp::Reverse(t.relevance()));
    let idcg = dcg(ideal.into_iter(), k, gain);
    if idcg == 0.0 {
        return Ok(0.0);
    }
    Ok(dcg(ranked.iter().copied(), k, gain) / idcg)
}

/// Mean nDCG@k of the judge ranking of each group's annotated pool.
pub fn mean_ndcg(groups: &[GroupScores], k: usize, gain: Gain) -> Result<f64> {
    if groups.is_empty() {
        return invalid("nDCG over no groups");
    }
    let mut total = 0.0;
    for g in groups {
        let pool = g.annotated();
        let ranks = rank_group(&pool);
        let mut ranked: Vec<(usize, Tier)> = pool
            .iter()
            .zip(ranks)
            .map(|(c, r)| (r, c.origin.tier().expect("annotated")))
            .collect();
        ranked.sort_unstable_by_key(|&(r, _)| r);
        let tiers: Vec<Tier> = ranked.into_iter().map(|(_, t)| t).collect();
        total += ndcg_at_k(&tiers, k, gain)?;
    }
    Ok(total / groups.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Sample mean and unbiased covariance.
pub fn estimate_gaussian(features: &[Vec<f64>]) -> Result<Gaussian> {
    if features.len() < 2 {
        return invalid(format!("a Gaussian needs at least 2 samples, got {}", features.len()));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return invalid("features must share a positive dimension");
    }
    let n = features.len();
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok(Gaussian { mean, cov })
}

const PSD_TOL: f64 = 1e-8;

fn check_covariance(s: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if !s.is_square() {
        return invalid("covariance is not square");
    }
    let scale = s.amax().max(1.0);
    if (s - s.transpose()).amax() > 1e-12 * scale {
        return invalid("covariance is not symmetric");
    }
    let eig = SymmetricEigen::new(s.clone());
    if eig.eigenvalues.min() < -PSD_TOL {
        return invalid(format!("covariance has eigenvalue {} below tolerance", eig.eigenvalues.min()));
    }
    Ok(eig)
}

fn psd_sqrt(eig: &SymmetricEigen<f64, nalgebra::Dyn>) -> DMatrix<f64> {
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ_r−μ_g‖² + Tr(Σ_r + Σ_g − 2(Σ_r^{1/2} Σ_g Σ_r^{1/2})^{1/2})`.
pub fn frechet_distance(real: &Gaussian, generated: &Gaussian) -> Result<f64> {
    let d = real.mean.len();
    if generated.mean.len() != d || real.cov.nrows() != d || generated.cov.nrows() != d {
        return invalid("Gaussian dimensions differ");
    }
    let er = check_covariance(&real.cov)?;
    check_covariance(&generated.cov)?;
    let root = psd_sqrt(&er);
    let m = &root * &generated.cov * &root;
    let m = (&m + m.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let diff = &real.mean - &generated.mean;
    let value = diff.norm_squared() + real.cov.trace() + generated.cov.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::NonFinite("Fréchet distance".into()));
    }
    Ok(value.max(0.0))
}

/// Mean Euclidean distance between aligned pairs of two equal-size subsets.
pub fn paired_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return invalid("paired subsets must be non-empty and of equal size");
    }
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
        .sum();
    Ok(total / a.len() as f64)
}

/// Draws `2·s_d` distinct features, pairs the first half with the second and
/// returns the mean pair distance.
pub fn diversity<R: Rng>(features: &[Vec<f64>], s_d: usize, rng: &mut R) -> Result<f64> {
    if s_d == 0 {
        return invalid("S_d must be positive");
    }
    if features.len() < 2 * s_d {
        return invalid(format!("diversity needs {} features, got {}", 2 * s_d, features.len()));
    }
    let picks = index::sample(rng, features.len(), 2 * s_d).into_vec();
    let (left, right) = picks.split_at(s_d);
    let a: Vec<Vec<f64>> = left.iter().map(|&i| features[i].clone()).collect();
    let b: Vec<Vec<f64>> = right.iter().map(|&i| features[i].clone()).collect();
    paired_distance(&a, &b)
}

/// One evaluation run. Field names are part of the on-disk format.
///
/// Metrics of the generated set are `None` when no group has generated
/// candidates; FID needs two features on each side and diversity `2·S_d`
/// generated features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct MetricsReport {
    pub win_g_gt_n: Option<f64>,
    pub win_g_gt_s: Option<f64>,
    pub win_g_gt_g: Option<f64>,
    pub win_G_gt_S: f64,
    pub win_G_gt_N: f64,
    pub win_S_gt_N: f64,
    pub gen_at_k: Option<f64>,
    pub mrr_gold: f64,
    pub ndcg_at_3: f64,
    pub ndcg_at_5: f64,
    pub ndcg_at_10: f64,
    pub fid: Option<f64>,
    pub diversity: Option<f64>,
    pub n_groups: usize,
    pub config: serde_json::Value,
}

impl MetricsReport {
    /// Every rate-valued field by name, `None` where undefined.
    pub fn rates(&self) -> [(&'static str, Option<f64>); 11] {
        [
            ("win_g_gt_n", self.win_g_gt_n),
            ("win_g_gt_s", self.win_g_gt_s),
            ("win_g_gt_g", self.win_g_gt_g),
            ("win_G_gt_S", Some(self.win_G_gt_S)),
            ("win_G_gt_N", Some(self.win_G_gt_N)),
            ("win_S_gt_N", Some(self.win_S_gt_N)),
            ("gen_at_k", self.gen_at_k),
            ("mrr_gold", Some(self.mrr_gold)),
            ("ndcg_at_3", Some(self.ndcg_at_3)),
            ("ndcg_at_5", Some(self.ndcg_at_5)),
            ("ndcg_at_10", Some(self.ndcg_at_10)),
        ]
    }
}
