//! Reference computations that share no ranking code with `evaluation`.

use rand::seq::index;

use crate::dataset::Group;
use crate::error::{invalid, Result};
use crate::evaluation::{Aggregate, EvalConfig, Gain, GroupScores, MetricsReport, Origin, ScoredCandidate};
use crate::rng::{stream, tag};

use super::PlantedWorld;

/// Candidate indices of `group` by decreasing planted similarity, ties by
/// ascending motion id.
pub fn oracle_rank(world: &PlantedWorld, group: &Group) -> Result<Vec<usize>> {
    let mut keyed = Vec::with_capacity(group.candidates.len());
    for (i, c) in group.candidates.iter().enumerate() {
        keyed.push((world.similarity(&group.group_id, &c.motion.motion_id)?, i));
    }
    // selection by repeated scans keeps this independent of library sorts
    let mut out = Vec::with_capacity(keyed.len());
    let mut used = vec![false; keyed.len()];
    for _ in 0..keyed.len() {
        let mut best: Option<usize> = None;
        for j in 0..keyed.len() {
            if used[j] {
                continue;
            }
            best = match best {
                None => Some(j),
                Some(b) => {
                    let (sb, sj) = (keyed[b].0, keyed[j].0);
                    let idb = &group.candidates[keyed[b].1].motion.motion_id;
                    let idj = &group.candidates[keyed[j].1].motion.motion_id;
                    if sj > sb || (sj == sb && idj < idb) {
                        Some(j)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        let b = best.expect("an unused candidate remains");
        used[b] = true;
        out.push(keyed[b].1);
    }
    Ok(out)
}

/// Rank of `pool[i]` by counting the candidates that beat it.
fn rank_by_count(pool: &[&ScoredCandidate], i: usize) -> usize {
    let me = pool[i];
    let mut ahead = 0;
    for (j, other) in pool.iter().enumerate() {
        let beats = other.score > me.score
            || (other.score == me.score && (other.id < me.id || (other.id == me.id && j < i)));
        if beats {
            ahead += 1;
        }
    }
    ahead + 1
}

fn partition_value(g: &GroupScores, origin: Origin, agg: Aggregate) -> Option<f64> {
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut best = f64::NEG_INFINITY;
    for c in &g.candidates {
        if c.origin == origin {
            n += 1;
            sum += c.score;
            if c.score > best {
                best = c.score;
            }
        }
    }
    if n == 0 {
        return None;
    }
    if origin == Origin::Generated && agg == Aggregate::Best {
        Some(best)
    } else {
        Some(sum / n as f64)
    }
}

fn brute_win(groups: &[GroupScores], left: Origin, right: Origin, agg: Aggregate) -> Result<f64> {
    let mut total = 0.0;
    for g in groups {
        let (Some(u), Some(v)) = (partition_value(g, left, agg), partition_value(g, right, agg)) else {
            return invalid(format!("group `{}` lacks a compared partition", g.group_id));
        };
        total += if u > v {
            1.0
        } else if u < v {
            0.0
        } else {
            0.5
        };
    }
    Ok(total / groups.len() as f64)
}

fn relevance_gain(origin: Origin, gain: Gain) -> f64 {
    let rel = match origin {
        Origin::Gold => 2,
        Origin::Silver => 1,
        _ => 0,
    };
    match gain {
        Gain::Linear => rel as f64,
        Gain::Exponential => ((1u32 << rel) - 1) as f64,
    }
}

fn brute_ndcg(pool: &[&ScoredCandidate], k: usize, gain: Gain) -> f64 {
    let n = pool.len();
    let mut dcg = 0.0;
    for r in 1..=k.min(n) {
        for i in 0..n {
            if rank_by_count(pool, i) == r {
                dcg += relevance_gain(pool[i].origin, gain) / ((r + 1) as f64).log2();
            }
        }
    }
    let count = |o: Origin| pool.iter().filter(|c| c.origin == o).count();
    let (gold, silver) = (count(Origin::Gold), count(Origin::Silver));
    let mut idcg = 0.0;
    for r in 1..=k.min(n) {
        let o = if r <= gold {
            Origin::Gold
        } else if r <= gold + silver {
            Origin::Silver
        } else {
            Origin::Negative
        };
        idcg += relevance_gain(o, gain) / ((r + 1) as f64).log2();
    }
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Cyclic Jacobi eigenvalues and eigenvectors (columns) of a symmetric matrix.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += m[i][j] * m[i][j];
                }
            }
        }
        let scale: f64 = (0..n).map(|i| m[i][i] * m[i][i]).sum::<f64>() + off;
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q] == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i][i]).collect(), v)
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let p = b[0].len();
    (0..n)
        .map(|i| (0..p).map(|j| (0..b.len()).map(|k| a[i][k] * b[k][j]).sum()).collect())
        .collect()
}

fn moments(xs: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = xs.len() as f64;
    let d = xs[0].len();
    let mut mu = vec![0.0; d];
    for x in xs {
        for j in 0..d {
            mu[j] += x[j] / n;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for x in xs {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (x[i] - mu[i]) * (x[j] - mu[j]) / (n - 1.0);
            }
        }
    }
    (mu, cov)
}

/// Fréchet distance from raw moments, using Jacobi diagonalisation for
/// both square roots.
pub fn brute_frechet(mu_r: &[f64], cov_r: &[Vec<f64>], mu_g: &[f64], cov_g: &[Vec<f64>]) -> f64 {
    let d = mu_r.len();
    let (lr, vr) = jacobi_eigen(cov_r);
    let root: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| (0..d).map(|k| vr[i][k] * lr[k].max(0.0).sqrt() * vr[j][k]).sum())
                .collect()
        })
        .collect();
    let inner = matmul(&matmul(&root, cov_g), &root);
    let sym: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| 0.5 * (inner[i][j] + inner[j][i])).collect()).collect();
    let (l, _) = jacobi_eigen(&sym);
    let cross: f64 = l.iter().map(|x| x.max(0.0).sqrt()).sum();
    let mut value = -2.0 * cross;
    for i in 0..d {
        value += (mu_r[i] - mu_g[i]).powi(2) + cov_r[i][i] + cov_g[i][i];
    }
    value.max(0.0)
}

/// Reference report recomputed by direct enumeration. Ranks come from
/// pairwise counting and FID from Jacobi diagonalisation; the diversity
/// subsets are drawn from the same stream as the production path.
pub fn brute_force_metrics(
    groups: &[GroupScores],
    real: &[Vec<f64>],
    generated: &[Vec<f64>],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<MetricsReport> {
    cfg.validate()?;
    if groups.is_empty() {
        return invalid("no groups");
    }
    let agg = cfg.aggregate;
    let has_generated = groups.iter().any(|g| g.candidates.iter().any(|c| c.origin == Origin::Generated));
    let n = groups.len() as f64;

    let mut gen_hits = 0usize;
    let mut rr = 0.0;
    let mut ndcg = [0.0; 3];
    for g in groups {
        let all: Vec<&ScoredCandidate> = g.candidates.iter().collect();
        if has_generated {
            let mut hit = false;
            let mut any = false;
            for (i, c) in all.iter().enumerate() {
                if c.origin == Origin::Generated {
                    any = true;
                    hit |= rank_by_count(&all, i) <= cfg.k;
                }
            }
            if !any {
                return invalid(format!("group `{}` has no generated candidates", g.group_id));
            }
            gen_hits += usize::from(hit);
        }
        let pool: Vec<&ScoredCandidate> = all.iter().copied().filter(|c| c.origin != Origin::Generated).collect();
        let best_gold = (0..pool.len())
            .filter(|&i| pool[i].origin == Origin::Gold)
            .map(|i| rank_by_count(&pool, i))
            .min();
        let Some(best_gold) = best_gold else {
            return invalid(format!("group `{}` has no Gold candidate", g.group_id));
        };
        rr += 1.0 / best_gold as f64;
        for (slot, k) in [3, 5, 10].into_iter().enumerate() {
            ndcg[slot] += brute_ndcg(&pool, k, cfg.gain);
        }
    }

    let fid = (real.len() >= 2 && generated.len() >= 2).then(|| {
        let (mr, cr) = moments(real);
        let (mg, cg) = moments(generated);
        brute_frechet(&mr, &cr, &mg, &cg)
    });
    let diversity = (generated.len() >= 2 * cfg.s_d).then(|| {
        let mut rng = stream(seed, &[tag::DIVERSITY, 0]);
        let picks = index::sample(&mut rng, generated.len(), 2 * cfg.s_d).into_vec();
        let mut total = 0.0;
        for i in 0..cfg.s_d {
            let (a, b) = (&generated[picks[i]], &generated[picks[cfg.s_d + i]]);
            let mut sq = 0.0;
            for j in 0..a.len() {
                sq += (a[j] - b[j]) * (a[j] - b[j]);
            }
            total += sq.sqrt();
        }
        total / cfg.s_d as f64
    });
    let gen_win = |o| has_generated.then(|| brute_win(groups, Origin::Generated, o, agg)).transpose();
    Ok(MetricsReport {
        win_g_gt_n: gen_win(Origin::Negative)?,
        win_g_gt_s: gen_win(Origin::Silver)?,
        win_g_gt_g: gen_win(Origin::Gold)?,
        win_G_gt_S: brute_win(groups, Origin::Gold, Origin::Silver, agg)?,
        win_G_gt_N: brute_win(groups, Origin::Gold, Origin::Negative, agg)?,
        win_S_gt_N: brute_win(groups, Origin::Silver, Origin::Negative, agg)?,
        gen_at_k: has_generated.then(|| gen_hits as f64 / n),
        mrr_gold: rr / n,
        ndcg_at_3: ndcg[0] / n,
        ndcg_at_5: ndcg[1] / n,
        ndcg_at_10: ndcg[2] / n,
        fid,
        diversity,
        n_groups: groups.len(),
        config: serde_json::to_value(cfg)?,
    })
}
