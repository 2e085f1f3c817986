//! Independent reference implementations and random-instance generators
//! shared by the oracle and acceptance suites.
//!
//! The reference scorers below are deliberately written from the contract
//! alone — plain loops, selection-based ranking, exhaustive enumeration —
//! so agreement with the library is evidence, not tautology.

#![allow(dead_code)]

use std::collections::HashSet;

use ndarray::Array2;
use rand::Rng;

use flipreid::eval::{cross_distances, Protocol};
use flipreid::losses::pairwise_euclidean;

// ---------------------------------------------------------------------------
// Retrieval scoring: brute-force mAP / CMC.
// ---------------------------------------------------------------------------

/// Reference retrieval scores, computed by brute force.
pub struct NaiveEval {
    pub map: f64,
    pub cmc: Vec<f64>,
    pub valid_queries: usize,
}

/// Scores a ranking the slow way: per query, filter the gallery by the
/// protocol, selection-sort the survivors by (distance, index), then walk the
/// ranking accumulating precision at every true match. Returns `None` when no
/// query keeps a valid positive.
pub fn naive_evaluate(
    dist: &Array2<f64>,
    query_ids: &[u32],
    query_cams: &[u32],
    gallery_ids: &[u32],
    gallery_cams: &[u32],
    protocol: Protocol,
    max_rank: usize,
) -> Option<NaiveEval> {
    let nq = query_ids.len();
    let ng = gallery_ids.len();
    let mut sum_ap = 0.0;
    let mut valid = 0usize;
    let mut hits = vec![0usize; max_rank];
    for qi in 0..nq {
        let mut remaining: Vec<usize> = (0..ng)
            .filter(|&j| {
                let same_cam = query_cams[qi] == gallery_cams[j];
                let discard = match protocol {
                    Protocol::Standard => same_cam && query_ids[qi] == gallery_ids[j],
                    Protocol::ExcludeSameCamera => same_cam,
                };
                !discard
            })
            .collect();
        // Selection sort: repeatedly pull the closest remaining entry,
        // preferring the lower gallery index on exact distance ties.
        let mut order = Vec::with_capacity(remaining.len());
        while !remaining.is_empty() {
            let mut best = 0usize;
            for t in 1..remaining.len() {
                let (a, b) = (remaining[t], remaining[best]);
                let (da, db) = (dist[[qi, a]], dist[[qi, b]]);
                if da < db || (da == db && a < b) {
                    best = t;
                }
            }
            order.push(remaining.remove(best));
        }
        let num_matches = order
            .iter()
            .filter(|&&j| gallery_ids[j] == query_ids[qi])
            .count();
        if num_matches == 0 {
            continue;
        }
        valid += 1;
        let mut seen = 0usize;
        let mut ap = 0.0;
        let mut first_match = None;
        for (rank, &j) in order.iter().enumerate() {
            if gallery_ids[j] == query_ids[qi] {
                seen += 1;
                ap += seen as f64 / (rank + 1) as f64;
                if first_match.is_none() {
                    first_match = Some(rank);
                }
            }
        }
        sum_ap += ap / num_matches as f64;
        for k in first_match.unwrap()..max_rank {
            hits[k] += 1;
        }
    }
    if valid == 0 {
        return None;
    }
    Some(NaiveEval {
        map: sum_ap / valid as f64,
        cmc: hits.iter().map(|&h| h as f64 / valid as f64).collect(),
        valid_queries: valid,
    })
}

/// A random retrieval-scoring instance; distances are drawn directly, half
/// the time on a coarse grid so exact ties are common.
pub struct EvalInstance {
    pub dist: Array2<f64>,
    pub query_ids: Vec<u32>,
    pub query_cams: Vec<u32>,
    pub gallery_ids: Vec<u32>,
    pub gallery_cams: Vec<u32>,
    pub protocol: Protocol,
}

pub fn random_eval_instance<R: Rng>(rng: &mut R) -> EvalInstance {
    let nq = rng.random_range(1..=10);
    let ng = rng.random_range(2..=30);
    let num_ids = rng.random_range(2..=6);
    let num_cams = rng.random_range(1..=4);
    let quantize = rng.random_bool(0.5);
    let draw = |rng: &mut R| -> f64 {
        let v = rng.random::<f64>();
        if quantize {
            (v * 8.0).floor() / 8.0
        } else {
            v
        }
    };
    let mut dist = Array2::zeros((nq, ng));
    for i in 0..nq {
        for j in 0..ng {
            dist[[i, j]] = draw(rng);
        }
    }
    let ids = |rng: &mut R, n: usize| -> Vec<u32> {
        (0..n).map(|_| rng.random_range(0..num_ids)).collect()
    };
    let cams = |rng: &mut R, n: usize| -> Vec<u32> {
        (0..n).map(|_| rng.random_range(0..num_cams)).collect()
    };
    let query_ids = ids(rng, nq);
    let gallery_ids = ids(rng, ng);
    let query_cams = cams(rng, nq);
    let gallery_cams = cams(rng, ng);
    let protocol = if rng.random_bool(0.5) {
        Protocol::Standard
    } else {
        Protocol::ExcludeSameCamera
    };
    EvalInstance {
        dist,
        query_ids,
        query_cams,
        gallery_ids,
        gallery_cams,
        protocol,
    }
}

// ---------------------------------------------------------------------------
// Re-ranking: direct transcription of the procedure.
// ---------------------------------------------------------------------------

/// Reference re-ranking over the three original distance blocks, written
/// with plain vectors and hash sets. Follows the same procedure as the
/// library — joint point set, k-reciprocal sets with two-thirds expansion,
/// exponential encodings, k2-mean smoothing, Jaccard blend — but shares no
/// code with it.
pub fn naive_rerank(
    q_g: &Array2<f64>,
    q_q: &Array2<f64>,
    g_g: &Array2<f64>,
    k1: usize,
    k2: usize,
    lambda: f64,
) -> Array2<f64> {
    let (nq, ng) = q_g.dim();
    let n = nq + ng;
    let k1 = k1.min(n - 1);
    let k2 = k2.min(n);

    // Joint matrix, queries first.
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..nq {
        for j in 0..nq {
            dist[i][j] = q_q[[i, j]];
        }
        for j in 0..ng {
            dist[i][nq + j] = q_g[[i, j]];
            dist[nq + j][i] = q_g[[i, j]];
        }
    }
    for i in 0..ng {
        for j in 0..ng {
            dist[nq + i][nq + j] = g_g[[i, j]];
        }
    }

    // Every point's neighbors (self excluded), closest first, index ties low.
    let ranked: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut o: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            o.sort_by(|&a, &b| {
                dist[i][a]
                    .partial_cmp(&dist[i][b])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            o
        })
        .collect();
    let knn = |p: usize, k: usize| -> HashSet<usize> { ranked[p].iter().take(k).copied().collect() };
    let reciprocal = |p: usize, k: usize| -> HashSet<usize> {
        knn(p, k)
            .into_iter()
            .filter(|&j| knn(j, k).contains(&p))
            .collect()
    };

    let mut enc = vec![vec![0.0; n]; n];
    for p in 0..n {
        let base = reciprocal(p, k1);
        let mut members = base.clone();
        for &q in &base {
            let cand = reciprocal(q, k1.div_ceil(2));
            let overlap = cand.intersection(&base).count();
            if !cand.is_empty() && 3 * overlap >= 2 * cand.len() {
                members.extend(cand.iter().copied());
            }
        }
        let mut sum = 0.0;
        for &j in &members {
            enc[p][j] = (-dist[p][j]).exp();
            sum += enc[p][j];
        }
        if sum > 0.0 {
            for v in enc[p].iter_mut() {
                *v /= sum;
            }
        }
    }

    // Mean over each point's k2 nearest encodings, the point itself first.
    let mut smooth = vec![vec![0.0; n]; n];
    for p in 0..n {
        let mut sources = vec![p];
        sources.extend(ranked[p].iter().take(k2 - 1).copied());
        for j in 0..n {
            let mut acc = 0.0;
            for &s in &sources {
                acc += enc[s][j];
            }
            smooth[p][j] = acc / sources.len() as f64;
        }
    }

    let mut out = Array2::zeros((nq, ng));
    for i in 0..nq {
        for j in 0..ng {
            let g = nq + j;
            let mut sum_min = 0.0;
            let mut sum_max = 0.0;
            for c in 0..n {
                sum_min += smooth[i][c].min(smooth[g][c]);
                sum_max += smooth[i][c].max(smooth[g][c]);
            }
            let jaccard = if sum_max > 0.0 {
                1.0 - sum_min / sum_max
            } else {
                1.0
            };
            out[[i, j]] = (1.0 - lambda) * jaccard + lambda * q_g[[i, j]];
        }
    }
    out
}

/// Random clustered point sets turned into the three distance blocks a
/// re-ranker consumes. Occasionally duplicates a gallery point into the
/// query set so zero distances and heavy ties occur.
pub fn random_rerank_blocks<R: Rng>(
    rng: &mut R,
    nq: usize,
    ng: usize,
    dim: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let num_clusters = rng.random_range(2..=4);
    let centers: Vec<Vec<f64>> = (0..num_clusters)
        .map(|_| (0..dim).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect())
        .collect();
    let point = |rng: &mut R| -> Vec<f64> {
        let c = &centers[rng.random_range(0..num_clusters)];
        c.iter()
            .map(|&v| v + 0.4 * (rng.random::<f64>() - 0.5))
            .collect()
    };
    let mut query = Array2::zeros((nq, dim));
    let mut gallery = Array2::zeros((ng, dim));
    for i in 0..nq {
        let p = point(rng);
        for k in 0..dim {
            query[[i, k]] = p[k];
        }
    }
    for j in 0..ng {
        let p = point(rng);
        for k in 0..dim {
            gallery[[j, k]] = p[k];
        }
    }
    if rng.random_bool(0.3) {
        let qi = rng.random_range(0..nq);
        let gj = rng.random_range(0..ng);
        for k in 0..dim {
            query[[qi, k]] = gallery[[gj, k]];
        }
    }
    let q_g = cross_distances(&query, &gallery).unwrap();
    let q_q = pairwise_euclidean(&query);
    let g_g = pairwise_euclidean(&gallery);
    (q_g, q_q, g_g)
}

// ---------------------------------------------------------------------------
// Triplet loss: exhaustive hardest-pair enumeration.
// ---------------------------------------------------------------------------

/// Reference batch-hard triplet result from exhaustive enumeration.
pub struct NaiveTriplet {
    pub loss: f64,
    pub grad: Array2<f64>,
    pub active_fraction: f64,
}

/// Enumerates every candidate positive and negative of every anchor,
/// selecting the hardest of each with lowest-index tie-breaks, and assembles
/// the loss and its subgradient from the selected pairs. Returns `None` when
/// some anchor lacks a positive or a negative.
pub fn naive_batch_hard(
    embeddings: &Array2<f64>,
    labels: &[u32],
    margin: f64,
) -> Option<NaiveTriplet> {
    let (n, d) = embeddings.dim();
    if labels.len() != n || n < 2 {
        return None;
    }
    let pair_dist = |i: usize, j: usize| -> f64 {
        let mut ni = 0.0;
        let mut nj = 0.0;
        let mut dot = 0.0;
        for k in 0..d {
            ni += embeddings[[i, k]] * embeddings[[i, k]];
        }
        for k in 0..d {
            nj += embeddings[[j, k]] * embeddings[[j, k]];
        }
        for k in 0..d {
            dot += embeddings[[i, k]] * embeddings[[j, k]];
        }
        (ni + nj - 2.0 * dot).max(0.0).sqrt()
    };

    let mut loss = 0.0;
    let mut active = 0usize;
    let mut grad = Array2::zeros((n, d));
    for a in 0..n {
        let mut hardest_pos: Option<(usize, f64)> = None;
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            let dp = pair_dist(a, p);
            match hardest_pos {
                Some((_, v)) if dp > v => hardest_pos = Some((p, dp)),
                None => hardest_pos = Some((p, dp)),
                _ => {}
            }
        }
        let mut hardest_neg: Option<(usize, f64)> = None;
        for q in 0..n {
            if labels[q] == labels[a] {
                continue;
            }
            let dq = pair_dist(a, q);
            match hardest_neg {
                Some((_, v)) if dq < v => hardest_neg = Some((q, dq)),
                None => hardest_neg = Some((q, dq)),
                _ => {}
            }
        }
        let (p, dp) = hardest_pos?;
        let (q, dq) = hardest_neg?;
        let hinge = margin + dp - dq;
        if hinge > 0.0 {
            loss += hinge;
            active += 1;
            // d|e_a - e_j| / de_a = (e_a - e_j) / dist, zero at dist = 0.
            let mut picks = [(p, 1.0, dp), (q, -1.0, dq)];
            picks.sort_by_key(|t| t.0);
            for &(j, w, dij) in &picks {
                if dij == 0.0 {
                    continue;
                }
                let scale = w / (n as f64 * dij);
                for k in 0..d {
                    let diff = embeddings[[a, k]] - embeddings[[j, k]];
                    grad[[a, k]] += scale * diff;
                    grad[[j, k]] -= scale * diff;
                }
            }
        }
    }
    Some(NaiveTriplet {
        loss: loss / n as f64,
        grad,
        active_fraction: active as f64 / n as f64,
    })
}

/// A random PK-style batch: P identities with K samples each (N <= 16),
/// embedding dim <= 8. Half the batches are drawn on a coarse grid so
/// distance ties are routine.
pub fn random_pk_batch<R: Rng>(rng: &mut R) -> (Array2<f64>, Vec<u32>) {
    let (p, k) = loop {
        let p = rng.random_range(2..=5);
        let k = rng.random_range(2..=4);
        if p * k <= 16 {
            break (p, k);
        }
    };
    let n = p * k;
    let dim = rng.random_range(1..=8);
    let quantize = rng.random_bool(0.5);
    let mut embeddings = Array2::zeros((n, dim));
    for i in 0..n {
        for j in 0..dim {
            let v = rng.random::<f64>() * 2.0 - 1.0;
            embeddings[[i, j]] = if quantize { (v * 2.0).round() / 2.0 } else { v };
        }
    }
    let mut labels = Vec::with_capacity(n);
    for ident in 0..p {
        for _ in 0..k {
            labels.push(100 + ident as u32);
        }
    }
    (embeddings, labels)
}
