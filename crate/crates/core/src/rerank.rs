//! k-reciprocal re-ranking of query-to-gallery distances.
//!
//! Queries and gallery samples are pooled into one point set. Each point's
//! k-reciprocal neighbor set (neighbors that also list the point among their
//! own k nearest) is expanded with the half-k reciprocal sets of its members,
//! encoded as an exponentially weighted, row-normalized sparse vector, and
//! smoothed by averaging over each point's k2 nearest encodings. The final
//! distance blends the Jaccard distance between these encodings with the
//! original Euclidean distance:
//!
//! final = (1 - lambda) * jaccard + lambda * original.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::eval::cross_distances;
use crate::losses::pairwise_euclidean;

/// Re-ranking hyperparameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct RerankParams {
    /// Neighborhood size for the reciprocal sets.
    pub k1: usize,
    /// Number of nearest encodings averaged in the smoothing step.
    pub k2: usize,
    /// Blend weight of the original distance in the final matrix.
    pub lambda: f64,
}

impl Default for RerankParams {
    fn default() -> Self {
        RerankParams {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

impl RerankParams {
    pub fn validate(&self) -> Result<()> {
        if self.k2 == 0 {
            return Err(Error::validation("k2 must be >= 1"));
        }
        if self.k1 < self.k2 {
            return Err(Error::validation(format!(
                "k1 must be >= k2, got k1 = {}, k2 = {}",
                self.k1, self.k2
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::validation(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Checks that `m` is a plausible self-distance matrix: square, finite,
/// nonnegative, symmetric within 1e-9, with a zero diagonal.
fn validate_self_distances(m: &Array2<f64>, name: &str) -> Result<()> {
    let (r, c) = m.dim();
    if r != c {
        return Err(Error::ShapeMismatch(format!(
            "{name} distances must be square, got {r}x{c}"
        )));
    }
    for i in 0..r {
        if m[[i, i]].abs() > 1e-9 {
            return Err(Error::validation(format!(
                "{name} distances must have a zero diagonal (row {i})"
            )));
        }
        for j in 0..c {
            let v = m[[i, j]];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::validation(format!(
                    "{name} distances must be finite and nonnegative ({i}, {j})"
                )));
            }
            if (v - m[[j, i]]).abs() > 1e-9 {
                return Err(Error::validation(format!(
                    "{name} distances must be symmetric ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Neighbor order of every point: all other indices sorted by distance,
/// ties by index. Point `i` itself is excluded from its own list.
fn neighbor_orders(dist: &Array2<f64>) -> Vec<Vec<usize>> {
    let n = dist.nrows();
    (0..n)
        .map(|i| {
            let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| {
                dist[[i, a]]
                    .partial_cmp(&dist[[i, b]])
                    .expect("finite distances")
                    .then(a.cmp(&b))
            });
            order
        })
        .collect()
}

/// The k-reciprocal set of point `p`: members of p's k nearest neighbors
/// whose own k nearest neighbors contain p.
fn reciprocal_set(orders: &[Vec<usize>], p: usize, k: usize) -> Vec<usize> {
    orders[p][..k.min(orders[p].len())]
        .iter()
        .copied()
        .filter(|&j| orders[j][..k.min(orders[j].len())].contains(&p))
        .collect()
}

/// Reciprocal set of `p` expanded with the half-k sets of its members.
/// A member's half-k set joins when at least two thirds of it already
/// overlaps the base set (compared exactly, in integers).
fn expanded_reciprocal_set(orders: &[Vec<usize>], p: usize, k1: usize) -> Vec<usize> {
    let base = reciprocal_set(orders, p, k1);
    let half_k = k1.div_ceil(2);
    let mut expanded: std::collections::BTreeSet<usize> = base.iter().copied().collect();
    for &q in &base {
        let candidate = reciprocal_set(orders, q, half_k);
        let overlap = candidate.iter().filter(|&&c| base.contains(&c)).count();
        if !candidate.is_empty() && 3 * overlap >= 2 * candidate.len() {
            expanded.extend(candidate);
        }
    }
    expanded.into_iter().collect()
}

/// Re-rank query-to-gallery distances from the three original distance
/// blocks: query-to-gallery, query-to-query, and gallery-to-gallery.
/// Returns an (nq, ng) matrix of final distances; lower still means more
/// similar.
pub fn rerank(
    q_g: &Array2<f64>,
    q_q: &Array2<f64>,
    g_g: &Array2<f64>,
    params: &RerankParams,
) -> Result<Array2<f64>> {
    params.validate()?;
    let (nq, ng) = q_g.dim();
    if nq == 0 || ng == 0 {
        return Err(Error::validation("query and gallery must be non-empty"));
    }
    if q_q.dim() != (nq, nq) || g_g.dim() != (ng, ng) {
        return Err(Error::ShapeMismatch(format!(
            "distance blocks disagree: q_g is {nq}x{ng}, q_q is {:?}, g_g is {:?}",
            q_q.dim(),
            g_g.dim()
        )));
    }
    validate_self_distances(q_q, "query")?;
    validate_self_distances(g_g, "gallery")?;
    if q_g.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::validation(
            "query-gallery distances must be finite and nonnegative",
        ));
    }
    let n = nq + ng;
    if n < 3 {
        return Err(Error::validation(
            "re-ranking needs at least three points in total",
        ));
    }
    let mut k1 = params.k1;
    if k1 > n - 1 {
        log::warn!("k1 = {k1} exceeds the {n}-point set; clamping to {}", n - 1);
        k1 = n - 1;
    }
    let mut k2 = params.k2;
    if k2 > n {
        log::warn!("k2 = {k2} exceeds the {n}-point set; clamping to {n}");
        k2 = n;
    }

    // Joint distance matrix over all points: queries first, then the gallery.
    let mut dist = Array2::zeros((n, n));
    for i in 0..nq {
        for j in 0..nq {
            dist[[i, j]] = q_q[[i, j]];
        }
        for j in 0..ng {
            dist[[i, nq + j]] = q_g[[i, j]];
            dist[[nq + j, i]] = q_g[[i, j]];
        }
    }
    for i in 0..ng {
        for j in 0..ng {
            dist[[nq + i, nq + j]] = g_g[[i, j]];
        }
    }
    let orders = neighbor_orders(&dist);

    // Exponentially weighted encodings over the expanded reciprocal sets.
    let mut encodings = Array2::zeros((n, n));
    for p in 0..n {
        let members = expanded_reciprocal_set(&orders, p, k1);
        let mut sum = 0.0;
        for &j in &members {
            let w = (-dist[[p, j]]).exp();
            encodings[[p, j]] = w;
            sum += w;
        }
        if sum > 0.0 {
            for &j in &members {
                encodings[[p, j]] /= sum;
            }
        }
    }

    // Smooth each encoding with the mean over its k2 nearest points,
    // the point itself included at rank 0.
    let smoothed = if k2 > 1 {
        let mut sm = Array2::zeros((n, n));
        for p in 0..n {
            let mut sources = Vec::with_capacity(k2);
            sources.push(p);
            sources.extend(orders[p].iter().take(k2 - 1).copied());
            let scale = 1.0 / sources.len() as f64;
            for &s in &sources {
                for j in 0..n {
                    sm[[p, j]] += encodings[[s, j]] * scale;
                }
            }
        }
        sm
    } else {
        encodings
    };

    // Jaccard distance between query and gallery encodings, blended with the
    // original distance.
    let mut final_dist = Array2::zeros((nq, ng));
    for i in 0..nq {
        for j in 0..ng {
            let g = nq + j;
            let mut sum_min = 0.0;
            let mut sum_max = 0.0;
            for c in 0..n {
                let a = smoothed[[i, c]];
                let b = smoothed[[g, c]];
                sum_min += a.min(b);
                sum_max += a.max(b);
            }
            let jaccard = if sum_max > 0.0 {
                1.0 - sum_min / sum_max
            } else {
                1.0
            };
            final_dist[[i, j]] = (1.0 - params.lambda) * jaccard + params.lambda * q_g[[i, j]];
        }
    }
    Ok(final_dist)
}

/// Convenience wrapper: computes the three Euclidean distance blocks from
/// feature matrices and re-ranks.
pub fn rerank_embeddings(
    query: &Array2<f64>,
    gallery: &Array2<f64>,
    params: &RerankParams,
) -> Result<Array2<f64>> {
    if query.ncols() != gallery.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "query features have {} dims, gallery {}",
            query.ncols(),
            gallery.ncols()
        )));
    }
    let q_g = cross_distances(query, gallery)?;
    let q_q = pairwise_euclidean(query);
    let g_g = pairwise_euclidean(gallery);
    rerank(&q_g, &q_q, &g_g, params)
}
