//! Retrieval evaluation: ranked gallery matching with cross-camera
//! filtering, average precision, and cumulative match characteristic curves.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::synth::{horizontal_flip, Sample};

/// Images per forward pass when extracting embeddings. Embeddings are
/// per-sample, so chunking never changes the result.
const EMBED_CHUNK: usize = 32;

/// Default number of ranks reported in the CMC curve.
pub const DEFAULT_MAX_RANK: usize = 50;

/// A batch of retrieval features with identity and camera labels.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub identities: Vec<u32>,
    pub cameras: Vec<u32>,
    /// (n, d) feature matrix, row i belonging to identities[i]/cameras[i].
    pub features: Array2<f64>,
    /// How the features were extracted, when known. Feature files do not
    /// record this, so sets loaded from disk carry `None`.
    pub mode: Option<InferenceMode>,
}

impl EmbeddingSet {
    pub fn new(identities: Vec<u32>, cameras: Vec<u32>, features: Array2<f64>) -> Result<Self> {
        if identities.len() != features.nrows() || cameras.len() != features.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "{} identities / {} cameras for {} feature rows",
                identities.len(),
                cameras.len(),
                features.nrows()
            )));
        }
        Ok(EmbeddingSet {
            identities,
            cameras,
            features,
            mode: None,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// How retrieval features are extracted at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    /// Embed the image as-is.
    Single,
    /// Embed the image and its horizontal mirror and average the features.
    Double,
}

/// Extract features for every sample with the requested inference mode.
pub fn embed(model: &Model, samples: &[Sample], mode: InferenceMode) -> Result<EmbeddingSet> {
    if samples.is_empty() {
        return Err(Error::validation("no samples to embed"));
    }
    let n = samples.len();
    let mut features = Array2::zeros((n, model.feature_dim()));
    let mut identities = Vec::with_capacity(n);
    let mut cameras = Vec::with_capacity(n);
    for chunk in (0..n).collect::<Vec<_>>().chunks(EMBED_CHUNK) {
        let images: Vec<_> = chunk.iter().map(|&i| samples[i].image.clone()).collect();
        let x0 = model.preprocess(&images)?;
        let cache = model.embed_forward(&x0)?;
        match mode {
            InferenceMode::Single => {
                for (row, &i) in chunk.iter().enumerate() {
                    for k in 0..model.feature_dim() {
                        features[[i, k]] = cache.features[[row, k]];
                    }
                }
            }
            InferenceMode::Double => {
                let mirrored: Vec<_> = images.iter().map(horizontal_flip).collect();
                let xf = model.preprocess(&mirrored)?;
                let cache_f = model.embed_forward(&xf)?;
                for (row, &i) in chunk.iter().enumerate() {
                    for k in 0..model.feature_dim() {
                        features[[i, k]] =
                            (cache.features[[row, k]] + cache_f.features[[row, k]]) * 0.5;
                    }
                }
            }
        }
    }
    for s in samples {
        identities.push(s.identity);
        cameras.push(s.camera);
    }
    let mut set = EmbeddingSet::new(identities, cameras, features)?;
    set.mode = Some(mode);
    Ok(set)
}

/// Relative disagreement between features of an image and of its mirror,
/// averaged over samples: mean |f(x) - f(mirror x)| / |f(x)|.
pub fn mean_flip_gap(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::validation("no samples"));
    }
    let orig = embed(model, samples, InferenceMode::Single)?;
    let mirrored: Vec<Sample> = samples
        .iter()
        .map(|s| Sample {
            image: horizontal_flip(&s.image),
            ..s.clone()
        })
        .collect();
    let flip = embed(model, &mirrored, InferenceMode::Single)?;
    let mut total = 0.0;
    for i in 0..samples.len() {
        let mut diff = 0.0;
        let mut norm = 0.0;
        for k in 0..orig.dim() {
            let d = orig.features[[i, k]] - flip.features[[i, k]];
            diff += d * d;
            let v = orig.features[[i, k]];
            norm += v * v;
        }
        if norm > 0.0 {
            total += (diff / norm).sqrt();
        }
    }
    Ok(total / samples.len() as f64)
}

/// Which gallery samples are discarded for a given query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Discard gallery samples that share both identity and camera with the
    /// query (the usual retrieval protocol).
    Standard,
    /// Discard every gallery sample taken by the query's camera, regardless
    /// of identity.
    ExcludeSameCamera,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol::Standard
    }
}

/// Validity mask: entry (i, j) is true when gallery sample j may be ranked
/// for query i under the protocol.
pub fn cross_camera_mask(
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    protocol: Protocol,
) -> Array2<bool> {
    let mut mask = Array2::from_elem((query.len(), gallery.len()), true);
    for i in 0..query.len() {
        for j in 0..gallery.len() {
            let same_cam = query.cameras[i] == gallery.cameras[j];
            let discard = match protocol {
                Protocol::Standard => same_cam && query.identities[i] == gallery.identities[j],
                Protocol::ExcludeSameCamera => same_cam,
            };
            if discard {
                mask[[i, j]] = false;
            }
        }
    }
    mask
}

/// Euclidean distances between all query rows and all gallery rows, computed
/// as sqrt(max(|q|^2 + |g|^2 - 2 q . g, 0)).
pub fn cross_distances(query: &Array2<f64>, gallery: &Array2<f64>) -> Result<Array2<f64>> {
    if query.ncols() != gallery.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "query features have {} dims, gallery {}",
            query.ncols(),
            gallery.ncols()
        )));
    }
    let (nq, d) = query.dim();
    let ng = gallery.nrows();
    let norm = |m: &Array2<f64>, i: usize| -> f64 {
        let mut acc = 0.0;
        for k in 0..d {
            let v = m[[i, k]];
            acc += v * v;
        }
        acc
    };
    let q_norms: Vec<f64> = (0..nq).map(|i| norm(query, i)).collect();
    let g_norms: Vec<f64> = (0..ng).map(|j| norm(gallery, j)).collect();
    let mut dist = Array2::zeros((nq, ng));
    for i in 0..nq {
        for j in 0..ng {
            let mut dot = 0.0;
            for k in 0..d {
                dot += query[[i, k]] * gallery[[j, k]];
            }
            dist[[i, j]] = (q_norms[i] + g_norms[j] - 2.0 * dot).max(0.0).sqrt();
        }
    }
    Ok(dist)
}

/// Retrieval quality over a query set.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    /// Mean average precision over queries with at least one valid positive.
    #[serde(rename = "mAP")]
    pub map: f64,
    /// cmc[k-1] = fraction of valid queries with a correct match in the top k.
    pub cmc: Vec<f64>,
    /// Queries retaining at least one valid positive after filtering.
    pub num_valid_queries: usize,
    pub protocol: Protocol,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }
}

/// Rank the gallery for every query by the given distances and score the
/// ranking. Gallery entries masked out by the protocol are skipped entirely;
/// ties in distance resolve to the lower gallery index. Queries left without
/// any valid positive are excluded from both mAP and CMC.
pub fn evaluate_with_distances(
    dist: &Array2<f64>,
    query_ids: &[u32],
    query_cams: &[u32],
    gallery_ids: &[u32],
    gallery_cams: &[u32],
    protocol: Protocol,
    max_rank: usize,
) -> Result<EvalReport> {
    let (nq, ng) = dist.dim();
    if query_ids.len() != nq || query_cams.len() != nq {
        return Err(Error::ShapeMismatch("query labels do not match distances".into()));
    }
    if gallery_ids.len() != ng || gallery_cams.len() != ng {
        return Err(Error::ShapeMismatch(
            "gallery labels do not match distances".into(),
        ));
    }
    if max_rank == 0 {
        return Err(Error::validation("max_rank must be >= 1"));
    }
    if dist.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("distance matrix contains non-finite values"));
    }

    let mut sum_ap = 0.0;
    let mut valid_queries = 0usize;
    let mut cmc_hits = vec![0usize; max_rank];
    for qi in 0..nq {
        // Filter and rank the gallery for this query.
        let mut order: Vec<usize> = (0..ng)
            .filter(|&j| {
                let same_cam = query_cams[qi] == gallery_cams[j];
                let discard = match protocol {
                    Protocol::Standard => same_cam && query_ids[qi] == gallery_ids[j],
                    Protocol::ExcludeSameCamera => same_cam,
                };
                !discard
            })
            .collect();
        order.sort_by(|&a, &b| {
            dist[[qi, a]]
                .partial_cmp(&dist[[qi, b]])
                .expect("finite distances")
                .then(a.cmp(&b))
        });
        let num_matches = order
            .iter()
            .filter(|&&j| gallery_ids[j] == query_ids[qi])
            .count();
        if num_matches == 0 {
            continue;
        }
        valid_queries += 1;
        let mut seen_matches = 0usize;
        let mut ap = 0.0;
        let mut first_match_rank = None;
        for (rank, &j) in order.iter().enumerate() {
            if gallery_ids[j] == query_ids[qi] {
                seen_matches += 1;
                ap += seen_matches as f64 / (rank + 1) as f64;
                if first_match_rank.is_none() {
                    first_match_rank = Some(rank);
                }
            }
        }
        sum_ap += ap / num_matches as f64;
        let first = first_match_rank.expect("num_matches > 0");
        for k in first..max_rank {
            cmc_hits[k] += 1;
        }
    }

    if valid_queries == 0 {
        return Err(Error::validation(
            "no query retains a valid positive under the protocol",
        ));
    }
    Ok(EvalReport {
        map: sum_ap / valid_queries as f64,
        cmc: cmc_hits
            .iter()
            .map(|&h| h as f64 / valid_queries as f64)
            .collect(),
        num_valid_queries: valid_queries,
        protocol,
    })
}

/// Compute distances between query and gallery features and score the
/// resulting ranking.
pub fn evaluate(
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    protocol: Protocol,
    max_rank: usize,
) -> Result<EvalReport> {
    let dist = cross_distances(&query.features, &gallery.features)?;
    evaluate_with_distances(
        &dist,
        &query.identities,
        &query.cameras,
        &gallery.identities,
        &gallery.cameras,
        protocol,
        max_rank,
    )
}
