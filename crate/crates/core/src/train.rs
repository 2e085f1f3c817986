//! Training: PK batch sampling, the two training schemes, the Adam
//! optimizer, and the epoch loop.
//!
//! The `baseline` scheme runs one forward pass per batch and attaches the
//! triplet loss to the clamped features and cross-entropy to each classifier
//! head.
//!
//! The `flipreid` scheme embeds each batch twice — original images and their
//! exact horizontal mirrors — in a single concatenated pass through shared
//! weights. The classifier heads consume the per-sample mean of the two
//! embeddings, the triplet loss acts on the mean features, and an optional
//! mean-squared consistency term ties the two embeddings together. Gradients
//! from the mean split evenly onto both orientations.

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    batch_hard_triplet, cross_entropy_multi, flipping_loss, LossReport, LossWeights,
    TripletDiagnostics,
};
use crate::model::{ClassifyCache, KinkReport, Model, ModelConfig, ModelGrads};
use crate::rng;
use crate::synth::{horizontal_flip, random_erasing, random_grayscale_patch, random_horizontal_flip, AugmentParams, ImageU8, Sample};

/// Which training scheme to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainScheme {
    Baseline,
    #[serde(rename = "flipreid")]
    FlipReid,
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    /// One bias-corrected update in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer sized for {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
        }
        Ok(())
    }
}

/// PK batch shape: P identities with K samples each.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PkSpec {
    pub num_identities: usize,
    pub num_samples: usize,
}

impl Default for PkSpec {
    fn default() -> Self {
        PkSpec {
            num_identities: 4,
            num_samples: 4,
        }
    }
}

impl PkSpec {
    pub fn batch_size(&self) -> usize {
        self.num_identities * self.num_samples
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 || self.num_samples < 2 {
            return Err(Error::validation(
                "PK batches need at least 2 identities with 2 samples each",
            ));
        }
        Ok(())
    }
}

/// Full training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub scheme: TrainScheme,
    /// Adds the embedding-consistency term; only valid with the flipreid
    /// scheme.
    pub use_flipping_loss: bool,
    pub epochs: usize,
    pub batch: PkSpec,
    pub margin: f64,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub augment: AugmentParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scheme: TrainScheme::Baseline,
            use_flipping_loss: false,
            epochs: 10,
            batch: PkSpec::default(),
            margin: 0.3,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            augment: AugmentParams::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.use_flipping_loss && self.scheme != TrainScheme::FlipReid {
            return Err(Error::validation(
                "the flipping loss requires the flipreid training scheme",
            ));
        }
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be >= 1"));
        }
        if self.margin < 0.0 {
            return Err(Error::validation("margin must be >= 0"));
        }
        if self.adam.lr <= 0.0 {
            return Err(Error::validation("learning rate must be > 0"));
        }
        self.batch.validate()?;
        self.augment.validate()?;
        Ok(())
    }
}

/// Maps raw identity labels to contiguous classifier indices, sorted by
/// identity.
#[derive(Debug, Clone)]
pub struct LabelMap {
    ids: Vec<u32>,
}

impl LabelMap {
    pub fn from_samples(samples: &[Sample]) -> Self {
        let mut ids: Vec<u32> = samples.iter().map(|s| s.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        LabelMap { ids }
    }

    pub fn class_of(&self, identity: u32) -> Option<usize> {
        self.ids.binary_search(&identity).ok()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Draw a PK batch: P distinct identities, K samples each (with replacement
/// only when an identity owns fewer than K samples). Returns indices into
/// `samples`.
pub fn pk_sample<R: rand::Rng>(
    samples: &[Sample],
    spec: &PkSpec,
    rng: &mut R,
) -> Result<Vec<usize>> {
    spec.validate()?;
    let mut groups: std::collections::BTreeMap<u32, Vec<usize>> = std::collections::BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.identity).or_default().push(i);
    }
    if groups.len() < spec.num_identities {
        return Err(Error::SamplerContract(format!(
            "{} identities available, PK batch needs {}",
            groups.len(),
            spec.num_identities
        )));
    }
    let keys: Vec<u32> = groups.keys().copied().collect();
    let mut order: Vec<usize> = (0..keys.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut batch = Vec::with_capacity(spec.batch_size());
    for &gi in order.iter().take(spec.num_identities) {
        let members = &groups[&keys[gi]];
        if members.len() >= spec.num_samples {
            let mut idx: Vec<usize> = (0..members.len()).collect();
            for i in (1..idx.len()).rev() {
                let j = rng.random_range(0..=i);
                idx.swap(i, j);
            }
            for &k in idx.iter().take(spec.num_samples) {
                batch.push(members[k]);
            }
        } else {
            for _ in 0..spec.num_samples {
                batch.push(members[rng.random_range(0..members.len())]);
            }
        }
    }
    Ok(batch)
}

/// One assembled training batch: augmented images with their labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Vec<ImageU8>,
    /// Raw identity labels, used by the triplet loss.
    pub identities: Vec<u32>,
    /// Classifier target indices, aligned with the label map.
    pub classes: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.images.len() != self.identities.len() || self.images.len() != self.classes.len() {
            return Err(Error::ShapeMismatch(format!(
                "batch has {} images, {} identities, {} classes",
                self.images.len(),
                self.identities.len(),
                self.classes.len()
            )));
        }
        if self.images.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        Ok(())
    }
}

/// Assemble an augmented batch from dataset samples.
///
/// The baseline scheme applies random horizontal flips followed by the
/// grayscale patch and random erasing; the flipreid scheme skips the random
/// flip (mirroring is part of the scheme itself) and applies only the other
/// two.
pub fn build_batch<R: rand::Rng>(
    samples: &[Sample],
    indices: &[usize],
    label_map: &LabelMap,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Batch> {
    let mut images = Vec::with_capacity(indices.len());
    let mut identities = Vec::with_capacity(indices.len());
    let mut classes = Vec::with_capacity(indices.len());
    for &i in indices {
        let sample = &samples[i];
        let mut img = sample.image.clone();
        if cfg.scheme == TrainScheme::Baseline {
            img = random_horizontal_flip(&img, cfg.augment.flip_prob, rng);
        }
        img = random_grayscale_patch(&img, &cfg.augment, rng)?;
        img = random_erasing(&img, &cfg.augment, rng)?;
        images.push(img);
        identities.push(sample.identity);
        classes.push(label_map.class_of(sample.identity).ok_or_else(|| {
            Error::validation(format!("identity {} not in the label map", sample.identity))
        })?);
    }
    let batch = Batch {
        images,
        identities,
        classes,
    };
    batch.validate()?;
    Ok(batch)
}

/// Kink clearances observed during one step.
#[derive(Debug, Clone, Copy)]
pub struct StepKinks {
    pub model: KinkReport,
    pub triplet: TripletDiagnostics,
}

impl StepKinks {
    pub fn min_activation_gap(&self) -> f64 {
        self.model.min_gap()
    }
}

/// Loss values and parameter gradients of one training step.
#[derive(Debug)]
pub struct StepOutput {
    pub report: LossReport,
    pub grads: ModelGrads,
    pub kinks: StepKinks,
}

/// Compute one step's losses and gradients without touching the model.
/// Dispatches on the configured scheme.
pub fn compute_step(
    model: &Model,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(StepOutput, ClassifyCache)> {
    batch.validate()?;
    match cfg.scheme {
        TrainScheme::Baseline => baseline_step(model, batch, cfg),
        TrainScheme::FlipReid => flipreid_step(model, batch, cfg),
    }
}

fn baseline_step(
    model: &Model,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(StepOutput, ClassifyCache)> {
    let x0 = model.preprocess(&batch.images)?;
    let embed = model.embed_forward(&x0)?;
    let classify = model.classify_forward(&embed.branch_embeddings, true)?;

    let triplet = batch_hard_triplet(&embed.features, &batch.identities, cfg.margin)?;
    let probs: Vec<Array2<f64>> = classify.heads.iter().map(|h| h.probs.clone()).collect();
    let (ce, ce_grads) = cross_entropy_multi(&probs, &batch.classes)?;
    let report = cfg
        .weights
        .combine(triplet.loss, ce, 0.0, triplet.active_fraction);

    let d_features = triplet.d_embeddings.mapv(|v| v * cfg.weights.triplet);
    let d_logits: Vec<Array2<f64>> = ce_grads
        .into_iter()
        .map(|g| g.mapv(|v| v * cfg.weights.ce))
        .collect();

    let cache = crate::model::ForwardCache {
        embed,
        classify: classify.clone(),
    };
    let grads = model.model_backward(&cache, &d_features, &d_logits)?;
    let kinks = StepKinks {
        model: model.kink_clearance(&cache.embed, Some(&cache.classify)),
        triplet: triplet.diagnostics,
    };
    Ok((
        StepOutput {
            report,
            grads,
            kinks,
        },
        classify,
    ))
}

fn flipreid_step(
    model: &Model,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(StepOutput, ClassifyCache)> {
    let n = batch.len();
    // One concatenated pass: originals in rows 0..n, exact mirrors in n..2n.
    let mut images = Vec::with_capacity(2 * n);
    images.extend(batch.images.iter().cloned());
    images.extend(batch.images.iter().map(horizontal_flip));
    let x0 = model.preprocess(&images)?;
    let embed = model.embed_forward(&x0)?;

    // Mean embeddings per branch feed the classifier heads; the triplet loss
    // sees the mean of the concatenated features.
    let mean_branches: Vec<Array2<f64>> = embed
        .branch_embeddings
        .iter()
        .map(|e| {
            let orig = e.slice(s![0..n, ..]);
            let flip = e.slice(s![n..2 * n, ..]);
            (&orig + &flip).mapv(|v| v * 0.5)
        })
        .collect();
    let views: Vec<_> = mean_branches.iter().map(|e| e.view()).collect();
    let mean_features = ndarray::concatenate(Axis(1), &views).expect("branch dims consistent");
    let classify = model.classify_forward(&mean_branches, true)?;

    let triplet = batch_hard_triplet(&mean_features, &batch.identities, cfg.margin)?;
    let probs: Vec<Array2<f64>> = classify.heads.iter().map(|h| h.probs.clone()).collect();
    let (ce, ce_grads) = cross_entropy_multi(&probs, &batch.classes)?;

    let features_orig = embed.features.slice(s![0..n, ..]).to_owned();
    let features_flip = embed.features.slice(s![n..2 * n, ..]).to_owned();
    let (flip_value, d_flip_orig, d_flip_flip) = if cfg.use_flipping_loss {
        flipping_loss(&features_orig, &features_flip)?
    } else {
        (
            0.0,
            Array2::zeros(features_orig.raw_dim()),
            Array2::zeros(features_orig.raw_dim()),
        )
    };
    let report = cfg
        .weights
        .combine(triplet.loss, ce, flip_value, triplet.active_fraction);

    // Gradients w.r.t. the mean embeddings: triplet on the mean features plus
    // the classifier path.
    let d_logits: Vec<Array2<f64>> = ce_grads
        .into_iter()
        .map(|g| g.mapv(|v| v * cfg.weights.ce))
        .collect();
    let (d_mean_classify, head_grads) = model.classify_backward(&classify, &d_logits)?;
    let d_mean_features = triplet.d_embeddings.mapv(|v| v * cfg.weights.triplet);
    let d_mean_branches_triplet = model.split_feature_grad(&d_mean_features)?;

    // Consistency-term gradients per orientation, split by branch.
    let d_orig_branches = model.split_feature_grad(&d_flip_orig.mapv(|v| v * cfg.weights.flip))?;
    let d_flip_branches = model.split_feature_grad(&d_flip_flip.mapv(|v| v * cfg.weights.flip))?;

    // Each orientation receives half of the mean gradient plus its own
    // consistency gradient.
    let dims = model.cfg.branch_dims();
    let mut d_branches = Vec::with_capacity(dims.len());
    for (b, dim) in dims.iter().enumerate() {
        let mut d = Array2::zeros((2 * n, *dim));
        let d_mean = &d_mean_branches_triplet[b] + &d_mean_classify[b];
        for i in 0..n {
            for k in 0..*dim {
                let half = 0.5 * d_mean[[i, k]];
                d[[i, k]] = half + d_orig_branches[b][[i, k]];
                d[[n + i, k]] = half + d_flip_branches[b][[i, k]];
            }
        }
        d_branches.push(d);
    }

    let mut grads = model.embed_backward(&embed, &d_branches)?;
    grads.heads = head_grads;
    let kinks = StepKinks {
        model: model.kink_clearance(&embed, Some(&classify)),
        triplet: triplet.diagnostics,
    };
    Ok((
        StepOutput {
            report,
            grads,
            kinks,
        },
        classify,
    ))
}

/// Compute one step and fold its batch statistics into the model's running
/// estimates. Parameter updates are the caller's job.
pub fn train_step(model: &mut Model, batch: &Batch, cfg: &TrainConfig) -> Result<StepOutput> {
    let (out, classify) = compute_step(model, batch, cfg)?;
    model.update_running_stats(&classify)?;
    Ok(out)
}

/// One history record per optimization step, serialized as JSON lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub triplet: f64,
    pub ce: f64,
    pub flip: f64,
    pub active_triplet_fraction: f64,
}

/// A trained model with its step-by-step loss history.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<TrainRecord>,
}

/// Smallest admissible pooling power; optimizer updates are projected back
/// to keep the power strictly positive.
const GEM_P_MIN: f64 = 1e-3;

/// Train a freshly initialized model on the given samples.
///
/// The model's class count is set from the distinct identities in `samples`.
/// All randomness (initialization, batch composition, augmentation) derives
/// from `cfg.seed`; training the same configuration twice yields identical
/// parameters. A non-finite loss aborts with the failing step's index.
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, samples: &[Sample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::validation("no training samples"));
    }
    let label_map = LabelMap::from_samples(samples);
    if label_map.len() < 2 {
        return Err(Error::validation(
            "training needs at least two distinct identities",
        ));
    }
    let mut model_cfg = model_cfg.clone();
    model_cfg.num_classes = label_map.len();
    let mut model = Model::new(model_cfg, cfg.seed)?;

    let mut theta = model.params.flatten_trainable();
    let mut adam = Adam::new(theta.len(), cfg.adam);
    let steps_per_epoch = (samples.len() / cfg.batch.batch_size()).max(1);
    let mut history = Vec::with_capacity(cfg.epochs * steps_per_epoch);

    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        for _ in 0..steps_per_epoch {
            let mut batch_rng = rng::stream(cfg.seed, &format!("batch-{step}"));
            let indices = pk_sample(samples, &cfg.batch, &mut batch_rng)?;
            let mut aug_rng = rng::stream(cfg.seed, &format!("augment-{step}"));
            let batch = build_batch(samples, &indices, &label_map, cfg, &mut aug_rng)?;

            let out = train_step(&mut model, &batch, cfg)?;
            if !out.report.total.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: format!(
                        "loss became non-finite (triplet {}, ce {}, flip {})",
                        out.report.triplet, out.report.ce, out.report.flip
                    ),
                });
            }
            adam.step(&mut theta, &out.grads.flatten())?;
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    step,
                    detail: "parameters became non-finite after the update".into(),
                });
            }
            model.params.set_trainable(&theta)?;
            // Keep pooling powers strictly positive.
            if model.params.gem_p_global < GEM_P_MIN
                || model.params.gem_p_regional.iter().any(|&p| p < GEM_P_MIN)
            {
                model.params.gem_p_global = model.params.gem_p_global.max(GEM_P_MIN);
                for p in model.params.gem_p_regional.iter_mut() {
                    *p = p.max(GEM_P_MIN);
                }
                theta = model.params.flatten_trainable();
            }

            history.push(TrainRecord {
                step,
                epoch,
                total: out.report.total,
                triplet: out.report.triplet,
                ce: out.report.ce,
                flip: out.report.flip,
                active_triplet_fraction: out.report.active_triplet_fraction,
            });
            step += 1;
        }
    }
    Ok(TrainOutcome { model, history })
}

/// Write one JSON object per training step.
pub fn write_history_jsonl(path: &std::path::Path, history: &[TrainRecord]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for record in history {
        let line = serde_json::to_string(record).map_err(|e| Error::format(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}
