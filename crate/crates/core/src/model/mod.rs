//! The retrieval model: a small convolutional backbone feeding one global
//! branch and several regional branches.
//!
//! Every branch pools its feature maps with generalized-mean pooling, clamps
//! the pooled vector, and contributes it to the concatenated retrieval
//! feature. For classification, each branch additionally batch-normalizes its
//! embedding and applies a dense layer followed by softmax.
//!
//! The embedding stage (`embed_*`, everything up to the clamp) and the
//! classification stage (`classify_*`, batch-norm onward) are exposed
//! separately so training schemes can combine them in different ways; the
//! `model_*` functions chain both for the common single-stream case.

pub mod ops;
pub mod params;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

pub use ops::{PreprocessConfig, TensorBatch};
pub use params::{ConvBlockConfig, ConvLayer, HeadGrads, HeadParams, ModelConfig, ModelGrads, ModelParams};

/// A configured model with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ModelParams,
}

/// Intermediate activations of the embedding stage, kept for the backward
/// pass.
#[derive(Debug, Clone)]
pub struct EmbedCache {
    /// Preprocessed input batch.
    pub x0: TensorBatch,
    /// Convolution outputs before ReLU, one per block.
    pub block_pre: Vec<TensorBatch>,
    /// Block outputs after ReLU.
    pub block_out: Vec<TensorBatch>,
    /// Channel-reduced stripe maps, one per regional branch.
    pub reduced: Vec<TensorBatch>,
    /// Pooled embeddings before the clamp, global branch first.
    pub branch_pre_clip: Vec<Array2<f64>>,
    /// Clamped per-branch embeddings, global branch first.
    pub branch_embeddings: Vec<Array2<f64>>,
    /// Concatenation of all branch embeddings: the retrieval features.
    pub features: Array2<f64>,
}

/// Activations of one classifier head.
#[derive(Debug, Clone)]
pub struct HeadCache {
    /// Embedding batch this head consumed.
    pub input: Array2<f64>,
    pub bn: ops::BnForward,
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
}

/// Activations of the classification stage, one entry per branch.
#[derive(Debug, Clone)]
pub struct ClassifyCache {
    pub heads: Vec<HeadCache>,
}

/// Combined cache of a single-stream forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub embed: EmbedCache,
    pub classify: ClassifyCache,
}

/// Smallest distances to the model's non-differentiable points observed
/// during a forward pass. Used to reject batches that sit too close to a
/// kink for finite-difference verification.
#[derive(Debug, Clone, Copy)]
pub struct KinkReport {
    /// min |pre-activation| over all ReLU inputs.
    pub relu_gap: f64,
    /// min |x - eps| over pooling inputs, ignoring exact zeros (a ReLU output
    /// pinned at 0 cannot cross the pooling floor under a small perturbation).
    pub gem_gap: f64,
    /// min distance of pre-clamp embeddings to either clamp bound.
    pub clip_gap: f64,
    /// min |batch variance - floor| over batch-norm features (train mode).
    pub bn_var_gap: f64,
}

impl KinkReport {
    pub fn min_gap(&self) -> f64 {
        self.relu_gap
            .min(self.gem_gap)
            .min(self.clip_gap)
            .min(self.bn_var_gap)
    }
}

impl Model {
    /// Build a model with freshly initialized parameters.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&cfg, seed)?;
        Ok(Model { cfg, params })
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim()
    }

    /// Scale and normalize raw images for this model.
    pub fn preprocess(&self, images: &[crate::synth::ImageU8]) -> Result<TensorBatch> {
        let batch = ops::preprocess(images, &self.cfg.preprocess)?;
        let (_, c, h, w) = batch.dim();
        if (c, h, w) != (self.cfg.in_channels, self.cfg.in_height, self.cfg.in_width) {
            return Err(Error::ShapeMismatch(format!(
                "images are {c}x{h}x{w}, model expects {}x{}x{}",
                self.cfg.in_channels, self.cfg.in_height, self.cfg.in_width
            )));
        }
        Ok(batch)
    }

    /// Embedding stage: backbone, branch pooling, clamp.
    pub fn embed_forward(&self, x0: &TensorBatch) -> Result<EmbedCache> {
        let (n, c, h, w) = x0.dim();
        if (c, h, w) != (self.cfg.in_channels, self.cfg.in_height, self.cfg.in_width) {
            return Err(Error::ShapeMismatch(format!(
                "input batch is {c}x{h}x{w}, model expects {}x{}x{}",
                self.cfg.in_channels, self.cfg.in_height, self.cfg.in_width
            )));
        }
        if n == 0 {
            return Err(Error::validation("empty batch"));
        }
        let mut block_pre = Vec::with_capacity(self.cfg.blocks.len());
        let mut block_out = Vec::with_capacity(self.cfg.blocks.len());
        let mut cur = x0.clone();
        for (layer, bcfg) in self.params.blocks.iter().zip(&self.cfg.blocks) {
            let pre = ops::conv2d_forward(&cur, &layer.weight, &layer.bias, bcfg.stride)?;
            let out = ops::relu(&pre);
            block_pre.push(pre);
            cur = out.clone();
            block_out.push(out);
        }
        let maps = block_out.last().expect("at least one block");

        let mut branch_pre_clip = Vec::with_capacity(self.cfg.num_branches());
        branch_pre_clip.push(ops::gem_pool(maps, self.params.gem_p_global, self.cfg.gem_eps)?);

        let ranges = self.cfg.region_ranges()?;
        let mut reduced = Vec::with_capacity(self.cfg.num_regions);
        for (r, &(a, b)) in ranges.iter().enumerate() {
            let stripe = maps.slice(s![.., .., a..b, ..]).to_owned();
            let red = ops::reduce_channels(&stripe, &self.params.reduce_kernels[r])?;
            branch_pre_clip.push(ops::gem_pool(
                &red,
                self.params.gem_p_regional[r],
                self.cfg.gem_eps,
            )?);
            reduced.push(red);
        }

        let branch_embeddings: Vec<Array2<f64>> = branch_pre_clip
            .iter()
            .map(|v| ops::clip(v, self.cfg.clip_lo, self.cfg.clip_hi))
            .collect();
        let views: Vec<_> = branch_embeddings.iter().map(|e| e.view()).collect();
        let features = ndarray::concatenate(Axis(1), &views).expect("branch dims consistent");

        Ok(EmbedCache {
            x0: x0.clone(),
            block_pre,
            block_out,
            reduced,
            branch_pre_clip,
            branch_embeddings,
            features,
        })
    }

    /// Split a gradient w.r.t. the concatenated features into per-branch
    /// gradients.
    pub fn split_feature_grad(&self, d_features: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        if d_features.ncols() != self.cfg.feature_dim() {
            return Err(Error::ShapeMismatch(format!(
                "feature gradient has {} columns, model features have {}",
                d_features.ncols(),
                self.cfg.feature_dim()
            )));
        }
        let mut out = Vec::with_capacity(self.cfg.num_branches());
        let mut start = 0;
        for dim in self.cfg.branch_dims() {
            out.push(d_features.slice(s![.., start..start + dim]).to_owned());
            start += dim;
        }
        Ok(out)
    }

    /// Backward pass of the embedding stage. Takes gradients w.r.t. each
    /// clamped branch embedding and accumulates into backbone, pooling and
    /// reduction gradients (the classifier-head entries stay zero).
    pub fn embed_backward(
        &self,
        cache: &EmbedCache,
        d_branch_embeddings: &[Array2<f64>],
    ) -> Result<ModelGrads> {
        if d_branch_embeddings.len() != self.cfg.num_branches() {
            return Err(Error::ShapeMismatch(format!(
                "{} branch gradients for {} branches",
                d_branch_embeddings.len(),
                self.cfg.num_branches()
            )));
        }
        for (d, e) in d_branch_embeddings.iter().zip(&cache.branch_embeddings) {
            if d.dim() != e.dim() {
                return Err(Error::ShapeMismatch(
                    "branch gradient does not match cached forward pass".into(),
                ));
            }
        }
        let mut grads = ModelGrads::zeros_like(&self.params);
        let maps = cache.block_out.last().expect("at least one block");
        let mut d_maps = TensorBatch::zeros(maps.raw_dim());

        // Global branch: clamp then pooling, straight off the backbone maps.
        let d_pre_clip = ops::clip_backward(
            &cache.branch_pre_clip[0],
            self.cfg.clip_lo,
            self.cfg.clip_hi,
            &d_branch_embeddings[0],
        );
        let (dm, dp) = ops::gem_pool_backward(maps, self.params.gem_p_global, self.cfg.gem_eps, &d_pre_clip);
        d_maps += &dm;
        grads.gem_p_global = dp;

        // Regional branches: clamp, pooling, channel reduction, stripe.
        let ranges = self.cfg.region_ranges()?;
        for (r, &(a, b)) in ranges.iter().enumerate() {
            let d_pre_clip = ops::clip_backward(
                &cache.branch_pre_clip[r + 1],
                self.cfg.clip_lo,
                self.cfg.clip_hi,
                &d_branch_embeddings[r + 1],
            );
            let (d_red, dp) = ops::gem_pool_backward(
                &cache.reduced[r],
                self.params.gem_p_regional[r],
                self.cfg.gem_eps,
                &d_pre_clip,
            );
            grads.gem_p_regional[r] = dp;
            let stripe = maps.slice(s![.., .., a..b, ..]).to_owned();
            let (d_stripe, d_kernel) =
                ops::reduce_channels_backward(&stripe, &self.params.reduce_kernels[r], &d_red);
            grads.reduce_kernels[r] = d_kernel;
            let mut target = d_maps.slice_mut(s![.., .., a..b, ..]);
            target += &d_stripe;
        }

        // Backbone blocks in reverse.
        let mut d_cur = d_maps;
        for i in (0..self.params.blocks.len()).rev() {
            let d_pre = ops::relu_backward(&cache.block_pre[i], &d_cur);
            let input = if i == 0 { &cache.x0 } else { &cache.block_out[i - 1] };
            let (d_x, d_w, d_b) = ops::conv2d_backward(
                input,
                &self.params.blocks[i].weight,
                self.cfg.blocks[i].stride,
                &d_pre,
            );
            grads.blocks[i] = (d_w, d_b);
            d_cur = d_x;
        }
        Ok(grads)
    }

    /// Classification stage: per-branch batch-norm, dense layer, softmax.
    ///
    /// `train` selects batch statistics over running statistics. Running
    /// statistics are never modified here; apply [`Model::update_running_stats`]
    /// with the returned cache to commit them.
    pub fn classify_forward(
        &self,
        branch_embeddings: &[Array2<f64>],
        train: bool,
    ) -> Result<ClassifyCache> {
        if branch_embeddings.len() != self.cfg.num_branches() {
            return Err(Error::ShapeMismatch(format!(
                "{} embedding batches for {} branches",
                branch_embeddings.len(),
                self.cfg.num_branches()
            )));
        }
        let mut heads = Vec::with_capacity(branch_embeddings.len());
        for (emb, head) in branch_embeddings.iter().zip(&self.params.heads) {
            let bn = ops::batchnorm_forward(
                emb,
                &head.bn_scale,
                &head.bn_shift,
                &head.bn_running_mean,
                &head.bn_running_var,
                self.cfg.bn_var_floor,
                train,
            )?;
            let logits = ops::dense_forward(&bn.out, &head.dense_weight, &head.dense_bias)?;
            let probs = ops::softmax(&logits);
            heads.push(HeadCache {
                input: emb.clone(),
                bn,
                logits,
                probs,
            });
        }
        Ok(ClassifyCache { heads })
    }

    /// Fold the batch statistics recorded in a train-mode classification pass
    /// into the running estimates.
    pub fn update_running_stats(&mut self, cache: &ClassifyCache) -> Result<()> {
        if cache.heads.len() != self.params.heads.len() {
            return Err(Error::ShapeMismatch("cache does not match model".into()));
        }
        for (head, hc) in self.params.heads.iter_mut().zip(&cache.heads) {
            if !hc.bn.train {
                return Err(Error::validation(
                    "running statistics can only be updated from a train-mode pass",
                ));
            }
            ops::batchnorm_update_running(
                &mut head.bn_running_mean,
                &mut head.bn_running_var,
                &hc.bn.mean,
                &hc.bn.var,
                self.cfg.bn_momentum,
            );
        }
        Ok(())
    }

    /// Backward pass of the classification stage. Takes gradients w.r.t. the
    /// pre-softmax logits of each head and returns gradients w.r.t. the
    /// embeddings each head consumed, plus the head parameter gradients.
    pub fn classify_backward(
        &self,
        cache: &ClassifyCache,
        d_logits: &[Array2<f64>],
    ) -> Result<(Vec<Array2<f64>>, Vec<HeadGrads>)> {
        if d_logits.len() != cache.heads.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} logit gradients for {} heads",
                d_logits.len(),
                cache.heads.len()
            )));
        }
        let mut d_embeddings = Vec::with_capacity(cache.heads.len());
        let mut head_grads = Vec::with_capacity(cache.heads.len());
        for ((hc, dl), head) in cache.heads.iter().zip(d_logits).zip(&self.params.heads) {
            if dl.dim() != hc.logits.dim() {
                return Err(Error::ShapeMismatch(
                    "logit gradient does not match cached forward pass".into(),
                ));
            }
            let (d_bn_out, d_w, d_b) = ops::dense_backward(&hc.bn.out, &head.dense_weight, dl);
            let (d_emb, d_scale, d_shift) = ops::batchnorm_backward(
                &hc.input,
                &hc.bn,
                &head.bn_scale,
                self.cfg.bn_var_floor,
                &d_bn_out,
            );
            d_embeddings.push(d_emb);
            head_grads.push(HeadGrads {
                bn_scale: d_scale,
                bn_shift: d_shift,
                dense_weight: d_w,
                dense_bias: d_b,
            });
        }
        Ok((d_embeddings, head_grads))
    }

    /// Single-stream forward pass: embedding stage then classification stage
    /// on the same batch.
    pub fn model_forward(&self, x0: &TensorBatch, train: bool) -> Result<ForwardCache> {
        let embed = self.embed_forward(x0)?;
        let classify = self.classify_forward(&embed.branch_embeddings, train)?;
        Ok(ForwardCache { embed, classify })
    }

    /// Backward pass matching [`Model::model_forward`]. `d_features` is the
    /// gradient w.r.t. the concatenated retrieval features, `d_logits` w.r.t.
    /// each head's pre-softmax logits.
    pub fn model_backward(
        &self,
        cache: &ForwardCache,
        d_features: &Array2<f64>,
        d_logits: &[Array2<f64>],
    ) -> Result<ModelGrads> {
        if d_features.dim() != cache.embed.features.dim() {
            return Err(Error::ShapeMismatch(
                "feature gradient does not match cached forward pass".into(),
            ));
        }
        let (d_emb_classify, head_grads) = self.classify_backward(&cache.classify, d_logits)?;
        let mut d_branch = self.split_feature_grad(d_features)?;
        for (d, dc) in d_branch.iter_mut().zip(&d_emb_classify) {
            *d += dc;
        }
        let mut grads = self.embed_backward(&cache.embed, &d_branch)?;
        grads.heads = head_grads;
        Ok(grads)
    }

    /// Distances to the closest non-differentiable point seen in a forward
    /// pass. `classify` may be omitted when only the embedding stage ran.
    pub fn kink_clearance(&self, embed: &EmbedCache, classify: Option<&ClassifyCache>) -> KinkReport {
        let mut relu_gap = f64::INFINITY;
        for pre in &embed.block_pre {
            for &v in pre.iter() {
                relu_gap = relu_gap.min(v.abs());
            }
        }
        let mut gem_gap = f64::INFINITY;
        let eps = self.cfg.gem_eps;
        let maps = embed.block_out.last().expect("at least one block");
        for &v in maps.iter().chain(embed.reduced.iter().flat_map(|m| m.iter())) {
            if v != 0.0 {
                gem_gap = gem_gap.min((v - eps).abs());
            }
        }
        // Pooled outputs are bounded below by gem_eps, so a lower clamp bound
        // beneath that is unreachable and not a kink risk.
        let lo_reachable = self.cfg.clip_lo >= self.cfg.gem_eps;
        let mut clip_gap = f64::INFINITY;
        for pre in &embed.branch_pre_clip {
            for &v in pre.iter() {
                if lo_reachable {
                    clip_gap = clip_gap.min((v - self.cfg.clip_lo).abs());
                }
                clip_gap = clip_gap.min((v - self.cfg.clip_hi).abs());
            }
        }
        let mut bn_var_gap = f64::INFINITY;
        if let Some(c) = classify {
            for hc in &c.heads {
                if hc.bn.train {
                    for &v in hc.bn.var.iter() {
                        bn_var_gap = bn_var_gap.min((v - self.cfg.bn_var_floor).abs());
                    }
                }
            }
        }
        KinkReport {
            relu_gap,
            gem_gap,
            clip_gap,
            bn_var_gap,
        }
    }
}

/// Central finite-difference gradient of a scalar function of a flat
/// parameter vector: (f(x + h e_i) - f(x - h e_i)) / (2 h) for every i.
pub fn finite_diff_gradient<F>(theta: &[f64], mut f: F, h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut grad = Vec::with_capacity(theta.len());
    let mut work = theta.to_vec();
    for i in 0..theta.len() {
        work[i] = theta[i] + h;
        let up = f(&work)?;
        work[i] = theta[i] - h;
        let down = f(&work)?;
        work[i] = theta[i];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Element-wise gradient comparison: |a - b| <= max(rel_tol * max(|a|, |b|), abs_tol).
pub fn gradients_match(analytic: &[f64], numeric: &[f64], rel_tol: f64, abs_tol: f64) -> bool {
    analytic.len() == numeric.len()
        && analytic.iter().zip(numeric).all(|(&a, &b)| {
            (a - b).abs() <= f64::max(rel_tol * f64::max(a.abs(), b.abs()), abs_tol)
        })
}
