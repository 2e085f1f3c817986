//! Model configuration and parameter storage.
//!
//! Trainable parameters can be flattened into a single `Vec<f64>` (and written
//! back) in a fixed order, which the optimizer and the finite-difference
//! checks both rely on. Checkpoints serialize every array, including the
//! non-trainable batch-norm running statistics.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::ops::PreprocessConfig;
use crate::model::ops::{conv_out_len, stripe_ranges};
use crate::rng;

/// One backbone convolution block: same-padded conv followed by ReLU.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ConvBlockConfig {
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
}

impl ConvBlockConfig {
    pub fn new(out_channels: usize, kernel_size: usize, stride: usize) -> Self {
        ConvBlockConfig {
            out_channels,
            kernel_size,
            stride,
        }
    }
}

/// Architecture hyperparameters shared by every branch of the model.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub blocks: Vec<ConvBlockConfig>,
    /// Number of horizontal stripes fed to the regional branches.
    pub num_regions: usize,
    /// Channel count each regional branch reduces its stripe to.
    pub reduced_channels: usize,
    pub num_classes: usize,
    pub preprocess: PreprocessConfig,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub gem_eps: f64,
    pub gem_p_init: f64,
    pub bn_momentum: f64,
    pub bn_var_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            in_height: 32,
            in_width: 16,
            blocks: vec![ConvBlockConfig::new(8, 3, 2), ConvBlockConfig::new(16, 3, 2)],
            num_regions: 2,
            reduced_channels: 8,
            num_classes: 2,
            preprocess: PreprocessConfig::default(),
            clip_lo: 0.0,
            clip_hi: 8.0,
            gem_eps: 1e-6,
            gem_p_init: 3.0,
            bn_momentum: 0.9,
            bn_var_floor: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.in_height == 0 || self.in_width == 0 {
            return Err(Error::validation("input dimensions must be positive"));
        }
        self.preprocess.validate(self.in_channels)?;
        if self.blocks.is_empty() {
            return Err(Error::validation("backbone needs at least one block"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 {
                return Err(Error::validation(format!("block {i} has zero channels")));
            }
            if b.kernel_size % 2 == 0 || b.kernel_size == 0 {
                return Err(Error::validation(format!(
                    "block {i} kernel size {} must be odd",
                    b.kernel_size
                )));
            }
            if b.stride == 0 {
                return Err(Error::validation(format!("block {i} has zero stride")));
            }
        }
        if self.num_regions == 0 {
            return Err(Error::validation("num_regions must be >= 1"));
        }
        let (oh, _) = self.backbone_out_hw();
        if oh < self.num_regions {
            return Err(Error::validation(format!(
                "backbone output height {oh} cannot be sliced into {} regions",
                self.num_regions
            )));
        }
        if self.reduced_channels == 0 {
            return Err(Error::validation("reduced_channels must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::validation("num_classes must be >= 2"));
        }
        if !(self.clip_lo < self.clip_hi) {
            return Err(Error::validation("clip bounds must satisfy lo < hi"));
        }
        if self.gem_eps <= 0.0 || self.gem_p_init <= 0.0 {
            return Err(Error::validation("gem eps and initial power must be > 0"));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) && self.bn_momentum != 0.0 {
            if !(0.0..=1.0).contains(&self.bn_momentum) {
                return Err(Error::validation("bn_momentum must lie in [0, 1]"));
            }
        }
        if self.bn_var_floor <= 0.0 {
            return Err(Error::validation("bn_var_floor must be > 0"));
        }
        Ok(())
    }

    /// Spatial extent of the final backbone feature maps.
    pub fn backbone_out_hw(&self) -> (usize, usize) {
        let mut h = self.in_height;
        let mut w = self.in_width;
        for b in &self.blocks {
            h = conv_out_len(h, b.stride);
            w = conv_out_len(w, b.stride);
        }
        (h, w)
    }

    pub fn backbone_out_channels(&self) -> usize {
        self.blocks.last().map(|b| b.out_channels).unwrap_or(0)
    }

    /// Embedding width of each branch: global first, then the regions.
    pub fn branch_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.backbone_out_channels()];
        dims.extend(std::iter::repeat(self.reduced_channels).take(self.num_regions));
        dims
    }

    /// Width of the concatenated retrieval feature vector.
    pub fn feature_dim(&self) -> usize {
        self.branch_dims().iter().sum()
    }

    pub fn num_branches(&self) -> usize {
        1 + self.num_regions
    }

    /// Row ranges of the stripes in the backbone output.
    pub fn region_ranges(&self) -> Result<Vec<(usize, usize)>> {
        let (oh, _) = self.backbone_out_hw();
        stripe_ranges(oh, self.num_regions)
    }
}

/// Batch-norm + dense classifier head for one branch.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub bn_scale: Array1<f64>,
    pub bn_shift: Array1<f64>,
    pub bn_running_mean: Array1<f64>,
    pub bn_running_var: Array1<f64>,
    pub dense_weight: Array2<f64>,
    pub dense_bias: Array1<f64>,
}

/// One backbone convolution layer's weights.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

/// All model parameters. Heads are ordered global branch first, then regions.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub blocks: Vec<ConvLayer>,
    pub gem_p_global: f64,
    pub gem_p_regional: Vec<f64>,
    /// 1x1 channel-reduction kernels, one per regional branch (no bias).
    pub reduce_kernels: Vec<Array2<f64>>,
    pub heads: Vec<HeadParams>,
}

impl ModelParams {
    /// Random initialization: conv and reduction weights drawn with
    /// fan-in-scaled standard deviations, classifier weights small, batch-norm
    /// at identity.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, "model-init");
        let mut blocks = Vec::with_capacity(cfg.blocks.len());
        let mut c_in = cfg.in_channels;
        for b in &cfg.blocks {
            let fan_in = (c_in * b.kernel_size * b.kernel_size) as f64;
            let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
            let weight = Array4::from_shape_fn(
                (b.out_channels, c_in, b.kernel_size, b.kernel_size),
                |_| dist.sample(&mut rng),
            );
            blocks.push(ConvLayer {
                weight,
                bias: Array1::zeros(b.out_channels),
            });
            c_in = b.out_channels;
        }
        let back_c = cfg.backbone_out_channels();
        let reduce_dist = Normal::new(0.0, (2.0 / back_c as f64).sqrt()).expect("finite std");
        let reduce_kernels = (0..cfg.num_regions)
            .map(|_| {
                Array2::from_shape_fn((cfg.reduced_channels, back_c), |_| {
                    reduce_dist.sample(&mut rng)
                })
            })
            .collect();
        let heads = cfg
            .branch_dims()
            .into_iter()
            .map(|dim| {
                let dense_std = (1.0 / dim as f64).sqrt();
                let dense_dist = Normal::new(0.0, dense_std).expect("finite std");
                HeadParams {
                    bn_scale: Array1::ones(dim),
                    bn_shift: Array1::zeros(dim),
                    bn_running_mean: Array1::zeros(dim),
                    bn_running_var: Array1::ones(dim),
                    dense_weight: Array2::from_shape_fn((cfg.num_classes, dim), |_| {
                        dense_dist.sample(&mut rng)
                    }),
                    dense_bias: Array1::zeros(cfg.num_classes),
                }
            })
            .collect();
        Ok(ModelParams {
            blocks,
            gem_p_global: cfg.gem_p_init,
            gem_p_regional: vec![cfg.gem_p_init; cfg.num_regions],
            reduce_kernels,
            heads,
        })
    }

    /// Jitter batch-norm affine parameters and classifier biases away from
    /// their identity/zero initialization so gradient checks exercise them.
    pub fn perturb_for_gradcheck<R: Rng>(&mut self, rng: &mut R, magnitude: f64) {
        for head in &mut self.heads {
            for v in head.bn_scale.iter_mut() {
                *v += rng.random_range(-magnitude..magnitude);
            }
            for v in head.bn_shift.iter_mut() {
                *v += rng.random_range(-magnitude..magnitude);
            }
            for v in head.dense_bias.iter_mut() {
                *v += rng.random_range(-magnitude..magnitude);
            }
        }
        for layer in &mut self.blocks {
            for v in layer.bias.iter_mut() {
                *v += rng.random_range(-magnitude..magnitude);
            }
        }
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn num_trainable(&self) -> usize {
        let mut n = 0;
        for l in &self.blocks {
            n += l.weight.len() + l.bias.len();
        }
        n += 1 + self.gem_p_regional.len();
        for k in &self.reduce_kernels {
            n += k.len();
        }
        for h in &self.heads {
            n += h.bn_scale.len()
                + h.bn_shift.len()
                + h.dense_weight.len()
                + h.dense_bias.len();
        }
        n
    }

    /// Flatten every trainable parameter in a fixed order.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_trainable());
        for l in &self.blocks {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out.push(self.gem_p_global);
        out.extend(self.gem_p_regional.iter());
        for k in &self.reduce_kernels {
            out.extend(k.iter());
        }
        for h in &self.heads {
            out.extend(h.bn_scale.iter());
            out.extend(h.bn_shift.iter());
            out.extend(h.dense_weight.iter());
            out.extend(h.dense_bias.iter());
        }
        out
    }

    /// Write back a flat vector produced by [`flatten_trainable`].
    pub fn set_trainable(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_trainable() {
            return Err(Error::ShapeMismatch(format!(
                "flat parameter vector has {} entries, model has {}",
                flat.len(),
                self.num_trainable()
            )));
        }
        let mut it = flat.iter().copied();
        let mut next = || it.next().expect("length checked");
        for l in &mut self.blocks {
            for v in l.weight.iter_mut() {
                *v = next();
            }
            for v in l.bias.iter_mut() {
                *v = next();
            }
        }
        self.gem_p_global = next();
        for v in self.gem_p_regional.iter_mut() {
            *v = next();
        }
        for k in &mut self.reduce_kernels {
            for v in k.iter_mut() {
                *v = next();
            }
        }
        for h in &mut self.heads {
            for v in h.bn_scale.iter_mut() {
                *v = next();
            }
            for v in h.bn_shift.iter_mut() {
                *v = next();
            }
            for v in h.dense_weight.iter_mut() {
                *v = next();
            }
            for v in h.dense_bias.iter_mut() {
                *v = next();
            }
        }
        Ok(())
    }

    /// All arrays by name (trainables plus running statistics), in a fixed
    /// order, as (name, shape, data) triples for checkpoint serialization.
    pub fn named_arrays(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, l) in self.blocks.iter().enumerate() {
            out.push((
                format!("blocks.{i}.weight"),
                l.weight.shape().to_vec(),
                l.weight.iter().copied().collect(),
            ));
            out.push((
                format!("blocks.{i}.bias"),
                vec![l.bias.len()],
                l.bias.to_vec(),
            ));
        }
        out.push(("gem_p.global".into(), vec![1], vec![self.gem_p_global]));
        out.push((
            "gem_p.regional".into(),
            vec![self.gem_p_regional.len()],
            self.gem_p_regional.clone(),
        ));
        for (i, k) in self.reduce_kernels.iter().enumerate() {
            out.push((
                format!("reduce.{i}.kernel"),
                k.shape().to_vec(),
                k.iter().copied().collect(),
            ));
        }
        for (i, h) in self.heads.iter().enumerate() {
            let base = format!("heads.{i}");
            out.push((
                format!("{base}.bn_scale"),
                vec![h.bn_scale.len()],
                h.bn_scale.to_vec(),
            ));
            out.push((
                format!("{base}.bn_shift"),
                vec![h.bn_shift.len()],
                h.bn_shift.to_vec(),
            ));
            out.push((
                format!("{base}.bn_running_mean"),
                vec![h.bn_running_mean.len()],
                h.bn_running_mean.to_vec(),
            ));
            out.push((
                format!("{base}.bn_running_var"),
                vec![h.bn_running_var.len()],
                h.bn_running_var.to_vec(),
            ));
            out.push((
                format!("{base}.dense_weight"),
                h.dense_weight.shape().to_vec(),
                h.dense_weight.iter().copied().collect(),
            ));
            out.push((
                format!("{base}.dense_bias"),
                vec![h.dense_bias.len()],
                h.dense_bias.to_vec(),
            ));
        }
        out
    }

    /// Rebuild parameters from named arrays, validating shapes against `cfg`.
    pub fn from_named_arrays(
        cfg: &ModelConfig,
        arrays: &[(String, Vec<usize>, Vec<f64>)],
    ) -> Result<Self> {
        let mut params = ModelParams::init(cfg, 0)?;
        let expected = params.named_arrays();
        if arrays.len() != expected.len() {
            return Err(Error::format(format!(
                "checkpoint holds {} arrays, model expects {}",
                arrays.len(),
                expected.len()
            )));
        }
        let mut by_name: std::collections::BTreeMap<&str, (&[usize], &[f64])> =
            std::collections::BTreeMap::new();
        for (name, shape, data) in arrays {
            if by_name.insert(name.as_str(), (shape, data)).is_some() {
                return Err(Error::format(format!("duplicate array '{name}'")));
            }
        }
        let mut take = |name: &str, want_shape: &[usize]| -> Result<Vec<f64>> {
            let (shape, data) = by_name
                .remove(name)
                .ok_or_else(|| Error::format(format!("checkpoint missing array '{name}'")))?;
            if shape != want_shape {
                return Err(Error::format(format!(
                    "array '{name}' has shape {shape:?}, expected {want_shape:?}"
                )));
            }
            Ok(data.to_vec())
        };
        for (name, shape, _) in &expected {
            let data = take(name, shape)?;
            params.assign_named(name, shape, &data)?;
        }
        Ok(params)
    }

    fn assign_named(&mut self, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
        let fill1 = |arr: &mut Array1<f64>, data: &[f64]| {
            for (v, &d) in arr.iter_mut().zip(data) {
                *v = d;
            }
        };
        if let Some(rest) = name.strip_prefix("blocks.") {
            let (idx, field) = rest
                .split_once('.')
                .ok_or_else(|| Error::format(format!("bad array name '{name}'")))?;
            let i: usize = idx
                .parse()
                .map_err(|_| Error::format(format!("bad array name '{name}'")))?;
            match field {
                "weight" => {
                    self.blocks[i].weight = Array4::from_shape_vec(
                        (shape[0], shape[1], shape[2], shape[3]),
                        data.to_vec(),
                    )
                    .map_err(|e| Error::format(e.to_string()))?;
                }
                "bias" => fill1(&mut self.blocks[i].bias, data),
                _ => return Err(Error::format(format!("unknown array '{name}'"))),
            }
            return Ok(());
        }
        if name == "gem_p.global" {
            self.gem_p_global = data[0];
            return Ok(());
        }
        if name == "gem_p.regional" {
            self.gem_p_regional = data.to_vec();
            return Ok(());
        }
        if let Some(rest) = name.strip_prefix("reduce.") {
            let (idx, _) = rest
                .split_once('.')
                .ok_or_else(|| Error::format(format!("bad array name '{name}'")))?;
            let i: usize = idx
                .parse()
                .map_err(|_| Error::format(format!("bad array name '{name}'")))?;
            self.reduce_kernels[i] =
                Array2::from_shape_vec((shape[0], shape[1]), data.to_vec())
                    .map_err(|e| Error::format(e.to_string()))?;
            return Ok(());
        }
        if let Some(rest) = name.strip_prefix("heads.") {
            let (idx, field) = rest
                .split_once('.')
                .ok_or_else(|| Error::format(format!("bad array name '{name}'")))?;
            let i: usize = idx
                .parse()
                .map_err(|_| Error::format(format!("bad array name '{name}'")))?;
            let h = &mut self.heads[i];
            match field {
                "bn_scale" => fill1(&mut h.bn_scale, data),
                "bn_shift" => fill1(&mut h.bn_shift, data),
                "bn_running_mean" => fill1(&mut h.bn_running_mean, data),
                "bn_running_var" => fill1(&mut h.bn_running_var, data),
                "dense_weight" => {
                    h.dense_weight = Array2::from_shape_vec((shape[0], shape[1]), data.to_vec())
                        .map_err(|e| Error::format(e.to_string()))?;
                }
                "dense_bias" => fill1(&mut h.dense_bias, data),
                _ => return Err(Error::format(format!("unknown array '{name}'"))),
            }
            return Ok(());
        }
        Err(Error::format(format!("unknown array '{name}'")))
    }
}

/// Gradients for every trainable parameter, mirroring [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub blocks: Vec<(Array4<f64>, Array1<f64>)>,
    pub gem_p_global: f64,
    pub gem_p_regional: Vec<f64>,
    pub reduce_kernels: Vec<Array2<f64>>,
    pub heads: Vec<HeadGrads>,
}

#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub bn_scale: Array1<f64>,
    pub bn_shift: Array1<f64>,
    pub dense_weight: Array2<f64>,
    pub dense_bias: Array1<f64>,
}

impl ModelGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        ModelGrads {
            blocks: params
                .blocks
                .iter()
                .map(|l| (Array4::zeros(l.weight.raw_dim()), Array1::zeros(l.bias.len())))
                .collect(),
            gem_p_global: 0.0,
            gem_p_regional: vec![0.0; params.gem_p_regional.len()],
            reduce_kernels: params
                .reduce_kernels
                .iter()
                .map(|k| Array2::zeros(k.raw_dim()))
                .collect(),
            heads: params
                .heads
                .iter()
                .map(|h| HeadGrads {
                    bn_scale: Array1::zeros(h.bn_scale.len()),
                    bn_shift: Array1::zeros(h.bn_shift.len()),
                    dense_weight: Array2::zeros(h.dense_weight.raw_dim()),
                    dense_bias: Array1::zeros(h.dense_bias.len()),
                })
                .collect(),
        }
    }

    /// Accumulate another gradient of the same shape.
    pub fn add_assign(&mut self, other: &ModelGrads) {
        for ((w, b), (ow, ob)) in self.blocks.iter_mut().zip(&other.blocks) {
            *w += ow;
            *b += ob;
        }
        self.gem_p_global += other.gem_p_global;
        for (g, og) in self.gem_p_regional.iter_mut().zip(&other.gem_p_regional) {
            *g += og;
        }
        for (k, ok) in self.reduce_kernels.iter_mut().zip(&other.reduce_kernels) {
            *k += ok;
        }
        for (h, oh) in self.heads.iter_mut().zip(&other.heads) {
            h.bn_scale += &oh.bn_scale;
            h.bn_shift += &oh.bn_shift;
            h.dense_weight += &oh.dense_weight;
            h.dense_bias += &oh.dense_bias;
        }
    }

    /// Flatten in the same order as [`ModelParams::flatten_trainable`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.blocks {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out.push(self.gem_p_global);
        out.extend(self.gem_p_regional.iter());
        for k in &self.reduce_kernels {
            out.extend(k.iter());
        }
        for h in &self.heads {
            out.extend(h.bn_scale.iter());
            out.extend(h.bn_shift.iter());
            out.extend(h.dense_weight.iter());
            out.extend(h.dense_bias.iter());
        }
        out
    }
}
