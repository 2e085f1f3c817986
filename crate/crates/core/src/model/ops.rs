//! Differentiable layer primitives with hand-derived backward passes.
//!
//! All tensors are 64-bit floats. Batches are laid out (batch, channels,
//! height, width). Subgradients at kinks (ReLU at 0, the GeM floor, clip
//! bounds) are defined as 0.

use ndarray::{Array1, Array2, Array4, Axis};

use crate::error::{Error, Result};

/// Rank-4 activation batch (batch, channels, height, width).
pub type TensorBatch = Array4<f64>;

/// Per-channel scaling applied before the backbone.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PreprocessConfig {
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            channel_mean: vec![0.485, 0.456, 0.406],
            channel_std: vec![0.229, 0.224, 0.225],
        }
    }
}

impl PreprocessConfig {
    pub fn uniform(channels: usize) -> Self {
        PreprocessConfig {
            channel_mean: vec![0.5; channels],
            channel_std: vec![0.25; channels],
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.channel_mean.len() != channels || self.channel_std.len() != channels {
            return Err(Error::ShapeMismatch(format!(
                "preprocess config covers {} channels, images have {}",
                self.channel_mean.len(),
                channels
            )));
        }
        if self.channel_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::validation("channel_std must be positive"));
        }
        Ok(())
    }
}

/// Scale u8 pixels to [0, 1] and normalize each channel.
pub fn preprocess(images: &[crate::synth::ImageU8], cfg: &PreprocessConfig) -> Result<TensorBatch> {
    let first = images
        .first()
        .ok_or_else(|| Error::validation("empty image batch"))?;
    let (c, h, w) = first.dim();
    cfg.validate(c)?;
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (n, img) in images.iter().enumerate() {
        if img.dim() != (c, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "image {n} has shape {:?}, expected {:?}",
                img.dim(),
                (c, h, w)
            )));
        }
        for ci in 0..c {
            let mean = cfg.channel_mean[ci];
            let std = cfg.channel_std[ci];
            for hi in 0..h {
                for wi in 0..w {
                    out[[n, ci, hi, wi]] =
                        (img[[ci, hi, wi]] as f64 / 255.0 - mean) / std;
                }
            }
        }
    }
    Ok(out)
}

/// Output spatial extent of a same-padded convolution: ceil(len / stride).
pub fn conv_out_len(len: usize, stride: usize) -> usize {
    (len + stride - 1) / stride
}

/// Same-padded convolution with an odd kernel and the given stride.
/// Weight layout is (out_channels, in_channels, kh, kw).
pub fn conv2d_forward(
    x: &TensorBatch,
    weight: &Array4<f64>,
    bias: &Array1<f64>,
    stride: usize,
) -> Result<TensorBatch> {
    let (n, c_in, h, w) = x.dim();
    let (c_out, kc, kh, kw) = weight.dim();
    if kc != c_in {
        return Err(Error::ShapeMismatch(format!(
            "conv kernel expects {kc} input channels, feature maps have {c_in}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::validation("conv kernels must have odd extents"));
    }
    if bias.len() != c_out {
        return Err(Error::ShapeMismatch("conv bias length".into()));
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let (oh, ow) = (conv_out_len(h, stride), conv_out_len(w, stride));
    let mut out = Array4::zeros((n, c_out, oh, ow));
    for ni in 0..n {
        for oc in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[oc];
                    for ic in 0..c_in {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pw as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += weight[[oc, ic, ky, kx]]
                                    * x[[ni, ic, iy as usize, ix as usize]];
                            }
                        }
                    }
                    out[[ni, oc, oy, ox]] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a same-padded convolution w.r.t. input, weight, and bias.
pub fn conv2d_backward(
    x: &TensorBatch,
    weight: &Array4<f64>,
    stride: usize,
    d_out: &TensorBatch,
) -> (TensorBatch, Array4<f64>, Array1<f64>) {
    let (n, c_in, h, w) = x.dim();
    let (c_out, _, kh, kw) = weight.dim();
    let (ph, pw) = (kh / 2, kw / 2);
    let (_, _, oh, ow) = d_out.dim();
    let mut d_x = Array4::zeros((n, c_in, h, w));
    let mut d_w = Array4::zeros(weight.raw_dim());
    let mut d_b = Array1::zeros(c_out);
    for ni in 0..n {
        for oc in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = d_out[[ni, oc, oy, ox]];
                    d_b[oc] += g;
                    for ic in 0..c_in {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pw as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let (iy, ix) = (iy as usize, ix as usize);
                                d_w[[oc, ic, ky, kx]] += g * x[[ni, ic, iy, ix]];
                                d_x[[ni, ic, iy, ix]] += g * weight[[oc, ic, ky, kx]];
                            }
                        }
                    }
                }
            }
        }
    }
    (d_x, d_w, d_b)
}

pub fn relu(x: &TensorBatch) -> TensorBatch {
    x.mapv(|v| v.max(0.0))
}

/// Masks the upstream gradient where the pre-activation was <= 0.
pub fn relu_backward(pre: &TensorBatch, d_out: &TensorBatch) -> TensorBatch {
    let mut d = d_out.clone();
    ndarray::Zip::from(&mut d).and(pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    d
}

/// Generalized-mean pooling over spatial positions, per channel:
/// out = (mean_s max(x_s, eps)^p)^(1/p).
///
/// Computed in a max-factored form so large powers stay well conditioned.
pub fn gem_pool(maps: &TensorBatch, p: f64, eps: f64) -> Result<Array2<f64>> {
    if p <= 0.0 {
        return Err(Error::validation(format!("gem power must be > 0, got {p}")));
    }
    if eps <= 0.0 {
        return Err(Error::validation("gem eps must be > 0"));
    }
    let (n, c, h, w) = maps.dim();
    let s = (h * w) as f64;
    let mut out = Array2::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let plane = maps.index_axis(Axis(0), ni);
            let plane = plane.index_axis(Axis(0), ci);
            let mut m = eps;
            for &v in plane.iter() {
                let u = v.max(eps);
                if u > m {
                    m = u;
                }
            }
            let mut acc = 0.0;
            for &v in plane.iter() {
                let t = v.max(eps) / m;
                acc += t.powf(p);
            }
            out[[ni, ci]] = m * (acc / s).powf(1.0 / p);
        }
    }
    Ok(out)
}

/// Gradients of `gem_pool` w.r.t. the feature maps and the power.
pub fn gem_pool_backward(
    maps: &TensorBatch,
    p: f64,
    eps: f64,
    d_out: &Array2<f64>,
) -> (TensorBatch, f64) {
    let (n, c, h, w) = maps.dim();
    let s = (h * w) as f64;
    let mut d_maps = Array4::zeros(maps.raw_dim());
    let mut d_p = 0.0;
    for ni in 0..n {
        for ci in 0..c {
            let g = d_out[[ni, ci]];
            if g == 0.0 {
                continue;
            }
            let mut m = eps;
            for hi in 0..h {
                for wi in 0..w {
                    let u = maps[[ni, ci, hi, wi]].max(eps);
                    if u > m {
                        m = u;
                    }
                }
            }
            let mut sum_tp = 0.0;
            let mut sum_tp_lnt = 0.0;
            for hi in 0..h {
                for wi in 0..w {
                    let t = maps[[ni, ci, hi, wi]].max(eps) / m;
                    let tp = t.powf(p);
                    sum_tp += tp;
                    if tp != 0.0 {
                        sum_tp_lnt += tp * t.ln();
                    }
                }
            }
            let m_tilde = sum_tp / s;
            let out = m * m_tilde.powf(1.0 / p);
            // d out / d x_s = m_tilde^(1/p - 1) * t_s^(p-1) / s, where x_s > eps.
            let scale = m_tilde.powf(1.0 / p - 1.0) / s;
            for hi in 0..h {
                for wi in 0..w {
                    let x = maps[[ni, ci, hi, wi]];
                    if x > eps {
                        let t = x / m;
                        d_maps[[ni, ci, hi, wi]] += g * scale * t.powf(p - 1.0);
                    }
                }
            }
            // d out / d p = out * (-ln(m_tilde)/p^2 + (1/p) * sum(t^p ln t)/sum(t^p)).
            d_p += g * out * (-m_tilde.ln() / (p * p) + sum_tp_lnt / (p * sum_tp));
        }
    }
    (d_maps, d_p)
}

/// Element-wise clamp to [lo, hi].
pub fn clip(v: &Array2<f64>, lo: f64, hi: f64) -> Array2<f64> {
    v.mapv(|x| x.clamp(lo, hi))
}

/// Gradient passes only strictly inside (lo, hi); 0 at and beyond the bounds.
pub fn clip_backward(pre: &Array2<f64>, lo: f64, hi: f64, d_out: &Array2<f64>) -> Array2<f64> {
    let mut d = d_out.clone();
    ndarray::Zip::from(&mut d).and(pre).for_each(|g, &v| {
        if v <= lo || v >= hi {
            *g = 0.0;
        }
    });
    d
}

/// Contiguous row ranges splitting `height` into `regions` stripes, earlier
/// stripes taking the remainder rows.
pub fn stripe_ranges(height: usize, regions: usize) -> Result<Vec<(usize, usize)>> {
    if regions == 0 {
        return Err(Error::validation("num_regions must be >= 1"));
    }
    if height < regions {
        return Err(Error::validation(format!(
            "feature map height {height} is smaller than num_regions {regions}"
        )));
    }
    let base = height / regions;
    let rem = height % regions;
    let mut ranges = Vec::with_capacity(regions);
    let mut start = 0;
    for r in 0..regions {
        let len = base + usize::from(r < rem);
        ranges.push((start, start + len));
        start += len;
    }
    Ok(ranges)
}

/// Split feature maps along the height axis into horizontal stripes.
pub fn slice_regions(maps: &TensorBatch, regions: usize) -> Result<Vec<TensorBatch>> {
    let (_, _, h, _) = maps.dim();
    let ranges = stripe_ranges(h, regions)?;
    Ok(ranges
        .into_iter()
        .map(|(a, b)| maps.slice(ndarray::s![.., .., a..b, ..]).to_owned())
        .collect())
}

/// 1x1 convolution across channels: a per-position linear map.
/// Kernel layout is (out_channels, in_channels).
pub fn reduce_channels(maps: &TensorBatch, kernel: &Array2<f64>) -> Result<TensorBatch> {
    let (n, c_in, h, w) = maps.dim();
    let (c_out, kc) = kernel.dim();
    if kc != c_in {
        return Err(Error::ShapeMismatch(format!(
            "reduce kernel expects {kc} input channels, feature maps have {c_in}"
        )));
    }
    let mut out = Array4::zeros((n, c_out, h, w));
    for ni in 0..n {
        for oc in 0..c_out {
            for hi in 0..h {
                for wi in 0..w {
                    let mut acc = 0.0;
                    for ic in 0..c_in {
                        acc += kernel[[oc, ic]] * maps[[ni, ic, hi, wi]];
                    }
                    out[[ni, oc, hi, wi]] = acc;
                }
            }
        }
    }
    Ok(out)
}

pub fn reduce_channels_backward(
    maps: &TensorBatch,
    kernel: &Array2<f64>,
    d_out: &TensorBatch,
) -> (TensorBatch, Array2<f64>) {
    let (n, c_in, h, w) = maps.dim();
    let (c_out, _) = kernel.dim();
    let mut d_maps = Array4::zeros(maps.raw_dim());
    let mut d_kernel = Array2::zeros(kernel.raw_dim());
    for ni in 0..n {
        for oc in 0..c_out {
            for hi in 0..h {
                for wi in 0..w {
                    let g = d_out[[ni, oc, hi, wi]];
                    for ic in 0..c_in {
                        d_kernel[[oc, ic]] += g * maps[[ni, ic, hi, wi]];
                        d_maps[[ni, ic, hi, wi]] += g * kernel[[oc, ic]];
                    }
                }
            }
        }
    }
    (d_maps, d_kernel)
}

/// Everything `batchnorm_forward` needs to hand to the backward pass.
#[derive(Debug, Clone)]
pub struct BnForward {
    pub out: Array2<f64>,
    pub xhat: Array2<f64>,
    /// Mean used for normalization (batch mean in train mode, running in eval).
    pub mean: Array1<f64>,
    /// Variance used for normalization, before flooring.
    pub var: Array1<f64>,
    /// sqrt(max(var, floor)).
    pub denom: Array1<f64>,
    pub train: bool,
}

/// Per-feature batch normalization over rows of an (n, d) matrix.
///
/// Train mode normalizes with the biased batch statistics; eval mode with the
/// running estimates. Both floor the variance at `floor` inside the square
/// root rather than adding it, so a generic batch normalizes to variance
/// exactly 1.
pub fn batchnorm_forward(
    x: &Array2<f64>,
    scale: &Array1<f64>,
    shift: &Array1<f64>,
    running_mean: &Array1<f64>,
    running_var: &Array1<f64>,
    floor: f64,
    train: bool,
) -> Result<BnForward> {
    let (n, d) = x.dim();
    if n == 0 {
        return Err(Error::validation("batchnorm needs a non-empty batch"));
    }
    if scale.len() != d || shift.len() != d || running_mean.len() != d || running_var.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "batchnorm parameters sized for {} features, input has {d}",
            scale.len()
        )));
    }
    let (mean, var) = if train {
        let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
        let mut var = Array1::zeros(d);
        for row in x.rows() {
            for (j, &v) in row.iter().enumerate() {
                let c = v - mean[j];
                var[j] += c * c;
            }
        }
        var.mapv_inplace(|v| v / n as f64);
        (mean, var)
    } else {
        (running_mean.clone(), running_var.clone())
    };
    let denom = var.mapv(|v| v.max(floor).sqrt());
    let mut xhat = Array2::zeros((n, d));
    let mut out = Array2::zeros((n, d));
    for i in 0..n {
        for j in 0..d {
            let xh = (x[[i, j]] - mean[j]) / denom[j];
            xhat[[i, j]] = xh;
            out[[i, j]] = scale[j] * xh + shift[j];
        }
    }
    Ok(BnForward {
        out,
        xhat,
        mean,
        var,
        denom,
        train,
    })
}

/// Exponential-moving-average update of the running statistics:
/// running = momentum * running + (1 - momentum) * batch.
pub fn batchnorm_update_running(
    running_mean: &mut Array1<f64>,
    running_var: &mut Array1<f64>,
    batch_mean: &Array1<f64>,
    batch_var: &Array1<f64>,
    momentum: f64,
) {
    for (r, &b) in running_mean.iter_mut().zip(batch_mean.iter()) {
        *r = momentum * *r + (1.0 - momentum) * b;
    }
    for (r, &b) in running_var.iter_mut().zip(batch_var.iter()) {
        *r = momentum * *r + (1.0 - momentum) * b;
    }
}

/// Gradients of batch normalization w.r.t. input, scale, and shift.
///
/// In train mode the gradient flows through the batch statistics; when the
/// variance sat at the floor the denominator is constant and only the mean
/// path contributes. Eval mode treats mean and variance as constants.
pub fn batchnorm_backward(
    x: &Array2<f64>,
    fwd: &BnForward,
    scale: &Array1<f64>,
    floor: f64,
    d_out: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let (n, d) = x.dim();
    let nf = n as f64;
    let mut d_scale = Array1::zeros(d);
    let mut d_shift = Array1::zeros(d);
    for i in 0..n {
        for j in 0..d {
            d_scale[j] += d_out[[i, j]] * fwd.xhat[[i, j]];
            d_shift[j] += d_out[[i, j]];
        }
    }
    let mut d_x = Array2::zeros((n, d));
    if !fwd.train {
        for i in 0..n {
            for j in 0..d {
                d_x[[i, j]] = d_out[[i, j]] * scale[j] / fwd.denom[j];
            }
        }
        return (d_x, d_scale, d_shift);
    }
    for j in 0..d {
        let denom = fwd.denom[j];
        let mut sum_h = 0.0;
        let mut sum_h_c = 0.0;
        for i in 0..n {
            let h = d_out[[i, j]] * scale[j];
            sum_h += h;
            sum_h_c += h * (x[[i, j]] - fwd.mean[j]);
        }
        if fwd.var[j] > floor {
            let d_var = sum_h_c * (-0.5) / (denom * denom * denom);
            let d_mean = -sum_h / denom;
            for i in 0..n {
                let h = d_out[[i, j]] * scale[j];
                let c = x[[i, j]] - fwd.mean[j];
                d_x[[i, j]] = h / denom + d_var * 2.0 * c / nf + d_mean / nf;
            }
        } else {
            // Variance clamped at the floor: the denominator is constant.
            let d_mean = -sum_h / denom;
            for i in 0..n {
                let h = d_out[[i, j]] * scale[j];
                d_x[[i, j]] = h / denom + d_mean / nf;
            }
        }
    }
    (d_x, d_scale, d_shift)
}

/// Affine map to class scores: logits = x W^T + b, W laid out (classes, dim).
pub fn dense_forward(x: &Array2<f64>, weight: &Array2<f64>, bias: &Array1<f64>) -> Result<Array2<f64>> {
    let (_, d) = x.dim();
    let (k, dw) = weight.dim();
    if dw != d {
        return Err(Error::ShapeMismatch(format!(
            "dense weight expects {dw} inputs, embeddings have {d}"
        )));
    }
    if bias.len() != k {
        return Err(Error::ShapeMismatch("dense bias length".into()));
    }
    Ok(x.dot(&weight.t()) + bias)
}

pub fn dense_backward(
    x: &Array2<f64>,
    weight: &Array2<f64>,
    d_logits: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let d_x = d_logits.dot(weight);
    let d_w = d_logits.t().dot(x);
    let d_b = d_logits.sum_axis(Axis(0));
    (d_x, d_w, d_b)
}

/// Row-wise softmax with the usual max subtraction.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2, Array};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand4(dims: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn preprocess_examples() {
        let mut img = crate::synth::ImageU8::zeros((1, 1, 3));
        img[[0, 0, 0]] = 0;
        img[[0, 0, 1]] = 255;
        img[[0, 0, 2]] = 128;
        let cfg = PreprocessConfig {
            channel_mean: vec![0.0],
            channel_std: vec![1.0],
        };
        let out = preprocess(&[img.clone()], &cfg).unwrap();
        assert_abs_diff_eq!(out[[0, 0, 0, 0]], 0.0);

        let cfg = PreprocessConfig {
            channel_mean: vec![0.5],
            channel_std: vec![0.5],
        };
        let out = preprocess(&[img.clone()], &cfg).unwrap();
        assert_abs_diff_eq!(out[[0, 0, 0, 1]], 1.0, epsilon = 1e-12);

        let cfg = PreprocessConfig {
            channel_mean: vec![0.485],
            channel_std: vec![0.229],
        };
        let out = preprocess(&[img], &cfg).unwrap();
        assert_abs_diff_eq!(
            out[[0, 0, 0, 2]],
            (128.0 / 255.0 - 0.485) / 0.229,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(out[[0, 0, 0, 2]], 0.0740, epsilon = 5e-4);
    }

    #[test]
    fn conv_output_size_follows_ceil_rule() {
        assert_eq!(conv_out_len(32, 2), 16);
        assert_eq!(conv_out_len(16, 2), 8);
        assert_eq!(conv_out_len(7, 2), 4);
        assert_eq!(conv_out_len(5, 1), 5);
    }

    #[test]
    fn conv_identity_kernel_passthrough() {
        // A single 1x1 identity kernel at stride 1 reproduces the input.
        let x = rand4((2, 1, 4, 3), 0);
        let w = Array4::from_elem((1, 1, 1, 1), 1.0);
        let b = arr1(&[0.0]);
        let y = conv2d_forward(&x, &w, &b, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_zero_kernel_gives_zero_maps() {
        let x = rand4((2, 3, 6, 4), 1);
        let w = Array4::zeros((4, 3, 3, 3));
        let b = Array1::zeros(4);
        let y = conv2d_forward(&x, &w, &b, 2).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        assert_eq!(y.dim(), (2, 4, 3, 2));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let x = rand4((2, 2, 5, 4), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Array::from_shape_fn((3, 2, 3, 3), |_| rng.random_range(-0.5..0.5));
        let b = Array::from_shape_fn(3, |_| rng.random_range(-0.5..0.5));
        let d_out_seed = conv2d_forward(&x, &w, &b, 2).unwrap();
        let d_out = d_out_seed.mapv(|_| rng.random_range(-1.0..1.0));
        let (d_x, d_w, d_b) = conv2d_backward(&x, &w, 2, &d_out);

        let loss = |x: &Array4<f64>, w: &Array4<f64>, b: &Array1<f64>| -> f64 {
            let y = conv2d_forward(x, w, b, 2).unwrap();
            (&y * &d_out).sum()
        };
        let h = 1e-6;
        // Spot-check a few coordinates of each gradient.
        for &idx in &[[0, 0, 0, 0], [1, 1, 4, 3], [0, 1, 2, 2]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            assert_abs_diff_eq!(d_x[idx], fd, epsilon = 1e-6);
        }
        for &idx in &[[0, 0, 0, 0], [2, 1, 2, 2], [1, 0, 1, 1]] {
            let mut wp = w.clone();
            wp[idx] += h;
            let mut wm = w.clone();
            wm[idx] -= h;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            assert_abs_diff_eq!(d_w[idx], fd, epsilon = 1e-6);
        }
        for i in 0..3 {
            let mut bp = b.clone();
            bp[i] += h;
            let mut bm = b.clone();
            bm[i] -= h;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
            assert_abs_diff_eq!(d_b[i], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn gem_p1_is_arithmetic_mean() {
        let maps = rand4((2, 3, 4, 4), 5).mapv(|v| v.abs() + 0.1);
        let out = gem_pool(&maps, 1.0, 1e-6).unwrap();
        for ni in 0..2 {
            for ci in 0..3 {
                let mean = maps
                    .index_axis(Axis(0), ni)
                    .index_axis(Axis(0), ci)
                    .mean()
                    .unwrap();
                assert_abs_diff_eq!(out[[ni, ci]], mean, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gem_closed_form_examples() {
        // Channel values {1, 2}: p=3 gives (4.5)^(1/3), p=64 approaches max.
        let mut maps = Array4::zeros((1, 1, 1, 2));
        maps[[0, 0, 0, 0]] = 1.0;
        maps[[0, 0, 0, 1]] = 2.0;
        let out = gem_pool(&maps, 3.0, 1e-6).unwrap();
        assert_abs_diff_eq!(out[[0, 0]], 4.5f64.powf(1.0 / 3.0), epsilon = 1e-12);
        assert_abs_diff_eq!(out[[0, 0]], 1.65096, epsilon = 1e-5);

        let out = gem_pool(&maps, 64.0, 1e-6).unwrap();
        assert!((out[[0, 0]] - 2.0).abs() < 0.03);
    }

    #[test]
    fn gem_rejects_nonpositive_power() {
        let maps = Array4::zeros((1, 1, 2, 2));
        assert!(gem_pool(&maps, 0.0, 1e-6).is_err());
        assert!(gem_pool(&maps, -1.0, 1e-6).is_err());
    }

    #[test]
    fn gem_monotone_in_p() {
        let maps = rand4((1, 2, 3, 3), 6).mapv(|v| v.abs() + 0.05);
        let mut prev = gem_pool(&maps, 0.5, 1e-6).unwrap();
        for &p in &[1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0] {
            let cur = gem_pool(&maps, p, 1e-6).unwrap();
            for (a, b) in prev.iter().zip(cur.iter()) {
                assert!(b + 1e-12 >= *a, "gem not monotone: {a} then {b} at p={p}");
            }
            prev = cur;
        }
    }

    #[test]
    fn gem_backward_matches_finite_differences() {
        let maps = rand4((2, 2, 3, 3), 7).mapv(|v| v.abs() + 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d_out = Array2::from_shape_fn((2, 2), |_| rng.random_range(-1.0..1.0));
        for &p in &[0.7, 1.0, 3.0, 10.0] {
            let (d_maps, d_p) = gem_pool_backward(&maps, p, 1e-6, &d_out);
            let loss = |maps: &Array4<f64>, p: f64| -> f64 {
                (&gem_pool(maps, p, 1e-6).unwrap() * &d_out).sum()
            };
            let h = 1e-6;
            for &idx in &[[0, 0, 0, 0], [1, 1, 2, 2], [0, 1, 1, 0]] {
                let mut mp = maps.clone();
                mp[idx] += h;
                let mut mm = maps.clone();
                mm[idx] -= h;
                let fd = (loss(&mp, p) - loss(&mm, p)) / (2.0 * h);
                assert_abs_diff_eq!(d_maps[idx], fd, epsilon = 1e-5);
            }
            let fd_p = (loss(&maps, p + 1e-6) - loss(&maps, p - 1e-6)) / 2e-6;
            assert_abs_diff_eq!(d_p, fd_p, epsilon = 1e-5);
        }
    }

    #[test]
    fn gem_p_gradient_zero_for_constant_maps() {
        let maps = Array4::from_elem((1, 1, 3, 3), 0.7);
        let d_out = Array2::from_elem((1, 1), 1.0);
        let (_, d_p) = gem_pool_backward(&maps, 3.0, 1e-6, &d_out);
        assert_abs_diff_eq!(d_p, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn clip_examples() {
        let v = arr2(&[[-1.0, 2.0, 9.0]]);
        let out = clip(&v, 0.0, 4.0);
        assert_eq!(out, arr2(&[[0.0, 2.0, 4.0]]));
        // Idempotence.
        assert_eq!(clip(&out, 0.0, 4.0), out);
        // Gradient blocked outside and at the bounds.
        let d = clip_backward(&v, 0.0, 4.0, &arr2(&[[1.0, 1.0, 1.0]]));
        assert_eq!(d, arr2(&[[0.0, 1.0, 0.0]]));
    }

    #[test]
    fn stripes_cover_and_partition() {
        assert_eq!(stripe_ranges(8, 2).unwrap(), vec![(0, 4), (4, 8)]);
        assert_eq!(stripe_ranges(7, 2).unwrap(), vec![(0, 4), (4, 7)]);
        assert_eq!(stripe_ranges(5, 1).unwrap(), vec![(0, 5)]);
        assert!(stripe_ranges(1, 2).is_err());
    }

    #[test]
    fn slices_concatenate_back_to_input() {
        let maps = rand4((2, 3, 7, 4), 9);
        let parts = slice_regions(&maps, 3).unwrap();
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let rebuilt = ndarray::concatenate(Axis(2), &views).unwrap();
        assert_eq!(rebuilt, maps);
    }

    #[test]
    fn single_region_slice_is_identity() {
        let maps = rand4((1, 2, 4, 4), 10);
        let parts = slice_regions(&maps, 1).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0], maps);
    }

    #[test]
    fn reduce_channels_contracts() {
        let maps = rand4((2, 4, 3, 3), 11);
        // Identity kernel passes through.
        let eye = Array2::from_shape_fn((4, 4), |(i, j)| f64::from(i == j));
        assert_eq!(reduce_channels(&maps, &eye).unwrap(), maps);
        // All-ones 1xC kernel sums channels.
        let ones = Array2::ones((1, 4));
        let summed = reduce_channels(&maps, &ones).unwrap();
        for ni in 0..2 {
            for hi in 0..3 {
                for wi in 0..3 {
                    let expect: f64 = (0..4).map(|c| maps[[ni, c, hi, wi]]).sum();
                    assert_abs_diff_eq!(summed[[ni, 0, hi, wi]], expect, epsilon = 1e-12);
                }
            }
        }
        // Shape contract.
        let k = Array2::ones((2, 4));
        assert_eq!(reduce_channels(&maps, &k).unwrap().dim(), (2, 2, 3, 3));
        let bad = Array2::ones((2, 3));
        assert!(reduce_channels(&maps, &bad).is_err());
    }

    #[test]
    fn reduce_backward_matches_finite_differences() {
        let maps = rand4((1, 3, 2, 2), 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let kernel = Array2::from_shape_fn((2, 3), |_| rng.random_range(-0.5..0.5));
        let d_out = Array4::from_shape_fn((1, 2, 2, 2), |_| rng.random_range(-1.0..1.0));
        let (d_maps, d_kernel) = reduce_channels_backward(&maps, &kernel, &d_out);
        let loss = |maps: &Array4<f64>, kernel: &Array2<f64>| {
            (&reduce_channels(maps, kernel).unwrap() * &d_out).sum()
        };
        let h = 1e-6;
        let mut mp = maps.clone();
        mp[[0, 1, 1, 0]] += h;
        let mut mm = maps.clone();
        mm[[0, 1, 1, 0]] -= h;
        assert_abs_diff_eq!(
            d_maps[[0, 1, 1, 0]],
            (loss(&mp, &kernel) - loss(&mm, &kernel)) / (2.0 * h),
            epsilon = 1e-7
        );
        let mut kp = kernel.clone();
        kp[[1, 2]] += h;
        let mut km = kernel.clone();
        km[[1, 2]] -= h;
        assert_abs_diff_eq!(
            d_kernel[[1, 2]],
            (loss(&maps, &kp) - loss(&maps, &km)) / (2.0 * h),
            epsilon = 1e-7
        );
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let logits = Array2::from_shape_fn((5, 7), |_| rng.random_range(-3.0..3.0));
        let probs = softmax(&logits);
        for row in probs.rows() {
            let sum: f64 = row.sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn batchnorm_train_normalizes_batch_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = Array2::from_shape_fn((8, 5), |_| rng.random_range(-2.0..2.0));
        let scale = Array1::ones(5);
        let shift = Array1::zeros(5);
        let rm = Array1::zeros(5);
        let rv = Array1::ones(5);
        let fwd = batchnorm_forward(&x, &scale, &shift, &rm, &rv, 1e-5, true).unwrap();
        for j in 0..5 {
            let col = fwd.out.column(j);
            let mean: f64 = col.sum() / 8.0;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-6);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn batchnorm_running_update_blends() {
        let mut rm = arr1(&[1.0]);
        let mut rv = arr1(&[4.0]);
        batchnorm_update_running(&mut rm, &mut rv, &arr1(&[3.0]), &arr1(&[2.0]), 0.9);
        assert_abs_diff_eq!(rm[0], 0.9 * 1.0 + 0.1 * 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rv[0], 0.9 * 4.0 + 0.1 * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let x = arr2(&[[2.0, -1.0]]);
        let scale = arr1(&[1.0, 2.0]);
        let shift = arr1(&[0.0, 1.0]);
        let rm = arr1(&[1.0, 0.0]);
        let rv = arr1(&[4.0, 1.0]);
        let fwd = batchnorm_forward(&x, &scale, &shift, &rm, &rv, 1e-5, false).unwrap();
        assert_abs_diff_eq!(fwd.out[[0, 0]], (2.0 - 1.0) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fwd.out[[0, 1]], 2.0 * (-1.0) + 1.0, epsilon = 1e-12);
    }

    #[test]
    fn batchnorm_constant_feature_hits_floor_without_blowup() {
        let x = arr2(&[[3.0], [3.0], [3.0]]);
        let scale = arr1(&[1.0]);
        let shift = arr1(&[0.0]);
        let rm = arr1(&[0.0]);
        let rv = arr1(&[1.0]);
        let fwd = batchnorm_forward(&x, &scale, &shift, &rm, &rv, 1e-5, true).unwrap();
        assert!(fwd.out.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(fwd.out[[0, 0]], 0.0, epsilon = 1e-9);
        let d = Array2::ones((3, 1));
        let (d_x, _, _) = batchnorm_backward(&x, &fwd, &scale, 1e-5, &d);
        assert!(d_x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Array2::from_shape_fn((6, 3), |_| rng.random_range(-2.0..2.0));
        let scale = Array1::from_shape_fn(3, |_| rng.random_range(0.5..1.5));
        let shift = Array1::from_shape_fn(3, |_| rng.random_range(-0.5..0.5));
        let rm = Array1::zeros(3);
        let rv = Array1::ones(3);
        let d_out = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
        let fwd = batchnorm_forward(&x, &scale, &shift, &rm, &rv, 1e-5, true).unwrap();
        let (d_x, d_scale, d_shift) = batchnorm_backward(&x, &fwd, &scale, 1e-5, &d_out);
        let loss = |x: &Array2<f64>, scale: &Array1<f64>, shift: &Array1<f64>| {
            let f = batchnorm_forward(x, scale, shift, &rm, &rv, 1e-5, true).unwrap();
            (&f.out * &d_out).sum()
        };
        let h = 1e-6;
        for &idx in &[[0, 0], [5, 2], [3, 1]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp, &scale, &shift) - loss(&xm, &scale, &shift)) / (2.0 * h);
            assert_abs_diff_eq!(d_x[idx], fd, epsilon = 1e-6);
        }
        for j in 0..3 {
            let mut sp = scale.clone();
            sp[j] += h;
            let mut sm = scale.clone();
            sm[j] -= h;
            let fd = (loss(&x, &sp, &shift) - loss(&x, &sm, &shift)) / (2.0 * h);
            assert_abs_diff_eq!(d_scale[j], fd, epsilon = 1e-6);
            let mut bp = shift.clone();
            bp[j] += h;
            let mut bm = shift.clone();
            bm[j] -= h;
            let fd = (loss(&x, &scale, &bp) - loss(&x, &scale, &bm)) / (2.0 * h);
            assert_abs_diff_eq!(d_shift[j], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn dense_zero_weights_give_uniform_softmax() {
        let x = arr2(&[[0.3, -1.2, 0.9]]);
        let w = Array2::zeros((4, 3));
        let b = Array1::zeros(4);
        let logits = dense_forward(&x, &w, &b).unwrap();
        let probs = softmax(&logits);
        for &p in probs.iter() {
            assert_abs_diff_eq!(p, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let b = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
        let d_logits = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
        let (d_x, d_w, d_b) = dense_backward(&x, &w, &d_logits);
        let loss = |x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>| {
            (&dense_forward(x, w, b).unwrap() * &d_logits).sum()
        };
        let h = 1e-6;
        let mut xp = x.clone();
        xp[[2, 1]] += h;
        let mut xm = x.clone();
        xm[[2, 1]] -= h;
        assert_abs_diff_eq!(
            d_x[[2, 1]],
            (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h),
            epsilon = 1e-7
        );
        let mut wp = w.clone();
        wp[[4, 0]] += h;
        let mut wm = w.clone();
        wm[[4, 0]] -= h;
        assert_abs_diff_eq!(
            d_w[[4, 0]],
            (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h),
            epsilon = 1e-7
        );
        let mut bp = b.clone();
        bp[3] += h;
        let mut bm = b.clone();
        bm[3] -= h;
        assert_abs_diff_eq!(
            d_b[3],
            (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h),
            epsilon = 1e-7
        );
    }

    #[test]
    fn relu_backward_masks_nonpositive() {
        let pre = rand4((1, 1, 2, 2), 15);
        let d = Array4::ones(pre.raw_dim());
        let g = relu_backward(&pre, &d);
        for (gv, pv) in g.iter().zip(pre.iter()) {
            assert_eq!(*gv, if *pv > 0.0 { 1.0 } else { 0.0 });
        }
    }
}
