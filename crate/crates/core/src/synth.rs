//! Synthetic labeled person-like images and training-time augmentations.
//!
//! The generator builds one smooth prototype pattern per identity whose
//! left/right asymmetry is controllable, then renders per-image variants
//! under camera-specific bias and Gaussian noise. Asymmetry 0 yields images
//! that equal their own horizontal flip exactly, asymmetry 1 yields strongly
//! flip-sensitive identities.

use ndarray::{Array3, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// One image: u8 pixels laid out (channels, height, width).
pub type ImageU8 = Array3<u8>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::format(format!(
                "invalid split {other:?}, expected one of train/query/gallery"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: ImageU8,
    pub identity: u32,
    pub camera: u32,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub num_cameras: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// How much an identity's left half differs from its mirrored right half,
    /// in [0, 1]. Zero yields exactly left-right-symmetric prototypes.
    pub asymmetry_strength: f64,
    /// Per-pixel Gaussian noise std on the [0, 1] intensity scale,
    /// applied before quantization.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_identities: 20,
            images_per_identity: 12,
            num_cameras: 3,
            height: 32,
            width: 16,
            channels: 3,
            asymmetry_strength: 0.8,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::validation("num_identities must be >= 2"));
        }
        if self.images_per_identity < 2 {
            return Err(Error::validation("images_per_identity must be >= 2"));
        }
        if self.num_cameras < 2 {
            return Err(Error::validation(
                "num_cameras must be >= 2 (cross-camera evaluation needs two cameras)",
            ));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::validation("height and width must be >= 2"));
        }
        if self.channels == 0 {
            return Err(Error::validation("channels must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.asymmetry_strength) {
            return Err(Error::validation("asymmetry_strength must be in [0, 1]"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::validation("noise_std must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub flip_prob: f64,
    pub erase_prob: f64,
    pub erase_area_range: (f64, f64),
    pub erase_aspect_range: (f64, f64),
    pub grayscale_patch_prob: f64,
    pub grayscale_patch_area_range: (f64, f64),
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            flip_prob: 0.5,
            erase_prob: 0.5,
            erase_area_range: (0.02, 0.4),
            erase_aspect_range: (0.3, 3.33),
            grayscale_patch_prob: 0.2,
            grayscale_patch_area_range: (0.02, 0.4),
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("erase_prob", self.erase_prob),
            ("grayscale_patch_prob", self.grayscale_patch_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(format!("{name} must be in [0, 1]")));
            }
        }
        for (name, (lo, hi)) in [
            ("erase_area_range", self.erase_area_range),
            ("grayscale_patch_area_range", self.grayscale_patch_area_range),
        ] {
            if !(lo > 0.0 && hi <= 1.0 && lo <= hi) {
                return Err(Error::validation(format!(
                    "{name} must satisfy 0 < min <= max <= 1"
                )));
            }
        }
        let (alo, ahi) = self.erase_aspect_range;
        if !(alo > 0.0 && alo <= ahi) {
            return Err(Error::validation(
                "erase_aspect_range must satisfy 0 < min <= max",
            ));
        }
        Ok(())
    }
}

/// Mirror an image left-right: column j maps to column width-1-j.
pub fn horizontal_flip(image: &ImageU8) -> ImageU8 {
    let (c, h, w) = image.dim();
    let mut out = image.clone();
    for ci in 0..c {
        for hi in 0..h {
            for wi in 0..w {
                out[[ci, hi, wi]] = image[[ci, hi, w - 1 - wi]];
            }
        }
    }
    out
}

/// Flip with probability `prob`, consuming exactly one uniform draw.
pub fn random_horizontal_flip<R: Rng>(image: &ImageU8, prob: f64, rng: &mut R) -> ImageU8 {
    let draw: f64 = rng.random();
    if draw < prob {
        horizontal_flip(image)
    } else {
        image.clone()
    }
}

/// Rectangle sampled inside an image, in (top, left, height, width) form.
#[derive(Debug, Clone, Copy)]
struct Rect {
    top: usize,
    left: usize,
    h: usize,
    w: usize,
}

const RECT_ATTEMPTS: usize = 10;

fn sample_rect<R: Rng>(
    img_h: usize,
    img_w: usize,
    area_range: (f64, f64),
    aspect_range: (f64, f64),
    rng: &mut R,
) -> Option<Rect> {
    let img_area = (img_h * img_w) as f64;
    for _ in 0..RECT_ATTEMPTS {
        let area_frac = if area_range.0 == area_range.1 {
            area_range.0
        } else {
            rng.random_range(area_range.0..area_range.1)
        };
        let aspect = if aspect_range.0 == aspect_range.1 {
            aspect_range.0
        } else {
            rng.random_range(aspect_range.0..aspect_range.1)
        };
        let target = area_frac * img_area;
        let rect_h = (target * aspect).sqrt().round() as usize;
        let rect_w = (target / aspect).sqrt().round() as usize;
        if rect_h == 0 || rect_w == 0 || rect_h > img_h || rect_w > img_w {
            continue;
        }
        let top = rng.random_range(0..=img_h - rect_h);
        let left = rng.random_range(0..=img_w - rect_w);
        return Some(Rect {
            top,
            left,
            h: rect_h,
            w: rect_w,
        });
    }
    None
}

/// With probability `erase_prob`, overwrite a random rectangle with
/// independent uniform values in {0,...,255}. If no rectangle fits within
/// the attempt budget the image is returned unchanged.
pub fn random_erasing<R: Rng>(
    image: &ImageU8,
    params: &AugmentParams,
    rng: &mut R,
) -> Result<ImageU8> {
    params.validate()?;
    let draw: f64 = rng.random();
    if draw >= params.erase_prob {
        return Ok(image.clone());
    }
    let (c, h, w) = image.dim();
    let rect = match sample_rect(h, w, params.erase_area_range, params.erase_aspect_range, rng) {
        Some(r) => r,
        None => return Ok(image.clone()),
    };
    let mut out = image.clone();
    for ci in 0..c {
        for hi in rect.top..rect.top + rect.h {
            for wi in rect.left..rect.left + rect.w {
                out[[ci, hi, wi]] = rng.random_range(0..=255u32) as u8;
            }
        }
    }
    Ok(out)
}

/// Luma weights for RGB-to-gray conversion.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// With probability `grayscale_patch_prob`, replace a random rectangle with
/// its grayscale value, identical across the three channels.
pub fn random_grayscale_patch<R: Rng>(
    image: &ImageU8,
    params: &AugmentParams,
    rng: &mut R,
) -> Result<ImageU8> {
    params.validate()?;
    if params.grayscale_patch_prob == 0.0 {
        return Ok(image.clone());
    }
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::Unsupported(format!(
            "grayscale patch replacement needs 3 channels, got {c}"
        )));
    }
    let draw: f64 = rng.random();
    if draw >= params.grayscale_patch_prob {
        return Ok(image.clone());
    }
    let rect = match sample_rect(
        h,
        w,
        params.grayscale_patch_area_range,
        params.erase_aspect_range,
        rng,
    ) {
        Some(r) => r,
        None => return Ok(image.clone()),
    };
    let mut out = image.clone();
    for hi in rect.top..rect.top + rect.h {
        for wi in rect.left..rect.left + rect.w {
            let gray = LUMA[0] * image[[0, hi, wi]] as f64
                + LUMA[1] * image[[1, hi, wi]] as f64
                + LUMA[2] * image[[2, hi, wi]] as f64;
            let gray = gray.round().clamp(0.0, 255.0) as u8;
            for ci in 0..3 {
                out[[ci, hi, wi]] = gray;
            }
        }
    }
    Ok(out)
}

/// Bilinear upsample of a coarse (gh x gw) grid to (h x w), per channel.
/// Grid cells are treated as samples at evenly spaced positions.
fn upsample_bilinear(grid: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (c, gh, gw) = grid.dim();
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        for hi in 0..h {
            let fy = if h == 1 {
                0.0
            } else {
                hi as f64 / (h - 1) as f64 * (gh - 1) as f64
            };
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(gh - 1);
            let ty = fy - y0 as f64;
            for wi in 0..w {
                let fx = if w == 1 {
                    0.0
                } else {
                    wi as f64 / (w - 1) as f64 * (gw - 1) as f64
                };
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(gw - 1);
                let tx = fx - x0 as f64;
                let top = grid[[ci, y0, x0]] * (1.0 - tx) + grid[[ci, y0, x1]] * tx;
                let bot = grid[[ci, y1, x0]] * (1.0 - tx) + grid[[ci, y1, x1]] * tx;
                out[[ci, hi, wi]] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

fn flip_f64(p: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = p.dim();
    let mut out = p.clone();
    for ci in 0..c {
        for hi in 0..h {
            for wi in 0..w {
                out[[ci, hi, wi]] = p[[ci, hi, w - 1 - wi]];
            }
        }
    }
    out
}

/// Continuous [0, 1] prototype for one identity. Exactly flip-symmetric when
/// `asymmetry` is 0; fully the raw random pattern when it is 1.
fn identity_prototype<R: Rng>(spec: &DatasetSpec, rng: &mut R) -> Array3<f64> {
    let gh = (spec.height / 4).max(2);
    let gw = (spec.width / 4).max(2);
    let mut grid = Array3::zeros((spec.channels, gh, gw));
    for v in grid.iter_mut() {
        *v = rng.random::<f64>();
    }
    let raw = upsample_bilinear(&grid, spec.height, spec.width);
    let symmetric = {
        let flipped = flip_f64(&raw);
        let mut s = raw.clone();
        Zip::from(&mut s).and(&flipped).for_each(|a, &b| *a = (*a + b) / 2.0);
        s
    };
    let alpha = spec.asymmetry_strength;
    let mut proto = symmetric;
    Zip::from(&mut proto)
        .and(&raw)
        .for_each(|s, &r| *s = *s + alpha * (r - *s));
    proto
}

/// Generate the full dataset as a pure function of `spec.seed`.
///
/// Each identity gets a fixed prototype; each of its images is rendered under
/// a round-robin camera assignment with a per-camera channel bias plus
/// Gaussian pixel noise, so every identity appears under at least two
/// cameras whenever it has at least two images.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, "synth-data");

    // Per-camera, per-channel additive intensity bias.
    let mut camera_bias = vec![vec![0.0f64; spec.channels]; spec.num_cameras];
    for cam in camera_bias.iter_mut() {
        for b in cam.iter_mut() {
            *b = rng.random_range(-0.1..0.1);
        }
    }

    let noise = if spec.noise_std > 0.0 {
        Some(Normal::new(0.0, spec.noise_std).expect("validated noise_std"))
    } else {
        None
    };

    let mut samples = Vec::with_capacity(spec.num_identities * spec.images_per_identity);
    for identity in 0..spec.num_identities {
        let proto = identity_prototype(spec, &mut rng);
        let cam_start = rng.random_range(0..spec.num_cameras);
        for k in 0..spec.images_per_identity {
            let camera = (cam_start + k) % spec.num_cameras;
            let mut image = Array3::zeros((spec.channels, spec.height, spec.width));
            for ci in 0..spec.channels {
                for hi in 0..spec.height {
                    for wi in 0..spec.width {
                        let mut v = proto[[ci, hi, wi]] + camera_bias[camera][ci];
                        if let Some(n) = &noise {
                            v += n.sample(&mut rng);
                        }
                        image[[ci, hi, wi]] = (255.0 * v.clamp(0.0, 1.0)).round() as u8;
                    }
                }
            }
            samples.push(Sample {
                image,
                identity: identity as u32,
                camera: camera as u32,
                split: Split::Train,
            });
        }
    }
    Ok(samples)
}

/// Partition identities disjointly into train and test, then split each test
/// identity's samples into query (`query_frac` of them, at least one, at
/// most all-but-one) and gallery.
pub fn split_dataset<R: Rng>(
    samples: &[Sample],
    rng: &mut R,
    query_frac: f64,
) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    if !(0.0..=1.0).contains(&query_frac) {
        return Err(Error::validation("query_frac must be in [0, 1]"));
    }
    let mut ids: Vec<u32> = samples.iter().map(|s| s.identity).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::validation(
            "need at least 2 identities to split train/test disjointly",
        ));
    }
    for &id in &ids {
        if samples.iter().filter(|s| s.identity == id).count() < 2 {
            return Err(Error::validation(format!(
                "identity {id} has fewer than 2 samples"
            )));
        }
    }

    let mut shuffled = ids.clone();
    shuffled.shuffle(rng);
    let train_count = shuffled.len() / 2;
    let train_ids: std::collections::BTreeSet<u32> =
        shuffled[..train_count].iter().copied().collect();

    let mut train = Vec::new();
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for &id in &ids {
        let mut of_id: Vec<Sample> = samples.iter().filter(|s| s.identity == id).cloned().collect();
        if train_ids.contains(&id) {
            for mut s in of_id {
                s.split = Split::Train;
                train.push(s);
            }
            continue;
        }
        // Test identity: it must span >= 2 cameras, otherwise no partition can
        // offer a cross-camera positive.
        let cams: std::collections::BTreeSet<u32> = of_id.iter().map(|s| s.camera).collect();
        if cams.len() < 2 {
            return Err(Error::validation(format!(
                "test identity {id} appears under a single camera; cross-camera \
                 evaluation is infeasible"
            )));
        }
        of_id.shuffle(rng);
        let n = of_id.len();
        let q = ((query_frac * n as f64).round() as usize).clamp(1, n - 1);
        for (i, mut s) in of_id.into_iter().enumerate() {
            if i < q {
                s.split = Split::Query;
                query.push(s);
            } else {
                s.split = Split::Gallery;
                gallery.push(s);
            }
        }
    }
    Ok((train, query, gallery))
}
