//! From hazy image to guidance: region logits (learned or oracle), threshold
//! + blur into soft masks, a tissue skeleton, and a pixel classifier, all
//! combined into the per-pixel precision map consumed by the guided sampler.

pub mod thinning;
pub mod train;

use crate::error::{Error, Result};
use crate::nn::graph::Tensor;
use crate::nn::segnet::SegNet;
use crate::phantom::PhantomSample;
use crate::raster::{gaussian_blur, Raster};

pub use thinning::skeletonize;
pub use train::{
    dice, evaluate_dice, load_segmenter, save_segmenter, train_region_segmenter, LabeledPair,
    SegTrainConfig, SegTrainRecord,
};

/// Intensities below this are classed as dark pixels.
pub const DARK_THRESHOLD: f32 = 1e-6;

/// Raw per-region logits at input resolution.
#[derive(Debug, Clone)]
pub struct RegionLogits {
    pub ventricle_logits: Raster,
    pub septum_logits: Raster,
}

/// Mask-composition weights. `theta` thresholds logits, `sigma_blur` softens
/// the binary masks, the omegas weight the precision formula.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegWeights {
    pub omega: f32,
    pub omega_v: f32,
    pub omega_s: f32,
    pub theta: f32,
    pub sigma_blur: f32,
}

impl Default for SegWeights {
    fn default() -> Self {
        SegWeights { omega: 1.0, omega_v: 0.3, omega_s: 2.0, theta: 0.176, sigma_blur: 4.2 }
    }
}

impl SegWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("omega", self.omega),
            ("omega_v", self.omega_v),
            ("omega_s", self.omega_s),
            ("sigma_blur", self.sigma_blur),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Param(format!("{name} must be finite and >= 0 (got {v})")));
            }
        }
        if !self.theta.is_finite() {
            return Err(Error::Param("theta must be finite".into()));
        }
        Ok(())
    }
}

/// Everything the precision formula consumes. `ventricle` and `septum` are
/// the blurred soft masks; the `_bin` fields keep the pre-blur binaries that
/// define the background complement and the split check.
#[derive(Debug, Clone)]
pub struct MaskBundle {
    pub ventricle: Raster,
    pub septum: Raster,
    pub ventricle_bin: Raster,
    pub septum_bin: Raster,
    pub skeleton: Raster,
    pub background: Raster,
    pub dark: Raster,
    /// Rows at the top/bottom that bypass sampling (and carry no precision).
    pub fixed_top: usize,
    pub fixed_bottom: usize,
}

/// The per-pixel precision raster (diagonal of the inverse noise covariance)
/// plus the masks it was built from.
#[derive(Debug, Clone)]
pub struct GuidanceMap {
    pub precision: Raster,
    pub bundle: MaskBundle,
    /// 0 when the skeleton bisects the ventricle, else the configured weight.
    pub effective_omega_v: f32,
}

/// Region mask provider. Implementations must be shareable across threads
/// for read-only inference.
pub trait RegionSegmenter: Sync {
    fn segment(&self, y: &Raster) -> Result<RegionLogits>;
}

/// Magnitude of the oracle's saturated logits.
pub const ORACLE_LOGIT: f32 = 12.0;

/// Ground-truth-backed segmenter: returns saturated logits straight from the
/// reference masks. Lets everything downstream of segmentation be tested in
/// isolation from segmenter quality.
#[derive(Debug, Clone)]
pub struct OracleSegmenter {
    pub ventricle: Raster,
    pub septum: Raster,
}

impl OracleSegmenter {
    pub fn for_phantom(sample: &PhantomSample) -> Self {
        OracleSegmenter {
            ventricle: sample.ventricle_mask.clone(),
            septum: sample.septum_mask.clone(),
        }
    }
}

impl RegionSegmenter for OracleSegmenter {
    fn segment(&self, y: &Raster) -> Result<RegionLogits> {
        y.check_same_shape(&self.ventricle, "oracle segmenter")?;
        let to_logits = |m: &Raster| m.map(|v| if v != 0.0 { ORACLE_LOGIT } else { -ORACLE_LOGIT });
        Ok(RegionLogits {
            ventricle_logits: to_logits(&self.ventricle),
            septum_logits: to_logits(&self.septum),
        })
    }
}

/// Learned segmenter wrapping the compact encoder-decoder.
#[derive(Debug, Clone)]
pub struct NetSegmenter {
    pub net: SegNet,
}

impl RegionSegmenter for NetSegmenter {
    fn segment(&self, y: &Raster) -> Result<RegionLogits> {
        let (h, w) = y.shape();
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Param(format!(
                "segmenter needs dimensions divisible by 4, got {h}x{w}"
            )));
        }
        let x = Tensor::from_vec(1, 1, h, w, y.as_slice().to_vec())?;
        let out = self.net.predict_logits(&x);
        let plane = h * w;
        let ventricle_logits = Raster::from_vec(h, w, out.data[..plane].to_vec()).unwrap();
        let septum_logits = Raster::from_vec(h, w, out.data[plane..2 * plane].to_vec()).unwrap();
        Ok(RegionLogits { ventricle_logits, septum_logits })
    }
}

/// Run a segmenter and enforce its output contract (shape, finiteness).
pub fn segment_regions(y: &Raster, model: &dyn RegionSegmenter) -> Result<RegionLogits> {
    if !y.as_slice().iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::Param("input image must lie in [0,1]".into()));
    }
    let logits = model.segment(y)?;
    logits.ventricle_logits.check_same_shape(y, "ventricle logits")?;
    logits.septum_logits.check_same_shape(y, "septum logits")?;
    if !logits.ventricle_logits.is_finite() || !logits.septum_logits.is_finite() {
        return Err(Error::Numerical("segmenter produced non-finite logits".into()));
    }
    Ok(logits)
}

/// `logits > theta` as a 0/1 raster.
pub fn binarize(logits: &Raster, theta: f32) -> Raster {
    logits.map(|v| if v > theta { 1.0 } else { 0.0 })
}

/// Threshold then Gaussian-blur. With `sigma_blur` = 0 this is the pure
/// indicator function.
pub fn threshold_and_blur(logits: &Raster, theta: f32, sigma_blur: f32) -> Raster {
    gaussian_blur(&binarize(logits, theta), sigma_blur)
}

/// Otsu's threshold over a 256-bin histogram of [0,1] intensities. Pixels
/// strictly above the returned value are foreground; on a constant image the
/// argmax degenerates and everything brighter than the first bin is kept.
pub fn otsu_threshold(y: &Raster) -> f32 {
    let mut hist = [0u64; 256];
    for &v in y.as_slice() {
        let b = ((v.clamp(0.0, 1.0) * 256.0) as usize).min(255);
        hist[b] += 1;
    }
    let total = y.len() as f64;
    let grand_mean: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum::<f64>() / total;
    let mut best = (0usize, -1.0f64);
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    for k in 0..255 {
        w0 += hist[k] as f64 / total;
        sum0 += k as f64 * hist[k] as f64 / total;
        let w1 = 1.0 - w0;
        if w0 <= 0.0 || w1 <= 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (grand_mean - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best.1 {
            best = (k, between);
        }
    }
    (best.0 as f32 + 1.0) / 256.0
}

/// Background = not inside any binary structure mask; dark = `y` below
/// [`DARK_THRESHOLD`].
pub fn classify_pixels(
    y: &Raster,
    v_bin: &Raster,
    s_bin: &Raster,
    skeleton: &Raster,
) -> Result<(Raster, Raster)> {
    for (m, what) in [(v_bin, "ventricle"), (s_bin, "septum"), (skeleton, "skeleton")] {
        y.check_same_shape(m, what)?;
    }
    let mut background = Raster::zeros(y.height(), y.width());
    let mut dark = Raster::zeros(y.height(), y.width());
    for i in 0..y.len() {
        let free = v_bin.as_slice()[i] == 0.0
            && s_bin.as_slice()[i] == 0.0
            && skeleton.as_slice()[i] == 0.0;
        background.as_mut_slice()[i] = free as u8 as f32;
        dark.as_mut_slice()[i] = (y.as_slice()[i] < DARK_THRESHOLD) as u8 as f32;
    }
    Ok((background, dark))
}

/// Label the 8-connected nonzero components of a raster; returns per-pixel
/// labels (0 = background, components numbered from 1) and the count.
pub fn label_components_8(mask: &Raster) -> (Vec<u32>, usize) {
    let (h, w) = mask.shape();
    let mut labels = vec![0u32; h * w];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if labels[start] != 0 || mask.as_slice()[start] == 0.0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if labels[j] == 0 && mask.as_slice()[j] != 0.0 {
                        labels[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// Areas of the 8-connected components, in discovery order.
pub fn component_areas_8(mask: &Raster) -> Vec<usize> {
    let (labels, count) = label_components_8(mask);
    let mut areas = vec![0usize; count];
    for &l in &labels {
        if l > 0 {
            areas[l as usize - 1] += 1;
        }
    }
    areas
}

/// True when removing skeleton pixels from the binary ventricle leaves at
/// least two components each covering >= 1% of the ventricle area.
fn ventricle_is_split(ventricle_bin: &Raster, skeleton: &Raster) -> Result<bool> {
    let area = ventricle_bin.count_nonzero();
    if area == 0 {
        return Ok(false);
    }
    let residual = ventricle_bin
        .zip_map(skeleton, |v, t| if v != 0.0 && t == 0.0 { 1.0 } else { 0.0 })?;
    let floor = area as f64 * 0.01;
    let big = component_areas_8(&residual)
        .into_iter()
        .filter(|&a| a as f64 >= floor)
        .count();
    Ok(big >= 2)
}

/// Full mask stack for one hazy image from precomputed logits.
pub fn build_mask_bundle(
    y: &Raster,
    logits: &RegionLogits,
    weights: &SegWeights,
    fixed_top: usize,
    fixed_bottom: usize,
) -> Result<MaskBundle> {
    weights.validate()?;
    logits.ventricle_logits.check_same_shape(y, "ventricle logits")?;
    logits.septum_logits.check_same_shape(y, "septum logits")?;
    let ventricle_bin = binarize(&logits.ventricle_logits, weights.theta);
    let septum_bin = binarize(&logits.septum_logits, weights.theta);
    let ventricle = gaussian_blur(&ventricle_bin, weights.sigma_blur);
    let septum = gaussian_blur(&septum_bin, weights.sigma_blur);
    let skeleton = skeletonize(&binarize(y, otsu_threshold(y)))?;
    let (background, dark) = classify_pixels(y, &ventricle_bin, &septum_bin, &skeleton)?;
    Ok(MaskBundle {
        ventricle,
        septum,
        ventricle_bin,
        septum_bin,
        skeleton,
        background,
        dark,
        fixed_top,
        fixed_bottom,
    })
}

/// Evaluate the precision formula `w·b + w_v_eff·v + w_s·(s + t + d)` over a
/// bundle. Fixed top/bottom rows are excluded from the data term entirely
/// (the sampler copies the measurement through them).
pub fn compose_guidance(bundle: MaskBundle, weights: &SegWeights) -> Result<GuidanceMap> {
    weights.validate()?;
    let shape_ref = &bundle.background;
    for (r, what) in [
        (&bundle.ventricle, "ventricle"),
        (&bundle.septum, "septum"),
        (&bundle.ventricle_bin, "ventricle_bin"),
        (&bundle.septum_bin, "septum_bin"),
        (&bundle.skeleton, "skeleton"),
        (&bundle.dark, "dark"),
    ] {
        shape_ref.check_same_shape(r, what)?;
    }
    let (h, w) = shape_ref.shape();
    if bundle.fixed_top + bundle.fixed_bottom > h {
        return Err(Error::Param(format!(
            "fixed bands ({} + {}) exceed image height {h}",
            bundle.fixed_top, bundle.fixed_bottom
        )));
    }
    let effective_omega_v = if ventricle_is_split(&bundle.ventricle_bin, &bundle.skeleton)? {
        0.0
    } else {
        weights.omega_v
    };
    let mut precision = Raster::zeros(h, w);
    for y in 0..h {
        let banded = y < bundle.fixed_top || y >= h - bundle.fixed_bottom;
        for x in 0..w {
            if banded {
                continue;
            }
            let structure =
                bundle.septum.get(y, x) + bundle.skeleton.get(y, x) + bundle.dark.get(y, x);
            let p = weights.omega * bundle.background.get(y, x)
                + effective_omega_v * bundle.ventricle.get(y, x)
                + weights.omega_s * structure;
            precision.set(y, x, p);
        }
    }
    Ok(GuidanceMap { precision, bundle, effective_omega_v })
}

/// One-call pipeline: segment, bundle, compose.
pub fn build_guidance(
    y: &Raster,
    model: &dyn RegionSegmenter,
    weights: &SegWeights,
    fixed_top: usize,
    fixed_bottom: usize,
) -> Result<GuidanceMap> {
    let logits = segment_regions(y, model)?;
    let bundle = build_mask_bundle(y, &logits, weights, fixed_top, fixed_bottom)?;
    compose_guidance(bundle, weights)
}
