//! Evaluation suite: region contrast (CNR, gCNR), distribution shift (KS),
//! batch-level perceptual fidelity (KID over the shared frozen embedder),
//! and the 5:3:2 weighted final score.
//!
//! Score composition: the denoising component averages normalized gCNR with
//! inverted-normalized KID, the structure component is inverted-normalized
//! septum KS, and the downstream component is a supplied constant (no
//! external segmentation model ships with this crate). All three are
//! clipped to [0,1] by the configured anchors before weighting.

use crate::diffusion::batch_to_tensor;
use crate::error::{Error, Result};
use crate::nn::embed::FeatureEmbedder;
use crate::raster::{mean_var, Raster};

pub const GCNR_BINS: usize = 100;
pub const SCORE_WEIGHTS: (f64, f64, f64) = (5.0, 3.0, 2.0);
/// Reported downstream score when no external evaluator is configured.
pub const NEUTRAL_DOWNSTREAM: f64 = 0.5;

/// Pixel samples for the two scored regions of one image.
#[derive(Debug, Clone)]
pub struct RoiPair {
    pub septum_pixels: Vec<f32>,
    pub ventricle_pixels: Vec<f32>,
}

impl RoiPair {
    pub fn new(septum_pixels: Vec<f32>, ventricle_pixels: Vec<f32>) -> Result<Self> {
        if septum_pixels.is_empty() || ventricle_pixels.is_empty() {
            return Err(Error::Param("roi regions must be non-empty".into()));
        }
        for v in septum_pixels.iter().chain(&ventricle_pixels) {
            if !v.is_finite() {
                return Err(Error::Numerical("roi pixels must be finite".into()));
            }
        }
        Ok(RoiPair { septum_pixels, ventricle_pixels })
    }

    /// Extracts the two regions from an image under binary masks.
    pub fn from_masks(image: &Raster, septum: &Raster, ventricle: &Raster) -> Result<Self> {
        if !septum.is_binary() || !ventricle.is_binary() {
            return Err(Error::Param("roi masks must be binary".into()));
        }
        RoiPair::new(image.values_under(septum)?, image.values_under(ventricle)?)
    }
}

/// Per-image metric row. `kid` is batch-level context copied into each row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub cnr: f64,
    pub gcnr: f64,
    pub ks_septum: f64,
    pub ks_ventricle: f64,
    pub kid: f64,
    pub final_score: f64,
}

/// Contrast-to-noise ratio |mu_s - mu_v| / sqrt(var_s + var_v) with
/// population variances.
pub fn cnr(roi: &RoiPair) -> Result<f64> {
    if roi.septum_pixels.len() < 2 || roi.ventricle_pixels.len() < 2 {
        return Err(Error::Param("cnr needs >= 2 pixels per region".into()));
    }
    let (mu_s, var_s) = mean_var(&roi.septum_pixels);
    let (mu_v, var_v) = mean_var(&roi.ventricle_pixels);
    let denom = var_s + var_v;
    if denom == 0.0 {
        return Err(Error::Numerical(
            "cnr undefined: both region variances are zero".into(),
        ));
    }
    Ok((mu_s - mu_v).abs() / denom.sqrt())
}

/// Generalized CNR: one minus the overlap of the two regions' histograms on
/// shared bins over [0,1].
pub fn gcnr(roi: &RoiPair, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::Param("gcnr needs >= 2 bins".into()));
    }
    let hist = |vals: &[f32]| -> Result<Vec<u64>> {
        let mut h = vec![0u64; bins];
        for &v in vals {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Param(format!("roi value {v} outside [0,1]")));
            }
            let k = ((v as f64 * bins as f64) as usize).min(bins - 1);
            h[k] += 1;
        }
        Ok(h)
    };
    let hs = hist(&roi.septum_pixels)?;
    let hv = hist(&roi.ventricle_pixels)?;
    // overlap on integer counts cross-scaled by the other region's size, so
    // identical regions give exactly 0 and disjoint supports exactly 1
    let (ns, nv) = (roi.septum_pixels.len() as u64, roi.ventricle_pixels.len() as u64);
    let num: u64 = hs.iter().zip(&hv).map(|(&a, &b)| (a * nv).min(b * ns)).sum();
    Ok(1.0 - num as f64 / (ns * nv) as f64)
}

/// Kolmogorov-Smirnov statistic: sup-norm distance between the empirical
/// CDFs of the two samples.
pub fn ks_statistic(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Param("ks needs non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("ks samples must be finite".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f32::total_cmp);
    sb.sort_by(f32::total_cmp);
    let (m, n) = (sa.len() as f64, sb.len() as f64);
    let mut d = 0.0f64;
    // the sup over x of |F_a - F_b| is attained just after a sample point
    for &x in sa.iter().chain(sb.iter()) {
        let fa = sa.partition_point(|&v| v <= x) as f64 / m;
        let fb = sb.partition_point(|&v| v <= x) as f64 / n;
        d = d.max((fa - fb).abs());
    }
    Ok(d)
}

/// Batch KID between two image sets under the supplied embedder, reported
/// on the conventional x1000 scale.
pub fn kid_score(
    set_a: &[Raster],
    set_b: &[Raster],
    embedder: &dyn FeatureEmbedder,
) -> Result<f64> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(Error::Param(format!(
            "kid needs >= 2 images per set (got {} and {})",
            set_a.len(),
            set_b.len()
        )));
    }
    let ta = batch_to_tensor(&set_a.iter().collect::<Vec<_>>())?;
    let tb = batch_to_tensor(&set_b.iter().collect::<Vec<_>>())?;
    let fa = embedder.embed(&ta);
    let fb = embedder.embed(&tb);
    Ok(crate::diffusion::kid_mmd2(&fa, &fb)? * 1000.0)
}

/// Clipping anchors mapping each raw metric onto [0,1] before weighting.
/// Identity anchors leave already-normalized metrics untouched.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreAnchors {
    /// Applied to gCNR (higher is better).
    pub contrast: (f64, f64),
    /// Applied to KID x1000 (lower is better; inverted after normalizing).
    pub kid: (f64, f64),
    /// Applied to septum KS (lower is better; inverted after normalizing).
    pub structure: (f64, f64),
}

impl Default for ScoreAnchors {
    fn default() -> Self {
        ScoreAnchors { contrast: (0.0, 1.0), kid: (0.0, 1.0), structure: (0.0, 1.0) }
    }
}

impl ScoreAnchors {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("contrast", self.contrast),
            ("kid", self.kid),
            ("structure", self.structure),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!(
                    "anchor {name}: need finite min < max, got ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }

    /// Clip to the anchor range, then map affinely onto [0,1].
    pub fn normalize(value: f64, anchor: (f64, f64)) -> f64 {
        let (lo, hi) = anchor;
        (value.clamp(lo, hi) - lo) / (hi - lo)
    }
}

/// Weighted mean of the three normalized components with weights 5:3:2.
/// A `None` component is a hard error rather than silently rescaling.
pub fn final_score(
    denoising: Option<f64>,
    structure: Option<f64>,
    downstream: Option<f64>,
) -> Result<f64> {
    let get = |name: &str, v: Option<f64>| -> Result<f64> {
        let v = v.ok_or_else(|| Error::Param(format!("missing score component {name}")))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Param(format!(
                "score component {name} = {v} outside [0,1]"
            )));
        }
        Ok(v)
    };
    let d = get("denoising", denoising)?;
    let s = get("structure", structure)?;
    let w = get("downstream", downstream)?;
    let (wd, ws, ww) = SCORE_WEIGHTS;
    Ok((wd * d + ws * s + ww * w) / (wd + ws + ww))
}

/// Full per-image evaluation. KS pairs each dehazed region with the
/// reference that defines success for it: the ventricle against the clean
/// image (noise removal) and the septum against the hazy input (structure
/// preservation). `kid` is the batch-level score for the containing set.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_image(
    dehazed: &Raster,
    clean: &Raster,
    hazy: &Raster,
    septum_mask: &Raster,
    ventricle_mask: &Raster,
    kid: f64,
    anchors: &ScoreAnchors,
    downstream: f64,
) -> Result<MetricReport> {
    anchors.validate()?;
    for (r, what) in [(clean, "clean"), (hazy, "hazy"), (septum_mask, "septum mask"), (ventricle_mask, "ventricle mask")] {
        dehazed.check_same_shape(r, what)?;
    }
    let roi = RoiPair::from_masks(dehazed, septum_mask, ventricle_mask)?;
    let cnr_v = cnr(&roi)?;
    let gcnr_v = gcnr(&roi, GCNR_BINS)?;
    let ks_septum = ks_statistic(
        &roi.septum_pixels,
        &hazy.values_under(septum_mask)?,
    )?;
    let ks_ventricle = ks_statistic(
        &roi.ventricle_pixels,
        &clean.values_under(ventricle_mask)?,
    )?;
    let contrast_good = ScoreAnchors::normalize(gcnr_v, anchors.contrast);
    let kid_good = 1.0 - ScoreAnchors::normalize(kid, anchors.kid);
    let structure_good = 1.0 - ScoreAnchors::normalize(ks_septum, anchors.structure);
    let score = final_score(
        Some(0.5 * (contrast_good + kid_good)),
        Some(structure_good),
        Some(downstream),
    )?;
    Ok(MetricReport {
        cnr: cnr_v,
        gcnr: gcnr_v,
        ks_septum,
        ks_ventricle,
        kid,
        final_score: score,
    })
}
