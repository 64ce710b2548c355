//! Synthetic cardiac-like phantoms: a dark elliptical ventricle cavity and a
//! bright curved septum band embedded in speckled tissue, plus a smooth haze
//! field concentrated in and above the cavity. Every other module trains and
//! verifies against these at desk scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::raster::{gaussian_blur, mean_var, Raster};

/// Ellipse in normalized [0,1]^2 coordinates (y down, x right).
#[derive(Debug, Clone, PartialEq)]
pub struct EllipseSpec {
    pub center: (f32, f32),
    /// Semi-axes before rotation, as fractions of the unit square.
    pub axes: (f32, f32),
    /// Radians, counterclockwise.
    pub rotation: f32,
}

/// Curved band: all points within `thickness / 2` of the control polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct BandSpec {
    pub polyline: Vec<(f32, f32)>,
    pub thickness: f32,
}

/// Haze sigma field: `base_sigma` at the blob peak, falling off with
/// `decay`, never below 10% of base anywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct HazeSpec {
    pub base_sigma: f32,
    pub decay: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub ventricle: EllipseSpec,
    pub septum: BandSpec,
    pub tissue_brightness: f32,
    pub speckle_strength: f32,
    pub haze: HazeSpec,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            height: 128,
            width: 128,
            ventricle: EllipseSpec {
                center: (0.42, 0.52),
                axes: (0.13, 0.19),
                rotation: 0.35,
            },
            septum: BandSpec {
                polyline: vec![(0.82, 0.18), (0.55, 0.22), (0.28, 0.20), (0.10, 0.32)],
                thickness: 0.07,
            },
            tissue_brightness: 0.8,
            speckle_strength: 0.35,
            haze: HazeSpec { base_sigma: 0.22, decay: 9.0 },
            seed: 0,
        }
    }
}

/// Ventricle interior level: near-anechoic but nonzero so the dark-pixel
/// classifier keys on true zeros only.
pub const VENTRICLE_LEVEL: f32 = 0.02;
/// Tissue sits at this fraction of the septum brightness.
pub const TISSUE_FRACTION: f32 = 0.6;
const SIGMA_FLOOR: f32 = 0.1;

#[derive(Debug, Clone)]
pub struct PhantomSample {
    pub clean: Raster,
    pub hazy: Raster,
    pub ventricle_mask: Raster,
    pub septum_mask: Raster,
    pub true_haze: Raster,
    pub true_sigma: Raster,
}

fn validate(spec: &PhantomSpec) -> Result<()> {
    if spec.height < 32 || spec.width < 32 {
        return Err(Error::Param(format!(
            "image must be at least 32x32 (got {}x{})",
            spec.height, spec.width
        )));
    }
    let (ay, ax) = spec.ventricle.axes;
    if ay <= 0.0 || ax <= 0.0 {
        return Err(Error::Param("ventricle axes must be positive".into()));
    }
    if spec.septum.thickness <= 0.0 {
        return Err(Error::Param("septum thickness must be positive".into()));
    }
    if spec.septum.polyline.len() < 2 {
        return Err(Error::Param("septum polyline needs at least 2 points".into()));
    }
    let inside = |&(y, x): &(f32, f32)| (0.0..=1.0).contains(&y) && (0.0..=1.0).contains(&x);
    if !inside(&spec.ventricle.center) || !spec.septum.polyline.iter().all(inside) {
        return Err(Error::Param("geometry control points must lie in the unit square".into()));
    }
    if !(0.0..=1.0).contains(&spec.tissue_brightness) {
        return Err(Error::Param("tissue_brightness must lie in [0,1]".into()));
    }
    if spec.speckle_strength < 0.0 {
        return Err(Error::Param("speckle_strength must be >= 0".into()));
    }
    if spec.haze.base_sigma < 0.0 || spec.haze.decay <= 0.0 {
        return Err(Error::Param("haze base_sigma must be >= 0 and decay > 0".into()));
    }
    Ok(())
}

fn rasterize_ellipse(e: &EllipseSpec, h: usize, w: usize) -> Raster {
    let (cy, cx) = e.center;
    let (ay, ax) = e.axes;
    let (sin, cos) = e.rotation.sin_cos();
    Raster::from_fn(h, w, |y, x| {
        let ny = (y as f32 + 0.5) / h as f32 - cy;
        let nx = (x as f32 + 0.5) / w as f32 - cx;
        let ry = cos * ny + sin * nx;
        let rx = -sin * ny + cos * nx;
        if (ry / ay).powi(2) + (rx / ax).powi(2) <= 1.0 {
            1.0
        } else {
            0.0
        }
    })
}

fn dist_to_segment(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (py, px) = p;
    let (ay, ax) = a;
    let (by, bx) = b;
    let (dy, dx) = (by - ay, bx - ax);
    let len2 = dy * dy + dx * dx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((py - ay) * dy + (px - ax) * dx) / len2).clamp(0.0, 1.0)
    };
    let (qy, qx) = (ay + t * dy, ax + t * dx);
    ((py - qy).powi(2) + (px - qx).powi(2)).sqrt()
}

fn rasterize_band(band: &BandSpec, h: usize, w: usize) -> Raster {
    let half = band.thickness / 2.0;
    Raster::from_fn(h, w, |y, x| {
        let p = ((y as f32 + 0.5) / h as f32, (x as f32 + 0.5) / w as f32);
        let d = band
            .polyline
            .windows(2)
            .map(|seg| dist_to_segment(p, seg[0], seg[1]))
            .fold(f32::INFINITY, f32::min);
        if d <= half {
            1.0
        } else {
            0.0
        }
    })
}

/// Unit-variance smooth noise: blur an iid normal field and rescale to
/// empirical variance one.
fn smooth_unit_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Raster {
    let mut base = Raster::zeros(h, w);
    for v in base.as_mut_slice() {
        *v = StandardNormal.sample(rng);
    }
    let blurred = gaussian_blur(&base, 1.5);
    let (_, var) = mean_var(blurred.as_slice());
    let scale = if var > 0.0 { 1.0 / (var.sqrt() as f32) } else { 1.0 };
    blurred.map(|v| v * scale)
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomSample> {
    validate(spec)?;
    let (h, w) = (spec.height, spec.width);
    let ventricle_mask = rasterize_ellipse(&spec.ventricle, h, w);
    let mut septum_mask = rasterize_band(&spec.septum, h, w);
    // carve the cavity out of the band so the regions stay disjoint
    for (s, &v) in septum_mask.as_mut_slice().iter_mut().zip(ventricle_mask.as_slice()) {
        if v != 0.0 {
            *s = 0.0;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // draw order: speckle field first, then haze noise
    let speckle = smooth_unit_field(&mut rng, h, w);
    let mut haze_noise = Raster::zeros(h, w);
    for v in haze_noise.as_mut_slice() {
        *v = StandardNormal.sample(&mut rng);
    }

    let tissue_level = TISSUE_FRACTION * spec.tissue_brightness;
    let s = spec.speckle_strength;
    let mut clean = Raster::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let value = if ventricle_mask.get(y, x) != 0.0 {
                VENTRICLE_LEVEL
            } else if septum_mask.get(y, x) != 0.0 {
                spec.tissue_brightness
            } else {
                // mean-preserving multiplicative log-normal speckle
                tissue_level * (s * speckle.get(y, x) - 0.5 * s * s).exp()
            };
            clean.set(y, x, value.clamp(0.0, 1.0));
        }
    }

    let true_sigma = sigma_field(spec, h, w);
    let true_haze = true_sigma.zip_map(&haze_noise, |sg, n| sg * n)?;
    let hazy = clean.zip_map(&true_haze, |c, hz| (c + hz).clamp(0.0, 1.0))?;

    Ok(PhantomSample { clean, hazy, ventricle_mask, septum_mask, true_haze, true_sigma })
}

/// Smooth blob peaking inside and above the ventricle, floored at 10% of the
/// base level so haze is present everywhere.
fn sigma_field(spec: &PhantomSpec, h: usize, w: usize) -> Raster {
    let (cy, cx) = spec.ventricle.center;
    let peak = (cy - 0.12, cx);
    Raster::from_fn(h, w, |y, x| {
        let ny = (y as f32 + 0.5) / h as f32 - peak.0;
        let nx = (x as f32 + 0.5) / w as f32 - peak.1;
        let g = (-spec.haze.decay * (ny * ny + nx * nx)).exp();
        spec.haze.base_sigma * (SIGMA_FLOOR + (1.0 - SIGMA_FLOOR) * g)
    })
}

/// A dataset of varied phantoms. Sample `i` is a pure function of
/// (template, seed, i): geometry, brightness, and the per-sample noise seed
/// all come from dedicated rng stream `i`.
pub fn generate_dataset(
    template: &PhantomSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<PhantomSample>> {
    if count < 1 {
        return Err(Error::Param("count must be >= 1".into()));
    }
    validate(template)?;
    (0..count).map(|i| generate_phantom(&vary_spec(template, seed, i))).collect()
}

/// The documented variation ranges around a template: center jitter within
/// +-0.04, axes scaled by [0.8, 1.25], rotation jitter +-0.25 rad,
/// brightness in [0.65, 0.9], septum thickness scaled by [0.85, 1.2].
pub fn vary_spec(template: &PhantomSpec, seed: u64, index: usize) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut spec = template.clone();
    spec.ventricle.center.0 = (template.ventricle.center.0
        + rng.random_range(-0.04..0.04))
    .clamp(0.0, 1.0);
    spec.ventricle.center.1 = (template.ventricle.center.1
        + rng.random_range(-0.04..0.04))
    .clamp(0.0, 1.0);
    let scale = rng.random_range(0.8..1.25f32);
    spec.ventricle.axes.0 = template.ventricle.axes.0 * scale;
    spec.ventricle.axes.1 = template.ventricle.axes.1 * scale;
    spec.ventricle.rotation = template.ventricle.rotation + rng.random_range(-0.25..0.25);
    spec.tissue_brightness = rng.random_range(0.65..0.9);
    spec.septum.thickness = template.septum.thickness * rng.random_range(0.85..1.2);
    spec.seed = rng.random();
    spec
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PhantomSpec {
        PhantomSpec { height: 64, width: 64, ..PhantomSpec::default() }
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut s = small_spec();
        s.ventricle.axes = (0.0, 0.1);
        assert!(generate_phantom(&s).is_err());
        let mut s = small_spec();
        s.septum.thickness = -0.1;
        assert!(generate_phantom(&s).is_err());
        let mut s = small_spec();
        s.height = 16;
        assert!(generate_phantom(&s).is_err());
        let mut s = small_spec();
        s.ventricle.center = (1.4, 0.5);
        assert!(generate_phantom(&s).is_err());
    }

    #[test]
    fn zero_haze_means_hazy_equals_clean() {
        let mut s = small_spec();
        s.haze.base_sigma = 0.0;
        let p = generate_phantom(&s).unwrap();
        assert_eq!(p.hazy, p.clean);
        assert!(p.true_haze.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn septum_is_constant_brightness_without_speckle() {
        let mut s = small_spec();
        s.speckle_strength = 0.0;
        s.tissue_brightness = 0.8;
        let p = generate_phantom(&s).unwrap();
        let vals = p.clean.values_under(&p.septum_mask).unwrap();
        assert!(!vals.is_empty());
        assert!(vals.iter().all(|&v| v == 0.8));
        // and tissue sits at the documented fraction of that
        let tissue: Vec<f32> = p
            .clean
            .as_slice()
            .iter()
            .zip(p.ventricle_mask.as_slice())
            .zip(p.septum_mask.as_slice())
            .filter(|((_, &v), &sm)| v == 0.0 && sm == 0.0)
            .map(|((&c, _), _)| c)
            .collect();
        assert!(tissue.iter().all(|&v| (v - 0.48).abs() < 1e-6));
    }

    #[test]
    fn masks_are_binary_and_disjoint() {
        let p = generate_phantom(&small_spec()).unwrap();
        assert!(p.ventricle_mask.is_binary());
        assert!(p.septum_mask.is_binary());
        let overlap = p
            .ventricle_mask
            .as_slice()
            .iter()
            .zip(p.septum_mask.as_slice())
            .filter(|(&v, &s)| v != 0.0 && s != 0.0)
            .count();
        assert_eq!(overlap, 0);
        assert!(p.ventricle_mask.count_nonzero() > 0);
        assert!(p.septum_mask.count_nonzero() > 0);
    }

    #[test]
    fn generation_arithmetic_is_reproducible() {
        let s = small_spec();
        let a = generate_phantom(&s).unwrap();
        let b = generate_phantom(&s).unwrap();
        assert_eq!(a.clean, b.clean);
        assert_eq!(a.hazy, b.hazy);
        assert_eq!(a.true_haze, b.true_haze);
        // hazy really is clamp(clean + haze) bitwise
        let rebuilt = a.clean.zip_map(&a.true_haze, |c, hz| (c + hz).clamp(0.0, 1.0)).unwrap();
        assert_eq!(rebuilt, a.hazy);
    }

    #[test]
    fn haze_mean_is_near_zero() {
        let mut s = small_spec();
        s.seed = 7;
        let p = generate_phantom(&s).unwrap();
        let n = p.true_haze.len() as f64;
        let mean = p.true_haze.mean();
        let sigma_bar = p.true_sigma.mean();
        let bound = 3.0 * sigma_bar / n.sqrt();
        assert!(mean.abs() < bound, "mean {mean} vs bound {bound}");
    }

    #[test]
    fn values_stay_in_unit_range() {
        let p = generate_phantom(&small_spec()).unwrap();
        for r in [&p.clean, &p.hazy] {
            assert!(r.min() >= 0.0 && r.max() <= 1.0);
        }
    }

    #[test]
    fn dataset_is_reproducible_and_per_index_stable() {
        let t = small_spec();
        let a = generate_dataset(&t, 4, 99).unwrap();
        let b = generate_dataset(&t, 4, 99).unwrap();
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.hazy, y.hazy);
        }
        // prefix stability: sample i does not depend on count
        let c = generate_dataset(&t, 2, 99).unwrap();
        assert_eq!(c[1].hazy, a[1].hazy);
        // and different indices differ
        assert_ne!(a[0].hazy, a[1].hazy);
    }

    #[test]
    fn ventricle_area_stays_in_declared_range() {
        let t = small_spec();
        let samples = generate_dataset(&t, 64, 5).unwrap();
        let mut ok = 0;
        for p in &samples {
            let frac = p.ventricle_mask.count_nonzero() as f64 / p.ventricle_mask.len() as f64;
            if (0.02..=0.30).contains(&frac) {
                ok += 1;
            }
        }
        assert!(ok >= 60, "only {ok}/64 in range");
    }

    #[test]
    fn standardized_residuals_pass_ks_against_normal() {
        // pool unclamped residuals (= haze / sigma) across several phantoms
        let t = small_spec();
        let samples = generate_dataset(&t, 25, 3).unwrap();
        let mut pool: Vec<f32> = Vec::new();
        for p in &samples {
            for (&hz, &sg) in p.true_haze.as_slice().iter().zip(p.true_sigma.as_slice()) {
                pool.push(hz / sg);
            }
        }
        assert!(pool.len() >= 100_000);
        let d = ks_against_standard_normal(&pool);
        let crit = 1.628 / (pool.len() as f64).sqrt(); // alpha = 0.01
        assert!(d < crit, "ks {d} vs critical {crit}");
    }

    fn ks_against_standard_normal(sample: &[f32]) -> f64 {
        let mut xs: Vec<f32> = sample.to_vec();
        xs.sort_by(f32::total_cmp);
        let n = xs.len() as f64;
        let mut d = 0.0f64;
        for (i, &x) in xs.iter().enumerate() {
            let cdf = normal_cdf(x as f64);
            let lo = i as f64 / n;
            let hi = (i + 1) as f64 / n;
            d = d.max((cdf - lo).abs()).max((hi - cdf).abs());
        }
        d
    }

    /// Abramowitz-Stegun 7.1.26 erf approximation, |error| < 1.5e-7.
    fn normal_cdf(x: f64) -> f64 {
        let z = x / std::f64::consts::SQRT_2;
        0.5 * (1.0 + erf(z))
    }

    fn erf(x: f64) -> f64 {
        let sign = if x < 0.0 { -1.0 } else { 1.0 };
        let x = x.abs();
        let t = 1.0 / (1.0 + 0.327_591_1 * x);
        let y = 1.0
            - (((((1.061_405_429 * t - 1.453_152_027) * t) + 1.421_413_741) * t
                - 0.284_496_736)
                * t
                + 0.254_829_592)
                * t
                * (-x * x).exp();
        sign * y
    }
}
