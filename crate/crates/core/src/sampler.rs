//! Guided deterministic dehazing. Each step estimates the clean image from
//! the current state, pulls that estimate toward the measurement under the
//! per-pixel precision map, penalizes bright ventricle pixels with a
//! smoothed L1, re-imposes any fixed rows, then moves to the next noise
//! level reusing the step's noise prediction. With zero guidance the loop
//! reduces bitwise to unconditional sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{
    estimate_x0_values, fill_standard_normal, renoise_values, tau_grid, Denoiser, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId, Tensor};
use crate::raster::Raster;
use crate::segmentation::GuidanceMap;

/// Minimum signal level before the clean-image estimate is considered
/// ill-conditioned.
pub const ALPHA_GUARD: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    /// Differentiate the guidance terms through the denoiser (default).
    ThroughDenoiser,
    /// Treat the clean estimate as the free variable (cheap approximation;
    /// also the mode that makes guidance testable without any network).
    AtEstimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub steps: usize,
    /// Ventricle-penalty scale.
    pub eta: f32,
    /// Smoothed-L1 transition point.
    pub beta: f32,
    pub fixed_top: usize,
    pub fixed_bottom: usize,
    pub gradient_mode: GradientMode,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            steps: 480,
            eta: 0.007,
            beta: 1.6,
            fixed_top: 0,
            fixed_bottom: 0,
            gradient_mode: GradientMode::ThroughDenoiser,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Param("steps must be >= 1".into()));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::Param("eta must be finite and >= 0".into()));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Param("beta must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// Per-step record: loss-term values at the uncorrected estimate and the
/// norm of the correction actually applied.
#[derive(Debug, Clone)]
pub struct StepStat {
    pub step: usize,
    pub tau: f32,
    pub fidelity: f64,
    pub penalty: f64,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone)]
pub struct DehazeResult {
    pub dehazed: Raster,
    /// y - dehazed, computed (never sampled), so the decomposition identity
    /// holds bitwise.
    pub haze: Raster,
    pub guidance: GuidanceMap,
    pub trajectory_stats: Vec<StepStat>,
}

/// Denoiser with a known per-pixel Gaussian prior N(mu0, sigma0^2). Its
/// optimal noise prediction and every posterior quantity have closed forms,
/// which makes it the oracle for sampler correctness tests.
pub struct AnalyticPrior {
    pub mu0: Raster,
    pub sigma0: f32,
    schedule: Box<dyn NoiseSchedule>,
}

impl AnalyticPrior {
    pub fn new(mu0: Raster, sigma0: f32, schedule: impl NoiseSchedule + 'static) -> Result<Self> {
        if !(sigma0.is_finite() && sigma0 > 0.0) {
            return Err(Error::Param("sigma0 must be finite and > 0".into()));
        }
        Ok(AnalyticPrior { mu0, sigma0, schedule: Box::new(schedule) })
    }

    /// Marginal std of x_tau = alpha*x0 + sigma*eps under the prior, squared.
    fn s2(&self, tau: f32) -> f32 {
        let a = self.schedule.alpha(tau);
        let s = self.schedule.sigma(tau);
        a * a * self.sigma0 * self.sigma0 + s * s
    }

    /// E[x0 | x_tau]: the conditional-Gaussian mean.
    pub fn posterior_mean_given_state(&self, x: &Raster, tau: f32) -> Result<Raster> {
        x.check_same_shape(&self.mu0, "analytic prior state")?;
        let a = self.schedule.alpha(tau);
        let gain = a * self.sigma0 * self.sigma0 / self.s2(tau);
        x.zip_map(&self.mu0, |xv, m| m + gain * (xv - a * m))
    }

    /// Conjugate posterior mean for measurement y observed with per-pixel
    /// precision p: (p*y + mu0/sigma0^2) / (p + 1/sigma0^2).
    pub fn conjugate_posterior_mean(&self, y: &Raster, precision: &Raster) -> Result<Raster> {
        y.check_same_shape(&self.mu0, "analytic prior measurement")?;
        y.check_same_shape(precision, "precision")?;
        let lam0 = 1.0 / (self.sigma0 * self.sigma0);
        let mut out = Raster::zeros(y.height(), y.width());
        for i in 0..y.len() {
            let p = precision.as_slice()[i];
            let num = p * y.as_slice()[i] + lam0 * self.mu0.as_slice()[i];
            out.as_mut_slice()[i] = num / (p + lam0);
        }
        Ok(out)
    }
}

impl Denoiser for AnalyticPrior {
    fn forward_graph(&self, g: &mut Graph, x: NodeId, taus: &[f32]) -> NodeId {
        // eps = (x - alpha*mu0) * sigma / s^2, with per-sample coefficients
        // broadcast over the spatial plane
        let n = taus.len();
        let mut c_x = Vec::with_capacity(n);
        let mut c_mu = Vec::with_capacity(n);
        for &tau in taus {
            let a = self.schedule.alpha(tau);
            let s = self.schedule.sigma(tau);
            let s2 = self.s2(tau);
            c_x.push(s / s2);
            c_mu.push(a * s / s2);
        }
        let cx = g.leaf(Tensor::from_vec(n, 1, 1, 1, c_x).unwrap());
        let cmu = g.leaf(Tensor::from_vec(n, 1, 1, 1, c_mu).unwrap());
        let (h, w) = self.mu0.shape();
        let mu = g.leaf(Tensor::from_vec(1, 1, h, w, self.mu0.as_slice().to_vec()).unwrap());
        let xs = g.mul(x, cx);
        let ms = g.mul(mu, cmu);
        g.sub(xs, ms)
    }
}

fn smooth_l1(r: f32, beta: f32) -> f32 {
    if r.abs() < beta {
        r * r / (2.0 * beta)
    } else {
        r.abs() - beta / 2.0
    }
}

fn smooth_l1_grad(r: f32, beta: f32) -> f32 {
    if r.abs() < beta {
        r / beta
    } else {
        r.signum()
    }
}

fn to_tensor(r: &Raster) -> Tensor {
    Tensor::from_vec(1, 1, r.height(), r.width(), r.as_slice().to_vec()).unwrap()
}

/// Clean-image estimate from the current state: (x_tau - sigma*eps) / alpha.
pub fn estimate_x0(
    x_tau: &Raster,
    tau: f32,
    denoiser: &dyn Denoiser,
    schedule: &dyn NoiseSchedule,
) -> Result<Raster> {
    if !(tau > 0.0 && tau <= schedule.horizon()) {
        return Err(Error::Param(format!("tau {tau} outside (0, {}]", schedule.horizon())));
    }
    let alpha = schedule.alpha(tau);
    if alpha < ALPHA_GUARD {
        return Err(Error::Numerical(format!("alpha {alpha} below guard at tau {tau}")));
    }
    let sigma = schedule.sigma(tau);
    let eps = denoiser.predict(&to_tensor(x_tau), &[tau]);
    if !eps.data.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite denoiser output at tau {tau}")));
    }
    let x0 = estimate_x0_values(x_tau.as_slice(), &eps.data, alpha, sigma);
    Raster::from_vec(x_tau.height(), x_tau.width(), x0)
}

/// Raw guidance gradients plus the term values they came from.
struct GuidanceEval {
    fidelity_grad: Vec<f32>,
    penalty_grad: Vec<f32>,
    fidelity_value: f64,
    penalty_value: f64,
}

fn eval_guidance(
    x_tau: &Raster,
    x0_vals: &[f32],
    y: &Raster,
    precision: &Raster,
    v_mask: &Raster,
    tau: f32,
    denoiser: &dyn Denoiser,
    schedule: &dyn NoiseSchedule,
    config: &GuidanceConfig,
) -> Result<GuidanceEval> {
    let n = x_tau.len();
    let terms_at = |x0: &[f32]| -> (Vec<f32>, Vec<f32>, f64, f64) {
        // cotangents of the fidelity and penalty terms with respect to x0
        let mut d_fid = vec![0.0f32; n];
        let mut d_pen = vec![0.0f32; n];
        let (mut fid, mut pen) = (0.0f64, 0.0f64);
        for i in 0..n {
            let r = x0[i] - y.as_slice()[i];
            let p = precision.as_slice()[i];
            d_fid[i] = p * r;
            fid += 0.5 * (p as f64) * (r as f64) * (r as f64);
            let v = v_mask.as_slice()[i];
            d_pen[i] = v * smooth_l1_grad(x0[i], config.beta);
            pen += (v as f64) * smooth_l1(x0[i], config.beta) as f64;
        }
        (d_fid, d_pen, fid, pen)
    };

    let (fidelity_grad, penalty_grad, fidelity_value, penalty_value) = match config.gradient_mode {
        GradientMode::AtEstimate => {
            let (d_fid, d_pen, fid, pen) = terms_at(x0_vals);
            (d_fid, d_pen, fid, pen)
        }
        GradientMode::ThroughDenoiser => {
            let alpha = schedule.alpha(tau);
            if alpha < ALPHA_GUARD {
                return Err(Error::Numerical(format!("alpha {alpha} below guard at tau {tau}")));
            }
            let sigma = schedule.sigma(tau);
            let mut g = Graph::new();
            let xid = g.leaf(to_tensor(x_tau));
            let eps = denoiser.forward_graph(&mut g, xid, &[tau]);
            let scaled = g.mul_scalar(eps, sigma);
            let diff = g.sub(xid, scaled);
            let x0_id = g.mul_scalar(diff, 1.0 / alpha);
            let x0_graph = g.value(x0_id).data.clone();
            if !x0_graph.iter().all(|v| v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite estimate at tau {tau}")));
            }
            let (d_fid, d_pen, fid, pen) = terms_at(&x0_graph);
            let pull = |seed: &[f32]| -> Vec<f32> {
                let grads = g.backward(x0_id, Some(seed));
                grads.get(xid).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; n])
            };
            (pull(&d_fid), pull(&d_pen), fid, pen)
        }
    };

    for v in fidelity_grad.iter().chain(&penalty_grad) {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("non-finite guidance gradient at tau {tau}")));
        }
    }
    Ok(GuidanceEval { fidelity_grad, penalty_grad, fidelity_value, penalty_value })
}

/// Gradients of the weighted data-fidelity term and the ventricle darkness
/// penalty with respect to the sampler state (or the estimate itself in
/// at-estimate mode). Returned unscaled; the step applies its own tempering.
#[allow(clippy::too_many_arguments)]
pub fn guidance_terms(
    x_tau: &Raster,
    x0_hat: &Raster,
    y: &Raster,
    guidance: &GuidanceMap,
    v_mask: &Raster,
    tau: f32,
    denoiser: &dyn Denoiser,
    schedule: &dyn NoiseSchedule,
    config: &GuidanceConfig,
) -> Result<(Raster, Raster)> {
    config.validate()?;
    for (r, what) in [(x0_hat, "estimate"), (y, "measurement"), (&guidance.precision, "precision"), (v_mask, "ventricle mask")] {
        x_tau.check_same_shape(r, what)?;
    }
    let eval = eval_guidance(
        x_tau,
        x0_hat.as_slice(),
        y,
        &guidance.precision,
        v_mask,
        tau,
        denoiser,
        schedule,
        config,
    )?;
    let (h, w) = x_tau.shape();
    Ok((
        Raster::from_vec(h, w, eval.fidelity_grad)?,
        Raster::from_vec(h, w, eval.penalty_grad)?,
    ))
}

/// Diagnostics for one guided step.
#[derive(Debug, Clone, Copy)]
pub struct StepDiagnostics {
    pub fidelity: f64,
    pub penalty: f64,
    pub gradient_norm: f64,
}

/// Copy measurement rows through the configured fixed bands.
fn overwrite_fixed_bands(x0: &mut [f32], y: &Raster, top: usize, bottom: usize) {
    let (h, w) = y.shape();
    for row in 0..top.min(h) {
        x0[row * w..(row + 1) * w].copy_from_slice(&y.as_slice()[row * w..(row + 1) * w]);
    }
    for row in h.saturating_sub(bottom)..h {
        x0[row * w..(row + 1) * w].copy_from_slice(&y.as_slice()[row * w..(row + 1) * w]);
    }
}

/// One guided refinement step from noise level tau down to tau_next.
///
/// The correction subtracted from the clean estimate is the fidelity
/// gradient scaled per pixel by s/(1 + s*p_i) and the penalty gradient
/// scaled by eta * s/(1 + s), where s = (sigma_tau^2 - sigma_next^2) /
/// (2*alpha_tau^2) is the step's natural guidance scale (the net effect of
/// carrying the measurement score through one deterministic step). The
/// saturation keeps every per-step gain below one, so arbitrarily large
/// precisions stay stable instead of overshooting.
#[allow(clippy::too_many_arguments)]
pub fn dps_step(
    x_tau: &Raster,
    tau: f32,
    tau_next: f32,
    y: &Raster,
    guidance: &GuidanceMap,
    v_mask: &Raster,
    denoiser: &dyn Denoiser,
    schedule: &dyn NoiseSchedule,
    config: &GuidanceConfig,
) -> Result<(Raster, StepDiagnostics)> {
    config.validate()?;
    if !(tau_next >= 0.0 && tau_next < tau && tau <= schedule.horizon()) {
        return Err(Error::Param(format!(
            "need 0 <= tau_next < tau <= {}, got tau {tau}, tau_next {tau_next}",
            schedule.horizon()
        )));
    }
    for (r, what) in [(y, "measurement"), (&guidance.precision, "precision"), (v_mask, "ventricle mask")] {
        x_tau.check_same_shape(r, what)?;
    }
    let (h, w) = x_tau.shape();
    if config.fixed_top + config.fixed_bottom > h {
        return Err(Error::Param("fixed bands exceed image height".into()));
    }
    let alpha = schedule.alpha(tau);
    if alpha < ALPHA_GUARD {
        return Err(Error::Numerical(format!("alpha {alpha} below guard at tau {tau}")));
    }
    let sigma = schedule.sigma(tau);
    let (alpha_next, sigma_next) = (schedule.alpha(tau_next), schedule.sigma(tau_next));

    let eps = denoiser.predict(&to_tensor(x_tau), &[tau]);
    if !eps.data.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite denoiser output at tau {tau}")));
    }
    let mut x0 = estimate_x0_values(x_tau.as_slice(), &eps.data, alpha, sigma);

    let unguided = config.eta == 0.0 && guidance.precision.as_slice().iter().all(|&p| p == 0.0);
    let mut diag = StepDiagnostics { fidelity: 0.0, penalty: 0.0, gradient_norm: 0.0 };
    if !unguided {
        let eval = eval_guidance(
            x_tau,
            &x0,
            y,
            &guidance.precision,
            v_mask,
            tau,
            denoiser,
            schedule,
            config,
        )?;
        let s_raw = ((sigma as f64).powi(2) - (sigma_next as f64).powi(2))
            / (2.0 * (alpha as f64).powi(2));
        let s_pen = (s_raw / (1.0 + s_raw)) as f32;
        let mut norm2 = 0.0f64;
        for i in 0..x0.len() {
            let p = guidance.precision.as_slice()[i] as f64;
            let s_fid = (s_raw / (1.0 + s_raw * p)) as f32;
            let correction =
                s_fid * eval.fidelity_grad[i] + config.eta * s_pen * eval.penalty_grad[i];
            x0[i] -= correction;
            norm2 += (correction as f64) * (correction as f64);
        }
        diag = StepDiagnostics {
            fidelity: eval.fidelity_value,
            penalty: eval.penalty_value,
            gradient_norm: norm2.sqrt(),
        };
    }

    overwrite_fixed_bands(&mut x0, y, config.fixed_top, config.fixed_bottom);

    let next = if tau_next == 0.0 {
        x0
    } else {
        renoise_values(&x0, &eps.data, alpha_next, sigma_next)
    };
    if !next.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite state leaving tau {tau}")));
    }
    Ok((Raster::from_vec(h, w, next)?, diag))
}

/// Full guided run: start from seeded Gaussian noise, walk the descending
/// uniform noise grid to zero, and return the decomposition. Stream 0 of the
/// seed supplies the initial noise, matching unconditional sample 0.
#[allow(clippy::too_many_arguments)]
pub fn dehaze(
    y: &Raster,
    guidance: &GuidanceMap,
    v_mask: &Raster,
    denoiser: &dyn Denoiser,
    schedule: &dyn NoiseSchedule,
    config: &GuidanceConfig,
    seed: u64,
) -> Result<DehazeResult> {
    config.validate()?;
    if !y.as_slice().iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::Param("measurement must lie in [0,1]".into()));
    }
    y.check_same_shape(&guidance.precision, "precision")?;
    y.check_same_shape(v_mask, "ventricle mask")?;

    let (h, w) = y.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let mut x_t = Tensor::zeros(1, 1, h, w);
    fill_standard_normal(&mut rng, &mut x_t);
    let mut x = Raster::from_vec(h, w, x_t.data)?;

    let grid = tau_grid(schedule, config.steps);
    let mut trajectory_stats = Vec::with_capacity(config.steps);
    for (k, win) in grid.windows(2).enumerate() {
        let (stepped, diag) =
            dps_step(&x, win[0], win[1], y, guidance, v_mask, denoiser, schedule, config)
                .map_err(|e| Error::Numerical(format!("step {k}: {e}")))?;
        x = stepped;
        trajectory_stats.push(StepStat {
            step: k,
            tau: win[0],
            fidelity: diag.fidelity,
            penalty: diag.penalty,
            gradient_norm: diag.gradient_norm,
        });
    }

    let haze = y.zip_map(&x, |yv, xv| yv - xv)?;
    Ok(DehazeResult { dehazed: x, haze, guidance: guidance.clone(), trajectory_stats })
}
