//! The clean-image diffusion prior: noise schedule, denoiser contract,
//! deterministic sampling, and training (see [`loss`] and [`train`]).

pub mod checkpoint;
pub mod loss;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId, Tensor};
use crate::nn::unet::UNet;
use crate::raster::Raster;

pub use loss::{dsm_draw, dsm_loss, kid_loss, kid_mmd2, total_loss};
pub use train::{train, StepLoss, TrainRecord};

/// Continuous-time noise schedule: `alpha` shrinks the signal, `sigma`
/// scales the injected noise, and the two stay variance-preserving.
pub trait NoiseSchedule: Sync {
    fn alpha(&self, tau: f32) -> f32;
    fn sigma(&self, tau: f32) -> f32;
    fn horizon(&self) -> f32;
    /// Stable identifier stored in checkpoints.
    fn name(&self) -> &'static str;
}

/// alpha = cos(pi tau / 2), sigma = sin(pi tau / 2) over tau in [0, 1].
#[derive(Debug, Clone, Copy, Default)]
pub struct CosineSchedule;

impl NoiseSchedule for CosineSchedule {
    fn alpha(&self, tau: f32) -> f32 {
        ((std::f64::consts::PI / 2.0) * tau as f64).cos() as f32
    }

    fn sigma(&self, tau: f32) -> f32 {
        ((std::f64::consts::PI / 2.0) * tau as f64).sin() as f32
    }

    fn horizon(&self) -> f32 {
        1.0
    }

    fn name(&self) -> &'static str {
        "vp-cosine"
    }
}

pub fn schedule_by_name(name: &str) -> Result<CosineSchedule> {
    match name {
        "vp-cosine" => Ok(CosineSchedule),
        other => Err(Error::Config(format!("unknown schedule '{other}'"))),
    }
}

/// Fraction of the horizon the sampler actually starts from; keeps alpha
/// bounded away from zero so the x0 estimate stays well conditioned.
pub const TAU_MAX_FRACTION: f64 = 1.0 - 1e-3;

/// Descending uniform grid of `steps + 1` nodes from just below the horizon
/// down to exactly 0.
pub fn tau_grid(schedule: &dyn NoiseSchedule, steps: usize) -> Vec<f32> {
    assert!(steps >= 1, "need at least one step");
    let top = schedule.horizon() as f64 * TAU_MAX_FRACTION;
    (0..=steps)
        .map(|k| (top * (steps - k) as f64 / steps as f64) as f32)
        .collect()
}

/// Noise predictor contract. `forward_graph` must build a differentiable
/// expression so guidance gradients can flow back to the input; `predict`
/// is the plain inference path. Implementations are shared read-only across
/// worker threads, hence `Sync`.
pub trait Denoiser: Sync {
    fn forward_graph(&self, g: &mut Graph, x: NodeId, taus: &[f32]) -> NodeId;

    fn predict(&self, x: &Tensor, taus: &[f32]) -> Tensor {
        let mut g = Graph::new();
        let id = g.leaf(x.clone());
        let out = self.forward_graph(&mut g, id, taus);
        g.value(out).clone()
    }
}

/// Borrowed view of a U-Net selecting live or EMA weights.
#[derive(Clone, Copy)]
pub struct UNetView<'a> {
    pub net: &'a UNet,
    pub use_ema: bool,
}

impl<'a> UNetView<'a> {
    pub fn live(net: &'a UNet) -> Self {
        UNetView { net, use_ema: false }
    }

    pub fn ema(net: &'a UNet) -> Self {
        UNetView { net, use_ema: true }
    }
}

impl Denoiser for UNetView<'_> {
    fn forward_graph(&self, g: &mut Graph, x: NodeId, taus: &[f32]) -> NodeId {
        let params = if self.use_ema { &self.net.ema } else { &self.net.params };
        self.net.forward_graph_with(params, g, x, taus)
    }
}

/// Clean-image estimate (x_tau - sigma * eps) / alpha, elementwise. The
/// guided sampler and the unconditional one go through this same function so
/// the zero-guidance case reduces bitwise.
pub fn estimate_x0_values(x: &[f32], eps: &[f32], alpha: f32, sigma: f32) -> Vec<f32> {
    x.iter().zip(eps).map(|(&xv, &ev)| (xv - sigma * ev) / alpha).collect()
}

/// Move a clean estimate back up to noise level (alpha', sigma'), reusing the
/// predicted noise.
pub fn renoise_values(x0: &[f32], eps: &[f32], alpha_next: f32, sigma_next: f32) -> Vec<f32> {
    x0.iter().zip(eps).map(|(&cv, &ev)| alpha_next * cv + sigma_next * ev).collect()
}

/// Fill a tensor with standard-normal draws in index order.
pub fn fill_standard_normal(rng: &mut ChaCha8Rng, t: &mut Tensor) {
    for v in t.data.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}

pub fn batch_to_tensor(batch: &[&Raster]) -> Result<Tensor> {
    let first = batch.first().ok_or_else(|| Error::Param("empty batch".into()))?;
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(batch.len() * h * w);
    for r in batch {
        if r.shape() != (h, w) {
            return Err(Error::Shape(format!(
                "batch mixes shapes {:?} and {:?}",
                (h, w),
                r.shape()
            )));
        }
        data.extend_from_slice(r.as_slice());
    }
    Tensor::from_vec(batch.len(), 1, h, w, data)
}

pub fn tensor_to_rasters(t: &Tensor) -> Vec<Raster> {
    assert_eq!(t.c, 1, "expected single-channel tensor");
    let plane = t.h * t.w;
    (0..t.n)
        .map(|i| {
            Raster::from_vec(t.h, t.w, t.data[i * plane..(i + 1) * plane].to_vec()).unwrap()
        })
        .collect()
}

/// Deterministic DDIM sampling from pure noise. Sample `i` draws its noise
/// from stream `i` of the seed, so any prefix of the batch is reproducible
/// independently of `count`. Outputs are clamped to [0,1] at the very end.
pub fn sample_unconditional(
    denoiser: &dyn Denoiser,
    schedule: &dyn NoiseSchedule,
    steps: usize,
    seed: u64,
    count: usize,
    height: usize,
    width: usize,
) -> Result<Vec<Raster>> {
    if steps < 1 {
        return Err(Error::Param("steps must be >= 1".into()));
    }
    if count < 1 {
        return Err(Error::Param("count must be >= 1".into()));
    }
    let grid = tau_grid(schedule, steps);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut x = Tensor::zeros(1, 1, height, width);
        fill_standard_normal(&mut rng, &mut x);
        let final_x0 = run_ddim(denoiser, schedule, &grid, x)?;
        let raster = Raster::from_vec(height, width, final_x0.data)?;
        out.push(raster.clamp01());
    }
    Ok(out)
}

/// Unguided trajectory over a descending grid ending at 0; returns the last
/// clean estimate (unclamped).
fn run_ddim(
    denoiser: &dyn Denoiser,
    schedule: &dyn NoiseSchedule,
    grid: &[f32],
    mut x: Tensor,
) -> Result<Tensor> {
    for win in grid.windows(2) {
        let (tau, tau_next) = (win[0], win[1]);
        let eps = denoiser.predict(&x, &vec![tau; x.n]);
        if !eps.data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite denoiser output at tau {tau}")));
        }
        let (a_t, s_t) = (schedule.alpha(tau), schedule.sigma(tau));
        let x0 = estimate_x0_values(&x.data, &eps.data, a_t, s_t);
        if tau_next == 0.0 {
            x.data = x0;
        } else {
            let (a_n, s_n) = (schedule.alpha(tau_next), schedule.sigma(tau_next));
            x.data = renoise_values(&x0, &eps.data, a_n, s_n);
        }
    }
    Ok(x)
}

/// Training hyperparameters; defaults follow the project's reference
/// configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_kid: f64,
    /// DDIM steps used to generate samples for the KID term.
    pub n_kid: usize,
    /// Training steps between KID-term evaluations (the term is skipped on
    /// other steps; 1 = every step).
    pub kid_every: usize,
    pub ema_decay: f64,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    /// Train with the finetune rate instead of the pretrain rate.
    pub finetune: bool,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_kid: 0.05,
            n_kid: 15,
            kid_every: 25,
            ema_decay: 0.999,
            lr_pretrain: 1e-4,
            lr_finetune: 1e-5,
            finetune: false,
            batch_size: 8,
            steps: 400,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_kid < 0.0 {
            return Err(Error::Param("lambda_kid must be >= 0".into()));
        }
        if self.n_kid < 1 {
            return Err(Error::Param("n_kid must be >= 1".into()));
        }
        if self.kid_every < 1 {
            return Err(Error::Param("kid_every must be >= 1".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) && self.ema_decay != 0.0 {
            return Err(Error::Param("ema_decay must lie in [0, 1)".into()));
        }
        if self.lr_pretrain <= 0.0 || self.lr_finetune <= 0.0 {
            return Err(Error::Param("learning rates must be positive".into()));
        }
        if self.batch_size < 1 || self.steps < 1 {
            return Err(Error::Param("batch_size and steps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn learning_rate(&self) -> f64 {
        if self.finetune {
            self.lr_finetune
        } else {
            self.lr_pretrain
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let s = CosineSchedule;
        assert_eq!(s.alpha(0.0), 1.0);
        assert_eq!(s.sigma(0.0), 0.0);
        let n = 1000;
        let mut prev_a = f32::INFINITY;
        let mut prev_s = f32::NEG_INFINITY;
        for k in 0..=n {
            let tau = k as f32 / n as f32;
            let (a, sg) = (s.alpha(tau), s.sigma(tau));
            if k > 0 {
                assert!(a < prev_a, "alpha not strictly decreasing at {tau}");
                assert!(sg > prev_s, "sigma not strictly increasing at {tau}");
            }
            assert!((a as f64 * a as f64 + sg as f64 * sg as f64 - 1.0).abs() < 1e-6);
            prev_a = a;
            prev_s = sg;
        }
    }

    #[test]
    fn tau_grid_is_descending_and_ends_at_zero() {
        let grid = tau_grid(&CosineSchedule, 480);
        assert_eq!(grid.len(), 481);
        assert!(grid.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(*grid.last().unwrap(), 0.0);
        assert!((grid[0] - 0.999).abs() < 1e-6);
    }

    #[test]
    fn zero_eps_estimate_is_division() {
        let x = [0.3f32, -0.5, 1.2];
        let eps = [0.0f32; 3];
        let got = estimate_x0_values(&x, &eps, 0.8, 0.6);
        for (g, xv) in got.iter().zip(&x) {
            assert_eq!(*g, xv / 0.8);
        }
    }

    #[test]
    fn inversion_identity_recovers_x0() {
        // x_tau built from known (x0, eps) and a denoiser returning that eps
        // inverts back to x0 up to round-off.
        let (a, s) = (0.6f32, 0.8f32);
        let x0 = [0.25f32, 0.75, 0.5];
        let eps = [1.0f32, -2.0, 0.5];
        let x_tau: Vec<f32> = x0.iter().zip(&eps).map(|(&c, &e)| a * c + s * e).collect();
        let got = estimate_x0_values(&x_tau, &eps, a, s);
        for (g, c) in got.iter().zip(&x0) {
            assert!((g - c).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_round_trip() {
        let r1 = Raster::from_fn(3, 4, |y, x| (y * 4 + x) as f32 / 12.0);
        let r2 = r1.map(|v| 1.0 - v);
        let t = batch_to_tensor(&[&r1, &r2]).unwrap();
        assert_eq!(t.dims(), [2, 1, 3, 4]);
        let back = tensor_to_rasters(&t);
        assert_eq!(back[0], r1);
        assert_eq!(back[1], r2);
    }

    #[test]
    fn config_default_validates_and_rejects_bad_fields() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.lambda_kid, 0.05);
        assert_eq!(c.n_kid, 15);
        assert_eq!(c.ema_decay, 0.999);
        assert_eq!(c.lr_pretrain, 1e-4);
        assert_eq!(c.lr_finetune, 1e-5);
        let mut bad = c.clone();
        bad.lambda_kid = -0.1;
        assert!(bad.validate().is_err());
        let mut bad = c;
        bad.n_kid = 0;
        assert!(bad.validate().is_err());
    }
}
