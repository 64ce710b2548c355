//! Training losses: denoising score matching plus the KID perceptual term
//! (an unbiased MMD^2 with a cubic polynomial kernel over feature
//! embeddings).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::embed::FeatureEmbedder;
use crate::nn::graph::{Graph, NodeId, Tensor};
use crate::raster::Raster;

use super::{
    batch_to_tensor, fill_standard_normal, sample_unconditional, Denoiser, NoiseSchedule,
    TrainConfig,
};

/// Draws the per-batch randomness for one DSM evaluation: first every tau
/// (uniform over [0, T)), then every noise value. The fixed order lets test
/// doubles replay the exact draw from a cloned rng.
pub fn dsm_draw(
    rng: &mut ChaCha8Rng,
    schedule: &dyn NoiseSchedule,
    batch: usize,
    height: usize,
    width: usize,
) -> (Vec<f32>, Tensor) {
    let horizon = schedule.horizon();
    let taus: Vec<f32> = (0..batch).map(|_| rng.random_range(0.0..horizon)).collect();
    let mut eps = Tensor::zeros(batch, 1, height, width);
    fill_standard_normal(rng, &mut eps);
    (taus, eps)
}

/// x_tau = alpha(tau_i) * x0_i + sigma(tau_i) * eps_i, per sample.
pub(crate) fn make_x_tau(
    x0: &Tensor,
    taus: &[f32],
    eps: &Tensor,
    schedule: &dyn NoiseSchedule,
) -> Tensor {
    assert_eq!(x0.n, taus.len());
    let plane = x0.c * x0.h * x0.w;
    let mut out = x0.clone();
    for (i, &tau) in taus.iter().enumerate() {
        let (a, s) = (schedule.alpha(tau), schedule.sigma(tau));
        for k in 0..plane {
            let idx = i * plane + k;
            out.data[idx] = a * x0.data[idx] + s * eps.data[idx];
        }
    }
    out
}

/// Mean over the batch of the squared noise-prediction error.
pub(crate) fn dsm_loss_node(
    g: &mut Graph,
    eps_hat: NodeId,
    eps: NodeId,
    batch: usize,
) -> NodeId {
    let d = g.sub(eps_hat, eps);
    let sq = g.mul(d, d);
    let s = g.sum_all(sq);
    g.div_scalar(s, batch as f32)
}

/// One-shot DSM loss of a denoiser on a batch of clean images.
pub fn dsm_loss(
    denoiser: &dyn Denoiser,
    batch: &[Raster],
    schedule: &dyn NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Param("dsm batch is empty".into()));
    }
    for r in batch {
        if r.min() < 0.0 || r.max() > 1.0 {
            return Err(Error::Param("dsm batch values must lie in [0,1]".into()));
        }
    }
    let refs: Vec<&Raster> = batch.iter().collect();
    let x0 = batch_to_tensor(&refs)?;
    let (taus, eps) = dsm_draw(rng, schedule, x0.n, x0.h, x0.w);
    let x_tau = make_x_tau(&x0, &taus, &eps, schedule);

    let mut g = Graph::new();
    let x_id = g.leaf(x_tau);
    let eps_hat = denoiser.forward_graph(&mut g, x_id, &taus);
    if !g.value(eps_hat).data.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite denoiser output in dsm_loss".into()));
    }
    let eps_id = g.leaf(eps);
    let loss = dsm_loss_node(&mut g, eps_hat, eps_id, x0.n);
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::Numerical("non-finite dsm loss".into()));
    }
    Ok(value)
}

fn poly_kernel(a: &[f32], b: &[f32]) -> f64 {
    let d = a.len() as f64;
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let base = dot / d + 1.0;
    base * base * base
}

/// Unbiased MMD^2 between two embedding sets with k(a,b) = (a.b/d + 1)^3.
/// Slightly negative values are expected from the unbiased estimator.
pub fn kid_mmd2(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<f64> {
    let (m, n) = (a.len(), b.len());
    if m < 2 || n < 2 {
        return Err(Error::Param(format!(
            "kid needs >= 2 samples per batch (got {m} and {n})"
        )));
    }
    let d = a[0].len();
    if d == 0 || a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::Shape("kid embeddings must share a nonzero dimension".into()));
    }
    let mut s_aa = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                s_aa += poly_kernel(&a[i], &a[j]);
            }
        }
    }
    let mut s_bb = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s_bb += poly_kernel(&b[i], &b[j]);
            }
        }
    }
    let mut s_ab = 0.0f64;
    for x in a {
        for y in b {
            s_ab += poly_kernel(x, y);
        }
    }
    Ok(s_aa / (m * (m - 1)) as f64 + s_bb / (n * (n - 1)) as f64
        - 2.0 * s_ab / (m * n) as f64)
}

/// KID between two image batches under an embedder.
pub fn kid_loss(
    generated: &Tensor,
    real: &Tensor,
    embedder: &dyn FeatureEmbedder,
) -> Result<f64> {
    if generated.n < 2 || real.n < 2 {
        return Err(Error::Param(format!(
            "kid needs >= 2 samples per batch (got {} and {})",
            generated.n, real.n
        )));
    }
    let fa = embedder.embed(generated);
    let fb = embedder.embed(real);
    kid_mmd2(&fa, &fb)
}

/// Graph version of the unbiased MMD^2 over embedding nodes `fa` ([m,...])
/// and `fb` ([n,...]); used inside the training graph so KID gradients reach
/// the generator.
pub(crate) fn kid_node(g: &mut Graph, fa: NodeId, fb: NodeId, dim: usize) -> NodeId {
    let m = g.value(fa).n;
    let n = g.value(fb).n;
    assert!(m >= 2 && n >= 2, "kid needs >= 2 samples per batch");
    let cube = |g: &mut Graph, gram: NodeId| {
        let x = g.mul_scalar(gram, 1.0 / dim as f32);
        let x = g.add_scalar(x, 1.0);
        let x2 = g.mul(x, x);
        g.mul(x2, x)
    };
    let kaa = g.matmul_t(fa, fa);
    let kaa = cube(g, kaa);
    let kaa = g.sum_off_diag(kaa);
    let kaa = g.div_scalar(kaa, (m * (m - 1)) as f32);
    let kbb = g.matmul_t(fb, fb);
    let kbb = cube(g, kbb);
    let kbb = g.sum_off_diag(kbb);
    let kbb = g.div_scalar(kbb, (n * (n - 1)) as f32);
    let kab = g.matmul_t(fa, fb);
    let kab = cube(g, kab);
    let kab = g.sum_all(kab);
    let kab = g.mul_scalar(kab, -2.0 / (m * n) as f32);
    let s = g.add(kaa, kbb);
    g.add(s, kab)
}

/// DSM plus lambda_kid times KID on freshly generated samples. With
/// lambda_kid = 0 no generation happens and the value equals `dsm_loss` on
/// the same rng exactly.
pub fn total_loss(
    denoiser: &dyn Denoiser,
    batch: &[Raster],
    real_ref: &[Raster],
    schedule: &dyn NoiseSchedule,
    config: &TrainConfig,
    embedder: &dyn FeatureEmbedder,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let dsm = dsm_loss(denoiser, batch, schedule, rng)?;
    if config.lambda_kid == 0.0 {
        return Ok(dsm);
    }
    if real_ref.len() < 2 {
        return Err(Error::Param("kid reference batch needs >= 2 samples".into()));
    }
    let (h, w) = real_ref[0].shape();
    let gen_seed: u64 = rng.random();
    let generated = sample_unconditional(
        denoiser,
        schedule,
        config.n_kid,
        gen_seed,
        real_ref.len(),
        h,
        w,
    )?;
    let gen_refs: Vec<&Raster> = generated.iter().collect();
    let real_refs: Vec<&Raster> = real_ref.iter().collect();
    let kid = kid_loss(&batch_to_tensor(&gen_refs)?, &batch_to_tensor(&real_refs)?, embedder)?;
    Ok(dsm + config.lambda_kid * kid)
}
