//! The denoiser network: a 3-level U-Net over single-channel images with
//! sinusoidal timestep conditioning injected into every conv block.
//!
//! Block layout (C = base_channels):
//!   enc0: 1->C->C          (full res)
//!   enc1: C->2C->2C        (1/2 res)
//!   enc2: 2C->4C->4C       (1/4 res, bottleneck)
//!   dec1: [4C|2C]->2C->2C  (skip concat, 1/2 res)
//!   dec0: [2C|C]->C->C     (skip concat, full res)
//!   out:  C->1 conv, zero-initialized so the untrained net predicts 0.
//!
//! Each block is conv -> group norm -> (+ timestep projection) -> SiLU.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId, Tensor};
use super::{he_tensor, IdCursor, ParamSet};

pub const GROUPS: usize = 4;
pub const EMB_DIM: usize = 16;
pub const EMB_HIDDEN: usize = 32;

/// Architecture descriptor; stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetArch {
    pub base_channels: usize,
}

impl Default for UNetArch {
    fn default() -> Self {
        UNetArch { base_channels: 16 }
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub arch: UNetArch,
    pub params: ParamSet,
    pub ema: ParamSet,
}

impl UNet {
    pub fn new(arch: UNetArch, seed: u64) -> Self {
        assert!(arch.base_channels % GROUPS == 0, "base channels must divide into groups");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let c = arch.base_channels;

        // timestep embedding MLP
        push_linear(&mut p, &mut rng, "temb1", EMB_DIM, EMB_HIDDEN);
        push_linear(&mut p, &mut rng, "temb2", EMB_HIDDEN, EMB_HIDDEN);

        let blocks: [(&str, usize, usize); 10] = [
            ("enc0a", 1, c),
            ("enc0b", c, c),
            ("enc1a", c, 2 * c),
            ("enc1b", 2 * c, 2 * c),
            ("enc2a", 2 * c, 4 * c),
            ("enc2b", 4 * c, 4 * c),
            ("dec1a", 6 * c, 2 * c),
            ("dec1b", 2 * c, 2 * c),
            ("dec0a", 3 * c, c),
            ("dec0b", c, c),
        ];
        for (name, cin, cout) in blocks {
            push_block(&mut p, &mut rng, name, cin, cout);
        }
        // zero-init output conv: the fresh model predicts epsilon = 0
        p.push("out.w", Tensor::zeros(1, c, 3, 3));
        p.push("out.b", Tensor::zeros(1, 1, 1, 1));

        let ema = p.clone();
        UNet { arch, params: p, ema }
    }

    /// Pushes every parameter of `which` into `g` once, returning the leaf
    /// ids in entry order. Repeated forward passes built over the same leaves
    /// accumulate their gradients onto these nodes.
    pub fn param_leaves(&self, params: &ParamSet, g: &mut Graph) -> Vec<NodeId> {
        params.entries.iter().map(|(_, t)| g.leaf(t.clone())).collect()
    }

    /// Builds the forward pass on `g` from input node `x` ([N,1,H,W], H and W
    /// divisible by 4) over previously created parameter leaves. `taus` holds
    /// one timestep per batch sample.
    pub fn forward_with_leaves(
        &self,
        g: &mut Graph,
        leaves: &[NodeId],
        x: NodeId,
        taus: &[f32],
    ) -> NodeId {
        let t = g.value(x);
        assert_eq!(t.c, 1, "denoiser expects single-channel input");
        assert_eq!(t.n, taus.len(), "one tau per sample");
        assert!(t.h % 4 == 0 && t.w % 4 == 0, "spatial dims must divide by 4");

        let mut cur = IdCursor::new(leaves);
        let emb = g.leaf(sinusoidal_embedding(taus));
        let w1 = cur.next();
        let b1 = cur.next();
        let e = g.linear(emb, w1, b1);
        let e = g.silu(e);
        let w2 = cur.next();
        let b2 = cur.next();
        let e = g.linear(e, w2, b2);
        let emb = g.silu(e); // [N, EMB_HIDDEN, 1, 1]

        let block = |g: &mut Graph, x: NodeId, cur: &mut IdCursor| -> NodeId {
            let w = cur.next();
            let b = cur.next();
            let h = g.conv2d(x, w, b);
            let h = g.group_norm(h, GROUPS);
            let gamma = cur.next();
            let beta = cur.next();
            let h = g.mul(h, gamma);
            let h = g.add(h, beta);
            let pw = cur.next();
            let pb = cur.next();
            let proj = g.linear(emb, pw, pb); // [N, C_block, 1, 1]
            let h = g.add(h, proj);
            g.silu(h)
        };

        let e0 = block(g, x, &mut cur);
        let e0 = block(g, e0, &mut cur);
        let d1 = g.avg_pool2(e0);
        let e1 = block(g, d1, &mut cur);
        let e1 = block(g, e1, &mut cur);
        let d2 = g.avg_pool2(e1);
        let e2 = block(g, d2, &mut cur);
        let e2 = block(g, e2, &mut cur);
        let u1 = g.upsample2(e2);
        let u1 = g.concat_c(u1, e1);
        let m1 = block(g, u1, &mut cur);
        let m1 = block(g, m1, &mut cur);
        let u0 = g.upsample2(m1);
        let u0 = g.concat_c(u0, e0);
        let m0 = block(g, u0, &mut cur);
        let m0 = block(g, m0, &mut cur);
        let ow = cur.next();
        let ob = cur.next();
        let out = g.conv2d(m0, ow, ob);
        assert!(cur.finished(), "parameter cursor out of sync");
        out
    }

    /// One-shot forward: creates leaves for `params` then runs the pass.
    pub fn forward_graph_with(
        &self,
        params: &ParamSet,
        g: &mut Graph,
        x: NodeId,
        taus: &[f32],
    ) -> NodeId {
        let leaves = self.param_leaves(params, g);
        self.forward_with_leaves(g, &leaves, x, taus)
    }
}

fn push_linear(p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize) {
    p.push(&format!("{name}.w"), he_tensor(rng, dout, din, 1, 1, din));
    p.push(&format!("{name}.b"), Tensor::zeros(1, dout, 1, 1));
}

fn push_block(p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) {
    p.push(&format!("{name}.w"), he_tensor(rng, cout, cin, 3, 3, cin * 9));
    p.push(&format!("{name}.b"), Tensor::zeros(1, cout, 1, 1));
    p.push(&format!("{name}.gamma"), Tensor::from_vec(1, cout, 1, 1, vec![1.0; cout]).unwrap());
    p.push(&format!("{name}.beta"), Tensor::zeros(1, cout, 1, 1));
    push_linear(p, rng, &format!("{name}.proj").as_str(), EMB_HIDDEN, cout);
}

/// Sinusoidal features of tau at octave frequencies pi*2^k: rich enough to
/// resolve tau in [0,1] at every scale the sampler uses.
pub fn sinusoidal_embedding(taus: &[f32]) -> Tensor {
    let half = EMB_DIM / 2;
    let mut data = Vec::with_capacity(taus.len() * EMB_DIM);
    for &tau in taus {
        for k in 0..half {
            let f = std::f32::consts::PI * (1 << k) as f32;
            data.push((f * tau).sin());
            data.push((f * tau).cos());
        }
    }
    Tensor::from_vec(taus.len(), EMB_DIM, 1, 1, data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_unet_predicts_zero() {
        let net = UNet::new(UNetArch { base_channels: 8 }, 1);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(2, 1, 8, 8, (0..128).map(|i| i as f32 / 128.0).collect()).unwrap());
        let out = net.forward_graph_with(&net.params, &mut g, x, &[0.3, 0.7]);
        assert!(g.value(out).data.iter().all(|&v| v == 0.0));
        assert_eq!(g.value(out).dims(), [2, 1, 8, 8]);
    }

    #[test]
    fn unet_is_deterministic_and_shape_preserving() {
        let net = UNet::new(UNetArch { base_channels: 8 }, 2);
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::from_vec(1, 1, 12, 8, vec![0.25; 96]).unwrap());
            let out = net.forward_graph_with(&net.params, &mut g, x, &[0.5]);
            g.value(out).clone()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.dims(), [1, 1, 12, 8]);
    }

    #[test]
    fn embedding_distinguishes_taus() {
        let e = sinusoidal_embedding(&[0.1, 0.9]);
        let a = &e.data[..EMB_DIM];
        let b = &e.data[EMB_DIM..];
        assert!(a.iter().zip(b).any(|(x, y)| (x - y).abs() > 0.1));
    }
}
