//! Feature embedders for the KID metric/loss. The default is a frozen
//! random convolutional projection to 256 dimensions: two strided conv/pool
//! stages followed by adaptive average pooling onto a 4x4 grid of 16
//! channels. Weights are fixed by a published seed so every run, metric
//! report, and training loss agrees on the feature space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId, Tensor};
use super::{he_tensor, ParamSet};

/// Seed that freezes the default embedder's weights.
pub const DEFAULT_EMBEDDER_SEED: u64 = 0x4542_4544;

/// Maps image batches to fixed-dimension feature vectors. Implementations
/// must be pure and deterministic; `embed_graph` exposes the computation to
/// autodiff so losses can differentiate through it.
pub trait FeatureEmbedder {
    fn dim(&self) -> usize;
    /// x: [N,1,H,W] node; returns a node whose flattened per-sample size is `dim()`.
    fn embed_graph(&self, g: &mut Graph, x: NodeId) -> NodeId;

    /// Plain (ungraphed) embedding: one row per sample.
    fn embed(&self, batch: &Tensor) -> Vec<Vec<f32>> {
        let mut g = Graph::new();
        let x = g.leaf(batch.clone());
        let out = self.embed_graph(&mut g, x);
        let t = g.value(out);
        let d = t.numel() / t.n;
        (0..t.n).map(|i| t.data[i * d..(i + 1) * d].to_vec()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct RandomConvEmbedder {
    params: ParamSet,
}

impl RandomConvEmbedder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.push("c1.w", he_tensor(&mut rng, 8, 1, 3, 3, 9));
        p.push("c1.b", Tensor::zeros(1, 8, 1, 1));
        p.push("c2.w", he_tensor(&mut rng, 16, 8, 3, 3, 72));
        p.push("c2.b", Tensor::zeros(1, 16, 1, 1));
        RandomConvEmbedder { params: p }
    }
}

impl Default for RandomConvEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_EMBEDDER_SEED)
    }
}

impl FeatureEmbedder for RandomConvEmbedder {
    fn dim(&self) -> usize {
        256
    }

    fn embed_graph(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let t = g.value(x);
        assert!(t.h >= 16 && t.w >= 16, "embedder needs at least 16x16 input");
        let w1 = g.leaf(self.params.entries[0].1.clone());
        let b1 = g.leaf(self.params.entries[1].1.clone());
        let h = g.conv2d(x, w1, b1);
        let h = g.relu(h);
        let h = g.avg_pool2(h);
        let w2 = g.leaf(self.params.entries[2].1.clone());
        let b2 = g.leaf(self.params.entries[3].1.clone());
        let h = g.conv2d(h, w2, b2);
        let h = g.relu(h);
        let h = g.avg_pool2(h);
        g.avg_pool_grid(h, 4) // [N,16,4,4] == 256 features per sample
    }
}
