//! Region segmentation network: a compact 2-level encoder-decoder producing
//! two logit channels (ventricle, septum) at input resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId, Tensor};
use super::{he_tensor, IdCursor, ParamSet};

const GROUPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegArch {
    pub base_channels: usize,
}

impl Default for SegArch {
    fn default() -> Self {
        SegArch { base_channels: 8 }
    }
}

#[derive(Debug, Clone)]
pub struct SegNet {
    pub arch: SegArch,
    pub params: ParamSet,
}

impl SegNet {
    pub fn new(arch: SegArch, seed: u64) -> Self {
        assert!(arch.base_channels % GROUPS == 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let c = arch.base_channels;
        let blocks: [(&str, usize, usize); 6] = [
            ("enc0", 1, c),
            ("enc1", c, 2 * c),
            ("mid", 2 * c, 2 * c),
            ("dec1", 4 * c, c),
            ("dec0", 2 * c, c),
            ("pen", c, c),
        ];
        for (name, cin, cout) in blocks {
            p.push(&format!("{name}.w"), he_tensor(&mut rng, cout, cin, 3, 3, cin * 9));
            p.push(&format!("{name}.b"), Tensor::zeros(1, cout, 1, 1));
            p.push(&format!("{name}.gamma"), Tensor::from_vec(1, cout, 1, 1, vec![1.0; cout]).unwrap());
            p.push(&format!("{name}.beta"), Tensor::zeros(1, cout, 1, 1));
        }
        p.push("out.w", he_tensor(&mut rng, 2, c, 3, 3, c * 9));
        p.push("out.b", Tensor::zeros(1, 2, 1, 1));
        SegNet { arch, params: p }
    }

    /// Push every parameter into the graph once, in construction order.
    pub fn param_leaves(&self, params: &ParamSet, g: &mut Graph) -> Vec<NodeId> {
        params.entries.iter().map(|(_, t)| g.leaf(t.clone())).collect()
    }

    /// Forward pass over pre-created leaves; input [N,1,H,W] with H, W
    /// divisible by 4; output [N,2,H,W] logits (channel 0 ventricle,
    /// channel 1 septum).
    pub fn forward_with_leaves(&self, g: &mut Graph, leaves: &[NodeId], x: NodeId) -> NodeId {
        let t = g.value(x);
        assert!(t.h % 4 == 0 && t.w % 4 == 0, "spatial dims must divide by 4");
        let mut cur = IdCursor::new(leaves);
        let block = |g: &mut Graph, x: NodeId, cur: &mut IdCursor| -> NodeId {
            let w = cur.next();
            let b = cur.next();
            let h = g.conv2d(x, w, b);
            let h = g.group_norm(h, GROUPS);
            let gamma = cur.next();
            let beta = cur.next();
            let h = g.mul(h, gamma);
            let h = g.add(h, beta);
            g.relu(h)
        };
        let e0 = block(g, x, &mut cur);
        let p0 = g.avg_pool2(e0);
        let e1 = block(g, p0, &mut cur);
        let p1 = g.avg_pool2(e1);
        let m = block(g, p1, &mut cur);
        let u1 = g.upsample2(m);
        let u1 = g.concat_c(u1, e1);
        let d1 = block(g, u1, &mut cur);
        let u0 = g.upsample2(d1);
        let u0 = g.concat_c(u0, e0);
        let d0 = block(g, u0, &mut cur);
        let pen = block(g, d0, &mut cur);
        let w = cur.next();
        let b = cur.next();
        let out = g.conv2d(pen, w, b);
        assert!(cur.finished(), "parameter cursor out of sync");
        out
    }

    pub fn forward_graph_with(&self, params: &ParamSet, g: &mut Graph, x: NodeId) -> NodeId {
        let leaves = self.param_leaves(params, g);
        self.forward_with_leaves(g, &leaves, x)
    }

    pub fn predict_logits(&self, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let xid = g.leaf(x.clone());
        let out = self.forward_graph_with(&self.params, &mut g, xid);
        g.value(out).clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segnet_shapes_and_determinism() {
        let net = SegNet::new(SegArch { base_channels: 8 }, 3);
        let x = Tensor::from_vec(1, 1, 8, 12, vec![0.5; 96]).unwrap();
        let a = net.predict_logits(&x);
        let b = net.predict_logits(&x);
        assert_eq!(a, b);
        assert_eq!(a.dims(), [1, 2, 8, 12]);
        assert!(a.data.iter().all(|v| v.is_finite()));
    }
}
