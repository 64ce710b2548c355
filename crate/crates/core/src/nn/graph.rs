//! A small define-by-run reverse-mode autodiff tape over dense f32 NCHW
//! tensors. Values are computed eagerly on insertion; `backward` replays the
//! tape in reverse. Only the operations the networks here actually use are
//! implemented, each with a hand-written adjoint that the test suite checks
//! against central finite differences.

use crate::error::{Error, Result};

/// Dense NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "tensor payload {} != {n}x{c}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Tensor { n, c, h, w, data })
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { n: 1, c: 1, h: 1, w: 1, data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    /// The value of a 1x1x1x1 tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    MulScalar(f32),
    AddScalar,
    DivScalar(f32),
    Relu,
    Silu,
    Conv2d { pad: usize },
    AvgPool2,
    Upsample2,
    ConcatC,
    GroupNorm { groups: usize, eps: f32 },
    Linear,
    MatmulT,
    SumAll,
    SumOffDiag,
    AvgPoolGrid { out: usize },
    BceWithLogits,
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// The tape. Node values are available immediately after insertion.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by `Graph::backward`; indexed by `NodeId`.
pub struct Grads {
    grads: Vec<Option<Vec<f32>>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }
}

fn broadcast_dims(a: [usize; 4], b: [usize; 4]) -> Result<[usize; 4]> {
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (a[i], b[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            (x, y) => {
                return Err(Error::Shape(format!(
                    "broadcast mismatch {a:?} vs {b:?} at axis {i} ({x} vs {y})"
                )))
            }
        };
    }
    Ok(out)
}

#[inline]
fn bcast_index(dims: [usize; 4], idx: [usize; 4]) -> usize {
    let n = if dims[0] == 1 { 0 } else { idx[0] };
    let c = if dims[1] == 1 { 0 } else { idx[1] };
    let h = if dims[2] == 1 { 0 } else { idx[2] };
    let w = if dims[3] == 1 { 0 } else { idx[3] };
    ((n * dims[1] + c) * dims[2] + h) * dims[3] + w
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let dims = broadcast_dims(ta.dims(), tb.dims()).expect("binary op shapes");
        let f = |x: f32, y: f32| match op {
            Op::Add => x + y,
            Op::Sub => x - y,
            Op::Mul => x * y,
            _ => unreachable!(),
        };
        let mut out = Tensor::zeros(dims[0], dims[1], dims[2], dims[3]);
        if ta.dims() == tb.dims() {
            for (o, (x, y)) in out.data.iter_mut().zip(ta.data.iter().zip(&tb.data)) {
                *o = f(*x, *y);
            }
        } else {
            let (da, db) = (ta.dims(), tb.dims());
            let mut i = 0;
            for n in 0..dims[0] {
                for c in 0..dims[1] {
                    for y in 0..dims[2] {
                        for x in 0..dims[3] {
                            let idx = [n, c, y, x];
                            out.data[i] =
                                f(ta.data[bcast_index(da, idx)], tb.data[bcast_index(db, idx)]);
                            i += 1;
                        }
                    }
                }
            }
        }
        self.push(op, vec![a, b], out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Mul, a, b)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f32) -> NodeId {
        let value = {
            let t = &self.nodes[a].value;
            Tensor { data: t.data.iter().map(|&v| v * s).collect(), ..t.clone() }
        };
        self.push(Op::MulScalar(s), vec![a], value)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f32) -> NodeId {
        let value = {
            let t = &self.nodes[a].value;
            Tensor { data: t.data.iter().map(|&v| v + s).collect(), ..t.clone() }
        };
        self.push(Op::AddScalar, vec![a], value)
    }

    /// True division by a scalar (kept distinct from `mul_scalar(1/s)` so the
    /// result is the bitwise f32 quotient).
    pub fn div_scalar(&mut self, a: NodeId, s: f32) -> NodeId {
        let value = {
            let t = &self.nodes[a].value;
            Tensor { data: t.data.iter().map(|&v| v / s).collect(), ..t.clone() }
        };
        self.push(Op::DivScalar(s), vec![a], value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = {
            let t = &self.nodes[a].value;
            Tensor { data: t.data.iter().map(|&v| v.max(0.0)).collect(), ..t.clone() }
        };
        self.push(Op::Relu, vec![a], value)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let value = {
            let t = &self.nodes[a].value;
            Tensor {
                data: t.data.iter().map(|&v| v * sigmoid(v)).collect(),
                ..t.clone()
            }
        };
        self.push(Op::Silu, vec![a], value)
    }

    /// Same-padding stride-1 convolution. `weight` is [c_out, c_in, k, k]
    /// (odd k), `bias` is [1, c_out, 1, 1].
    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        let (tx, tw, tb) = (
            &self.nodes[x].value,
            &self.nodes[weight].value,
            &self.nodes[bias].value,
        );
        let k = tw.h;
        assert_eq!(k % 2, 1, "conv kernel must be odd");
        assert_eq!(tw.w, k);
        assert_eq!(tw.c, tx.c, "conv c_in mismatch");
        assert_eq!(tb.c, tw.n, "conv bias mismatch");
        let pad = k / 2;
        let (n, co, hh, ww) = (tx.n, tw.n, tx.h, tx.w);
        let mut out = Tensor::zeros(n, co, hh, ww);
        for ni in 0..n {
            for coi in 0..co {
                let b = tb.data[coi];
                let out_base = ((ni * co + coi) * hh) * ww;
                out.data[out_base..out_base + hh * ww].fill(b);
                for cii in 0..tx.c {
                    let in_base = ((ni * tx.c + cii) * hh) * ww;
                    for dy in 0..k {
                        for dx in 0..k {
                            let wv = tw.at(coi, cii, dy, dx);
                            if wv == 0.0 {
                                continue;
                            }
                            conv_accum(
                                &mut out.data[out_base..out_base + hh * ww],
                                &tx.data[in_base..in_base + hh * ww],
                                hh, ww, dy as isize - pad as isize, dx as isize - pad as isize, wv,
                            );
                        }
                    }
                }
            }
        }
        self.push(Op::Conv2d { pad }, vec![x, weight, bias], out)
    }

    /// 2x2 average pooling with stride 2 (even spatial dims required).
    pub fn avg_pool2(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a].value;
        assert!(t.h % 2 == 0 && t.w % 2 == 0, "avg_pool2 needs even dims");
        let (n, c, h2, w2) = (t.n, t.c, t.h / 2, t.w / 2);
        let mut out = Tensor::zeros(n, c, h2, w2);
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h2 {
                    for x in 0..w2 {
                        let s = t.at(ni, ci, 2 * y, 2 * x)
                            + t.at(ni, ci, 2 * y, 2 * x + 1)
                            + t.at(ni, ci, 2 * y + 1, 2 * x)
                            + t.at(ni, ci, 2 * y + 1, 2 * x + 1);
                        *out.at_mut(ni, ci, y, x) = s * 0.25;
                    }
                }
            }
        }
        self.push(Op::AvgPool2, vec![a], out)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a].value;
        let (n, c, h, w) = (t.n, t.c, t.h, t.w);
        let mut out = Tensor::zeros(n, c, h * 2, w * 2);
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h * 2 {
                    for x in 0..w * 2 {
                        *out.at_mut(ni, ci, y, x) = t.at(ni, ci, y / 2, x / 2);
                    }
                }
            }
        }
        self.push(Op::Upsample2, vec![a], out)
    }

    /// Channel concatenation of two tensors with matching N/H/W.
    pub fn concat_c(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert!(ta.n == tb.n && ta.h == tb.h && ta.w == tb.w, "concat shape");
        let (n, c, h, w) = (ta.n, ta.c + tb.c, ta.h, ta.w);
        let mut out = Tensor::zeros(n, c, h, w);
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        *out.at_mut(ni, ci, y, x) = if ci < ta.c {
                            ta.at(ni, ci, y, x)
                        } else {
                            tb.at(ni, ci - ta.c, y, x)
                        };
                    }
                }
            }
        }
        self.push(Op::ConcatC, vec![a, b], out)
    }

    /// Group normalization without affine parameters (apply a broadcast
    /// mul/add afterwards for the learnable scale and shift).
    pub fn group_norm(&mut self, a: NodeId, groups: usize) -> NodeId {
        let eps = 1e-5;
        let t = &self.nodes[a].value;
        assert_eq!(t.c % groups, 0, "channels must divide into groups");
        let cg = t.c / groups;
        let gsize = cg * t.h * t.w;
        let mut out = t.clone();
        for ni in 0..t.n {
            for g in 0..groups {
                let start = ((ni * t.c + g * cg) * t.h) * t.w;
                let slice = &t.data[start..start + gsize];
                let mean = slice.iter().sum::<f32>() / gsize as f32;
                let var = slice.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / gsize as f32;
                let inv = 1.0 / (var + eps).sqrt();
                for (o, &v) in out.data[start..start + gsize].iter_mut().zip(slice) {
                    *o = (v - mean) * inv;
                }
            }
        }
        self.push(Op::GroupNorm { groups, eps }, vec![a], out)
    }

    /// Fully connected layer: x is [N, d_in] (c·h·w flattened), `weight` is
    /// [d_out, d_in], `bias` is [1, d_out, 1, 1]; output [N, d_out, 1, 1].
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        let (tx, tw, tb) = (
            &self.nodes[x].value,
            &self.nodes[weight].value,
            &self.nodes[bias].value,
        );
        let din = tx.c * tx.h * tx.w;
        let dout = tw.n;
        assert_eq!(tw.c * tw.h * tw.w, din, "linear d_in mismatch");
        assert_eq!(tb.c, dout, "linear bias mismatch");
        let mut out = Tensor::zeros(tx.n, dout, 1, 1);
        for ni in 0..tx.n {
            let xrow = &tx.data[ni * din..(ni + 1) * din];
            for o in 0..dout {
                let wrow = &tw.data[o * din..(o + 1) * din];
                let mut acc = tb.data[o];
                for (xv, wv) in xrow.iter().zip(wrow) {
                    acc += xv * wv;
                }
                out.data[ni * dout + o] = acc;
            }
        }
        self.push(Op::Linear, vec![x, weight, bias], out)
    }

    /// Gram-style product: rows of `a` ([n, d] flattened) dotted with rows of
    /// `b` ([m, d]); output [1, 1, n, m].
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let d = ta.c * ta.h * ta.w;
        assert_eq!(tb.c * tb.h * tb.w, d, "matmul_t feature dims differ");
        let (n, m) = (ta.n, tb.n);
        let mut out = Tensor::zeros(1, 1, n, m);
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0f32;
                for k in 0..d {
                    acc += ta.data[i * d + k] * tb.data[j * d + k];
                }
                out.data[i * m + j] = acc;
            }
        }
        self.push(Op::MatmulT, vec![a, b], out)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f32 = self.nodes[a].value.data.iter().sum();
        self.push(Op::SumAll, vec![a], Tensor::scalar(s))
    }

    /// Sum of the off-diagonal entries of a square [1,1,n,n] tensor.
    pub fn sum_off_diag(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a].value;
        assert_eq!(t.h, t.w, "sum_off_diag needs a square matrix");
        let n = t.h;
        let mut s = 0.0f32;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += t.data[i * n + j];
                }
            }
        }
        self.push(Op::SumOffDiag, vec![a], Tensor::scalar(s))
    }

    /// Adaptive average pooling onto an `out`x`out` grid.
    pub fn avg_pool_grid(&mut self, a: NodeId, out_hw: usize) -> NodeId {
        let t = &self.nodes[a].value;
        assert!(t.h >= out_hw && t.w >= out_hw, "avg_pool_grid upscale");
        let (n, c) = (t.n, t.c);
        let mut out = Tensor::zeros(n, c, out_hw, out_hw);
        for ni in 0..n {
            for ci in 0..c {
                for by in 0..out_hw {
                    let (y0, y1) = grid_bounds(t.h, out_hw, by);
                    for bx in 0..out_hw {
                        let (x0, x1) = grid_bounds(t.w, out_hw, bx);
                        let mut acc = 0.0f32;
                        for y in y0..y1 {
                            for x in x0..x1 {
                                acc += t.at(ni, ci, y, x);
                            }
                        }
                        *out.at_mut(ni, ci, by, bx) =
                            acc / ((y1 - y0) * (x1 - x0)) as f32;
                    }
                }
            }
        }
        self.push(Op::AvgPoolGrid { out: out_hw }, vec![a], out)
    }

    /// Mean binary cross-entropy with logits; `targets` must match shape.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: NodeId) -> NodeId {
        let (tl, tt) = (&self.nodes[logits].value, &self.nodes[targets].value);
        assert_eq!(tl.dims(), tt.dims(), "bce shapes");
        let count = tl.numel() as f32;
        let mut acc = 0.0f64;
        for (&z, &t) in tl.data.iter().zip(&tt.data) {
            acc += (z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln()) as f64;
        }
        self.push(
            Op::BceWithLogits,
            vec![logits, targets],
            Tensor::scalar((acc / count as f64) as f32),
        )
    }

    /// Reverse pass from `root`. `seed` is the cotangent at the root
    /// (defaults to ones, i.e. d(sum of root)/dx).
    pub fn backward(&self, root: NodeId, seed: Option<&[f32]>) -> Grads {
        let mut reachable = vec![false; self.nodes.len()];
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            if reachable[id] {
                continue;
            }
            reachable[id] = true;
            stack.extend(self.nodes[id].inputs.iter().copied());
        }

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        let root_len = self.nodes[root].value.numel();
        grads[root] = Some(match seed {
            Some(s) => {
                assert_eq!(s.len(), root_len, "seed cotangent length");
                s.to_vec()
            }
            None => vec![1.0; root_len],
        });

        for id in (0..=root).rev() {
            if !reachable[id] || grads[id].is_none() {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.accumulate_inputs(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }

    fn ensure<'a>(
        grads: &'a mut Vec<Option<Vec<f32>>>,
        id: NodeId,
        len: usize,
    ) -> &'a mut Vec<f32> {
        grads[id].get_or_insert_with(|| vec![0.0; len])
    }

    fn accumulate_inputs(&self, id: NodeId, g: &[f32], grads: &mut Vec<Option<Vec<f32>>>) {
        let node = &self.nodes[id];
        match node.op {
            Op::Leaf => {}
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
                let (da, db) = (ta.dims(), tb.dims());
                let out = &node.value;
                {
                    let ga = Self::ensure(grads, a, ta.numel());
                    let mut i = 0;
                    for n in 0..out.n {
                        for c in 0..out.c {
                            for y in 0..out.h {
                                for x in 0..out.w {
                                    let idx = [n, c, y, x];
                                    let contrib = match node.op {
                                        Op::Add | Op::Sub => g[i],
                                        Op::Mul => g[i] * tb.data[bcast_index(db, idx)],
                                        _ => unreachable!(),
                                    };
                                    ga[bcast_index(da, idx)] += contrib;
                                    i += 1;
                                }
                            }
                        }
                    }
                }
                {
                    let gb = Self::ensure(grads, b, tb.numel());
                    let mut i = 0;
                    for n in 0..out.n {
                        for c in 0..out.c {
                            for y in 0..out.h {
                                for x in 0..out.w {
                                    let idx = [n, c, y, x];
                                    let contrib = match node.op {
                                        Op::Add => g[i],
                                        Op::Sub => -g[i],
                                        Op::Mul => g[i] * ta.data[bcast_index(da, idx)],
                                        _ => unreachable!(),
                                    };
                                    gb[bcast_index(db, idx)] += contrib;
                                    i += 1;
                                }
                            }
                        }
                    }
                }
            }
            Op::MulScalar(s) => {
                let a = node.inputs[0];
                let ga = Self::ensure(grads, a, g.len());
                for (o, &gi) in ga.iter_mut().zip(g) {
                    *o += gi * s;
                }
            }
            Op::AddScalar => {
                let a = node.inputs[0];
                let ga = Self::ensure(grads, a, g.len());
                for (o, &gi) in ga.iter_mut().zip(g) {
                    *o += gi;
                }
            }
            Op::DivScalar(s) => {
                let a = node.inputs[0];
                let ga = Self::ensure(grads, a, g.len());
                for (o, &gi) in ga.iter_mut().zip(g) {
                    *o += gi / s;
                }
            }
            Op::Relu => {
                let a = node.inputs[0];
                let ta = self.nodes[a].value.data.clone();
                let ga = Self::ensure(grads, a, g.len());
                for ((o, &gi), v) in ga.iter_mut().zip(g).zip(ta) {
                    if v > 0.0 {
                        *o += gi;
                    }
                }
            }
            Op::Silu => {
                let a = node.inputs[0];
                let ta = self.nodes[a].value.data.clone();
                let ga = Self::ensure(grads, a, g.len());
                for ((o, &gi), v) in ga.iter_mut().zip(g).zip(ta) {
                    let s = sigmoid(v);
                    *o += gi * (s + v * s * (1.0 - s));
                }
            }
            Op::Conv2d { pad } => {
                self.conv2d_backward(node, pad, g, grads);
            }
            Op::AvgPool2 => {
                let a = node.inputs[0];
                let ta = &self.nodes[a].value;
                let out = &node.value;
                let ga = Self::ensure(grads, a, ta.numel());
                for ni in 0..out.n {
                    for ci in 0..out.c {
                        for y in 0..out.h {
                            for x in 0..out.w {
                                let gi =
                                    g[((ni * out.c + ci) * out.h + y) * out.w + x] * 0.25;
                                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    ga[((ni * ta.c + ci) * ta.h + 2 * y + dy) * ta.w
                                        + 2 * x
                                        + dx] += gi;
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample2 => {
                let a = node.inputs[0];
                let ta = &self.nodes[a].value;
                let out = &node.value;
                let ga = Self::ensure(grads, a, ta.numel());
                for ni in 0..out.n {
                    for ci in 0..out.c {
                        for y in 0..out.h {
                            for x in 0..out.w {
                                ga[((ni * ta.c + ci) * ta.h + y / 2) * ta.w + x / 2] +=
                                    g[((ni * out.c + ci) * out.h + y) * out.w + x];
                            }
                        }
                    }
                }
            }
            Op::ConcatC => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let ca = self.nodes[a].value.c;
                let out = &node.value;
                let (n, c, h, w) = (out.n, out.c, out.h, out.w);
                {
                    let ta_len = self.nodes[a].value.numel();
                    let ga = Self::ensure(grads, a, ta_len);
                    for ni in 0..n {
                        for ci in 0..ca {
                            for y in 0..h {
                                for x in 0..w {
                                    ga[((ni * ca + ci) * h + y) * w + x] +=
                                        g[((ni * c + ci) * h + y) * w + x];
                                }
                            }
                        }
                    }
                }
                {
                    let cb = c - ca;
                    let tb_len = self.nodes[b].value.numel();
                    let gb = Self::ensure(grads, b, tb_len);
                    for ni in 0..n {
                        for ci in 0..cb {
                            for y in 0..h {
                                for x in 0..w {
                                    gb[((ni * cb + ci) * h + y) * w + x] +=
                                        g[((ni * c + ca + ci) * h + y) * w + x];
                                }
                            }
                        }
                    }
                }
            }
            Op::GroupNorm { groups, eps } => {
                let a = node.inputs[0];
                let ta = &self.nodes[a].value;
                let cg = ta.c / groups;
                let gsize = cg * ta.h * ta.w;
                let ga = Self::ensure(grads, a, ta.numel());
                for ni in 0..ta.n {
                    for gr in 0..groups {
                        let start = ((ni * ta.c + gr * cg) * ta.h) * ta.w;
                        let xs = &ta.data[start..start + gsize];
                        let gshat = &node.value.data[start..start + gsize]; // x-hat
                        let gout = &g[start..start + gsize];
                        let mean = xs.iter().sum::<f32>() / gsize as f32;
                        let var =
                            xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / gsize as f32;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mg = gout.iter().sum::<f32>() / gsize as f32;
                        let mgx = gout.iter().zip(gshat).map(|(&a, &b)| a * b).sum::<f32>()
                            / gsize as f32;
                        for i in 0..gsize {
                            ga[start + i] += inv * (gout[i] - mg - gshat[i] * mgx);
                        }
                    }
                }
            }
            Op::Linear => {
                let (x, w, b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let tx = &self.nodes[x].value;
                let tw = &self.nodes[w].value;
                let din = tx.c * tx.h * tx.w;
                let dout = tw.n;
                {
                    let gx = Self::ensure(grads, x, tx.numel());
                    for ni in 0..tx.n {
                        for o in 0..dout {
                            let gi = g[ni * dout + o];
                            if gi == 0.0 {
                                continue;
                            }
                            let wrow = &tw.data[o * din..(o + 1) * din];
                            let xrow = &mut gx[ni * din..(ni + 1) * din];
                            for (xo, &wv) in xrow.iter_mut().zip(wrow) {
                                *xo += gi * wv;
                            }
                        }
                    }
                }
                {
                    let gw = Self::ensure(grads, w, tw.numel());
                    for ni in 0..tx.n {
                        let xrow = &tx.data[ni * din..(ni + 1) * din];
                        for o in 0..dout {
                            let gi = g[ni * dout + o];
                            if gi == 0.0 {
                                continue;
                            }
                            let wrow = &mut gw[o * din..(o + 1) * din];
                            for (wo, &xv) in wrow.iter_mut().zip(xrow) {
                                *wo += gi * xv;
                            }
                        }
                    }
                }
                {
                    let blen = self.nodes[b].value.numel();
                    let gb = Self::ensure(grads, b, blen);
                    for ni in 0..tx.n {
                        for o in 0..dout {
                            gb[o] += g[ni * dout + o];
                        }
                    }
                }
            }
            Op::MatmulT => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let ta = &self.nodes[a].value;
                let tb = &self.nodes[b].value;
                let d = ta.c * ta.h * ta.w;
                let (n, m) = (ta.n, tb.n);
                {
                    let ga = Self::ensure(grads, a, ta.numel());
                    for i in 0..n {
                        for j in 0..m {
                            let gi = g[i * m + j];
                            if gi == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                ga[i * d + k] += gi * tb.data[j * d + k];
                            }
                        }
                    }
                }
                {
                    let gb = Self::ensure(grads, b, tb.numel());
                    for i in 0..n {
                        for j in 0..m {
                            let gi = g[i * m + j];
                            if gi == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                gb[j * d + k] += gi * ta.data[i * d + k];
                            }
                        }
                    }
                }
            }
            Op::SumAll => {
                let a = node.inputs[0];
                let alen = self.nodes[a].value.numel();
                let ga = Self::ensure(grads, a, alen);
                let gi = g[0];
                for o in ga.iter_mut() {
                    *o += gi;
                }
            }
            Op::SumOffDiag => {
                let a = node.inputs[0];
                let ta = &self.nodes[a].value;
                let n = ta.h;
                let ga = Self::ensure(grads, a, ta.numel());
                let gi = g[0];
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            ga[i * n + j] += gi;
                        }
                    }
                }
            }
            Op::AvgPoolGrid { out } => {
                let a = node.inputs[0];
                let ta = &self.nodes[a].value;
                let ga = Self::ensure(grads, a, ta.numel());
                for ni in 0..ta.n {
                    for ci in 0..ta.c {
                        for by in 0..out {
                            let (y0, y1) = grid_bounds(ta.h, out, by);
                            for bx in 0..out {
                                let (x0, x1) = grid_bounds(ta.w, out, bx);
                                let gi = g[((ni * ta.c + ci) * out + by) * out + bx]
                                    / ((y1 - y0) * (x1 - x0)) as f32;
                                for y in y0..y1 {
                                    for x in x0..x1 {
                                        ga[((ni * ta.c + ci) * ta.h + y) * ta.w + x] += gi;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::BceWithLogits => {
                let (l, t) = (node.inputs[0], node.inputs[1]);
                let tl = self.nodes[l].value.data.clone();
                let tt = self.nodes[t].value.data.clone();
                let count = tl.len() as f32;
                let gi = g[0];
                {
                    let gl = Self::ensure(grads, l, tl.len());
                    for ((o, &z), &tv) in gl.iter_mut().zip(&tl).zip(&tt) {
                        *o += gi * (sigmoid(z) - tv) / count;
                    }
                }
                {
                    let gt = Self::ensure(grads, t, tt.len());
                    for (o, &z) in gt.iter_mut().zip(&tl) {
                        *o += gi * (-z) / count;
                    }
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        node: &Node,
        pad: usize,
        g: &[f32],
        grads: &mut Vec<Option<Vec<f32>>>,
    ) {
        let (x, w, b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
        let tx = &self.nodes[x].value;
        let tw = &self.nodes[w].value;
        let k = tw.h;
        let (n, co, ci, hh, ww) = (tx.n, tw.n, tx.c, tx.h, tx.w);
        {
            let gx = Self::ensure(grads, x, tx.numel());
            for ni in 0..n {
                for coi in 0..co {
                    let g_base = ((ni * co + coi) * hh) * ww;
                    for cii in 0..ci {
                        let x_base = ((ni * ci + cii) * hh) * ww;
                        for dy in 0..k {
                            for dx in 0..k {
                                // out[y][x] uses in[y+dy-pad][x+dx-pad], so
                                // grad flows back with the offset negated.
                                let wv = tw.at(coi, cii, dy, dx);
                                if wv == 0.0 {
                                    continue;
                                }
                                conv_accum(
                                    &mut gx[x_base..x_base + hh * ww],
                                    &g[g_base..g_base + hh * ww],
                                    hh, ww,
                                    pad as isize - dy as isize,
                                    pad as isize - dx as isize,
                                    wv,
                                );
                            }
                        }
                    }
                }
            }
        }
        {
            let gw = Self::ensure(grads, w, tw.numel());
            for coi in 0..co {
                for cii in 0..ci {
                    for dy in 0..k {
                        for dx in 0..k {
                            let (oy, ox) = (dy as isize - pad as isize, dx as isize - pad as isize);
                            let mut acc = 0.0f32;
                            for ni in 0..n {
                                let g_base = ((ni * co + coi) * hh) * ww;
                                let x_base = ((ni * ci + cii) * hh) * ww;
                                let y0 = (-oy).max(0) as usize;
                                let y1 = (hh as isize - oy).min(hh as isize) as usize;
                                for y in y0..y1 {
                                    let iy = (y as isize + oy) as usize;
                                    let x0 = (-ox).max(0) as usize;
                                    let x1 = (ww as isize - ox).min(ww as isize) as usize;
                                    let grow = &g[g_base + y * ww..g_base + y * ww + ww];
                                    let xrow =
                                        &tx.data[x_base + iy * ww..x_base + iy * ww + ww];
                                    for xx in x0..x1 {
                                        acc += grow[xx] * xrow[(xx as isize + ox) as usize];
                                    }
                                }
                            }
                            gw[((coi * ci + cii) * k + dy) * k + dx] += acc;
                        }
                    }
                }
            }
        }
        {
            let blen = self.nodes[b].value.numel();
            let gb = Self::ensure(grads, b, blen);
            for ni in 0..n {
                for coi in 0..co {
                    let g_base = ((ni * co + coi) * hh) * ww;
                    gb[coi] += g[g_base..g_base + hh * ww].iter().sum::<f32>();
                }
            }
        }
    }
}

/// out[y][x] += wv * input[y+oy][x+ox] over the in-bounds range.
#[inline]
fn conv_accum(
    out: &mut [f32],
    input: &[f32],
    h: usize,
    w: usize,
    oy: isize,
    ox: isize,
    wv: f32,
) {
    let y0 = (-oy).max(0) as usize;
    let y1 = ((h as isize - oy).min(h as isize)).max(0) as usize;
    let x0 = (-ox).max(0) as usize;
    let x1 = ((w as isize - ox).min(w as isize)).max(0) as usize;
    for y in y0..y1 {
        let iy = (y as isize + oy) as usize;
        let orow = &mut out[y * w + x0..y * w + x1];
        let irow = &input[iy * w + (x0 as isize + ox) as usize..];
        for (o, &iv) in orow.iter_mut().zip(irow.iter()) {
            *o += wv * iv;
        }
    }
}

#[inline]
fn grid_bounds(size: usize, bins: usize, bin: usize) -> (usize, usize) {
    (bin * size / bins, (bin + 1) * size / bins)
}

#[inline]
pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(n, c, h, w, data).unwrap()
    }

    /// Central finite differences on the scalar produced by `build` as a
    /// function of the leaf values in `leaves`.
    fn check_grads(leaves: Vec<Tensor>, build: impl Fn(&mut Graph, &[NodeId]) -> NodeId) {
        check_grads_h(leaves, 1e-2, build);
    }

    /// Like `check_grads` with an explicit step. Scalars that are exactly
    /// quadratic along each coordinate can use a large step: the central
    /// difference has no truncation error there, and the bigger step drowns
    /// out f32 cancellation noise.
    fn check_grads_h(
        leaves: Vec<Tensor>,
        h: f32,
        build: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
    ) {
        let eval = |vals: &[Tensor]| -> f32 {
            let mut g = Graph::new();
            let ids: Vec<_> = vals.iter().map(|t| g.leaf(t.clone())).collect();
            let root = build(&mut g, &ids);
            g.value(root).item()
        };
        let mut g = Graph::new();
        let ids: Vec<_> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
        let root = build(&mut g, &ids);
        assert_eq!(g.value(root).numel(), 1, "fd check needs a scalar root");
        let grads = g.backward(root, None);

        for (li, leaf) in leaves.iter().enumerate() {
            let ga = grads.get(ids[li]).expect("gradient missing");
            for ei in 0..leaf.numel() {
                let mut plus = leaves.clone();
                plus[li].data[ei] += h;
                let mut minus = leaves.clone();
                minus[li].data[ei] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let ad = ga[ei];
                let denom = fd.abs().max(ad.abs()).max(0.05);
                assert!(
                    (fd - ad).abs() / denom < 2e-2,
                    "leaf {li} elem {ei}: fd {fd} vs ad {ad}"
                );
            }
        }
    }

    #[test]
    fn fd_binary_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, 2, 3, 2, 2);
        let bias = rand_tensor(&mut rng, 1, 3, 1, 1);
        let c = rand_tensor(&mut rng, 2, 3, 2, 2);
        check_grads(vec![a, bias, c], |g, ids| {
            let s = g.add(ids[0], ids[1]);
            let m = g.mul(s, ids[2]);
            let d = g.sub(m, ids[0]);
            g.sum_all(d)
        });
    }

    #[test]
    fn fd_scalar_ops_and_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, 1, 2, 3, 3);
        check_grads(vec![a], |g, ids| {
            let x = g.mul_scalar(ids[0], 1.7);
            let x = g.add_scalar(x, 0.3);
            let x = g.silu(x);
            let x = g.div_scalar(x, 0.9);
            let x = g.relu(x);
            g.sum_all(x)
        });
    }

    #[test]
    fn fd_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, 2, 2, 5, 4);
        let w = rand_tensor(&mut rng, 3, 2, 3, 3);
        let b = rand_tensor(&mut rng, 1, 3, 1, 1);
        // sum(y^2) is quadratic along every coordinate, so a large step is
        // exact and avoids cancellation noise in the ~1e2-sized scalar.
        check_grads_h(vec![x, w, b], 0.2, |g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2]);
            let y2 = g.mul(y, y); // make the scalar nonlinear in y
            g.sum_all(y2)
        });
    }

    #[test]
    fn fd_pool_upsample_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&mut rng, 1, 2, 4, 4);
        let b = rand_tensor(&mut rng, 1, 1, 4, 4);
        check_grads(vec![a, b], |g, ids| {
            let p = g.avg_pool2(ids[0]);
            let u = g.upsample2(p);
            let cat = g.concat_c(u, ids[1]);
            let sq = g.mul(cat, cat);
            g.sum_all(sq)
        });
    }

    #[test]
    fn fd_group_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&mut rng, 2, 4, 3, 3);
        check_grads(vec![a], |g, ids| {
            let y = g.group_norm(ids[0], 2);
            let y3 = g.mul(y, y);
            let y3 = g.mul(y3, y);
            g.sum_all(y3)
        });
    }

    #[test]
    fn fd_linear_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, 3, 4, 1, 1);
        let w = rand_tensor(&mut rng, 2, 4, 1, 1);
        let b = rand_tensor(&mut rng, 1, 2, 1, 1);
        let e = rand_tensor(&mut rng, 2, 2, 1, 1);
        check_grads(vec![x, w, b, e], |g, ids| {
            let y = g.linear(ids[0], ids[1], ids[2]);
            let k = g.matmul_t(y, ids[3]);
            let k2 = g.mul(k, k);
            g.sum_all(k2)
        });
    }

    #[test]
    fn fd_offdiag_poolgrid_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, 2, 3, 1, 1);
        let img = rand_tensor(&mut rng, 1, 1, 5, 5);
        let logits = rand_tensor(&mut rng, 1, 1, 3, 3);
        let mut targets = rand_tensor(&mut rng, 1, 1, 3, 3);
        for t in targets.data.iter_mut() {
            *t = if *t > 0.0 { 1.0 } else { 0.0 };
        }
        check_grads(vec![a, img, logits, targets.clone()], |g, ids| {
            let k = g.matmul_t(ids[0], ids[0]);
            let od = g.sum_off_diag(k);
            let pg = g.avg_pool_grid(ids[1], 2);
            let ps = g.sum_all(pg);
            let bce = g.bce_with_logits(ids[2], ids[3]);
            let t1 = g.add(od, ps);
            g.add(t1, bce)
        });
    }

    #[test]
    fn eps_zero_estimate_is_exact_division() {
        // (x - sigma*0)/alpha must be the bitwise f32 quotient x/alpha.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(1, 1, 1, 2, vec![0.37, -1.1]).unwrap());
        let z = g.leaf(Tensor::zeros(1, 1, 1, 2));
        let sz = g.mul_scalar(z, 0.8);
        let num = g.sub(x, sz);
        let out = g.div_scalar(num, 0.3);
        assert_eq!(g.value(out).data[0], 0.37f32 / 0.3);
        assert_eq!(g.value(out).data[1], -1.1f32 / 0.3);
    }

    #[test]
    fn backward_with_custom_seed() {
        // d(a.b)/da with seed s equals s*b for the dot-product-like graph.
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(1, 1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let b = g.leaf(Tensor::from_vec(1, 1, 1, 3, vec![4.0, 5.0, 6.0]).unwrap());
        let m = g.mul(a, b);
        let grads = g.backward(m, Some(&[1.0, 0.0, 2.0]));
        assert_eq!(grads.get(a).unwrap(), &[4.0, 0.0, 12.0]);
    }
}
