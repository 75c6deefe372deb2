//! A reverse-mode tape over [`Tensor`] values.
//!
//! Every op records its inputs; [`Graph::backward`] walks the tape in reverse.
//! Transposed convolution is itself a differentiable op, which is what lets the
//! critic's input gradient be rebuilt inside the graph and differentiated again
//! for the gradient penalty.
//!
//! Shape errors inside the graph are programming errors and panic; callers
//! validate user-facing shapes before building a graph.

use crate::kernels::{self, ConvSpec};
use crate::tensor::{numel, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Sqrt(Var),
    Square(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    Mean(Var),
    SumPerSample(Var),
    MeanSpatial(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    ConvTranspose2d { x: Var, w: Var, spec: ConvSpec },
    ReplicatePad(Var, usize),
    ChannelNorm(Var, f64),
    SimpleGate(Var),
    PixelShuffle(Var, usize),
    NarrowChannels(Var, usize),
    DiffH(Var),
    DiffW(Var),
}

impl Op {
    /// Short name used when auditing which primitives a sub-network uses.
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) | Op::AddScalar(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) | Op::Scale(..) => "mul",
            Op::Div(..) => "div",
            Op::Abs(_) => "abs",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sum(_) | Op::SumPerSample(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanSpatial(_) => "pool",
            Op::Conv2d { .. } => "conv",
            Op::ConvTranspose2d { .. } => "conv_transpose",
            Op::ReplicatePad(..) => "pad",
            Op::ChannelNorm(..) => "norm",
            Op::SimpleGate(_) => "gate",
            Op::PixelShuffle(..) => "pixel_shuffle",
            Op::NarrowChannels(..) => "narrow",
            Op::DiffH(_) | Op::DiffW(_) => "diff",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Strides of `small` when broadcast against `big` (0 on broadcast axes).
fn broadcast_strides(big: Shape, small: Shape) -> [usize; 4] {
    let mut strides = [0; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        assert!(
            small[d] == big[d] || small[d] == 1,
            "cannot broadcast {small:?} to {big:?}"
        );
        strides[d] = if small[d] == 1 { 0 } else { acc };
        acc *= small[d];
    }
    strides
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = a.shape();
    let st = broadcast_strides(shape, b.shape());
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(a.len());
    let mut i = 0;
    for n in 0..shape[0] {
        for c in 0..shape[1] {
            for y in 0..shape[2] {
                let base = n * st[0] + c * st[1] + y * st[2];
                for x in 0..shape[3] {
                    out.push(f(ad[i], bd[base + x * st[3]]));
                    i += 1;
                }
            }
        }
    }
    Tensor::new(shape, out).expect("broadcast shape")
}

/// Sums `t` down to `shape` over broadcast axes.
fn reduce_to(t: Tensor, shape: Shape) -> Tensor {
    if t.shape() == shape {
        return t;
    }
    let big = t.shape();
    let st = broadcast_strides(big, shape);
    let mut out = vec![0.0; numel(&shape)];
    let d = t.data();
    let mut i = 0;
    for n in 0..big[0] {
        for c in 0..big[1] {
            for y in 0..big[2] {
                let base = n * st[0] + c * st[1] + y * st[2];
                for x in 0..big[3] {
                    out[base + x * st[3]] += d[i];
                    i += 1;
                }
            }
        }
    }
    Tensor::new(shape, out).expect("reduce shape")
}

fn channel_norm_forward(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let d = x.data();
    let mut out = Tensor::zeros(x.shape());
    let mut rstd = vec![0.0; n * hw];
    let o = out.data_mut();
    for s in 0..n {
        for p in 0..hw {
            let at = |ch: usize| (s * c + ch) * hw + p;
            let mean = (0..c).map(|ch| d[at(ch)]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ch| (d[at(ch)] - mean).powi(2)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[s * hw + p] = r;
            for ch in 0..c {
                o[at(ch)] = (d[at(ch)] - mean) * r;
            }
        }
    }
    (out, rstd)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Primitive names of every node created after `start`, in creation order.
    pub fn op_names_since(&self, start: usize) -> Vec<&'static str> {
        self.nodes[start..].iter().map(|n| n.op.name()).collect()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), f);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    /// `a + b`, with `b` broadcast to `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| x * k)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + k)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(v, Op::Mean(a), rg)
    }

    /// `[N, C, H, W] -> [N, 1, 1, 1]`.
    pub fn sum_per_sample(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.shape()[0];
        let v = reduce_to(t.clone(), [n, 1, 1, 1]);
        let rg = self.rg(a);
        self.push(v, Op::SumPerSample(a), rg)
    }

    /// Global average pool: `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn mean_spatial(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let [n, c, h, w] = t.shape();
        let v = reduce_to(t.clone(), [n, c, 1, 1]).scale(1.0 / (h * w) as f64);
        let rg = self.rg(a);
        self.push(v, Op::MeanSpatial(a), rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let value = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(value, Op::Conv2d { x, w, b, spec }, rg)
    }

    /// Adjoint of `conv2d(·, w)`: maps an output-shaped `x` back to `out_shape`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, spec: ConvSpec, out_shape: Shape) -> Var {
        let value = kernels::conv2d_input_grad(self.value(x), self.value(w), spec, out_shape);
        let rg = self.rg(x) || self.rg(w);
        self.push(value, Op::ConvTranspose2d { x, w, spec }, rg)
    }

    /// Edge-clamp padding by `p` pixels on every side.
    pub fn replicate_pad(&mut self, a: Var, p: usize) -> Var {
        let t = self.value(a);
        let [n, c, h, w] = t.shape();
        let v = Tensor::from_fn([n, c, h + 2 * p, w + 2 * p], |[s, ch, y, x]| {
            let sy = y.saturating_sub(p).min(h - 1);
            let sx = x.saturating_sub(p).min(w - 1);
            t.at([s, ch, sy, sx])
        });
        let rg = self.rg(a);
        self.push(v, Op::ReplicatePad(a, p), rg)
    }

    /// Per-pixel normalization across channels (no affine part).
    pub fn channel_norm(&mut self, a: Var, eps: f64) -> Var {
        let (v, _) = channel_norm_forward(self.value(a), eps);
        let rg = self.rg(a);
        self.push(v, Op::ChannelNorm(a, eps), rg)
    }

    /// Splits channels in half and multiplies the halves.
    pub fn simple_gate(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let [n, c2, h, w] = t.shape();
        assert!(c2 % 2 == 0, "simple_gate needs an even channel count, got {c2}");
        let c = c2 / 2;
        let v = Tensor::from_fn([n, c, h, w], |[s, ch, y, x]| t.at([s, ch, y, x]) * t.at([s, ch + c, y, x]));
        let rg = self.rg(a);
        self.push(v, Op::SimpleGate(a), rg)
    }

    /// `[N, C·r², H, W] -> [N, C, H·r, W·r]`.
    pub fn pixel_shuffle(&mut self, a: Var, r: usize) -> Var {
        let t = self.value(a);
        let [n, cr, h, w] = t.shape();
        assert!(cr % (r * r) == 0, "pixel_shuffle: {cr} channels not divisible by {}", r * r);
        let v = Tensor::from_fn([n, cr / (r * r), h * r, w * r], |[s, c, y, x]| {
            t.at([s, c * r * r + (y % r) * r + x % r, y / r, x / r])
        });
        let rg = self.rg(a);
        self.push(v, Op::PixelShuffle(a, r), rg)
    }

    /// Channels `[start, start + len)`.
    pub fn narrow_channels(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let [n, c, h, w] = t.shape();
        assert!(start + len <= c);
        let v = Tensor::from_fn([n, len, h, w], |[s, ch, y, x]| t.at([s, start + ch, y, x]));
        let rg = self.rg(a);
        self.push(v, Op::NarrowChannels(a, start), rg)
    }

    /// Forward differences along height: `x[y+1] - x[y]`.
    pub fn diff_h(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let [n, c, h, w] = t.shape();
        let v = Tensor::from_fn([n, c, h - 1, w], |[s, ch, y, x]| t.at([s, ch, y + 1, x]) - t.at([s, ch, y, x]));
        let rg = self.rg(a);
        self.push(v, Op::DiffH(a), rg)
    }

    /// Forward differences along width: `x[x+1] - x[x]`.
    pub fn diff_w(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let [n, c, h, w] = t.shape();
        let v = Tensor::from_fn([n, c, h, w - 1], |[s, ch, y, x]| t.at([s, ch, y, x + 1]) - t.at([s, ch, y, x]));
        let rg = self.rg(a);
        self.push(v, Op::DiffW(a), rg)
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.node_backward(node, &g);
            for (var, contribution) in contributions {
                if !self.rg(var) {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| self.value(v);
        match node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(a, g.clone()), (b, reduce_to(g.clone(), self.shape(b)))],
            Op::Sub(a, b) => vec![(a, g.clone()), (b, reduce_to(g.scale(-1.0), self.shape(b)))],
            Op::Mul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.rg(a) {
                    out.push((a, broadcast_zip(g, val(b), |g, y| g * y)));
                }
                if self.rg(b) {
                    out.push((b, reduce_to(g.zip_map(val(a), |g, x| g * x), self.shape(b))));
                }
                out
            }
            Op::Div(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.rg(a) {
                    out.push((a, broadcast_zip(g, val(b), |g, y| g / y)));
                }
                if self.rg(b) {
                    // d(a/b)/db = -(a/b)/b = -out/b
                    let t = broadcast_zip(&g.zip_map(&node.value, |g, q| -g * q), val(b), |v, y| v / y);
                    out.push((b, reduce_to(t, self.shape(b))));
                }
                out
            }
            Op::Scale(a, k) => vec![(a, g.scale(k))],
            Op::AddScalar(a) => vec![(a, g.clone())],
            Op::Abs(a) => vec![(a, g.zip_map(val(a), |g, x| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 }))],
            Op::Sqrt(a) => vec![(a, g.zip_map(&node.value, |g, s| if s > 0.0 { 0.5 * g / s } else { 0.0 }))],
            Op::Square(a) => vec![(a, g.zip_map(val(a), |g, x| 2.0 * g * x))],
            Op::LeakyRelu(a, slope) => vec![(a, g.zip_map(val(a), |g, x| if x > 0.0 { g } else { slope * g }))],
            Op::Sum(a) => vec![(a, Tensor::full(self.shape(a), g.item()))],
            Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                vec![(a, Tensor::full(self.shape(a), g.item() / n))]
            }
            Op::SumPerSample(a) => vec![(a, broadcast_zip(&Tensor::zeros(self.shape(a)), g, |_, g| g))],
            Op::MeanSpatial(a) => {
                let [_, _, h, w] = self.shape(a);
                let inv = 1.0 / (h * w) as f64;
                vec![(a, broadcast_zip(&Tensor::zeros(self.shape(a)), g, |_, g| g * inv))]
            }
            Op::Conv2d { x, w, b, spec } => {
                let mut out = Vec::with_capacity(3);
                if self.rg(x) {
                    out.push((x, kernels::conv2d_input_grad(g, val(w), spec, self.shape(x))));
                }
                if self.rg(w) {
                    out.push((w, kernels::conv2d_weight_grad(val(x), g, spec, self.shape(w))));
                }
                if let Some(b) = b.filter(|&b| self.rg(b)) {
                    out.push((b, kernels::bias_grad(g).reshape(self.shape(b)).expect("bias shape")));
                }
                out
            }
            Op::ConvTranspose2d { x, w, spec } => {
                let mut out = Vec::with_capacity(2);
                if self.rg(x) {
                    out.push((x, kernels::conv2d_forward(g, val(w), None, spec)));
                }
                if self.rg(w) {
                    out.push((w, kernels::conv2d_weight_grad(g, val(x), spec, self.shape(w))));
                }
                out
            }
            Op::ReplicatePad(a, p) => {
                let [_, _, h, w] = self.shape(a);
                let mut ga = Tensor::zeros(self.shape(a));
                let [n, c, hp, wp] = g.shape();
                for s in 0..n {
                    for ch in 0..c {
                        for y in 0..hp {
                            let sy = y.saturating_sub(p).min(h - 1);
                            for x in 0..wp {
                                let sx = x.saturating_sub(p).min(w - 1);
                                let o = ga.offset([s, ch, sy, sx]);
                                ga.data_mut()[o] += g.at([s, ch, y, x]);
                            }
                        }
                    }
                }
                vec![(a, ga)]
            }
            Op::ChannelNorm(a, eps) => {
                let (yhat, rstd) = channel_norm_forward(val(a), eps);
                let [n, c, h, w] = g.shape();
                let hw = h * w;
                let mut ga = Tensor::zeros(g.shape());
                let (gd, yd) = (g.data(), yhat.data());
                let od = ga.data_mut();
                for s in 0..n {
                    for p in 0..hw {
                        let at = |ch: usize| (s * c + ch) * hw + p;
                        let mg = (0..c).map(|ch| gd[at(ch)]).sum::<f64>() / c as f64;
                        let mgy = (0..c).map(|ch| gd[at(ch)] * yd[at(ch)]).sum::<f64>() / c as f64;
                        let r = rstd[s * hw + p];
                        for ch in 0..c {
                            od[at(ch)] = r * (gd[at(ch)] - mg - yd[at(ch)] * mgy);
                        }
                    }
                }
                vec![(a, ga)]
            }
            Op::SimpleGate(a) => {
                let t = val(a);
                let c = g.shape()[1];
                let ga = Tensor::from_fn(t.shape(), |[s, ch, y, x]| {
                    if ch < c {
                        g.at([s, ch, y, x]) * t.at([s, ch + c, y, x])
                    } else {
                        g.at([s, ch - c, y, x]) * t.at([s, ch - c, y, x])
                    }
                });
                vec![(a, ga)]
            }
            Op::PixelShuffle(a, r) => {
                let ga = Tensor::from_fn(self.shape(a), |[s, c, y, x]| {
                    let (oc, rem) = (c / (r * r), c % (r * r));
                    g.at([s, oc, y * r + rem / r, x * r + rem % r])
                });
                vec![(a, ga)]
            }
            Op::NarrowChannels(a, start) => {
                let len = g.shape()[1];
                let ga = Tensor::from_fn(self.shape(a), |[s, c, y, x]| {
                    if c >= start && c < start + len {
                        g.at([s, c - start, y, x])
                    } else {
                        0.0
                    }
                });
                vec![(a, ga)]
            }
            Op::DiffH(a) => {
                let [_, _, h, _] = self.shape(a);
                let ga = Tensor::from_fn(self.shape(a), |[s, c, y, x]| {
                    let down = if y >= 1 { g.at([s, c, y - 1, x]) } else { 0.0 };
                    let up = if y + 1 < h { g.at([s, c, y, x]) } else { 0.0 };
                    down - up
                });
                vec![(a, ga)]
            }
            Op::DiffW(a) => {
                let [_, _, _, w] = self.shape(a);
                let ga = Tensor::from_fn(self.shape(a), |[s, c, y, x]| {
                    let left = if x >= 1 { g.at([s, c, y, x - 1]) } else { 0.0 };
                    let right = if x + 1 < w { g.at([s, c, y, x]) } else { 0.0 };
                    left - right
                });
                vec![(a, ga)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, GradCheck};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(sum(f(x) * probe))/dx against finite differences.
    fn check_unary(shape: Shape, seed: u64, f: impl Fn(&mut Graph, Var) -> Var) {
        let x0 = random(shape, seed);
        let probe_shape = {
            let mut g = Graph::new();
            let x = g.constant(x0.clone());
            let y = f(&mut g, x);
            g.shape(y)
        };
        let probe = random(probe_shape, seed + 100);
        let eval = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let y = f(&mut g, xv);
            let p = g.constant(probe.clone());
            let prod = g.mul(y, p);
            let s = g.sum(prod);
            let grads = g.backward(s);
            (g.value(s).item(), grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        };
        let report = check_gradient(&x0, eval, &GradCheck { step: 1e-5, samples: 40, seed, ..Default::default() });
        assert!(report.passed(1e-5), "{report:?}");
    }

    #[test]
    fn elementwise_and_broadcast_ops() {
        check_unary([2, 3, 4, 5], 1, |g, x| g.square(x));
        check_unary([2, 3, 4, 5], 2, |g, x| {
            let b = g.constant(random([1, 3, 1, 1], 9));
            g.mul(x, b)
        });
        check_unary([2, 3, 4, 5], 3, |g, x| {
            let p = g.mean_spatial(x);
            g.mul(x, p)
        });
        check_unary([2, 3, 4, 5], 4, |g, x| {
            let d = g.add_scalar(x, 3.0);
            let s = g.square(x);
            g.div(s, d)
        });
        check_unary([2, 3, 4, 5], 5, |g, x| {
            let s = g.sum_per_sample(x);
            let sq = g.square(s);
            let r = g.add_scalar(sq, 1.0);
            g.sqrt(r)
        });
    }

    #[test]
    fn structural_ops() {
        check_unary([2, 4, 3, 3], 6, |g, x| g.simple_gate(x));
        check_unary([1, 8, 2, 3], 7, |g, x| g.pixel_shuffle(x, 2));
        check_unary([2, 5, 3, 3], 8, |g, x| g.narrow_channels(x, 1, 3));
        check_unary([2, 2, 5, 4], 9, |g, x| g.diff_h(x));
        check_unary([2, 2, 5, 4], 10, |g, x| g.diff_w(x));
        check_unary([1, 2, 4, 5], 11, |g, x| g.replicate_pad(x, 2));
        check_unary([2, 6, 3, 3], 12, |g, x| g.channel_norm(x, 1e-6));
    }

    #[test]
    fn convolutions_wrt_input_and_weight() {
        let spec = ConvSpec::new(2, 1, 1);
        let w0 = random([3, 2, 4, 4], 20);
        check_unary([2, 2, 8, 6], 21, |g, x| {
            let w = g.constant(w0.clone());
            g.conv2d(x, w, None, spec)
        });
        let x0 = random([2, 2, 8, 6], 22);
        check_unary([3, 2, 4, 4], 23, |g, w| {
            let x = g.constant(x0.clone());
            g.conv2d(x, w, None, spec)
        });
        let delta = random([2, 3, 4, 3], 24);
        check_unary([3, 2, 4, 4], 25, |g, w| {
            let d = g.constant(delta.clone());
            g.conv_transpose2d(d, w, spec, [2, 2, 8, 6])
        });
        check_unary([2, 3, 4, 3], 26, |g, d| {
            let w = g.constant(w0.clone());
            g.conv_transpose2d(d, w, spec, [2, 2, 8, 6])
        });
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full([1, 1, 2, 2], 2.0));
        let p = g.param(Tensor::full([1, 1, 2, 2], 3.0));
        let m = g.mul(c, p);
        let s = g.sum(m);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[2.0; 4]);
    }
}
