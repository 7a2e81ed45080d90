//! Append-only computation record with reverse-mode differentiation.
//!
//! Nodes are stored in insertion order, which is also a topological order:
//! every operand of a node was inserted before it. `backward` walks the
//! record once in reverse.

use std::fmt;

use rayon::prelude::*;

use crate::conv::Kernel;
use crate::error::{DiffError, Result};
use crate::tensor::{pairwise_sum, Tensor};
use crate::{bilinear, conv, linalg};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Abs,
    /// ELU with alpha = 1.
    Elu,
    Sigmoid,
    Exp,
    Sin,
    Cos,
    Recip,
    Neg,
}

/// How the right operand of a binary op lines up with the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    /// Right operand has the left shape with a trailing extent of 1.
    Channel,
}

/// Which source channels a bilinear lookup reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Every coordinate reads all source channels.
    Full,
    /// Coordinate group `k` reads only source channel `k`.
    Diagonal,
}

/// A primitive whose forward value is computed by the caller.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product: one entry per input, `None` for inputs that
    /// receive no gradient.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
    ) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Constant,
    Binary {
        kind: BinaryOp,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Unary {
        kind: UnaryOp,
        a: Var,
    },
    Affine {
        a: Var,
        scale: f64,
    },
    Clamp {
        a: Var,
        lo: f64,
        hi: f64,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax {
        a: Var,
    },
    Bilinear {
        src: Var,
        coords: Var,
        mode: SampleMode,
        fill: f64,
    },
    Conv {
        x: Var,
        kernel: Kernel,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Reshape {
        a: Var,
    },
    Tile {
        a: Var,
    },
    WeightedSum {
        w: Var,
        v: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Binary { .. } => "binary",
            Op::Unary { .. } => "unary",
            Op::Affine { .. } => "affine",
            Op::Clamp { .. } => "clamp",
            Op::Linear { .. } => "linear",
            Op::Softmax { .. } => "softmax",
            Op::Bilinear { .. } => "bilinear_sample",
            Op::Conv { .. } => "conv2d_fixed",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::Tile { .. } => "tile",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode computation record. Single owner; not meant to be shared
/// across threads while it is being built.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

/// Gradients of a scalar loss, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; exactly zero when `v` did not
    /// participate in the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads.get_mut(v.0).and_then(|g| g.take()) {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
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

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(DiffError::UnknownNode(v.0))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        let node = self.nodes.len();
        if !value.all_finite() {
            return Err(DiffError::NonFinite {
                op: op.name(),
                node,
            });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(node))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let av = self.check(a)?;
        let bv = self.check(b)?;
        let bcast = if av.shape() == bv.shape() {
            Broadcast::Same
        } else if bv.len() == 1 {
            Broadcast::Scalar
        } else if bv.channels() == 1
            && av.shape()[..av.shape().len() - 1] == bv.shape()[..bv.shape().len() - 1]
        {
            Broadcast::Channel
        } else {
            return Err(DiffError::ShapeMismatch {
                op: "elementwise",
                expected: av.shape().to_vec(),
                found: bv.shape().to_vec(),
            });
        };
        let c = av.channels();
        let bd = bv.data();
        let bidx = |i: usize| match bcast {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Channel => i / c,
        };
        if kind == BinaryOp::Div && bd.contains(&0.0) {
            return Err(DiffError::DivisionByZero {
                node: self.nodes.len(),
            });
        }
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
            BinaryOp::Div => |x, y| x / y,
        };
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[bidx(i)]))
                .collect(),
        )?;
        self.push(out, Op::Binary { kind, a, b, bcast }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryOp, a: Var) -> Result<Var> {
        let av = self.check(a)?;
        if kind == UnaryOp::Recip && av.data().contains(&0.0) {
            return Err(DiffError::DivisionByZero {
                node: self.nodes.len(),
            });
        }
        let f: fn(f64) -> f64 = match kind {
            UnaryOp::Abs => f64::abs,
            UnaryOp::Elu => |x| if x > 0.0 { x } else { x.exp_m1() },
            UnaryOp::Sigmoid => sigmoid,
            UnaryOp::Exp => f64::exp,
            UnaryOp::Sin => f64::sin,
            UnaryOp::Cos => f64::cos,
            UnaryOp::Recip => f64::recip,
            UnaryOp::Neg => |x| -x,
        };
        let out = av.map(f);
        self.push(out, Op::Unary { kind, a }, &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Abs, a)
    }

    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Elu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Recip, a)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.check(a)?.map(|x| scale * x + shift);
        self.push(out, Op::Affine { a, scale }, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, 1.0, s)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, s, 0.0)
    }

    /// Clamp to `[lo, hi]`; the gradient is zero wherever the input sits at
    /// or beyond a bound.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.check(a)?.map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp { a, lo, hi }, &[a])
    }

    // ---- dense ----------------------------------------------------------

    /// `y = x W + b` applied to every row of `x[.., Din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.check(x)?;
        let wv = self.check(w)?;
        if wv.shape().len() != 2 || xv.channels() != wv.shape()[0] {
            return Err(DiffError::ShapeMismatch {
                op: "linear",
                expected: vec![xv.channels(), 0],
                found: wv.shape().to_vec(),
            });
        }
        let (din, dout) = (wv.shape()[0], wv.shape()[1]);
        if let Some(b) = b {
            let bv = self.check(b)?;
            if bv.len() != dout {
                return Err(DiffError::ShapeMismatch {
                    op: "linear",
                    expected: vec![dout],
                    found: bv.shape().to_vec(),
                });
            }
        }
        let rows = xv.len() / din;
        let mut out = linalg::matmul(xv.data(), wv.data(), rows, din, dout);
        if let Some(b) = b {
            let bd = self.nodes[b.0].value.data();
            for row in out.chunks_mut(dout) {
                for (o, bb) in row.iter_mut().zip(bd) {
                    *o += bb;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    /// Softmax over the trailing (channel) axis, with max subtraction.
    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        let av = self.check(a)?;
        let n = av.channels();
        let mut out = av.clone();
        out.data_mut().par_chunks_mut(n).for_each(softmax_in_place);
        self.push(out, Op::Softmax { a }, &[a])
    }

    /// Bilinear lookup into `src[H, W, C]` at continuous pixel coordinates
    /// `coords[.., 2]` given as `(u, v)` with the origin at the centre of the
    /// top-left pixel. Corners outside the raster read `fill`.
    ///
    /// Returns the sampled values and, per coordinate, the fraction of the
    /// bilinear weight that landed inside the source (not differentiated).
    pub fn bilinear_sample(
        &mut self,
        src: Var,
        coords: Var,
        mode: SampleMode,
        fill: f64,
    ) -> Result<(Var, Tensor)> {
        let sv = self.check(src)?;
        let cv = self.check(coords)?;
        let (out, validity) = bilinear::forward(sv, cv, mode, fill)?;
        let var = self.push(
            out,
            Op::Bilinear {
                src,
                coords,
                mode,
                fill,
            },
            &[src, coords],
        )?;
        Ok((var, validity))
    }

    /// Per-channel convolution of `x[H, W, C]` with a constant stencil,
    /// reflect padding at the borders.
    pub fn conv2d_fixed(&mut self, x: Var, kernel: &Kernel) -> Result<Var> {
        let out = conv::forward(self.check(x)?, kernel)?;
        self.push(
            out,
            Op::Conv {
                x,
                kernel: kernel.clone(),
            },
            &[x],
        )
    }

    // ---- layout ---------------------------------------------------------

    /// Concatenate along the trailing axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(DiffError::InvalidArgument("concat of nothing".into()));
        }
        let first = self.check(parts[0])?.shape().to_vec();
        let prefix = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.check(p)?.shape();
            if &s[..s.len() - 1] != prefix {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    expected: first.clone(),
                    found: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = prefix.iter().product();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.nodes[p.0].value.data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = prefix.to_vec();
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    /// Sub-range `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let av = self.check(a)?;
        let shape = av.shape();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(DiffError::InvalidArgument(format!(
                "slice [{start}, {end}) on axis {axis} of {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let take = end - start;
        let mut data = Vec::with_capacity(outer * take * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            data.extend_from_slice(&av.data()[base..base + take * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[axis] = take;
        let out = Tensor::new(new_shape, data)?;
        self.push(out, Op::Slice { a, axis, start }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.check(a)?.clone().reshape(shape)?;
        self.push(out, Op::Reshape { a }, &[a])
    }

    /// Repeat `a` for every index of `prefix`; output shape is
    /// `prefix ++ a.shape`.
    pub fn tile(&mut self, a: Var, prefix: &[usize]) -> Result<Var> {
        let av = self.check(a)?;
        let reps: usize = prefix.iter().product();
        let mut data = Vec::with_capacity(reps * av.len());
        for _ in 0..reps {
            data.extend_from_slice(av.data());
        }
        let mut shape = prefix.to_vec();
        shape.extend_from_slice(av.shape());
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Tile { a }, &[a])
    }

    /// `out[s, c] = sum_k w[s, k] * v[s, k, c]` for `w = S ++ [K]`,
    /// `v = S ++ [K, C]`.
    pub fn weighted_sum(&mut self, w: Var, v: Var) -> Result<Var> {
        let wv = self.check(w)?;
        let vv = self.check(v)?;
        let ws = wv.shape();
        let vs = vv.shape();
        if vs.len() != ws.len() + 1 || vs[..ws.len()] != *ws {
            return Err(DiffError::ShapeMismatch {
                op: "weighted_sum",
                expected: ws.to_vec(),
                found: vs.to_vec(),
            });
        }
        let k = wv.channels();
        let c = vv.channels();
        let rows = wv.len() / k;
        let mut data = vec![0.0; rows * c];
        let (wd, vd) = (wv.data(), vv.data());
        data.par_chunks_mut(c).enumerate().for_each(|(s, out)| {
            for j in 0..k {
                let weight = wd[s * k + j];
                let base = (s * k + j) * c;
                for ch in 0..c {
                    out[ch] += weight * vd[base + ch];
                }
            }
        });
        let mut shape = ws[..ws.len() - 1].to_vec();
        shape.push(c);
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::WeightedSum { w, v }, &[w, v])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.check(a)?.sum());
        self.push(out, Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.check(a)?.mean());
        self.push(out, Op::Mean { a }, &[a])
    }

    /// Register a primitive implemented outside this crate. `output` must
    /// already hold the forward value.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor,
        op: Box<dyn CustomOp>,
    ) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    // ---- reverse pass ---------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node that
    /// depends on a leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.check(loss)?;
        if !lv.is_scalar() {
            return Err(DiffError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Binary { kind, a, b, bcast } => {
                let (av, bv) = (val(*a), val(*b));
                let c = av.channels();
                let bidx = |i: usize| match bcast {
                    Broadcast::Same => i,
                    Broadcast::Scalar => 0,
                    Broadcast::Channel => i / c,
                };
                let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                if want(*a) {
                    let ga = match kind {
                        BinaryOp::Add | BinaryOp::Sub => g.clone(),
                        BinaryOp::Mul => Tensor::from_fn(av.shape(), |i| gd[i] * bd[bidx(i)]),
                        BinaryOp::Div => Tensor::from_fn(av.shape(), |i| gd[i] / bd[bidx(i)]),
                    };
                    self.accumulate(grads, *a, ga);
                }
                if want(*b) {
                    let mut gb = Tensor::zeros(bv.shape());
                    let gbd = gb.data_mut();
                    for i in 0..gd.len() {
                        let j = bidx(i);
                        gbd[j] += match kind {
                            BinaryOp::Add => gd[i],
                            BinaryOp::Sub => -gd[i],
                            BinaryOp::Mul => gd[i] * ad[i],
                            BinaryOp::Div => -gd[i] * ad[i] / (bd[j] * bd[j]),
                        };
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Unary { kind, a } => {
                let (xd, yd, gd) = (val(*a).data(), node.value.data(), g.data());
                let ga = Tensor::from_fn(g.shape(), |i| {
                    let (x, y) = (xd[i], yd[i]);
                    let d = match kind {
                        UnaryOp::Abs => {
                            if x > 0.0 {
                                1.0
                            } else if x < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryOp::Elu => {
                            if x > 0.0 {
                                1.0
                            } else {
                                y + 1.0
                            }
                        }
                        UnaryOp::Sigmoid => y * (1.0 - y),
                        UnaryOp::Exp => y,
                        UnaryOp::Sin => x.cos(),
                        UnaryOp::Cos => -x.sin(),
                        UnaryOp::Recip => -y * y,
                        UnaryOp::Neg => -1.0,
                    };
                    gd[i] * d
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Affine { a, scale } => {
                let s = *scale;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::Clamp { a, lo, hi } => {
                let xd = val(*a).data();
                let gd = g.data();
                let ga = Tensor::from_fn(g.shape(), |i| {
                    if xd[i] > *lo && xd[i] < *hi {
                        gd[i]
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / din;
                if want(*x) {
                    let gx = linalg::matmul_bt(g.data(), wv.data(), rows, dout, din);
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
                }
                if want(*w) {
                    let gw = linalg::matmul_at(xv.data(), g.data(), rows, din, dout);
                    self.accumulate(grads, *w, Tensor::new(vec![din, dout], gw).unwrap());
                }
                if let Some(b) = b {
                    if want(*b) {
                        let mut gb = vec![0.0; dout];
                        for row in g.data().chunks(dout) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        let gb = Tensor::new(val(*b).shape().to_vec(), gb).unwrap();
                        self.accumulate(grads, *b, gb);
                    }
                }
            }
            Op::Softmax { a } => {
                let n = node.value.channels();
                let mut ga = g.clone();
                ga.data_mut()
                    .par_chunks_mut(n)
                    .zip(node.value.data().par_chunks(n))
                    .for_each(|(gr, yr)| {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (gi, yi) in gr.iter_mut().zip(yr) {
                            *gi = yi * (*gi - dot);
                        }
                    });
                self.accumulate(grads, *a, ga);
            }
            Op::Bilinear {
                src,
                coords,
                mode,
                fill,
            } => {
                let (gs, gc) = bilinear::backward(
                    val(*src),
                    val(*coords),
                    *mode,
                    *fill,
                    g,
                    want(*src),
                    want(*coords),
                );
                if let Some(gs) = gs {
                    self.accumulate(grads, *src, gs);
                }
                if let Some(gc) = gc {
                    self.accumulate(grads, *coords, gc);
                }
            }
            Op::Conv { x, kernel } => {
                let gx = conv::backward(val(*x).shape(), kernel, g);
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { parts } => {
                let total = g.channels();
                let rows = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let w = pv.channels();
                    if want(p) {
                        let mut gp = Vec::with_capacity(pv.len());
                        for r in 0..rows {
                            gp.extend_from_slice(
                                &g.data()[r * total + offset..r * total + offset + w],
                            );
                        }
                        self.accumulate(grads, p, Tensor::new(pv.shape().to_vec(), gp).unwrap());
                    }
                    offset += w;
                }
            }
            Op::Slice { a, axis, start } => {
                let av = val(*a);
                let shape = av.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = shape[*axis];
                let take = g.shape()[*axis];
                let mut ga = Tensor::zeros(shape);
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    let src = o * take * inner;
                    ga.data_mut()[dst..dst + take * inner]
                        .copy_from_slice(&g.data()[src..src + take * inner]);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Reshape { a } => {
                let ga = g.clone().reshape(val(*a).shape()).unwrap();
                self.accumulate(grads, *a, ga);
            }
            Op::Tile { a } => {
                let n = val(*a).len();
                let mut ga = Tensor::zeros(val(*a).shape());
                for chunk in g.data().chunks(n) {
                    for (acc, v) in ga.data_mut().iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::WeightedSum { w, v } => {
                let (wv, vv) = (val(*w), val(*v));
                let k = wv.channels();
                let c = vv.channels();
                let (wd, vd, gd) = (wv.data(), vv.data(), g.data());
                if want(*w) {
                    let mut gw = Tensor::zeros(wv.shape());
                    gw.data_mut()
                        .par_chunks_mut(k)
                        .enumerate()
                        .for_each(|(s, row)| {
                            for (j, out) in row.iter_mut().enumerate() {
                                let base = (s * k + j) * c;
                                let mut acc = 0.0;
                                for ch in 0..c {
                                    acc += gd[s * c + ch] * vd[base + ch];
                                }
                                *out = acc;
                            }
                        });
                    self.accumulate(grads, *w, gw);
                }
                if want(*v) {
                    let mut gv = Tensor::zeros(vv.shape());
                    gv.data_mut()
                        .par_chunks_mut(k * c)
                        .enumerate()
                        .for_each(|(s, block)| {
                            for j in 0..k {
                                let weight = wd[s * k + j];
                                for ch in 0..c {
                                    block[j * c + ch] = weight * gd[s * c + ch];
                                }
                            }
                        });
                    self.accumulate(grads, *v, gv);
                }
            }
            Op::Sum { a } => {
                let ga = Tensor::full(val(*a).shape(), g.item());
                self.accumulate(grads, *a, ga);
            }
            Op::Mean { a } => {
                let n = val(*a).len() as f64;
                let ga = Tensor::full(val(*a).shape(), g.item() / n);
                self.accumulate(grads, *a, ga);
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let outs = op.backward(&ins, &node.value, g);
                for (&v, gv) in inputs.iter().zip(outs) {
                    if let Some(gv) = gv {
                        self.accumulate(grads, v, gv);
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for v in row.iter_mut() {
        *v = (*v - max).exp();
    }
    let total = pairwise_sum(row);
    for v in row.iter_mut() {
        *v /= total;
    }
}
