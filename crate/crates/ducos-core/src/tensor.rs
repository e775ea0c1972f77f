//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] owns every tensor produced during one forward pass. Operations
//! append nodes in execution order, so the node list is already a topological
//! order and [`Tape::backward`] is a single reverse sweep applying the chain
//! rule. One backward pass per tape; re-running without re-recording is an
//! error.
//!
//! Only the operations this artifact needs are registered: elementwise
//! arithmetic (with a per-channel broadcast rule), 1x1/3x3 convolution with
//! replicate padding, stride-2 transposed convolution, bilinear resize,
//! sigmoid, reductions, and a fused gradient-magnitude stencil.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::real::Real;

/// Plain dense array used outside the autodiff graph (scenes, prompts,
/// parameters at rest). Row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NdArray<R> {
    pub shape: Vec<usize>,
    pub data: Vec<R>,
}

impl<R: Real> NdArray<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        NdArray { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        NdArray {
            shape,
            data: vec![R::ZERO; n],
        }
    }

    pub fn full(shape: Vec<usize>, v: R) -> Self {
        let n = shape.iter().product();
        NdArray {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: R) -> Self {
        NdArray {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn map<F: Real>(&self, f: impl Fn(R) -> F) -> NdArray<F> {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    /// Shapes identical.
    None,
    /// rhs is a `[C]` vector broadcast over the trailing dims of a `[C, ...]` lhs.
    ChannelRhs,
    /// rhs is a scalar (shape `[]` or `[1]`).
    ScalarRhs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnKind {
    Neg,
    Abs,
    Square,
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RedKind {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum Op<R> {
    Leaf,
    Bin {
        kind: BinKind,
        a: Var,
        b: Var,
        bcast: Bcast,
    },
    /// `a (op) s` with a scalar constant on the rhs.
    BinScalar {
        kind: BinKind,
        a: Var,
        s: R,
    },
    Unary {
        kind: UnKind,
        a: Var,
    },
    SqrtEps {
        a: Var,
    },
    Clamp {
        a: Var,
        lo: R,
        hi: R,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Deconv2d {
        x: Var,
        w: Var,
        stride: usize,
    },
    Resize {
        x: Var,
    },
    Reduce {
        kind: RedKind,
        a: Var,
        axes: Vec<usize>,
    },
    GradMag {
        a: Var,
    },
}

struct Node<R> {
    shape: Vec<usize>,
    data: Vec<R>,
    op: Op<R>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads<R> {
    g: Vec<Option<Vec<R>>>,
}

impl<R: Real> Grads<R> {
    /// Gradient of the loss w.r.t. `v`, if `v` required one.
    pub fn get(&self, v: Var) -> Option<&[R]> {
        self.g[v.0].as_deref()
    }
}

pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
    spent: bool,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            spent: false,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<R>, op: Op<R>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn values(&self, v: Var) -> &[R] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    pub fn to_array(&self, v: Var) -> NdArray<R> {
        NdArray {
            shape: self.shape(v).to_vec(),
            data: self.values(v).to_vec(),
        }
    }

    /// Record a constant input (no gradient).
    pub fn leaf(&mut self, a: &NdArray<R>) -> Var {
        self.push(a.shape.clone(), a.data.clone(), Op::Leaf, false)
    }

    /// Record an input that should receive a gradient (a parameter or a
    /// probed input).
    pub fn leaf_grad(&mut self, a: &NdArray<R>) -> Var {
        self.push(a.shape.clone(), a.data.clone(), Op::Leaf, true)
    }

    pub fn scalar(&mut self, v: R) -> Var {
        self.push(Vec::new(), vec![v], Op::Leaf, false)
    }

    // ---- elementwise -----------------------------------------------------

    fn bcast_of(&self, a: Var, b: Var) -> Result<Bcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(Bcast::None);
        }
        if self.numel(b) == 1 && sb.len() <= 1 {
            return Ok(Bcast::ScalarRhs);
        }
        if sb.len() == 1 && !sa.is_empty() && sa[0] == sb[0] {
            return Ok(Bcast::ChannelRhs);
        }
        Err(CoreError::ShapeMismatch(alloc::format!(
            "elementwise operands {sa:?} vs {sb:?}"
        )))
    }

    fn bin(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let bcast = self.bcast_of(a, b)?;
        let trailing = match bcast {
            Bcast::ChannelRhs => self.shape(a)[1..].iter().product::<usize>(),
            _ => 1,
        };
        let av = &self.nodes[a.0].data;
        let bv = &self.nodes[b.0].data;
        let out: Vec<R> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bcast {
                    Bcast::None => bv[i],
                    Bcast::ScalarRhs => bv[0],
                    Bcast::ChannelRhs => bv[i / trailing],
                };
                apply_bin(kind, x, y)
            })
            .collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Bin { kind, a, b, bcast }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Mul, a, b)
    }
    /// Division; denominators are expected to be pre-stabilized by the caller
    /// (the artifact adds an epsilon before dividing), so no clamping happens
    /// here.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Div, a, b)
    }

    fn bin_scalar(&mut self, kind: BinKind, a: Var, s: R) -> Var {
        let out: Vec<R> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| apply_bin(kind, x, s))
            .collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::BinScalar { kind, a, s }, ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: R) -> Var {
        self.bin_scalar(BinKind::Add, a, s)
    }
    pub fn sub_scalar(&mut self, a: Var, s: R) -> Var {
        self.bin_scalar(BinKind::Sub, a, s)
    }
    pub fn mul_scalar(&mut self, a: Var, s: R) -> Var {
        self.bin_scalar(BinKind::Mul, a, s)
    }

    fn unary(&mut self, kind: UnKind, a: Var) -> Var {
        let out: Vec<R> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| apply_unary(kind, x))
            .collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Unary { kind, a }, ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnKind::Neg, a)
    }
    /// |x|; the subgradient at 0 is taken as 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnKind::Abs, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnKind::Square, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnKind::Relu, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnKind::Sigmoid, a)
    }

    /// sqrt(x + eps); eps keeps the derivative finite at 0.
    pub fn sqrt_eps(&mut self, a: Var, eps: R) -> Var {
        let out: Vec<R> = self.nodes[a.0].data.iter().map(|&x| (x + eps).sqrt()).collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::SqrtEps { a }, ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.sqrt_eps(a, R::ZERO)
    }

    /// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
    pub fn clamp(&mut self, a: Var, lo: R, hi: R) -> Var {
        let out: Vec<R> = self.nodes[a.0].data.iter().map(|&x| x.clamp2(lo, hi)).collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Clamp { a, lo, hi }, ng)
    }

    // ---- convolutions ----------------------------------------------------

    /// 2-D convolution, stride 1, replicate padding, spatial size preserved.
    /// `x`: [C,H,W], `w`: [Co,C,k,k] with k in {1,3}, optional bias [Co].
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 {
            return Err(CoreError::ShapeMismatch(String::from(
                "conv2d expects x [C,H,W] and w [Co,C,k,k]",
            )));
        }
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let (co, ci, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if ci != c {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "conv2d channels: x has {c}, w expects {ci}"
            )));
        }
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(CoreError::InvalidArgument(alloc::format!(
                "conv2d kernel must be 1x1 or 3x3, got {kh}x{kw}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [co] {
                return Err(CoreError::ShapeMismatch(String::from("conv2d bias shape")));
            }
        }
        let k = kh;
        let xs = &self.nodes[x.0].data;
        let ws = &self.nodes[w.0].data;
        let bs = bias.map(|b| self.nodes[b.0].data.clone());
        let mut out = vec![R::ZERO; co * h * wd];
        conv2d_fwd(xs, ws, bs.as_deref(), c, h, wd, co, k, &mut out);
        let ng = self.ng(x) || self.ng(w) || bias.is_some_and(|b| self.ng(b));
        Ok(self.push(vec![co, h, wd], out, Op::Conv2d { x, w, b: bias }, ng))
    }

    /// Transposed convolution, stride 2, no padding.
    /// `x`: [Ci,H,W], `w`: [Ci,Co,k,k] with k in {2,4}.
    /// Output is [(H-1)*2+k, (W-1)*2+k]; callers follow with a bilinear
    /// resize to the exact target size.
    pub fn deconv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 {
            return Err(CoreError::ShapeMismatch(String::from(
                "deconv2d expects x [Ci,H,W] and w [Ci,Co,k,k]",
            )));
        }
        if stride != 2 {
            return Err(CoreError::InvalidArgument(String::from(
                "deconv2d supports stride 2 only",
            )));
        }
        let (ci, h, wd) = (sx[0], sx[1], sx[2]);
        let (wi, co, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if wi != ci {
            return Err(CoreError::ShapeMismatch(String::from("deconv2d channels")));
        }
        if kh != kw || !(kh == 2 || kh == 4) {
            return Err(CoreError::InvalidArgument(String::from(
                "deconv2d kernel must be 2x2 or 4x4",
            )));
        }
        if h == 0 || wd == 0 {
            return Err(CoreError::InvalidArgument(String::from(
                "deconv2d requires positive spatial dims",
            )));
        }
        let k = kh;
        let oh = (h - 1) * stride + k;
        let ow = (wd - 1) * stride + k;
        let xs = &self.nodes[x.0].data;
        let ws = &self.nodes[w.0].data;
        let mut out = vec![R::ZERO; co * oh * ow];
        for icn in 0..ci {
            for oc in 0..co {
                for iy in 0..h {
                    for ix in 0..wd {
                        let xv = xs[(icn * h + iy) * wd + ix];
                        for ky in 0..k {
                            for kx in 0..k {
                                out[(oc * oh + iy * stride + ky) * ow + ix * stride + kx] +=
                                    xv * ws[((icn * co + oc) * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(vec![co, oh, ow], out, Op::Deconv2d { x, w, stride }, ng))
    }

    /// Bilinear resize, align-corners-false. Identity when sizes match.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(CoreError::ShapeMismatch(String::from(
                "resize_bilinear expects [C,H,W]",
            )));
        }
        if out_h == 0 || out_w == 0 {
            return Err(CoreError::InvalidArgument(String::from(
                "resize_bilinear output dims must be >= 1",
            )));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let xs = &self.nodes[x.0].data;
        let mut out = vec![R::ZERO; c * out_h * out_w];
        for ch in 0..c {
            for oy in 0..out_h {
                let (y0, y1, dy) = bilinear_coords(oy, out_h, h);
                for ox in 0..out_w {
                    let (x0, x1, dx) = bilinear_coords(ox, out_w, w);
                    let p = |yy: usize, xx: usize| xs[(ch * h + yy) * w + xx];
                    let top = p(y0, x0) * (R::ONE - dx) + p(y0, x1) * dx;
                    let bot = p(y1, x0) * (R::ONE - dx) + p(y1, x1) * dx;
                    out[(ch * out_h + oy) * out_w + ox] = top * (R::ONE - dy) + bot * dy;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(vec![c, out_h, out_w], out, Op::Resize { x }, ng))
    }

    // ---- reductions ------------------------------------------------------

    /// Reduce over the given axes (sorted, deduplicated by the caller or
    /// here). Mean and sum are differentiable.
    pub fn reduce(&mut self, kind: RedKind, a: Var, axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut ax: Vec<usize> = axes.to_vec();
        ax.sort_unstable();
        ax.dedup();
        if ax.iter().any(|&d| d >= sa.len()) {
            return Err(CoreError::InvalidArgument(String::from("reduce axis out of range")));
        }
        let count: usize = ax.iter().map(|&d| sa[d]).product();
        if count == 0 || self.numel(a) == 0 {
            return Err(CoreError::InvalidArgument(String::from("empty reduction set")));
        }
        let out_shape: Vec<usize> = sa
            .iter()
            .enumerate()
            .filter(|(d, _)| !ax.contains(d))
            .map(|(_, &e)| e)
            .collect();
        let out_n: usize = out_shape.iter().product();
        let mut out = vec![R::ZERO; out_n];
        {
            let data = &self.nodes[a.0].data;
            let mapper = ReduceMap::new(&sa, &ax);
            for (i, &v) in data.iter().enumerate() {
                out[mapper.out_index(i)] += v;
            }
        }
        if kind == RedKind::Mean {
            let inv = R::ONE / R::from_usize(count);
            for v in out.iter_mut() {
                *v *= inv;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out_shape, out, Op::Reduce { kind, a, axes: ax }, ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(RedKind::Sum, a, &axes)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(RedKind::Mean, a, &axes)
    }

    /// Population standard deviation over all elements (differentiable;
    /// epsilon keeps the derivative finite for constant inputs).
    pub fn std_all(&mut self, a: Var) -> Result<Var> {
        let m = self.mean_all(a)?;
        let d = self.sub(a, m)?;
        let sq = self.square(d);
        let v = self.mean_all(sq)?;
        Ok(self.sqrt_eps(v, R::from_f64(1e-24)))
    }

    /// Detached minimum of all elements (no gradient contribution).
    pub fn min_all(&self, a: Var) -> R {
        self.nodes[a.0]
            .data
            .iter()
            .fold(self.nodes[a.0].data[0], |m, &v| m.min2(v))
    }

    /// Detached maximum of all elements (no gradient contribution).
    pub fn max_all(&self, a: Var) -> R {
        self.nodes[a.0]
            .data
            .iter()
            .fold(self.nodes[a.0].data[0], |m, &v| m.max2(v))
    }

    // ---- gradient magnitude ---------------------------------------------

    /// sqrt(gx^2 + gy^2 + eps^2) per channel with central differences in the
    /// interior and one-sided differences at the borders.
    pub fn grad_mag(&mut self, a: Var, eps: R) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 || sa[1] < 2 || sa[2] < 2 {
            return Err(CoreError::ShapeMismatch(String::from(
                "grad_mag expects [C,H,W] with H,W >= 2",
            )));
        }
        let (c, h, w) = (sa[0], sa[1], sa[2]);
        let xs = &self.nodes[a.0].data;
        let mut out = vec![R::ZERO; c * h * w];
        for ch in 0..c {
            let plane = &xs[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let (gx, gy) = central_diff(plane, h, w, y, x);
                    out[(ch * h + y) * w + x] = (gx * gx + gy * gy + eps * eps).sqrt();
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(sa, out, Op::GradMag { a }, ng))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// grad-requiring tensor reachable from `loss`; consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Grads<R>> {
        if self.spent {
            return Err(CoreError::TapeConsumed);
        }
        if self.numel(loss) != 1 {
            return Err(CoreError::NonScalarLoss);
        }
        self.spent = true;
        let n = self.nodes.len();
        let mut g: Vec<Option<Vec<R>>> = (0..n).map(|_| None).collect();
        g[loss.0] = Some(vec![R::ONE]);
        for i in (0..n).rev() {
            if g[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let go = g[i].take().unwrap();
            self.accumulate(i, &go, &mut g);
            // keep the output grad available to callers
            g[i] = Some(go);
        }
        // zero grads for grad-requiring leaves never reached
        for i in 0..n {
            if self.nodes[i].needs_grad && matches!(self.nodes[i].op, Op::Leaf) && g[i].is_none() {
                g[i] = Some(vec![R::ZERO; self.nodes[i].data.len()]);
            }
        }
        Ok(Grads { g })
    }

    fn accumulate(&self, i: usize, go: &[R], g: &mut [Option<Vec<R>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Bin { kind, a, b, bcast } => {
                let trailing = match bcast {
                    Bcast::ChannelRhs => self.shape(*a)[1..].iter().product::<usize>(),
                    _ => 1,
                };
                let av = &self.nodes[a.0].data;
                let bv = &self.nodes[b.0].data;
                let bval = |i: usize| match bcast {
                    Bcast::None => bv[i],
                    Bcast::ScalarRhs => bv[0],
                    Bcast::ChannelRhs => bv[i / trailing],
                };
                if self.ng(*a) {
                    let ga = ensure(g, a.0, av.len());
                    match kind {
                        BinKind::Add | BinKind::Sub => {
                            for (j, &gv) in go.iter().enumerate() {
                                ga[j] += gv;
                            }
                        }
                        BinKind::Mul => {
                            for (j, &gv) in go.iter().enumerate() {
                                ga[j] += gv * bval(j);
                            }
                        }
                        BinKind::Div => {
                            for (j, &gv) in go.iter().enumerate() {
                                ga[j] += gv / bval(j);
                            }
                        }
                    }
                }
                if self.ng(*b) {
                    let gb = ensure(g, b.0, bv.len());
                    let bidx = |j: usize| match bcast {
                        Bcast::None => j,
                        Bcast::ScalarRhs => 0,
                        Bcast::ChannelRhs => j / trailing,
                    };
                    match kind {
                        BinKind::Add => {
                            for (j, &gv) in go.iter().enumerate() {
                                gb[bidx(j)] += gv;
                            }
                        }
                        BinKind::Sub => {
                            for (j, &gv) in go.iter().enumerate() {
                                gb[bidx(j)] -= gv;
                            }
                        }
                        BinKind::Mul => {
                            for (j, &gv) in go.iter().enumerate() {
                                gb[bidx(j)] += gv * av[j];
                            }
                        }
                        BinKind::Div => {
                            for (j, &gv) in go.iter().enumerate() {
                                let b_j = bval(j);
                                gb[bidx(j)] -= gv * av[j] / (b_j * b_j);
                            }
                        }
                    }
                }
            }
            Op::BinScalar { kind, a, s } => {
                if self.ng(*a) {
                    let n = self.nodes[a.0].data.len();
                    let ga = ensure(g, a.0, n);
                    match kind {
                        BinKind::Add | BinKind::Sub => {
                            for (j, &gv) in go.iter().enumerate() {
                                ga[j] += gv;
                            }
                        }
                        BinKind::Mul => {
                            for (j, &gv) in go.iter().enumerate() {
                                ga[j] += gv * *s;
                            }
                        }
                        BinKind::Div => {
                            for (j, &gv) in go.iter().enumerate() {
                                ga[j] += gv / *s;
                            }
                        }
                    }
                }
            }
            Op::Unary { kind, a } => {
                if self.ng(*a) {
                    let av = &self.nodes[a.0].data;
                    let yv = &node.data;
                    let ga = ensure(g, a.0, av.len());
                    match kind {
                        UnKind::Neg => {
                            for (j, &gv) in go.iter().enumerate() {
                                ga[j] -= gv;
                            }
                        }
                        UnKind::Abs => {
                            for (j, &gv) in go.iter().enumerate() {
                                let x = av[j];
                                if x > R::ZERO {
                                    ga[j] += gv;
                                } else if x < R::ZERO {
                                    ga[j] -= gv;
                                }
                            }
                        }
                        UnKind::Square => {
                            for (j, &gv) in go.iter().enumerate() {
                                ga[j] += gv * (av[j] + av[j]);
                            }
                        }
                        UnKind::Relu => {
                            for (j, &gv) in go.iter().enumerate() {
                                if av[j] > R::ZERO {
                                    ga[j] += gv;
                                }
                            }
                        }
                        UnKind::Sigmoid => {
                            for (j, &gv) in go.iter().enumerate() {
                                let y = yv[j];
                                ga[j] += gv * y * (R::ONE - y);
                            }
                        }
                    }
                }
            }
            Op::SqrtEps { a } => {
                if self.ng(*a) {
                    let yv = &node.data;
                    let n = yv.len();
                    let ga = ensure(g, a.0, n);
                    let half = R::from_f64(0.5);
                    for (j, &gv) in go.iter().enumerate() {
                        ga[j] += gv * half / yv[j];
                    }
                }
            }
            Op::Clamp { a, lo, hi } => {
                if self.ng(*a) {
                    let av = &self.nodes[a.0].data;
                    let ga = ensure(g, a.0, av.len());
                    for (j, &gv) in go.iter().enumerate() {
                        if av[j] > *lo && av[j] < *hi {
                            ga[j] += gv;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b } => {
                let sx = self.shape(*x).to_vec();
                let sw = self.shape(*w).to_vec();
                let (c, h, wd) = (sx[0], sx[1], sx[2]);
                let (co, _, k, _) = (sw[0], sw[1], sw[2], sw[3]);
                let xs = &self.nodes[x.0].data;
                let ws = &self.nodes[w.0].data;
                let need_x = self.ng(*x);
                let need_w = self.ng(*w);
                let mut gx = if need_x { vec![R::ZERO; xs.len()] } else { Vec::new() };
                let mut gw = if need_w { vec![R::ZERO; ws.len()] } else { Vec::new() };
                conv2d_bwd(
                    xs,
                    ws,
                    go,
                    c,
                    h,
                    wd,
                    co,
                    k,
                    if need_x { Some(&mut gx) } else { None },
                    if need_w { Some(&mut gw) } else { None },
                );
                if need_x {
                    add_into(ensure(g, x.0, xs.len()), &gx);
                }
                if need_w {
                    add_into(ensure(g, w.0, ws.len()), &gw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let gb = ensure(g, b.0, co);
                        for oc in 0..co {
                            let mut s = R::ZERO;
                            for j in 0..h * wd {
                                s += go[oc * h * wd + j];
                            }
                            gb[oc] += s;
                        }
                    }
                }
            }
            Op::Deconv2d { x, w, stride } => {
                let sx = self.shape(*x).to_vec();
                let sw = self.shape(*w).to_vec();
                let (ci, h, wd) = (sx[0], sx[1], sx[2]);
                let (_, co, k, _) = (sw[0], sw[1], sw[2], sw[3]);
                let oh = (h - 1) * stride + k;
                let ow = (wd - 1) * stride + k;
                let xs = &self.nodes[x.0].data;
                let ws = &self.nodes[w.0].data;
                let need_x = self.ng(*x);
                let need_w = self.ng(*w);
                let mut gx = if need_x { vec![R::ZERO; xs.len()] } else { Vec::new() };
                let mut gw = if need_w { vec![R::ZERO; ws.len()] } else { Vec::new() };
                for icn in 0..ci {
                    for oc in 0..co {
                        for iy in 0..h {
                            for ix in 0..wd {
                                let xv = xs[(icn * h + iy) * wd + ix];
                                let mut acc = R::ZERO;
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let gv = go
                                            [(oc * oh + iy * stride + ky) * ow + ix * stride + kx];
                                        let wi = ((icn * co + oc) * k + ky) * k + kx;
                                        acc += gv * ws[wi];
                                        if need_w {
                                            gw[wi] += gv * xv;
                                        }
                                    }
                                }
                                if need_x {
                                    gx[(icn * h + iy) * wd + ix] += acc;
                                }
                            }
                        }
                    }
                }
                if need_x {
                    add_into(ensure(g, x.0, xs.len()), &gx);
                }
                if need_w {
                    add_into(ensure(g, w.0, ws.len()), &gw);
                }
            }
            Op::Resize { x } => {
                if self.ng(*x) {
                    let sx = self.shape(*x).to_vec();
                    let (c, h, w) = (sx[0], sx[1], sx[2]);
                    let so = &node.shape;
                    let (oh, ow) = (so[1], so[2]);
                    let gx = ensure(g, x.0, c * h * w);
                    for ch in 0..c {
                        for oy in 0..oh {
                            let (y0, y1, dy) = bilinear_coords::<R>(oy, oh, h);
                            for ox in 0..ow {
                                let (x0, x1, dx) = bilinear_coords::<R>(ox, ow, w);
                                let gv = go[(ch * oh + oy) * ow + ox];
                                gx[(ch * h + y0) * w + x0] += gv * (R::ONE - dy) * (R::ONE - dx);
                                gx[(ch * h + y0) * w + x1] += gv * (R::ONE - dy) * dx;
                                gx[(ch * h + y1) * w + x0] += gv * dy * (R::ONE - dx);
                                gx[(ch * h + y1) * w + x1] += gv * dy * dx;
                            }
                        }
                    }
                }
            }
            Op::Reduce { kind, a, axes } => {
                if self.ng(*a) {
                    let sa = self.shape(*a).to_vec();
                    let count: usize = axes.iter().map(|&d| sa[d]).product();
                    let scale = match kind {
                        RedKind::Sum => R::ONE,
                        RedKind::Mean => R::ONE / R::from_usize(count),
                    };
                    let n = self.nodes[a.0].data.len();
                    let mapper = ReduceMap::new(&sa, axes);
                    let ga = ensure(g, a.0, n);
                    for (j, gaj) in ga.iter_mut().enumerate() {
                        *gaj += go[mapper.out_index(j)] * scale;
                    }
                }
            }
            Op::GradMag { a } => {
                if self.ng(*a) {
                    let sa = self.shape(*a).to_vec();
                    let (c, h, w) = (sa[0], sa[1], sa[2]);
                    let xs = &self.nodes[a.0].data;
                    let yv = &node.data;
                    let ga = ensure(g, a.0, xs.len());
                    for ch in 0..c {
                        let plane = &xs[ch * h * w..(ch + 1) * h * w];
                        for y in 0..h {
                            for x in 0..w {
                                let idx = (ch * h + y) * w + x;
                                let (gxv, gyv) = central_diff(plane, h, w, y, x);
                                let gm = yv[idx];
                                let c_ = go[idx] / gm;
                                let dgx = c_ * gxv;
                                let dgy = c_ * gyv;
                                // adjoint of the horizontal stencil
                                if x == 0 {
                                    ga[(ch * h + y) * w + 1] += dgx;
                                    ga[(ch * h + y) * w] -= dgx;
                                } else if x == w - 1 {
                                    ga[(ch * h + y) * w + x] += dgx;
                                    ga[(ch * h + y) * w + x - 1] -= dgx;
                                } else {
                                    let half = R::from_f64(0.5);
                                    ga[(ch * h + y) * w + x + 1] += dgx * half;
                                    ga[(ch * h + y) * w + x - 1] -= dgx * half;
                                }
                                // adjoint of the vertical stencil
                                if y == 0 {
                                    ga[(ch * h + 1) * w + x] += dgy;
                                    ga[ch * h * w + x] -= dgy;
                                } else if y == h - 1 {
                                    ga[(ch * h + y) * w + x] += dgy;
                                    ga[(ch * h + y - 1) * w + x] -= dgy;
                                } else {
                                    let half = R::from_f64(0.5);
                                    ga[(ch * h + y + 1) * w + x] += dgy * half;
                                    ga[(ch * h + y - 1) * w + x] -= dgy * half;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn apply_bin<R: Real>(kind: BinKind, a: R, b: R) -> R {
    match kind {
        BinKind::Add => a + b,
        BinKind::Sub => a - b,
        BinKind::Mul => a * b,
        BinKind::Div => a / b,
    }
}

fn apply_unary<R: Real>(kind: UnKind, x: R) -> R {
    match kind {
        UnKind::Neg => -x,
        UnKind::Abs => x.abs(),
        UnKind::Square => x * x,
        UnKind::Relu => x.max2(R::ZERO),
        UnKind::Sigmoid => sigmoid_scalar(x),
    }
}

pub(crate) fn sigmoid_scalar<R: Real>(x: R) -> R {
    if x >= R::ZERO {
        R::ONE / (R::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::ONE + e)
    }
}

fn clamp_idx(i: isize, n: usize) -> usize {
    if i < 0 {
        0
    } else if i as usize >= n {
        n - 1
    } else {
        i as usize
    }
}

/// Forward convolution, replicate padding, written as one pass per kernel
/// tap so the inner column loops stay contiguous.
#[allow(clippy::too_many_arguments)]
fn conv2d_fwd<R: Real>(
    xs: &[R],
    ws: &[R],
    bs: Option<&[R]>,
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    out: &mut [R],
) {
    let hw = h * w;
    for oc in 0..co {
        let op = &mut out[oc * hw..(oc + 1) * hw];
        let b = bs.map_or(R::ZERO, |b| b[oc]);
        op.fill(b);
        for ic in 0..c {
            let xp = &xs[ic * hw..(ic + 1) * hw];
            if k == 1 {
                let wv = ws[oc * c + ic];
                for (o, &xv) in op.iter_mut().zip(xp) {
                    *o += wv * xv;
                }
                continue;
            }
            let w9 = &ws[(oc * c + ic) * 9..(oc * c + ic) * 9 + 9];
            for (tap, &wv) in w9.iter().enumerate() {
                let dy = (tap / 3) as isize - 1;
                let dx = (tap % 3) as isize - 1;
                for y in 0..h {
                    let iy = clamp_idx(y as isize + dy, h);
                    let xrow = &xp[iy * w..iy * w + w];
                    let orow = &mut op[y * w..y * w + w];
                    match dx {
                        -1 => {
                            orow[0] += wv * xrow[0];
                            for x in 1..w {
                                orow[x] += wv * xrow[x - 1];
                            }
                        }
                        0 => {
                            for x in 0..w {
                                orow[x] += wv * xrow[x];
                            }
                        }
                        _ => {
                            for x in 0..w - 1 {
                                orow[x] += wv * xrow[x + 1];
                            }
                            orow[w - 1] += wv * xrow[w - 1];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoints of [`conv2d_fwd`] for the input and the kernel.
#[allow(clippy::too_many_arguments)]
fn conv2d_bwd<R: Real>(
    xs: &[R],
    ws: &[R],
    go: &[R],
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    mut gx: Option<&mut Vec<R>>,
    mut gw: Option<&mut Vec<R>>,
) {
    let hw = h * w;
    for oc in 0..co {
        let gop = &go[oc * hw..(oc + 1) * hw];
        for ic in 0..c {
            let xp = &xs[ic * hw..(ic + 1) * hw];
            if k == 1 {
                let wv = ws[oc * c + ic];
                if let Some(gx) = gx.as_deref_mut() {
                    let gxp = &mut gx[ic * hw..(ic + 1) * hw];
                    for (g, &gv) in gxp.iter_mut().zip(gop) {
                        *g += wv * gv;
                    }
                }
                if let Some(gw) = gw.as_deref_mut() {
                    let mut acc = R::ZERO;
                    for (&gv, &xv) in gop.iter().zip(xp) {
                        acc += gv * xv;
                    }
                    gw[oc * c + ic] += acc;
                }
                continue;
            }
            for tap in 0..9usize {
                let dy = (tap / 3) as isize - 1;
                let dx = (tap % 3) as isize - 1;
                let wv = ws[(oc * c + ic) * 9 + tap];
                let mut wacc = R::ZERO;
                for y in 0..h {
                    let iy = clamp_idx(y as isize + dy, h);
                    let gorow = &gop[y * w..y * w + w];
                    let xrow = &xp[iy * w..iy * w + w];
                    if let Some(gx) = gx.as_deref_mut() {
                        let gxrow = &mut gx[ic * hw + iy * w..ic * hw + iy * w + w];
                        match dx {
                            -1 => {
                                gxrow[0] += wv * gorow[0];
                                for x in 1..w {
                                    gxrow[x - 1] += wv * gorow[x];
                                }
                            }
                            0 => {
                                for x in 0..w {
                                    gxrow[x] += wv * gorow[x];
                                }
                            }
                            _ => {
                                for x in 0..w - 1 {
                                    gxrow[x + 1] += wv * gorow[x];
                                }
                                gxrow[w - 1] += wv * gorow[w - 1];
                            }
                        }
                    }
                    if gw.is_some() {
                        match dx {
                            -1 => {
                                wacc += gorow[0] * xrow[0];
                                for x in 1..w {
                                    wacc += gorow[x] * xrow[x - 1];
                                }
                            }
                            0 => {
                                for x in 0..w {
                                    wacc += gorow[x] * xrow[x];
                                }
                            }
                            _ => {
                                for x in 0..w - 1 {
                                    wacc += gorow[x] * xrow[x + 1];
                                }
                                wacc += gorow[w - 1] * xrow[w - 1];
                            }
                        }
                    }
                }
                if let Some(gw) = gw.as_deref_mut() {
                    gw[(oc * c + ic) * 9 + tap] += wacc;
                }
            }
        }
    }
}

/// Source coordinates for align-corners-false bilinear sampling.
fn bilinear_coords<R: Real>(o: usize, out_n: usize, in_n: usize) -> (usize, usize, R) {
    let scale = in_n as f64 / out_n as f64;
    let s = (o as f64 + 0.5) * scale - 0.5;
    let f = libm::floor(s);
    let mut d = s - f;
    let i0 = f as isize;
    let (y0, y1);
    if i0 < 0 {
        y0 = 0;
        y1 = 0;
        d = 0.0;
    } else if i0 as usize >= in_n - 1 {
        y0 = in_n - 1;
        y1 = in_n - 1;
        d = 0.0;
    } else {
        y0 = i0 as usize;
        y1 = y0 + 1;
    }
    (y0, y1, R::from_f64(d))
}

/// First differences: central in the interior, one-sided at borders.
fn central_diff<R: Real>(plane: &[R], h: usize, w: usize, y: usize, x: usize) -> (R, R) {
    let at = |yy: usize, xx: usize| plane[yy * w + xx];
    let half = R::from_f64(0.5);
    let gx = if x == 0 {
        at(y, 1) - at(y, 0)
    } else if x == w - 1 {
        at(y, x) - at(y, x - 1)
    } else {
        (at(y, x + 1) - at(y, x - 1)) * half
    };
    let gy = if y == 0 {
        at(1, x) - at(0, x)
    } else if y == h - 1 {
        at(y, x) - at(y - 1, x)
    } else {
        (at(y + 1, x) - at(y - 1, x)) * half
    };
    (gx, gy)
}

/// Maps a flat input index to the flat index of the reduced output.
struct ReduceMap {
    in_strides: Vec<usize>,
    kept: Vec<bool>,
    out_strides_by_dim: Vec<usize>,
}

impl ReduceMap {
    fn new(shape: &[usize], axes: &[usize]) -> Self {
        let nd = shape.len();
        let mut in_strides = vec![1usize; nd];
        for d in (0..nd.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * shape[d + 1];
        }
        let kept: Vec<bool> = (0..nd).map(|d| !axes.contains(&d)).collect();
        // strides of the output laid out over kept dims, row-major
        let mut out_strides_by_dim = vec![0usize; nd];
        let mut acc = 1usize;
        for d in (0..nd).rev() {
            if kept[d] {
                out_strides_by_dim[d] = acc;
                acc *= shape[d];
            }
        }
        ReduceMap {
            in_strides,
            kept,
            out_strides_by_dim,
        }
    }

    fn out_index(&self, flat: usize) -> usize {
        let mut rem = flat;
        let mut out = 0usize;
        for d in 0..self.in_strides.len() {
            let coord = rem / self.in_strides[d];
            rem %= self.in_strides[d];
            if self.kept[d] {
                out += coord * self.out_strides_by_dim[d];
            }
        }
        out
    }
}

fn ensure<R: Real>(g: &mut [Option<Vec<R>>], i: usize, n: usize) -> &mut Vec<R> {
    if g[i].is_none() {
        g[i] = Some(vec![R::ZERO; n]);
    }
    g[i].as_mut().unwrap()
}

fn add_into<R: Real>(dst: &mut [R], src: &[R]) {
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        *d += s;
    }
}
