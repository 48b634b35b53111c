//! A small reverse-mode autodiff tape over [`Tensor`]s.
//!
//! Every op appends a node holding its forward value. Nodes whose inputs do not
//! require gradients are recorded as constants, so frozen sub-networks cost
//! only their forward pass and [`Graph::backward`] never visits them.

use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        /// im2col buffers per batch item, kept only when a gradient is needed.
        cols: Vec<Vec<f64>>,
    },
    Upsample2 {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Silu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Exp {
        x: Var,
    },
    Abs {
        x: Var,
    },
    Square {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulConst {
        x: Var,
        k: Tensor,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    Divide {
        x: Var,
        divisor: f64,
    },
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
    DiffX {
        x: Var,
    },
    DiffY {
        x: Var,
    },
    Crop {
        x: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
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

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_out_dim(size: usize, stride: usize, pad: usize, k: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let p = oh * ow;
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *out = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dst: &mut [f64],
) {
    let p = oh * ow;
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices covering every index reachable from the given
    // dimensions and strides; `c` is exclusively borrowed and row-major m x n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that gradients are tracked for.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    /// Square-kernel 2-D convolution. `w` is `[out, in, k, k]`, `b` is `[1, out, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(ws.h, ws.w, "conv kernels must be square");
        assert_eq!(ws.c, xs.c, "conv input channels {} vs weight {}", xs.c, ws);
        let k = ws.h;
        let oh = conv_out_dim(xs.h, stride, pad, k);
        let ow = conv_out_dim(xs.w, stride, pad, k);
        let p = oh * ow;
        let kk = xs.c * k * k;
        let out_shape = Shape::new(xs.n, ws.n, oh, ow);
        let mut out = Tensor::zeros(out_shape);
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let keep_cols = self.requires_grad(w);
        let mut saved = Vec::new();
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            let mut cols = vec![0.0; kk * p];
            let per_in = xs.c * xs.plane();
            let per_out = ws.n * p;
            for n in 0..xs.n {
                im2col(
                    &xv[n * per_in..(n + 1) * per_in],
                    xs.c,
                    xs.h,
                    xs.w,
                    k,
                    stride,
                    pad,
                    oh,
                    ow,
                    &mut cols,
                );
                let dst = &mut out.data_mut()[n * per_out..(n + 1) * per_out];
                if let Some(bv) = bv {
                    for (co, chunk) in dst.chunks_mut(p).enumerate() {
                        chunk.fill(bv[co]);
                    }
                }
                gemm(
                    ws.n,
                    kk,
                    p,
                    wv,
                    (kk as isize, 1),
                    &cols,
                    (p as isize, 1),
                    if bv.is_some() { 1.0 } else { 0.0 },
                    dst,
                );
                if keep_cols {
                    saved.push(cols.clone());
                }
            }
        }
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols: saved,
            },
            rg,
        )
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let os = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
        let mut out = Tensor::zeros(os);
        let xv = self.value(x);
        for n in 0..s.n {
            for c in 0..s.c {
                let src = xv.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in 0..os.h {
                    for xx in 0..os.w {
                        dst[y * os.w + xx] = src[(y / 2) * s.w + xx / 2];
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Upsample2 { x }, rg)
    }

    /// Channel concatenation `[a, b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let out = Tensor::concat_channels(&[self.value(a), self.value(b)]);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Concat { a, b }, rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp { x })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs { x })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square { x })
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_vec(av.shape(), data);
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, k: Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), k.shape(), "mul_const shape mismatch");
        let data = xv.data().iter().zip(k.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::from_vec(k.shape(), data);
        let rg = self.rg(&[x]);
        self.push(out, Op::MulConst { x, k }, rg)
    }

    /// `scale * x + offset`.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        self.unary(x, |v| scale * v + offset, Op::Affine { x, scale })
    }

    pub fn divide(&mut self, x: Var, divisor: f64) -> Var {
        self.unary(x, |v| v / divisor, Op::Divide { x, divisor })
    }

    /// `sum(x * weights)` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), weights.shape(), "weighted_sum shape mismatch");
        let s: f64 = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg)
    }

    /// Forward difference along width; the last column is zero.
    pub fn diff_x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let src = xv.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in 0..s.h {
                    for xx in 0..s.w.saturating_sub(1) {
                        dst[y * s.w + xx] = src[y * s.w + xx + 1] - src[y * s.w + xx];
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::DiffX { x }, rg)
    }

    /// Forward difference along height; the last row is zero.
    pub fn diff_y(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let src = xv.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in 0..s.h.saturating_sub(1) {
                    for xx in 0..s.w {
                        dst[y * s.w + xx] = src[(y + 1) * s.w + xx] - src[y * s.w + xx];
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::DiffY { x }, rg)
    }

    /// Keeps the top-left `h x w` window of every plane.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x);
        assert!(h <= s.h && w <= s.w, "crop {h}x{w} exceeds {s}");
        if (h, w) == (s.h, s.w) {
            return x;
        }
        let os = Shape::new(s.n, s.c, h, w);
        let mut out = Tensor::zeros(os);
        let xv = self.value(x);
        for n in 0..s.n {
            for c in 0..s.c {
                let src = xv.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in 0..h {
                    dst[y * w..(y + 1) * w].copy_from_slice(&src[y * s.w..y * s.w + w]);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Crop { x }, rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn elementwise_grad(&self, g: &Tensor, x: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let xv = self.value(x);
        let data = g
            .data()
            .iter()
            .zip(xv.data())
            .map(|(&gi, &xi)| f(gi, xi))
            .collect();
        Tensor::from_vec(g.shape(), data)
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => self.conv_backward(g, *x, *w, *b, *stride, *pad, cols, grads),
            Op::Upsample2 { x } => {
                if !self.requires_grad(*x) {
                    return;
                }
                let s = self.shape(*x);
                let gs = g.shape();
                let mut dx = Tensor::zeros(s);
                for n in 0..s.n {
                    for c in 0..s.c {
                        let src = g.plane(n, c);
                        let dst = dx.plane_mut(n, c);
                        for y in 0..gs.h {
                            for xx in 0..gs.w {
                                dst[(y / 2) * s.w + xx / 2] += src[y * gs.w + xx];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { a, b } => {
                let ca = self.shape(*a).c;
                let gs = g.shape();
                let split = |lo: usize, hi: usize| {
                    let mut data = Vec::with_capacity(gs.n * (hi - lo) * gs.plane());
                    for n in 0..gs.n {
                        for c in lo..hi {
                            data.extend_from_slice(g.plane(n, c));
                        }
                    }
                    Tensor::from_vec(Shape::new(gs.n, hi - lo, gs.h, gs.w), data)
                };
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, split(0, ca));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, split(ca, gs.c));
                }
            }
            Op::Silu { x } => {
                let dx = self.elementwise_grad(g, *x, |gi, xi| {
                    let s = sigmoid(xi);
                    gi * s * (1.0 + xi * (1.0 - s))
                });
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gi, yi)| gi * yi * (1.0 - yi));
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), data.collect()));
            }
            Op::Exp { x } => {
                let y = &node.value;
                let data = g.data().iter().zip(y.data()).map(|(gi, yi)| gi * yi);
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), data.collect()));
            }
            Op::Abs { x } => {
                let dx = self.elementwise_grad(g, *x, |gi, xi| {
                    if xi > 0.0 {
                        gi
                    } else if xi < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, dx);
            }
            Op::Square { x } => {
                let dx = self.elementwise_grad(g, *x, |gi, xi| 2.0 * gi * xi);
                self.accumulate(grads, *x, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let dx = self.elementwise_grad(
                    g,
                    *x,
                    |gi, xi| {
                        if xi >= lo && xi <= hi {
                            gi
                        } else {
                            0.0
                        }
                    },
                );
                self.accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul { a, b } => {
                if self.requires_grad(*a) {
                    let bv = self.value(*b);
                    let data = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(g.shape(), data));
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a);
                    let data = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(g.shape(), data));
                }
            }
            Op::MulConst { x, k } => {
                let data = g.data().iter().zip(k.data()).map(|(a, b)| a * b).collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), data));
            }
            Op::Affine { x, scale } => {
                self.accumulate(grads, *x, g.map(|v| v * scale));
            }
            Op::Divide { x, divisor } => {
                self.accumulate(grads, *x, g.map(|v| v / divisor));
            }
            Op::WeightedSum { x, weights } => {
                let gi = g.item();
                self.accumulate(grads, *x, weights.map(|wv| wv * gi));
            }
            Op::DiffX { x } => {
                let s = g.shape();
                let mut dx = Tensor::zeros(s);
                for n in 0..s.n {
                    for c in 0..s.c {
                        let src = g.plane(n, c);
                        let dst = dx.plane_mut(n, c);
                        for y in 0..s.h {
                            for xx in 0..s.w.saturating_sub(1) {
                                let v = src[y * s.w + xx];
                                dst[y * s.w + xx + 1] += v;
                                dst[y * s.w + xx] -= v;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::DiffY { x } => {
                let s = g.shape();
                let mut dx = Tensor::zeros(s);
                for n in 0..s.n {
                    for c in 0..s.c {
                        let src = g.plane(n, c);
                        let dst = dx.plane_mut(n, c);
                        for y in 0..s.h.saturating_sub(1) {
                            for xx in 0..s.w {
                                let v = src[y * s.w + xx];
                                dst[(y + 1) * s.w + xx] += v;
                                dst[y * s.w + xx] -= v;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Crop { x } => {
                let s = self.shape(*x);
                let gs = g.shape();
                let mut dx = Tensor::zeros(s);
                for n in 0..s.n {
                    for c in 0..s.c {
                        let src = g.plane(n, c);
                        let dst = dx.plane_mut(n, c);
                        for y in 0..gs.h {
                            dst[y * s.w..y * s.w + gs.w]
                                .copy_from_slice(&src[y * gs.w..(y + 1) * gs.w]);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        g: &Tensor,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: &[Vec<f64>],
        grads: &mut [Option<Tensor>],
    ) {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let gs = g.shape();
        let k = ws.h;
        let p = gs.plane();
        let kk = xs.c * k * k;
        let per_out = ws.n * p;

        if let Some(b) = b.filter(|b| self.requires_grad(*b)) {
            let mut db = Tensor::zeros(self.shape(b));
            for n in 0..gs.n {
                for co in 0..ws.n {
                    db.data_mut()[co] += g.plane(n, co).iter().sum::<f64>();
                }
            }
            self.accumulate(grads, b, db);
        }
        if self.requires_grad(w) {
            let mut dw = Tensor::zeros(ws);
            for (n, c) in cols.iter().enumerate() {
                gemm(
                    ws.n,
                    p,
                    kk,
                    &g.data()[n * per_out..(n + 1) * per_out],
                    (p as isize, 1),
                    c,
                    (1, p as isize),
                    1.0,
                    dw.data_mut(),
                );
            }
            self.accumulate(grads, w, dw);
        }
        if self.requires_grad(x) {
            let wv = self.value(w).data();
            let mut dx = Tensor::zeros(xs);
            let mut dcols = vec![0.0; kk * p];
            let per_in = xs.c * xs.plane();
            for n in 0..xs.n {
                gemm(
                    kk,
                    ws.n,
                    p,
                    wv,
                    (1, kk as isize),
                    &g.data()[n * per_out..(n + 1) * per_out],
                    (p as isize, 1),
                    0.0,
                    &mut dcols,
                );
                col2im(
                    &dcols,
                    xs.c,
                    xs.h,
                    xs.w,
                    k,
                    stride,
                    pad,
                    gs.h,
                    gs.w,
                    &mut dx.data_mut()[n * per_in..(n + 1) * per_in],
                );
            }
            self.accumulate(grads, x, dx);
        }
    }
}
