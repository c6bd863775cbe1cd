//! Minimal reverse-mode autodiff tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are copied in
//! with [`Graph::bind`] and their gradients pulled out of [`Gradients`] after
//! [`Graph::backward`]. Losses are computed outside the tape (see
//! [`crate::losses`]) and attached with [`Graph::attach_loss`] together with
//! their analytic gradient.

use super::conv::{col2im, im2col, ConvGeom, Padding};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, padding: Padding },
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Softmax(Var),
    MaxPool2 { x: Var, argmax: Vec<u32> },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    GlobalAvgPool(Var),
    Modulate { x: Var, s: Var },
    Broadcast(Var),
    Gather { x: Var, index: Vec<usize> },
    Reshape(Var),
    AddConst(Var),
    MinibatchStd { x: Var, mean: Vec<T>, std: Vec<T> },
    Loss { x: Var, grad: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy every parameter of `store` onto the tape.
    pub fn bind(&mut self, store: &ParamStore<T>) -> Vec<Var> {
        store.tensors().iter().map(|t| self.leaf(t.clone())).collect()
    }

    /// Same-size convolution, stride 1, odd square kernel `w: [O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, padding: Padding) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (o, wc, k, k2) = self.value(w).dims4();
        assert_eq!(wc, c, "conv input channels");
        assert!(k == k2 && k % 2 == 1, "conv kernel must be odd and square");
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            padding,
        };
        let (rows, cols) = (geom.rows(), geom.cols());
        let xin = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); n * o * cols];
        let mut col = vec![T::zero(); rows * cols];
        for s in 0..n {
            let img = &xin[s * c * cols..(s + 1) * c * cols];
            let dst = &mut out[s * o * cols..(s + 1) * o * cols];
            for (oc, chunk) in dst.chunks_mut(cols).enumerate() {
                chunk.fill(bv[oc]);
            }
            let src: &[T] = if k == 1 {
                img
            } else {
                im2col(&geom, img, &mut col);
                &col
            };
            T::gemm(
                o, rows, cols, T::one(), wv, rows as isize, 1, src, cols as isize, 1, T::one(), dst,
                cols as isize, 1,
            );
        }
        self.push(
            Tensor::new(vec![n, o, h, wd], out),
            Op::Conv2d { x, w, b, padding },
            &[x, w, b],
        )
    }

    /// `x: [N, I]`, `w: [O, I]`, `b: [O]` → `[N, O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, i) = self.value(x).dims2();
        let (o, wi) = self.value(w).dims2();
        assert_eq!(i, wi, "linear input width");
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(bv);
        }
        T::gemm(
            n,
            i,
            o,
            T::one(),
            self.value(x).data(),
            i as isize,
            1,
            self.value(w).data(),
            1,
            i as isize,
            T::one(),
            &mut out,
            o as isize,
            1,
        );
        self.push(Tensor::new(vec![n, o], out), Op::Linear { x, w, b }, &[x, w, b])
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect());
        self.push(t, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |a| a.max(T::zero()))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        self.map(x, Op::LeakyRelu(x, s), move |a| if a > T::zero() { a } else { a * s })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), |a| T::one() / (T::one() + (-a).exp()))
    }

    /// Adds a constant to every element (used for `1 + style` offsets).
    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.map(x, Op::AddConst(x), move |a| a + c)
    }

    /// Row-wise softmax of `[N, C]` logits.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (n, c) = self.value(x).dims2();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push(Tensor::new(vec![n, c], out), Op::Softmax(x), &[x])
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial size");
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * xx + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best as u32);
                }
            }
        }
        self.push(
            Tensor::new(vec![n, c, oh, ow], out),
            Op::MaxPool2 { x, argmax },
            &[x],
        )
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial size");
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let q = T::lit(0.25);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..oh {
                let r0 = base + 2 * y * w;
                let r1 = r0 + w;
                for xx in 0..ow {
                    let s = src[r0 + 2 * xx] + src[r0 + 2 * xx + 1] + src[r1 + 2 * xx] + src[r1 + 2 * xx + 1];
                    out.push(s * q);
                }
            }
        }
        self.push(Tensor::new(vec![n, c, oh, ow], out), Op::AvgPool2(x), &[x])
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..oh {
                let row = &src[base + (y / 2) * w..base + (y / 2 + 1) * w];
                for v in row {
                    out.push(*v);
                    out.push(*v);
                }
            }
        }
        self.push(Tensor::new(vec![n, c, oh, ow], out), Op::Upsample2(x), &[x])
    }

    /// Channel concatenation of two NCHW tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat shapes");
        let (pa, pb) = (ca * h * w, cb * h * w);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (pa + pb));
        for s in 0..n {
            out.extend_from_slice(&av[s * pa..(s + 1) * pa]);
            out.extend_from_slice(&bv[s * pb..(s + 1) * pb]);
        }
        self.push(Tensor::new(vec![n, ca + cb, h, w], out), Op::Concat(a, b), &[a, b])
    }

    /// Appends one channel holding the batch standard deviation, averaged over
    /// all features: `[N, C, H, W]` → `[N, C + 1, H, W]`.
    pub fn minibatch_stddev(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let f = c * h * w;
        let xv = self.value(x).data();
        let inv_n = T::one() / T::lit(n as f64);
        let mut mean = vec![T::zero(); f];
        for s in 0..n {
            for (m, v) in mean.iter_mut().zip(&xv[s * f..(s + 1) * f]) {
                *m += *v * inv_n;
            }
        }
        let mut std = vec![T::zero(); f];
        for s in 0..n {
            for ((d, m), v) in std.iter_mut().zip(&mean).zip(&xv[s * f..(s + 1) * f]) {
                *d += (*v - *m) * (*v - *m) * inv_n;
            }
        }
        let eps = T::lit(1e-8);
        for d in std.iter_mut() {
            *d = (*d + eps).sqrt();
        }
        let stat = std.iter().copied().sum::<T>() / T::lit(f as f64);
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (f + hw));
        for s in 0..n {
            out.extend_from_slice(&xv[s * f..(s + 1) * f]);
            out.extend(std::iter::repeat_n(stat, hw));
        }
        self.push(
            Tensor::new(vec![n, c + 1, h, w], out),
            Op::MinibatchStd { x, mean, std },
            &[x],
        )
    }

    /// `[N, C, H, W]` → `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let inv = T::one() / T::lit(hw as f64);
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        self.push(Tensor::new(vec![n, c], out), Op::GlobalAvgPool(x), &[x])
    }

    /// Per-sample channel scaling: `x[n, c, :, :] * s[n, c]`.
    pub fn modulate(&mut self, x: Var, s: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(s).dims2(), (n, c), "modulation shape");
        let hw = h * w;
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (i, plane) in out.chunks_mut(hw).enumerate() {
            let k = sv[i];
            for v in plane {
                *v *= k;
            }
        }
        self.push(Tensor::new(vec![n, c, h, w], out), Op::Modulate { x, s }, &[x, s])
    }

    /// Repeat `x` along a new leading batch axis.
    pub fn broadcast(&mut self, x: Var, n: usize) -> Var {
        let v = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(v.shape());
        let mut out = Vec::with_capacity(n * v.numel());
        for _ in 0..n {
            out.extend_from_slice(v.data());
        }
        self.push(Tensor::new(shape, out), Op::Broadcast(x), &[x])
    }

    /// `out[i] = x[index[i]]`; output takes `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Var {
        let src = self.value(x).data();
        let out = index.iter().map(|&i| src[i]).collect();
        self.push(Tensor::new(shape, out), Op::Gather { x, index }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let t = self.value(x).clone().reshape(shape);
        self.push(t, Op::Reshape(x), &[x])
    }

    /// Attach an externally evaluated scalar loss and its gradient w.r.t. `x`.
    pub fn attach_loss(&mut self, x: Var, value: T, grad: Vec<T>) -> Var {
        assert_eq!(grad.len(), self.value(x).numel(), "loss gradient size");
        self.push(Tensor::scalar(value), Op::Loss { x, grad }, &[x])
    }

    /// Reverse sweep seeded with `d root / d root = 1` for each root.
    pub fn backward(&self, roots: &[Var]) -> Gradients<T> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for r in roots {
            let g = grads[r.0].get_or_insert_with(|| vec![T::zero(); self.nodes[r.0].value.numel()]);
            for v in g.iter_mut() {
                *v += T::one();
            }
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(g);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, padding } => {
                let (n, c, h, wd) = self.value(*x).dims4();
                let (o, _, k, _) = self.value(*w).dims4();
                let geom = ConvGeom {
                    channels: c,
                    height: h,
                    width: wd,
                    kernel: k,
                    padding: *padding,
                };
                let (rows, cols) = (geom.rows(), geom.cols());
                let xin = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_w = self.nodes[w.0].needs_grad;
                let need_x = self.nodes[x.0].needs_grad;
                acc(*b, &mut |gb| {
                    for s in 0..n {
                        for oc in 0..o {
                            let off = (s * o + oc) * cols;
                            gb[oc] += gout[off..off + cols].iter().copied().sum::<T>();
                        }
                    }
                });
                let mut col = vec![T::zero(); rows * cols];
                if need_w {
                    acc(*w, &mut |gw| {
                        for s in 0..n {
                            let img = &xin[s * c * cols..(s + 1) * c * cols];
                            let src: &[T] = if k == 1 {
                                img
                            } else {
                                im2col(&geom, img, &mut col);
                                &col
                            };
                            let go = &gout[s * o * cols..(s + 1) * o * cols];
                            // gw[o, rows] += go[o, cols] · src[rows, cols]^T
                            T::gemm(
                                o, cols, rows, T::one(), go, cols as isize, 1, src, 1, cols as isize,
                                T::one(), gw, rows as isize, 1,
                            );
                        }
                    });
                }
                if need_x {
                    acc(*x, &mut |gx| {
                        for s in 0..n {
                            let go = &gout[s * o * cols..(s + 1) * o * cols];
                            let dst = &mut gx[s * c * cols..(s + 1) * c * cols];
                            if k == 1 {
                                T::gemm(
                                    rows, o, cols, T::one(), wv, 1, rows as isize, go, cols as isize, 1,
                                    T::one(), dst, cols as isize, 1,
                                );
                            } else {
                                // dcol[rows, cols] = w^T[rows, o] · go[o, cols]
                                T::gemm(
                                    rows, o, cols, T::one(), wv, 1, rows as isize, go, cols as isize, 1,
                                    T::zero(), &mut col, cols as isize, 1,
                                );
                                col2im(&geom, &col, dst);
                            }
                        }
                    });
                }
            }
            Op::Linear { x, w, b } => {
                let (n, i) = self.value(*x).dims2();
                let (o, _) = self.value(*w).dims2();
                acc(*b, &mut |gb| {
                    for row in gout.chunks(o) {
                        for (g, v) in gb.iter_mut().zip(row) {
                            *g += *v;
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    // gw[o, i] += gout^T[o, n] · x[n, i]
                    T::gemm(
                        o,
                        n,
                        i,
                        T::one(),
                        gout,
                        1,
                        o as isize,
                        self.value(*x).data(),
                        i as isize,
                        1,
                        T::one(),
                        gw,
                        i as isize,
                        1,
                    );
                });
                acc(*x, &mut |gx| {
                    T::gemm(
                        n,
                        o,
                        i,
                        T::one(),
                        gout,
                        o as isize,
                        1,
                        self.value(*w).data(),
                        i as isize,
                        1,
                        T::one(),
                        gx,
                        i as isize,
                        1,
                    );
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for ((g, v), d) in gx.iter_mut().zip(xv).zip(gout) {
                        if *v > T::zero() {
                            *g += *d;
                        }
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for ((g, v), d) in gx.iter_mut().zip(xv).zip(gout) {
                        *g += if *v > T::zero() { *d } else { *d * *slope };
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                acc(*x, &mut |gx| {
                    for ((g, y), d) in gx.iter_mut().zip(yv).zip(gout) {
                        *g += *d * *y * (T::one() - *y);
                    }
                });
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                acc(*x, &mut |gx| {
                    for (g, d) in gx.iter_mut().zip(gout) {
                        *g += *d;
                    }
                });
            }
            Op::Softmax(x) => {
                let (_, c) = node.value.dims2();
                let yv = node.value.data();
                acc(*x, &mut |gx| {
                    for ((grow, yrow), drow) in gx.chunks_mut(c).zip(yv.chunks(c)).zip(gout.chunks(c)) {
                        let dot: T = yrow.iter().zip(drow).map(|(a, b)| *a * *b).sum();
                        for j in 0..c {
                            grow[j] += yrow[j] * (drow[j] - dot);
                        }
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                acc(*x, &mut |gx| {
                    for (i, d) in argmax.iter().zip(gout) {
                        gx[*i as usize] += *d;
                    }
                });
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (oh, ow) = (h / 2, w / 2);
                let q = T::lit(0.25);
                acc(*x, &mut |gx| {
                    for p in 0..n * c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let d = gout[(p * oh + y) * ow + xx] * q;
                                let r0 = p * h * w + 2 * y * w + 2 * xx;
                                gx[r0] += d;
                                gx[r0 + 1] += d;
                                gx[r0 + w] += d;
                                gx[r0 + w + 1] += d;
                            }
                        }
                    }
                });
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let ow = 2 * w;
                acc(*x, &mut |gx| {
                    for p in 0..n * c {
                        for y in 0..2 * h {
                            for xx in 0..ow {
                                gx[p * h * w + (y / 2) * w + xx / 2] += gout[(p * 2 * h + y) * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let (pa, pb) = (ca * h * w, cb * h * w);
                acc(*a, &mut |ga| {
                    for s in 0..n {
                        let src = &gout[s * (pa + pb)..s * (pa + pb) + pa];
                        for (g, d) in ga[s * pa..(s + 1) * pa].iter_mut().zip(src) {
                            *g += *d;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for s in 0..n {
                        let src = &gout[s * (pa + pb) + pa..(s + 1) * (pa + pb)];
                        for (g, d) in gb[s * pb..(s + 1) * pb].iter_mut().zip(src) {
                            *g += *d;
                        }
                    }
                });
            }
            Op::MinibatchStd { x, mean, std } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (f, hw) = (c * h * w, h * w);
                let xv = self.value(*x).data();
                let total: T = (0..n)
                    .flat_map(|s| gout[s * (f + hw) + f..(s + 1) * (f + hw)].iter().copied())
                    .sum();
                let k = total / T::lit((f * n) as f64);
                acc(*x, &mut |gx| {
                    for s in 0..n {
                        let src = &gout[s * (f + hw)..s * (f + hw) + f];
                        let xs = &xv[s * f..(s + 1) * f];
                        for j in 0..f {
                            gx[s * f + j] += src[j] + k * (xs[j] - mean[j]) / std[j];
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let inv = T::one() / T::lit(hw as f64);
                acc(*x, &mut |gx| {
                    for (plane, d) in gx.chunks_mut(hw).zip(gout) {
                        let v = *d * inv;
                        for g in plane {
                            *g += v;
                        }
                    }
                });
            }
            Op::Modulate { x, s } => {
                let (_, _, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let xv = self.value(*x).data();
                let sv = self.value(*s).data();
                acc(*x, &mut |gx| {
                    for (i, (plane, dplane)) in gx.chunks_mut(hw).zip(gout.chunks(hw)).enumerate() {
                        for (g, d) in plane.iter_mut().zip(dplane) {
                            *g += *d * sv[i];
                        }
                    }
                });
                acc(*s, &mut |gs| {
                    for (i, (xplane, dplane)) in xv.chunks(hw).zip(gout.chunks(hw)).enumerate() {
                        gs[i] += xplane.iter().zip(dplane).map(|(a, b)| *a * *b).sum::<T>();
                    }
                });
            }
            Op::Broadcast(x) => {
                let m = self.value(*x).numel();
                acc(*x, &mut |gx| {
                    for chunk in gout.chunks(m) {
                        for (g, d) in gx.iter_mut().zip(chunk) {
                            *g += *d;
                        }
                    }
                });
            }
            Op::Gather { x, index } => {
                acc(*x, &mut |gx| {
                    for (i, d) in index.iter().zip(gout) {
                        gx[*i] += *d;
                    }
                });
            }
            Op::Loss { x, grad } => {
                let seed = gout[0];
                acc(*x, &mut |gx| {
                    for (g, d) in gx.iter_mut().zip(grad) {
                        *g += seed * *d;
                    }
                });
            }
        }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients for bound parameters, zero-filled where nothing flowed.
    pub fn collect(&self, vars: &[Var], store: &ParamStore<T>) -> Vec<Tensor<T>> {
        vars.iter()
            .zip(store.tensors())
            .map(|(v, t)| match self.get(*v) {
                Some(g) => Tensor::new(t.shape().to_vec(), g.to_vec()),
                None => Tensor::zeros(t.shape().to_vec()),
            })
            .collect()
    }
}
