//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Leaves are
//! either constants or variables; [`Graph::backward`] walks the tape in
//! reverse and returns a gradient for every node that depends on a
//! variable. Layer-sized ops (linear, attention, conv, layer norm) are
//! fused kernels with hand-written adjoints.

use std::rc::Rc;

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-6;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Gelu(Var),
    Silu(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Reshape(Var),
    Gather {
        x: Var,
        index: Rc<[usize]>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Resample {
        x: Var,
        axis: usize,
        matrix: Rc<Tensor>,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    CosineRows {
        a: Var,
        b: Var,
        eps: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
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
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kernel: [usize; 3],
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.cin
    }

    fn positions(&self) -> usize {
        self.n * self.h * self.w
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scaled(s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// `x[r, c] + v[c]` for `x` viewed as `[rows, C]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let c = self.value(x).last_dim();
        assert_eq!(self.value(row).numel(), c, "add_row width mismatch");
        let rv = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, r) in chunk.iter_mut().zip(&rv) {
                *o += r;
            }
        }
        let rg = self.rg(&[x, row]);
        self.push(out, Op::AddRow(x, row), rg)
    }

    /// `x[r, c] * v[c]` for `x` viewed as `[rows, C]`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let c = self.value(x).last_dim();
        assert_eq!(self.value(row).numel(), c, "mul_row width mismatch");
        let rv = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, r) in chunk.iter_mut().zip(&rv) {
                *o *= r;
            }
        }
        let rg = self.rg(&[x, row]);
        self.push(out, Op::MulRow(x, row), rg)
    }

    /// `x·W + b` over the last axis; `W` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let k = xv.last_dim();
        assert_eq!(wv.shape().len(), 2, "linear weight must be 2-d");
        assert_eq!(wv.shape()[0], k, "linear: input width {k} vs weight {:?}", wv.shape());
        let n = wv.shape()[1];
        let m = xv.rows();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, (xv.data(), k, 1), (wv.data(), n, 1), 0.0, (&mut out, n, 1));
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), n, "linear bias width");
            for row in out.chunks_mut(n) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(Tensor::new(shape, out), Op::Linear { x, w, b }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push(v, Op::Gelu(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * sigmoid(a));
        let rg = self.rg(&[x]);
        self.push(v, Op::Silu(x), rg)
    }

    /// Normalizes over the last axis to zero mean, unit variance; no affine.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut out = xv.clone();
        let mut rstd = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::LayerNorm { x, rstd }, rg)
    }

    /// Multi-head softmax attention over all rows of a fused `[T, 3C]`
    /// query/key/value projection. Returns `[T, C]`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Var {
        let qv = self.value(qkv);
        assert_eq!(qv.ndim(), 2, "attention expects [T, 3C]");
        let t = qv.shape()[0];
        let c3 = qv.shape()[1];
        assert_eq!(c3 % 3, 0);
        let c = c3 / 3;
        assert_eq!(c % heads, 0, "heads must divide width");
        let d = c / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let q = qv.data();
        let mut out = vec![0.0; t * c];
        let mut probs = vec![0.0; heads * t * t];
        for h in 0..heads {
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            gemm(t, d, t, (&q[h * d..], c3, 1), (&q[c + h * d..], 1, c3), 0.0, (p, t, 1));
            for row in p.chunks_mut(t) {
                let mut mx = f64::NEG_INFINITY;
                for s in row.iter_mut() {
                    *s *= scale;
                    mx = mx.max(*s);
                }
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                for s in row.iter_mut() {
                    *s /= z;
                }
            }
            gemm(
                t,
                t,
                d,
                (p, t, 1),
                (&q[2 * c + h * d..], c3, 1),
                0.0,
                (&mut out[h * d..], c, 1),
            );
        }
        let rg = self.rg(&[qkv]);
        if !rg {
            probs = Vec::new();
        }
        self.push(Tensor::new([t, c], out), Op::Attention { qkv, heads, probs }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let v = self.value(x).clone().reshape(shape);
        let rg = self.rg(&[x]);
        self.push(v, Op::Reshape(x), rg)
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: impl Into<Vec<usize>>) -> Var {
        let xv = self.value(x).data();
        let data = index.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, data), Op::Gather { x, index }, rg)
    }

    /// Concatenates along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows(), "concat_last row mismatch");
        let (ca, cb) = (av.last_dim(), bv.last_dim());
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        for (ra, rb) in av.data().chunks(ca).zip(bv.data().chunks(cb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, data), Op::Concat { a, b }, rg)
    }

    /// Applies `matrix` (`[out, in]`) along `axis`.
    pub fn resample(&mut self, x: Var, axis: usize, matrix: Rc<Tensor>) -> Var {
        let out = resample_axis(self.value(x), axis, &matrix, false);
        let rg = self.rg(&[x]);
        self.push(out, Op::Resample { x, axis, matrix }, rg)
    }

    /// Stride-1 3-D convolution with zero "same" padding on a channels-last
    /// `[n, h, w, cin]` grid. `w` is `[kt, kh, kw, cin, cout]`, all kernel
    /// extents odd.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.ndim(), 4, "conv3d input must be [n,h,w,c]");
        assert_eq!(wv.ndim(), 5, "conv3d weight must be [kt,kh,kw,cin,cout]");
        let s = xv.shape();
        let ws = wv.shape();
        assert_eq!(ws[3], s[3], "conv3d channel mismatch");
        assert!(ws[..3].iter().all(|k| k % 2 == 1), "conv3d kernel must be odd");
        let geom = ConvGeom {
            n: s[0],
            h: s[1],
            w: s[2],
            cin: s[3],
            cout: ws[4],
            kernel: [ws[0], ws[1], ws[2]],
        };
        let cols = im2col(xv.data(), &geom);
        let (p, k) = (geom.positions(), geom.patch_len());
        let mut out = vec![0.0; p * geom.cout];
        gemm(
            p,
            k,
            geom.cout,
            (&cols, k, 1),
            (wv.data(), geom.cout, 1),
            0.0,
            (&mut out, geom.cout, 1),
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(geom.cout) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        let cols = if rg { cols } else { Vec::new() };
        let shape = [geom.n, geom.h, geom.w, geom.cout];
        self.push(Tensor::new(shape, out), Op::Conv3d { x, w, b, geom, cols }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(v, Op::Mean(x), rg)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mse shape mismatch");
        let n = av.numel() as f64;
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), rg)
    }

    /// Row-wise cosine similarity of two `[rows, C]` views, with the norm
    /// product floored at `eps`. Returns `[rows]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "cosine_rows shape mismatch");
        let c = av.last_dim();
        let out: Vec<f64> = av
            .data()
            .chunks(c)
            .zip(bv.data().chunks(c))
            .map(|(x, y)| {
                let (dot, nx, ny) = dot_norms(x, y);
                // Rounding can land a hair outside the range.
                (dot / (nx * ny).max(eps)).clamp(-1.0, 1.0)
            })
            .collect();
        let rows = out.len();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new([rows], out), Op::CosineRows { a, b, eps }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scaled(*s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*row) {
                    let rs = self.value(*row).shape().to_vec();
                    self.accumulate(grads, *row, Tensor::new(rs, col_sums(g.data(), g.last_dim())));
                }
            }
            Op::MulRow(x, row) => {
                let c = g.last_dim();
                let rv = self.value(*row);
                if self.requires_grad(*x) {
                    let mut dx = g.clone();
                    for chunk in dx.data_mut().chunks_mut(c) {
                        for (d, r) in chunk.iter_mut().zip(rv.data()) {
                            *d *= r;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*row) {
                    let xv = self.value(*x).data();
                    let mut dr = vec![0.0; c];
                    for (gc, xc) in g.data().chunks(c).zip(xv.chunks(c)) {
                        for j in 0..c {
                            dr[j] += gc[j] * xc[j];
                        }
                    }
                    self.accumulate(grads, *row, Tensor::new(rv.shape().to_vec(), dr));
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let k = xv.last_dim();
                let n = wv.shape()[1];
                let m = xv.rows();
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, (g.data(), n, 1), (wv.data(), 1, n), 0.0, (&mut dx, k, 1));
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx));
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, m, n, (xv.data(), 1, k), (g.data(), n, 1), 0.0, (&mut dw, n, 1));
                    self.accumulate(grads, *w, Tensor::new([k, n], dw));
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let bs = self.value(*b).shape().to_vec();
                        self.accumulate(grads, *b, Tensor::new(bs, col_sums(g.data(), n)));
                    }
                }
            }
            Op::Gelu(x) => {
                let d = g.zip_map(self.value(*x), |gg, a| gg * gelu_grad(a));
                self.accumulate(grads, *x, d);
            }
            Op::Silu(x) => {
                let d = g.zip_map(self.value(*x), |gg, a| {
                    let s = sigmoid(a);
                    gg * (s + a * s * (1.0 - s))
                });
                self.accumulate(grads, *x, d);
            }
            Op::LayerNorm { x, rstd } => {
                let y = &node.value;
                let c = y.last_dim();
                let mut dx = vec![0.0; y.numel()];
                for (r, ((dxr, gr), yr)) in dx
                    .chunks_mut(c)
                    .zip(g.data().chunks(c))
                    .zip(y.data().chunks(c))
                    .enumerate()
                {
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dxr[j] = rstd[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx));
            }
            Op::Attention { qkv, heads, probs } => {
                let qv = self.value(*qkv);
                let t = qv.shape()[0];
                let c3 = qv.shape()[1];
                let c = c3 / 3;
                let d = c / heads;
                let scale = 1.0 / (d as f64).sqrt();
                let q = qv.data();
                let go = g.data();
                let mut dq = vec![0.0; t * c3];
                let mut dp = vec![0.0; t * t];
                for h in 0..*heads {
                    let p = &probs[h * t * t..(h + 1) * t * t];
                    // dV = P^T dO
                    gemm(
                        t,
                        t,
                        d,
                        (p, 1, t),
                        (&go[h * d..], c, 1),
                        0.0,
                        (&mut dq[2 * c + h * d..], c3, 1),
                    );
                    // dP = dO V^T
                    gemm(
                        t,
                        d,
                        t,
                        (&go[h * d..], c, 1),
                        (&q[2 * c + h * d..], 1, c3),
                        0.0,
                        (&mut dp, t, 1),
                    );
                    for (dpr, pr) in dp.chunks_mut(t).zip(p.chunks(t)) {
                        let dot: f64 = dpr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for (a, b) in dpr.iter_mut().zip(pr) {
                            *a = b * (*a - dot) * scale;
                        }
                    }
                    // dQ = dS K, dK = dS^T Q
                    gemm(
                        t,
                        t,
                        d,
                        (&dp, t, 1),
                        (&q[c + h * d..], c3, 1),
                        0.0,
                        (&mut dq[h * d..], c3, 1),
                    );
                    gemm(
                        t,
                        t,
                        d,
                        (&dp, 1, t),
                        (&q[h * d..], c3, 1),
                        0.0,
                        (&mut dq[c + h * d..], c3, 1),
                    );
                }
                self.accumulate(grads, *qkv, Tensor::new([t, c3], dq));
            }
            Op::Reshape(x) => {
                let s = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(s));
            }
            Op::Gather { x, index } => {
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.numel()];
                for (&i, gv) in index.iter().zip(g.data()) {
                    dx[i] += gv;
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx));
            }
            Op::Concat { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ca, cb) = (av.last_dim(), bv.last_dim());
                let mut da = Vec::with_capacity(av.numel());
                let mut db = Vec::with_capacity(bv.numel());
                for row in g.data().chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da));
                self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db));
            }
            Op::Resample { x, axis, matrix } => {
                let dx = resample_axis(g, *axis, matrix, true);
                self.accumulate(grads, *x, dx);
            }
            Op::Conv3d { x, w, b, geom, cols } => {
                let (p, k, co) = (geom.positions(), geom.patch_len(), geom.cout);
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; k * co];
                    gemm(k, p, co, (cols, 1, k), (g.data(), co, 1), 0.0, (&mut dw, co, 1));
                    let ws = self.value(*w).shape().to_vec();
                    self.accumulate(grads, *w, Tensor::new(ws, dw));
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let bs = self.value(*b).shape().to_vec();
                        self.accumulate(grads, *b, Tensor::new(bs, col_sums(g.data(), co)));
                    }
                }
                if self.requires_grad(*x) {
                    let mut dcols = vec![0.0; p * k];
                    let wv = self.value(*w).data();
                    gemm(p, co, k, (g.data(), co, 1), (wv, 1, co), 0.0, (&mut dcols, k, 1));
                    let dx = col2im(&dcols, geom);
                    self.accumulate(grads, *x, Tensor::new([geom.n, geom.h, geom.w, geom.cin], dx));
                }
            }
            Op::Sum(x) => {
                let s = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(s, g.item()));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let s = xv.shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(s, g.item() / xv.numel() as f64));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let f = 2.0 * g.item() / av.numel() as f64;
                let da = av.zip_map(bv, |x, y| f * (x - y));
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, da.scaled(-1.0));
                }
                self.accumulate(grads, *a, da);
            }
            Op::CosineRows { a, b, eps } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.last_dim();
                let mut da = vec![0.0; av.numel()];
                let mut db = vec![0.0; bv.numel()];
                for (r, gr) in g.data().iter().enumerate() {
                    let x = &av.data()[r * c..(r + 1) * c];
                    let y = &bv.data()[r * c..(r + 1) * c];
                    let (dot, nx, ny) = dot_norms(x, y);
                    let den = nx * ny;
                    let (dxr, dyr) = (&mut da[r * c..(r + 1) * c], &mut db[r * c..(r + 1) * c]);
                    if den > *eps {
                        let cos = dot / den;
                        for j in 0..c {
                            dxr[j] = gr * (y[j] / den - cos * x[j] / (nx * nx));
                            dyr[j] = gr * (x[j] / den - cos * y[j] / (ny * ny));
                        }
                    } else {
                        for j in 0..c {
                            dxr[j] = gr * y[j] / eps;
                            dyr[j] = gr * x[j] / eps;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da));
                self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db));
            }
        }
    }
}

fn dot_norms(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut nx = 0.0;
    let mut ny = 0.0;
    for (a, b) in x.iter().zip(y) {
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    (dot, nx.sqrt(), ny.sqrt())
}

fn col_sums(data: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for row in data.chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Applies `m` (`[out, in]`) along `axis`, or its transpose when `transpose`.
pub(crate) fn resample_axis(x: &Tensor, axis: usize, m: &Tensor, transpose: bool) -> Tensor {
    let s = x.shape();
    assert!(axis < s.len(), "resample axis out of range");
    let (mo, mi) = (m.shape()[0], m.shape()[1]);
    let (dst, src) = if transpose { (mi, mo) } else { (mo, mi) };
    assert_eq!(
        s[axis], src,
        "resample: axis {axis} has {} entries, matrix expects {src}",
        s[axis]
    );
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * dst * inner];
    let (ars, acs) = if transpose { (1, mi) } else { (mi, 1) };
    for o in 0..outer {
        gemm(
            dst,
            src,
            inner,
            (m.data(), ars, acs),
            (&x.data()[o * src * inner..], inner, 1),
            0.0,
            (&mut out[o * dst * inner..], inner, 1),
        );
    }
    let mut shape = s.to_vec();
    shape[axis] = dst;
    Tensor::new(shape, out)
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let [kt, kh, kw] = g.kernel;
    let (pt, ph, pw) = (kt / 2, kh / 2, kw / 2);
    let k = g.patch_len();
    let mut cols = vec![0.0; g.positions() * k];
    let mut row = 0;
    for n in 0..g.n {
        for i in 0..g.h {
            for j in 0..g.w {
                let dst = &mut cols[row * k..(row + 1) * k];
                let mut off = 0;
                for a in 0..kt {
                    let nn = n as isize + a as isize - pt as isize;
                    for b in 0..kh {
                        let ii = i as isize + b as isize - ph as isize;
                        for c in 0..kw {
                            let jj = j as isize + c as isize - pw as isize;
                            if nn >= 0
                                && (nn as usize) < g.n
                                && ii >= 0
                                && (ii as usize) < g.h
                                && jj >= 0
                                && (jj as usize) < g.w
                            {
                                let src = ((nn as usize * g.h + ii as usize) * g.w + jj as usize) * g.cin;
                                dst[off..off + g.cin].copy_from_slice(&x[src..src + g.cin]);
                            }
                            off += g.cin;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let [kt, kh, kw] = g.kernel;
    let (pt, ph, pw) = (kt / 2, kh / 2, kw / 2);
    let k = g.patch_len();
    let mut x = vec![0.0; g.positions() * g.cin];
    let mut row = 0;
    for n in 0..g.n {
        for i in 0..g.h {
            for j in 0..g.w {
                let src = &cols[row * k..(row + 1) * k];
                let mut off = 0;
                for a in 0..kt {
                    let nn = n as isize + a as isize - pt as isize;
                    for b in 0..kh {
                        let ii = i as isize + b as isize - ph as isize;
                        for c in 0..kw {
                            let jj = j as isize + c as isize - pw as isize;
                            if nn >= 0
                                && (nn as usize) < g.n
                                && ii >= 0
                                && (ii as usize) < g.h
                                && jj >= 0
                                && (jj as usize) < g.w
                            {
                                let dst = ((nn as usize * g.h + ii as usize) * g.w + jj as usize) * g.cin;
                                for (d, s) in x[dst..dst + g.cin].iter_mut().zip(&src[off..off + g.cin]) {
                                    *d += s;
                                }
                            }
                            off += g.cin;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    x
}
