//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough saved state to run its adjoint. [`Graph::backward`] walks the
//! tape in reverse from a scalar root. Shapes are validated at the module
//! boundaries (attention, denoiser, losses); inside the tape a shape mismatch
//! is a programming error and panics.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, Mat};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MaxNorm {
        x: Var,
        group: usize,
        /// Per group: (argmax index or None when the eps floor is active, denominator).
        saved: Vec<(Option<usize>, f64)>,
        margin: f64,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Concat(Var, Var),
    ChannelAffine {
        x: Var,
        scale: Option<Var>,
        shift: Option<Var>,
    },
    MeanTokens(Var),
    Mean(Var),
    Sum(Var),
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

/// Gradients from one backward pass, indexed by [`Var`].
#[derive(Debug)]
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

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
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

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that gradients are accumulated for.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn check_finite(&self, v: Var, stage: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                stage: stage.to_string(),
            })
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_raw(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, silu, Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// `x[.., in] @ w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (fin, fout) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(
            *xv.shape().last().unwrap(),
            fin,
            "linear input width mismatch"
        );
        let rows = xv.numel() / fin;
        let mut out = vec![0.0; rows * fout];
        kernels::gemm(
            rows,
            fin,
            fout,
            1.0,
            Mat::row_major(xv.data(), fin),
            Mat::row_major(wv.data(), fout),
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), fout);
            for row in out.chunks_mut(fout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = fout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::from_raw(shape, out), Op::Linear { x, w, b }, rg)
    }

    /// Batched matmul over the leading axis: `(g, m, k) x (g, k, n)`, or
    /// `(g, m, k) x (g, n, k)^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let [g, m, k] = av.dims3().expect("bmm lhs rank");
        let [gb, b1, b2] = bv.dims3().expect("bmm rhs rank");
        assert_eq!(g, gb, "bmm batch mismatch");
        let n = if trans_b {
            assert_eq!(b2, k);
            b1
        } else {
            assert_eq!(b1, k);
            b2
        };
        let mut out = vec![0.0; g * m * n];
        for i in 0..g {
            let am = Mat::row_major(&av.data()[i * m * k..(i + 1) * m * k], k);
            let bs = &bv.data()[i * k * n..(i + 1) * k * n];
            let bm = if trans_b {
                Mat::transposed(bs, k)
            } else {
                Mat::row_major(bs, n)
            };
            kernels::gemm(
                m,
                k,
                n,
                1.0,
                am,
                bm,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::from_raw(vec![g, m, n], out),
            Op::Bmm { a, b, trans_b },
            rg,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            let inv = 1.0 / s;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let t = Tensor::from_raw(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Layer norm over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);
        let rows = xv.numel() / c;
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv[j] + bv[j];
            }
        }
        let t = Tensor::from_raw(xv.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Divides each contiguous group of `group` elements by
    /// `max(max |x|, eps)` over that group.
    pub fn max_norm(&mut self, x: Var, group: usize, eps: f64) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.numel() % group, 0, "max_norm group must divide size");
        let mut out = xv.data().to_vec();
        let mut saved = Vec::with_capacity(xv.numel() / group);
        let mut margin = f64::INFINITY;
        for chunk in out.chunks_mut(group) {
            let mut best = 0;
            let mut top = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for (i, v) in chunk.iter().enumerate() {
                let a = v.abs();
                if a > top {
                    second = top;
                    top = a;
                    best = i;
                } else if a > second {
                    second = a;
                }
            }
            let entry = if top > eps {
                margin = margin.min(top - second).min(top - eps);
                (Some(best), top)
            } else {
                margin = margin.min(eps - top);
                (None, eps)
            };
            let inv = 1.0 / entry.1;
            for v in chunk.iter_mut() {
                *v *= inv;
            }
            saved.push(entry);
        }
        let t = Tensor::from_raw(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(
            t,
            Op::MaxNorm {
                x,
                group,
                saved,
                margin,
            },
            rg,
        )
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let t = self.value(x).permute(perm);
        let rg = self.rg(x);
        self.push(
            t,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self
            .value(x)
            .clone()
            .reshape(shape)
            .expect("reshape element count");
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    /// 2-D convolution with zero padding; `w` is `(cout, cin, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let [batch, cin, h, wd] = xv.dims4().expect("conv2d input rank");
        let [cout, wcin, k, k2] = wv.dims4().expect("conv2d weight rank");
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        assert_eq!(k, k2, "conv2d kernel must be square");
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad,
        };
        let (oh, ow) = geom.out_hw();
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv2d_forward(xv.data(), batch, geom, wv.data(), cout, bias);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::from_raw(vec![batch, cout, oh, ow], out),
            Op::Conv2d { x, w, b, geom },
            rg,
        )
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let t = upsample_nearest(self.value(x), factor);
        let rg = self.rg(x);
        self.push(t, Op::Upsample { x, factor }, rg)
    }

    /// Concatenates two NCHW tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let [n, ca, h, w] = self.value(a).dims4().expect("concat lhs rank");
        let [nb, cb, hb, wb] = self.value(b).dims4().expect("concat rhs rank");
        assert_eq!((n, h, w), (nb, hb, wb), "concat spatial mismatch");
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&ad[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&bd[i * cb * hw..(i + 1) * cb * hw]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::from_raw(vec![n, ca + cb, h, w], out),
            Op::Concat(a, b),
            rg,
        )
    }

    /// `x * (1 + scale) + shift` with `scale`, `shift` of shape `(b, c)`
    /// broadcast over the spatial axes of NCHW `x`.
    pub fn channel_affine(&mut self, x: Var, scale: Option<Var>, shift: Option<Var>) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims4().expect("channel_affine rank");
        let hw = h * w;
        let mut out = xv.data().to_vec();
        for (k, plane) in out.chunks_mut(hw).enumerate() {
            debug_assert!(k < n * c);
            let s = scale.map_or(0.0, |s| self.value(s).data()[k]);
            let t = shift.map_or(0.0, |t| self.value(t).data()[k]);
            if scale.is_some() {
                for v in plane.iter_mut() {
                    *v = *v * (1.0 + s) + t;
                }
            } else {
                for v in plane.iter_mut() {
                    *v += t;
                }
            }
        }
        for v in [scale, shift].into_iter().flatten() {
            assert_eq!(
                self.value(v).shape(),
                &[n, c],
                "channel_affine coefficient shape"
            );
        }
        let rg =
            self.rg(x) || scale.is_some_and(|s| self.rg(s)) || shift.is_some_and(|s| self.rg(s));
        self.push(
            Tensor::from_raw(vec![n, c, h, w], out),
            Op::ChannelAffine { x, scale, shift },
            rg,
        )
    }

    /// Mean over the middle axis of `(b, n, d)`, giving `(b, d)`.
    pub fn mean_tokens(&mut self, x: Var) -> Var {
        let [b, n, d] = self.value(x).dims3().expect("mean_tokens rank");
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            for t in 0..n {
                let row = &xd[(i * n + t) * d..(i * n + t + 1) * d];
                for (o, v) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        for v in out.iter_mut() {
            *v /= n as f64;
        }
        let rg = self.rg(x);
        self.push(Tensor::from_raw(vec![b, d], out), Op::MeanTokens(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Smallest distance, over every nondifferentiable point recorded on the
    /// tape (clamp bounds, absolute value at zero, max-normalization argmax
    /// switches), between the current values and that kink.
    pub fn kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Clamp { x, lo, hi } => {
                    for &v in self.value(*x).data() {
                        m = m.min((v - lo).abs()).min((v - hi).abs());
                    }
                }
                Op::Abs(x) => {
                    for &v in self.value(*x).data() {
                        m = m.min(v.abs());
                    }
                }
                Op::MaxNorm { margin, .. } => m = m.min(*margin),
                _ => {}
            }
        }
        m
    }

    /// Back-propagates from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gout);
                continue;
            }
            self.backward_node(node, gout, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backward_node(&self, node: &Node, gout: Tensor, grads: &mut [Option<Tensor>]) {
        let go = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, go));
                self.accumulate(grads, *b, |g| add_into(g, go));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, go));
                self.accumulate(grads, *b, |g| {
                    for (d, s) in g.iter_mut().zip(go) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |g| {
                    for ((d, s), y) in g.iter_mut().zip(go).zip(bv) {
                        *d += s * y;
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for ((d, s), x) in g.iter_mut().zip(go).zip(av) {
                        *d += s * x;
                    }
                });
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, |g| {
                for (d, v) in g.iter_mut().zip(go) {
                    *d += v * s;
                }
            }),
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(grads, *x, |g| add_into(g, go)),
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (fin, fout) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / fin;
                self.accumulate(grads, *x, |g| {
                    kernels::gemm(
                        rows,
                        fout,
                        fin,
                        1.0,
                        Mat::row_major(go, fout),
                        Mat::transposed(wv.data(), fout),
                        1.0,
                        g,
                    )
                });
                self.accumulate(grads, *w, |g| {
                    kernels::gemm(
                        fin,
                        rows,
                        fout,
                        1.0,
                        Mat::transposed(xv.data(), fin),
                        Mat::row_major(go, fout),
                        1.0,
                        g,
                    )
                });
                if let Some(b) = b {
                    self.accumulate(grads, *b, |g| {
                        for row in go.chunks(fout) {
                            add_into(g, row);
                        }
                    });
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let [gn, m, k] = av.dims3().unwrap();
                let n = node.value.shape()[2];
                self.accumulate(grads, *a, |g| {
                    for i in 0..gn {
                        let dc = Mat::row_major(&go[i * m * n..(i + 1) * m * n], n);
                        let bs = &bv.data()[i * k * n..(i + 1) * k * n];
                        // dA = dC * B^T  (B^T is n x k)
                        let bt = if *trans_b {
                            Mat::row_major(bs, k)
                        } else {
                            Mat::transposed(bs, n)
                        };
                        kernels::gemm(
                            m,
                            n,
                            k,
                            1.0,
                            dc,
                            bt,
                            1.0,
                            &mut g[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for i in 0..gn {
                        let dcs = &go[i * m * n..(i + 1) * m * n];
                        let as_ = &av.data()[i * m * k..(i + 1) * m * k];
                        let gs = &mut g[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB (n x k) = dC^T (n x m) * A (m x k)
                            kernels::gemm(
                                n,
                                m,
                                k,
                                1.0,
                                Mat::transposed(dcs, n),
                                Mat::row_major(as_, k),
                                1.0,
                                gs,
                            );
                        } else {
                            // dB (k x n) = A^T (k x m) * dC (m x n)
                            kernels::gemm(
                                k,
                                m,
                                n,
                                1.0,
                                Mat::transposed(as_, k),
                                Mat::row_major(dcs, n),
                                1.0,
                                gs,
                            );
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                self.accumulate(grads, *x, |g| {
                    for ((gr, yr), dr) in g.chunks_mut(n).zip(y.chunks(n)).zip(go.chunks(n)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = *node.value.shape().last().unwrap();
                let gv = self.value(*gain).data();
                self.accumulate(grads, *gain, |g| {
                    for (dr, hr) in go.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            g[j] += dr[j] * hr[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |g| {
                    for dr in go.chunks(c) {
                        add_into(g, dr);
                    }
                });
                self.accumulate(grads, *x, |g| {
                    let mut dh = vec![0.0; c];
                    for (r, ((gr, dr), hr)) in g
                        .chunks_mut(c)
                        .zip(go.chunks(c))
                        .zip(xhat.chunks(c))
                        .enumerate()
                    {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            dh[j] = dr[j] * gv[j];
                            m1 += dh[j];
                            m2 += dh[j] * hr[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            gr[j] += rstd[r] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                });
            }
            Op::MaxNorm {
                x, group, saved, ..
            } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |g| {
                    for (k, &(arg, m)) in saved.iter().enumerate() {
                        let off = k * group;
                        let gr = &mut g[off..off + group];
                        let dr = &go[off..off + group];
                        let inv = 1.0 / m;
                        for j in 0..*group {
                            gr[j] += dr[j] * inv;
                        }
                        if let Some(a) = arg {
                            let xr = &xv[off..off + group];
                            let dot: f64 = dr.iter().zip(xr).map(|(d, v)| d * v).sum();
                            gr[a] -= xr[a].signum() * dot * inv * inv;
                        }
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |g| {
                    for ((d, s), v) in g.iter_mut().zip(go).zip(xv) {
                        if *v > *lo && *v < *hi {
                            *d += s;
                        }
                    }
                });
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |g| {
                    for ((d, s), v) in g.iter_mut().zip(go).zip(xv) {
                        let sg = sigmoid(*v);
                        *d += s * sg * (1.0 + v * (1.0 - sg));
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.accumulate(grads, *x, |g| {
                    for ((d, s), yv) in g.iter_mut().zip(go).zip(y) {
                        *d += s * yv * (1.0 - yv);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                self.accumulate(grads, *x, |g| {
                    for ((d, s), yv) in g.iter_mut().zip(go).zip(y) {
                        *d += s * (1.0 - yv * yv);
                    }
                });
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |g| {
                    for ((d, s), v) in g.iter_mut().zip(go).zip(xv) {
                        // subgradient 0 at the kink
                        if *v > 0.0 {
                            *d += s;
                        } else if *v < 0.0 {
                            *d -= s;
                        }
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |g| {
                    for ((d, s), v) in g.iter_mut().zip(go).zip(xv) {
                        *d += 2.0 * s * v;
                    }
                });
            }
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_permutation(perm);
                let (_, back) = kernels::permute(node.value.shape(), go, &inv);
                self.accumulate(grads, *x, |g| add_into(g, &back));
            }
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let batch = xv.shape()[0];
                let cout = wv.shape()[0];
                let mut dx = self.rg(*x).then(|| vec![0.0; xv.numel()]);
                let mut dw = self.rg(*w).then(|| vec![0.0; wv.numel()]);
                let mut db = b.filter(|b| self.rg(*b)).map(|_| vec![0.0; cout]);
                kernels::conv2d_backward(
                    xv.data(),
                    batch,
                    *geom,
                    wv.data(),
                    cout,
                    go,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    self.accumulate(grads, *x, |g| add_into(g, &d));
                }
                if let Some(d) = dw {
                    self.accumulate(grads, *w, |g| add_into(g, &d));
                }
                if let (Some(b), Some(d)) = (b, db) {
                    self.accumulate(grads, *b, |g| add_into(g, &d));
                }
            }
            Op::Upsample { x, factor } => {
                let [n, c, h, w] = self.value(*x).dims4().unwrap();
                let f = *factor;
                self.accumulate(grads, *x, |g| {
                    let ow = w * f;
                    for p in 0..n * c {
                        let src = &go[p * h * f * ow..(p + 1) * h * f * ow];
                        let dst = &mut g[p * h * w..(p + 1) * h * w];
                        for oy in 0..h * f {
                            for ox in 0..ow {
                                dst[(oy / f) * w + ox / f] += src[oy * ow + ox];
                            }
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let [n, ca, h, w] = self.value(*a).dims4().unwrap();
                let cb = self.value(*b).shape()[1];
                let hw = h * w;
                self.accumulate(grads, *a, |g| {
                    for i in 0..n {
                        let src = &go[i * (ca + cb) * hw..(i * (ca + cb) + ca) * hw];
                        add_into(&mut g[i * ca * hw..(i + 1) * ca * hw], src);
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for i in 0..n {
                        let src = &go[(i * (ca + cb) + ca) * hw..(i + 1) * (ca + cb) * hw];
                        add_into(&mut g[i * cb * hw..(i + 1) * cb * hw], src);
                    }
                });
            }
            Op::ChannelAffine { x, scale, shift } => {
                let xv = self.value(*x);
                let [_, _, h, w] = xv.dims4().unwrap();
                let hw = h * w;
                let sv = scale.map(|s| self.value(s).data());
                self.accumulate(grads, *x, |g| {
                    for (k, (gp, dp)) in g.chunks_mut(hw).zip(go.chunks(hw)).enumerate() {
                        let f = 1.0 + sv.map_or(0.0, |s| s[k]);
                        for (d, s) in gp.iter_mut().zip(dp) {
                            *d += s * f;
                        }
                    }
                });
                if let Some(s) = scale {
                    self.accumulate(grads, *s, |g| {
                        for (k, (dp, xp)) in go.chunks(hw).zip(xv.data().chunks(hw)).enumerate() {
                            g[k] += dp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                        }
                    });
                }
                if let Some(t) = shift {
                    self.accumulate(grads, *t, |g| {
                        for (k, dp) in go.chunks(hw).enumerate() {
                            g[k] += dp.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::MeanTokens(x) => {
                let [b, n, d] = self.value(*x).dims3().unwrap();
                self.accumulate(grads, *x, |g| {
                    let inv = 1.0 / n as f64;
                    for i in 0..b {
                        for t in 0..n {
                            for j in 0..d {
                                g[(i * n + t) * d + j] += go[i * d + j] * inv;
                            }
                        }
                    }
                });
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                let s = go[0] / n;
                self.accumulate(grads, *x, |g| g.iter_mut().for_each(|d| *d += s));
            }
            Op::Sum(x) => {
                let s = go[0];
                self.accumulate(grads, *x, |g| g.iter_mut().for_each(|d| *d += s));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Nearest-neighbour upsampling of an NCHW tensor by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    let [n, c, h, w] = x.dims4().expect("upsample rank");
    let f = factor;
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = src[(oy / f) * w + ox / f];
            }
        }
    }
    Tensor::from_raw(vec![n, c, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Compares tape gradients for every leaf against central differences.
    fn check(build: impl Fn(&mut Graph, &[Var]) -> Var, inputs: &[Tensor]) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let root = build(&mut g, &vars);
        let grads = g.backward(root);
        for (k, t) in inputs.iter().enumerate() {
            let f = |x: &[f64]| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == k {
                            g.leaf(Tensor::new(t.shape().to_vec(), x.to_vec()).unwrap())
                        } else {
                            g.leaf(t.clone())
                        }
                    })
                    .collect();
                let r = build(&mut g, &vars);
                g.value(r).item()
            };
            let fd = finite_diff(f, t.data(), 1e-5).unwrap();
            let an = grads.get(vars[k]).unwrap();
            for (i, (a, b)) in an.data().iter().zip(&fd).enumerate() {
                // absolute slack covers the difference quotient's rounding noise
                let ok = (a - b).abs() <= 1e-5 * a.abs().max(b.abs()) + 1e-8;
                assert!(ok, "input {k} coord {i}: analytic {a} vs fd {b}");
            }
        }
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn weighted(g: &mut Graph, v: Var, seed: u64) -> Var {
        let w = g.constant(rand(g.shape(v), seed));
        let m = g.mul(v, w);
        g.sum(m)
    }

    #[test]
    fn linear_and_bmm_gradients() {
        check(
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]));
                weighted(g, y, 9)
            },
            &[rand(&[2, 3, 4], 1), rand(&[4, 5], 2), rand(&[5], 3)],
        );
        for trans in [false, true] {
            let b_shape = if trans { [2, 5, 4] } else { [2, 4, 5] };
            check(
                move |g, v| {
                    let y = g.bmm(v[0], v[1], trans);
                    weighted(g, y, 8)
                },
                &[rand(&[2, 3, 4], 4), rand(&b_shape, 5)],
            );
        }
    }

    #[test]
    fn softmax_layernorm_maxnorm_gradients() {
        check(
            |g, v| {
                let y = g.softmax(v[0]);
                weighted(g, y, 11)
            },
            &[rand(&[3, 5], 10)],
        );
        check(
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
                weighted(g, y, 12)
            },
            &[rand(&[4, 6], 13), rand(&[6], 14), rand(&[6], 15)],
        );
        check(
            |g, v| {
                let y = g.max_norm(v[0], 6, 1e-6);
                weighted(g, y, 16)
            },
            &[rand(&[3, 6], 17)],
        );
    }

    #[test]
    fn conv_and_spatial_gradients() {
        check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1);
                let u = g.upsample_nearest(y, 2);
                let s = g.silu(u);
                weighted(g, s, 21)
            },
            &[
                rand(&[2, 3, 6, 6], 22),
                rand(&[4, 3, 3, 3], 23),
                rand(&[4], 24),
            ],
        );
        check(
            |g, v| {
                let c = g.concat_channels(v[0], v[1]);
                let a = g.channel_affine(c, Some(v[2]), Some(v[3]));
                let p = g.permute(a, &[0, 2, 3, 1]);
                let t = g.tanh(p);
                weighted(g, t, 25)
            },
            &[
                rand(&[2, 2, 3, 3], 26),
                rand(&[2, 1, 3, 3], 27),
                rand(&[2, 3], 28),
                rand(&[2, 3], 29),
            ],
        );
        check(
            |g, v| {
                let m = g.mean_tokens(v[0]);
                let s = g.sigmoid(m);
                let q = g.square(s);
                g.mean(q)
            },
            &[rand(&[2, 3, 4], 30)],
        );
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2], 1.0));
        let w = g.constant(Tensor::full(&[2], 3.0));
        let y = g.mul(x, w);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
        assert!(grads.get(w).is_none());
    }

    #[test]
    fn kink_margin_sees_clamp_and_abs() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![0.95, -0.3, 0.2]).unwrap());
        let c = g.clamp(x, -1.0, 1.0);
        let _ = g.abs(c);
        assert!((g.kink_margin() - 0.05).abs() < 1e-12);
    }
}
