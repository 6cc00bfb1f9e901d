//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Values
//! are computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! returns the gradient of a scalar with respect to every input leaf.
//!
//! Shape errors inside the graph are programming errors and panic; callers
//! validate user-supplied shapes before building a graph.

use std::collections::{BTreeMap, HashMap};

use crate::broadcast::{self, BinaryKind};
use crate::kernels::{self, ConvGeom, MatRef};
use crate::params::ParamStore;
use crate::tensor::{numel_of, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Sqrt,
    Square,
}

#[derive(Clone, Copy, Debug)]
struct MatMulGeom {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    a_batched: bool,
    b_batched: bool,
}

enum Op {
    Input,
    Constant,
    Binary { kind: BinaryKind, a: Var, b: Var },
    Unary { kind: UnaryKind, x: Var },
    Scale { x: Var, factor: f64 },
    Shift { x: Var },
    MatMul { a: Var, b: Var, geom: MatMulGeom },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Sum { x: Var },
    SumAxis { x: Var, axis: usize },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    BilinearSample { field: Tensor, pts: Var },
    Cross { a: Var, b: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a computation. Create a fresh graph per forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    bindings: BTreeMap<String, Var>,
    lookup: HashMap<String, Var>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: BTreeMap::new(),
            lookup: HashMap::new(),
            record: true,
        }
    }

    /// A graph whose inputs never require gradients; backward caches are
    /// skipped.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
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

    /// Differentiable leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = self.record;
        self.push(t, Op::Input, rg)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Bind a named parameter from `store`. Repeated binds of the same name
    /// return the same node. Frozen parameters enter as constants.
    pub fn bind(&mut self, store: &ParamStore, name: &str, trainable: bool) -> Var {
        if let Some(&v) = self.lookup.get(name) {
            return v;
        }
        let t = store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not in the store"))
            .clone();
        let v = if trainable { self.input(t) } else { self.constant(t) };
        self.lookup.insert(name.to_string(), v);
        if trainable && self.record {
            self.bindings.insert(name.to_string(), v);
        }
        v
    }

    /// Value copy of `v` as a constant: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ----- elementwise -------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Var {
        let value = broadcast::forward(kind, self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Binary { kind, a, b }, rg)
    }

    /// Broadcasting `a + b`.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Add, a, b)
    }

    /// Broadcasting `a - b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Sub, a, b)
    }

    /// Broadcasting `a * b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Broadcasting `a / b`.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Neg => |v| -v,
            UnaryKind::Relu => |v| v.max(0.0),
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Softplus => softplus,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Sqrt => f64::sqrt,
            UnaryKind::Square => |v| v * v,
        };
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, Op::Unary { kind, x }, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }
    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Softplus, x)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(value, Op::Shift { x }, rg)
    }

    // ----- linear algebra ----------------------------------------------

    /// Batched matrix product `op(a) · op(b)` over the trailing two axes,
    /// where `op` transposes when the corresponding flag is set. Leading
    /// axes are batch axes; an operand with no batch axes (or a single
    /// batch) is shared across the other's batch.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs rank >= 2, got {sa:?} x {sb:?}");
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        assert_eq!(k, kb, "matmul inner dimension mismatch: {sa:?} x {sb:?} (ta={ta}, tb={tb})");
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let (ba, bb) = (numel_of(lead_a), numel_of(lead_b));

        let (geom, out_shape) = if bb == 1 && !ta {
            // Fold a's batch into its rows: one large product.
            let mut shape = lead_a.to_vec();
            shape.extend([m, n]);
            let g = MatMulGeom { batch: 1, m: ba * m, k, n, ta, tb, a_batched: false, b_batched: false };
            (g, shape)
        } else if ba == bb || ba == 1 || bb == 1 {
            let lead = if ba >= bb { lead_a } else { lead_b };
            let mut shape = lead.to_vec();
            shape.extend([m, n]);
            let batch = ba.max(bb);
            let g = MatMulGeom { batch, m, k, n, ta, tb, a_batched: ba == batch && batch > 1, b_batched: bb == batch && batch > 1 };
            (g, shape)
        } else {
            panic!("matmul batch mismatch: {sa:?} x {sb:?}");
        };

        let mut out = vec![0.0; numel_of(&out_shape)];
        let av = MatRef { data: self.value(a).data(), trans: ta };
        let bv = MatRef { data: self.value(b).data(), trans: tb };
        if geom.batch == 1 {
            kernels::gemm(geom.m, k, n, av, bv, 0.0, &mut out);
        } else {
            kernels::batched_gemm(geom.batch, m, k, n, av, geom.a_batched, bv, geom.b_batched, &mut out);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&out_shape, out), Op::MatMul { a, b, geom }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `x · w + b` over the last axis of `x`; `w` is `in x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add(y, b),
            None => y,
        }
    }

    // ----- shape manipulation ------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).reshaped(shape);
        let rg = self.rg(x);
        self.push(value, Op::Reshape { x }, rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let value = permute_tensor(self.value(x), perm);
        let rg = self.rg(x);
        self.push(value, Op::Permute { x, perm: perm.to_vec() }, rg)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Var {
        let nd = self.shape(x).len();
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let src = self.value(x);
        let shape = src.shape();
        assert!(start + len <= shape[axis], "narrow {start}+{len} beyond axis {axis} of {shape:?}");
        let (outer, dim, inner) = split_axis(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&src.data()[base..base + len * inner]);
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&out_shape, out), Op::Narrow { x, axis, start }, rg)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let first = self.shape(xs[0]).to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch {s:?} vs {first:?} on axis {axis}");
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(numel_of(&out_shape));
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let d = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(Tensor::from_vec(&out_shape, out), Op::Concat { xs: xs.to_vec(), axis }, rg)
    }

    // ----- reductions ---------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let src = self.value(x);
        let (outer, dim, inner) = split_axis(src.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &src.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut shape = src.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&shape, out), Op::SumAxis { x, axis }, rg)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let d = self.shape(x)[axis];
        let s = self.sum_axis(x, axis);
        self.scale(s, 1.0 / d as f64)
    }

    // ----- neural-network primitives -----------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let d = *src.shape().last().expect("softmax of a scalar");
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let shape = src.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&shape, out), Op::Softmax { x }, rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let src = self.value(x);
        let d = *src.shape().last().expect("layer_norm of a scalar");
        assert_eq!(self.shape(gamma), [d]);
        assert_eq!(self.shape(beta), [d]);
        let rows = src.numel() / d;
        let mut xhat = vec![0.0; src.numel()];
        let mut rstd = vec![0.0; rows];
        for (r, row) in src.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % d] + b[i % d])
            .collect();
        let shape = src.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let (xhat, rstd) = if rg { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        self.push(Tensor::from_vec(&shape, out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// 2-D convolution of NHWC `x` with a `k x k x in x out` kernel `w`,
    /// bias `b` of length `out`, square stride and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NHWC, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d kernel must be k x k x in x out, got {ws:?}");
        assert_eq!(ws[0], ws[1], "conv2d kernel must be square");
        assert_eq!(ws[2], xs[3], "conv2d channel mismatch: {xs:?} vs {ws:?}");
        let out_ch = ws[3];
        assert_eq!(self.shape(b), [out_ch]);
        let geom = ConvGeom {
            batch: xs[0],
            height: xs[1],
            width: xs[2],
            in_ch: xs[3],
            kernel: ws[0],
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let cols = kernels::im2col(&geom, self.value(x).data());
        let rows = geom.batch * oh * ow;
        let mut out = vec![0.0; rows * out_ch];
        let bias = self.value(b).data();
        for row in out.chunks_mut(out_ch) {
            row.copy_from_slice(bias);
        }
        kernels::gemm(
            rows,
            geom.patch_len(),
            out_ch,
            MatRef::new(&cols),
            MatRef::new(self.value(w).data()),
            1.0,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let cols = if rg { cols } else { Vec::new() };
        let value = Tensor::from_vec(&[geom.batch, oh, ow, out_ch], out);
        self.push(value, Op::Conv2d { x, w, b, geom, cols }, rg)
    }

    /// Bilinearly sample a constant field `[N, H, W, C]` at pixel positions
    /// `pts` `[N, J, 2]` given as `(x, y)` with pixel centres on integers.
    /// Positions outside the image clamp to the border.
    pub fn bilinear_sample(&mut self, field: &Tensor, pts: Var) -> Var {
        let fs = field.shape();
        let ps = self.shape(pts).to_vec();
        assert_eq!(fs.len(), 4, "field must be [N, H, W, C]");
        assert_eq!(ps.len(), 3, "points must be [N, J, 2]");
        assert_eq!(ps[2], 2);
        assert_eq!(fs[0], ps[0], "field/point batch mismatch");
        let c = fs[3];
        let mut out = Vec::with_capacity(ps[0] * ps[1] * c);
        let p = self.value(pts).data();
        for n in 0..ps[0] {
            for j in 0..ps[1] {
                let at = (n * ps[1] + j) * 2;
                let s = BilinearTap::new(fs[1], fs[2], p[at], p[at + 1]);
                for ch in 0..c {
                    out.push(s.sample(field, n, ch));
                }
            }
        }
        let rg = self.rg(pts);
        let value = Tensor::from_vec(&[ps[0], ps[1], c], out);
        self.push(value, Op::BilinearSample { field: field.clone(), pts }, rg)
    }

    /// Cross product over a last axis of length 3.
    pub fn cross(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "cross shape mismatch");
        assert_eq!(self.shape(a).last(), Some(&3), "cross needs a last axis of 3");
        let value = cross_tensor(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Cross { a, b }, rg)
    }

    // ----- backward -----------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every differentiable
    /// leaf that it depends on.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {
                    grads[i] = Some(g);
                }
                Op::Constant => {}
                Op::Binary { kind, a, b } => {
                    let (ga, gb) = broadcast::backward(
                        *kind,
                        self.value(*a),
                        self.value(*b),
                        &g,
                        self.rg(*a),
                        self.rg(*b),
                    );
                    if let Some(ga) = ga {
                        accumulate(&mut grads, *a, ga);
                    }
                    if let Some(gb) = gb {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Unary { kind, x } => {
                    let xv = self.value(*x);
                    let y = &node.value;
                    let d: Vec<f64> = (0..g.numel())
                        .map(|k| {
                            let (gx, xx, yy) = (g.data()[k], xv.data()[k], y.data()[k]);
                            match kind {
                                UnaryKind::Neg => -gx,
                                UnaryKind::Relu => if xx > 0.0 { gx } else { 0.0 },
                                UnaryKind::Tanh => gx * (1.0 - yy * yy),
                                UnaryKind::Sigmoid => gx * yy * (1.0 - yy),
                                UnaryKind::Softplus => gx * sigmoid(xx),
                                UnaryKind::Exp => gx * yy,
                                UnaryKind::Sqrt => gx * 0.5 / yy,
                                UnaryKind::Square => gx * 2.0 * xx,
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), d));
                }
                Op::Scale { x, factor } => {
                    accumulate(&mut grads, *x, g.map(|v| v * factor));
                }
                Op::Shift { x } => accumulate(&mut grads, *x, g),
                Op::MatMul { a, b, geom } => self.matmul_backward(&mut grads, *a, *b, geom, &g),
                Op::Reshape { x } => {
                    let shape = self.shape(*x).to_vec();
                    accumulate(&mut grads, *x, g.reshape(&shape).expect("reshape grad"));
                }
                Op::Permute { x, perm } => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    accumulate(&mut grads, *x, permute_tensor(&g, &inv));
                }
                Op::Narrow { x, axis, start } => {
                    let shape = self.shape(*x).to_vec();
                    let (outer, dim, inner) = split_axis(&shape, *axis);
                    let len = g.shape()[*axis];
                    let mut full = vec![0.0; numel_of(&shape)];
                    for o in 0..outer {
                        let dst = (o * dim + start) * inner;
                        full[dst..dst + len * inner]
                            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(&shape, full));
                }
                Op::Concat { xs, axis } => {
                    let (outer, total, inner) = split_axis(g.shape(), *axis);
                    let mut offset = 0;
                    for &v in xs {
                        let shape = self.shape(v).to_vec();
                        let d = shape[*axis];
                        if self.rg(v) {
                            let mut part = Vec::with_capacity(numel_of(&shape));
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                part.extend_from_slice(&g.data()[src..src + d * inner]);
                            }
                            accumulate(&mut grads, v, Tensor::from_vec(&shape, part));
                        }
                        offset += d;
                    }
                }
                Op::Sum { x } => {
                    let shape = self.shape(*x).to_vec();
                    accumulate(&mut grads, *x, Tensor::full(&shape, g.item()));
                }
                Op::SumAxis { x, axis } => {
                    let shape = self.shape(*x).to_vec();
                    let (outer, dim, inner) = split_axis(&shape, *axis);
                    let mut full = Vec::with_capacity(numel_of(&shape));
                    for o in 0..outer {
                        for _ in 0..dim {
                            full.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(&shape, full));
                }
                Op::Softmax { x } => {
                    let y = &node.value;
                    let d = *y.shape().last().unwrap();
                    let mut dx = vec![0.0; y.numel()];
                    for ((dr, yr), gr) in dx.chunks_mut(d).zip(y.data().chunks(d)).zip(g.data().chunks(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                            *o = yy * (gg - dot);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(y.shape(), dx));
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let d = self.shape(*gamma)[0];
                    let gam = self.value(*gamma).data();
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    let mut dx = vec![0.0; g.numel()];
                    for (r, gr) in g.data().chunks(d).enumerate() {
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..d {
                            dgamma[c] += gr[c] * hr[c];
                            dbeta[c] += gr[c];
                            let dh = gr[c] * gam[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for c in 0..d {
                            let dh = gr[c] * gam[c];
                            dx[r * d + c] = rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, Tensor::from_vec(g.shape(), dx));
                    }
                    if self.rg(*gamma) {
                        accumulate(&mut grads, *gamma, Tensor::from_vec(&[d], dgamma));
                    }
                    if self.rg(*beta) {
                        accumulate(&mut grads, *beta, Tensor::from_vec(&[d], dbeta));
                    }
                }
                Op::Conv2d { x, w, b, geom, cols } => {
                    let out_ch = self.shape(*w)[3];
                    let rows = g.numel() / out_ch;
                    let pl = geom.patch_len();
                    if self.rg(*w) {
                        let mut dw = vec![0.0; pl * out_ch];
                        kernels::gemm(pl, rows, out_ch, MatRef::t(cols), MatRef::new(g.data()), 0.0, &mut dw);
                        accumulate(&mut grads, *w, Tensor::from_vec(self.shape(*w), dw));
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; out_ch];
                        for row in g.data().chunks(out_ch) {
                            for (a, v) in db.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        accumulate(&mut grads, *b, Tensor::from_vec(&[out_ch], db));
                    }
                    if self.rg(*x) {
                        let mut dcols = vec![0.0; rows * pl];
                        kernels::gemm(rows, out_ch, pl, MatRef::new(g.data()), MatRef::t(self.value(*w).data()), 0.0, &mut dcols);
                        let dx = kernels::col2im(geom, &dcols);
                        accumulate(&mut grads, *x, Tensor::from_vec(self.shape(*x), dx));
                    }
                }
                Op::BilinearSample { field, pts } => {
                    let fs = field.shape();
                    let ps = self.shape(*pts).to_vec();
                    let c = fs[3];
                    let p = self.value(*pts).data();
                    let mut dp = vec![0.0; p.len()];
                    for n in 0..ps[0] {
                        for j in 0..ps[1] {
                            let at = (n * ps[1] + j) * 2;
                            let s = BilinearTap::new(fs[1], fs[2], p[at], p[at + 1]);
                            for ch in 0..c {
                                let gv = g.data()[(n * ps[1] + j) * c + ch];
                                let (dx, dy) = s.gradient(field, n, ch);
                                dp[at] += gv * dx;
                                dp[at + 1] += gv * dy;
                            }
                        }
                    }
                    accumulate(&mut grads, *pts, Tensor::from_vec(&ps, dp));
                }
                Op::Cross { a, b } => {
                    if self.rg(*a) {
                        let ga = cross_tensor(self.value(*b), &g);
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = cross_tensor(&g, self.value(*a));
                        accumulate(&mut grads, *b, gb);
                    }
                }
            }
        }
        Gradients {
            grads,
            bindings: self.bindings.clone(),
        }
    }

    fn matmul_backward(&self, grads: &mut [Option<Tensor>], a: Var, b: Var, geom: &MatMulGeom, g: &Tensor) {
        let MatMulGeom { batch, m, k, n, ta, tb, a_batched, b_batched } = *geom;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let gd = g.data();
        if self.rg(a) {
            let mut da = vec![0.0; if a_batched || batch == 1 { batch * m * k } else { m * k }];
            for i in 0..batch {
                let gi = &gd[i * m * n..(i + 1) * m * n];
                let bi = if b_batched { &bv[i * k * n..(i + 1) * k * n] } else { &bv[..k * n] };
                let (off, beta) = if a_batched { (i * m * k, 0.0) } else { (0, if i == 0 { 0.0 } else { 1.0 }) };
                let dst = &mut da[off..off + m * k];
                if ta {
                    // stored k x m: op(b) · gᵀ
                    kernels::gemm(k, n, m, MatRef { data: bi, trans: tb }, MatRef::t(gi), beta, dst);
                } else {
                    kernels::gemm(m, n, k, MatRef::new(gi), MatRef { data: bi, trans: !tb }, beta, dst);
                }
            }
            accumulate(grads, a, Tensor::from_vec(self.shape(a), da));
        }
        if self.rg(b) {
            let mut db = vec![0.0; if b_batched { batch * k * n } else { k * n }];
            for i in 0..batch {
                let gi = &gd[i * m * n..(i + 1) * m * n];
                let ai = if a_batched || batch == 1 { &av[i * m * k..(i + 1) * m * k] } else { &av[..m * k] };
                let (off, beta) = if b_batched { (i * k * n, 0.0) } else { (0, if i == 0 { 0.0 } else { 1.0 }) };
                let dst = &mut db[off..off + k * n];
                if tb {
                    // stored n x k: gᵀ · op(a)
                    kernels::gemm(n, m, k, MatRef::t(gi), MatRef { data: ai, trans: ta }, beta, dst);
                } else {
                    kernels::gemm(k, m, n, MatRef { data: ai, trans: !ta }, MatRef::new(gi), beta, dst);
                }
            }
            accumulate(grads, b, Tensor::from_vec(self.shape(b), db));
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    bindings: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient of a leaf, if the loss depends on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to a bound trainable parameter.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.bindings.get(name).and_then(|&v| self.get(v))
    }

    /// Gradients of every trainable parameter bound in the graph, by name.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.bindings
            .iter()
            .filter_map(|(name, &v)| self.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            debug_assert_eq!(existing.shape(), g.shape());
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
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

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    (
        numel_of(&shape[..axis]),
        shape[axis],
        numel_of(&shape[axis + 1..]),
    )
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    assert_eq!(perm.len(), shape.len(), "permutation rank mismatch");
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let src = t.data();
    for _ in 0..n {
        out.push(src[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_vec(&out_shape, out)
}

fn cross_tensor(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = vec![0.0; a.numel()];
    for ((o, x), y) in out.chunks_mut(3).zip(a.data().chunks(3)).zip(b.data().chunks(3)) {
        o[0] = x[1] * y[2] - x[2] * y[1];
        o[1] = x[2] * y[0] - x[0] * y[2];
        o[2] = x[0] * y[1] - x[1] * y[0];
    }
    Tensor::from_vec(a.shape(), out)
}

/// Four-tap bilinear stencil at one (border-clamped) sample position.
struct BilinearTap {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    width: usize,
    height: usize,
    inside_x: bool,
    inside_y: bool,
}

impl BilinearTap {
    fn new(height: usize, width: usize, x: f64, y: f64) -> Self {
        let max_x = (width - 1) as f64;
        let max_y = (height - 1) as f64;
        let cx = x.clamp(0.0, max_x);
        let cy = y.clamp(0.0, max_y);
        let x0 = cx.floor() as usize;
        let y0 = cy.floor() as usize;
        Self {
            x0,
            y0,
            x1: (x0 + 1).min(width - 1),
            y1: (y0 + 1).min(height - 1),
            fx: cx - x0 as f64,
            fy: cy - y0 as f64,
            width,
            height,
            inside_x: x > 0.0 && x < max_x,
            inside_y: y > 0.0 && y < max_y,
        }
    }

    fn at(&self, field: &Tensor, n: usize, y: usize, x: usize, ch: usize) -> f64 {
        let c = field.shape()[3];
        field.data()[((n * self.height + y) * self.width + x) * c + ch]
    }

    fn sample(&self, field: &Tensor, n: usize, ch: usize) -> f64 {
        let f00 = self.at(field, n, self.y0, self.x0, ch);
        let f10 = self.at(field, n, self.y0, self.x1, ch);
        let f01 = self.at(field, n, self.y1, self.x0, ch);
        let f11 = self.at(field, n, self.y1, self.x1, ch);
        let (fx, fy) = (self.fx, self.fy);
        (1.0 - fx) * (1.0 - fy) * f00 + fx * (1.0 - fy) * f10 + (1.0 - fx) * fy * f01 + fx * fy * f11
    }

    /// Partial derivatives of [`Self::sample`] with respect to `(x, y)`;
    /// zero along a clamped axis.
    fn gradient(&self, field: &Tensor, n: usize, ch: usize) -> (f64, f64) {
        let f00 = self.at(field, n, self.y0, self.x0, ch);
        let f10 = self.at(field, n, self.y0, self.x1, ch);
        let f01 = self.at(field, n, self.y1, self.x0, ch);
        let f11 = self.at(field, n, self.y1, self.x1, ch);
        let (fx, fy) = (self.fx, self.fy);
        let dx = (1.0 - fy) * (f10 - f00) + fy * (f11 - f01);
        let dy = (1.0 - fx) * (f01 - f00) + fx * (f11 - f10);
        (
            if self.inside_x { dx } else { 0.0 },
            if self.inside_y { dy } else { 0.0 },
        )
    }
}

/// Bilinear sample of a single-image field `[H, W, C]` at `(x, y)`.
pub fn bilinear_at(field: &Tensor, x: f64, y: f64) -> Vec<f64> {
    let s = field.shape();
    assert_eq!(s.len(), 3, "field must be [H, W, C]");
    let as4 = field.reshaped(&[1, s[0], s[1], s[2]]);
    let tap = BilinearTap::new(s[0], s[1], x, y);
    (0..s[2]).map(|ch| tap.sample(&as4, 0, ch)).collect()
}
