//! Tape-based reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every node that depends on a parameter or a gradient-tracked input.

use std::collections::HashMap;
use std::ops::Range;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Real, Tensor, View, ViewMut};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Exp,
    /// Tanh approximation.
    Gelu,
    Silu,
    Softplus,
    Sigmoid,
    Tanh,
    Abs,
    /// `x / (1 + x)`, for `x > -1`.
    Ratio,
}

/// Queries in `q` attend to keys/values in `kv`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnGroup {
    pub q: Range<usize>,
    pub kv: Range<usize>,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Constant,
    Input,
    Param,
    MatMul(Var, Var),
    Linear(Var, Var, Option<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Var, Unary),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: Vec<AttnGroup>,
        /// Softmax weights per (group, head), row-major `[nq, nk]`.
        probs: Vec<Vec<T>>,
    },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    Sum(Var),
    NormalizeRows(Var),
    AleatoricL1 {
        pred: Var,
        gt: Tensor<T>,
        log_sigma: Var,
        mask: Vec<bool>,
        count: usize,
    },
    QuatGeodesic(Var, Tensor<T>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn unary_fwd<T: Real>(k: Unary, x: T) -> T {
    match k {
        Unary::Exp => x.exp(),
        Unary::Gelu => {
            let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
            T::of(0.5) * x * (T::one() + u.tanh())
        }
        Unary::Silu => x * sigmoid(x),
        Unary::Softplus => softplus(x),
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Abs => x.abs(),
        Unary::Ratio => x / (T::one() + x),
    }
}

/// Derivative given input `x` and output `y`.
fn unary_grad<T: Real>(k: Unary, x: T, y: T) -> T {
    match k {
        Unary::Exp => y,
        Unary::Gelu => {
            let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
            let t = u.tanh();
            let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
            T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
        }
        Unary::Silu => {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        }
        Unary::Softplus => sigmoid(x),
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Tanh => T::one() - y * y,
        Unary::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        Unary::Ratio => {
            let d = T::one() + x;
            T::one() / (d * d)
        }
    }
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Copies a parameter into the graph; repeated calls reuse one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(av.rows, bv.cols);
        gemm(T::one(), av.view(), bv.view(), T::zero(), out.view_mut());
        let tr = self.tracked(&[a, b]);
        self.push(out, Op::MatMul(a, b), tr)
    }

    /// `x W + b` with `W: [in, out]` and `b: [1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = match b {
            Some(b) => {
                let bv = self.value(b);
                assert_eq!(bv.shape(), (1, wv.cols), "bias shape");
                let mut o = Tensor::zeros(xv.rows, wv.cols);
                for r in 0..xv.rows {
                    o.data[r * wv.cols..(r + 1) * wv.cols].copy_from_slice(&bv.data);
                }
                o
            }
            None => Tensor::zeros(xv.rows, wv.cols),
        };
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(T::one(), xv.view(), wv.view(), beta, out.view_mut());
        let mut deps = vec![x, w];
        deps.extend(b);
        let tr = self.tracked(&deps);
        self.push(out, Op::Linear(x, w, b), tr)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shapes");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(av.rows, av.cols, data);
        let tr = self.tracked(&[a, b]);
        self.push(out, op, tr)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_op(&mut self, a: Var, row: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols), "row broadcast shape");
        let c = av.cols;
        let data = av.data.iter().enumerate().map(|(i, x)| f(*x, rv.data[i % c])).collect();
        let out = Tensor::new(av.rows, c, data);
        let tr = self.tracked(&[a, row]);
        self.push(out, op, tr)
    }

    /// Adds a `[1, cols]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.row_op(a, row, |x, r| x + r, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        self.row_op(a, row, |x, r| x * r, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let av = self.value(a);
        let out = Tensor::new(av.rows, av.cols, av.data.iter().map(|x| *x * c).collect());
        let tr = self.tracked(&[a]);
        self.push(out, Op::Scale(a, c), tr)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let av = self.value(a);
        let out = Tensor::new(av.rows, av.cols, av.data.iter().map(|x| *x + c).collect());
        let tr = self.tracked(&[a]);
        self.push(out, Op::AddScalar(a), tr)
    }

    pub fn unary(&mut self, a: Var, k: Unary) -> Var {
        let av = self.value(a);
        let out = Tensor::new(av.rows, av.cols, av.data.iter().map(|x| unary_fwd(k, *x)).collect());
        let tr = self.tracked(&[a]);
        self.push(out, Op::Unary(a, k), tr)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    /// Row-wise layer normalization with optional `[1, cols]` affine terms.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let n = T::of(cols as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut out = Tensor::zeros(rows, cols);
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let g = gamma.map(|g| self.value(g).data.clone());
        let b = beta.map(|b| self.value(b).data.clone());
        for r in 0..rows {
            let row = xv.row(r);
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|v| (*v - mu) * (*v - mu)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            let o = &mut out.data[r * cols..(r + 1) * cols];
            for c in 0..cols {
                let mut y = (row[c] - mu) * rs;
                if let Some(g) = &g {
                    y *= g[c];
                }
                if let Some(b) = &b {
                    y += b[c];
                }
                o[c] = y;
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let mut deps = vec![x];
        deps.extend(gamma);
        deps.extend(beta);
        let tr = self.tracked(&deps);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            tr,
        )
    }

    /// Multi-head scaled dot-product attention. Column blocks of width
    /// `cols / heads` form the heads; each group attends only within its row
    /// ranges. Query rows not covered by any group produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, groups: Vec<AttnGroup>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        assert!(heads > 0 && d % heads == 0, "heads must divide width");
        assert_eq!(kv.cols, d);
        assert_eq!(vv.shape(), kv.shape());
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut out = Tensor::zeros(qv.rows, d);
        let mut probs = Vec::with_capacity(groups.len() * heads);
        for g in &groups {
            assert!(g.q.end <= qv.rows && g.kv.end <= kv.rows, "attention group out of range");
            let (nq, nk) = (g.q.len(), g.kv.len());
            for h in 0..heads {
                let mut p = vec![T::zero(); nq * nk];
                if nq > 0 && nk > 0 {
                    gemm(
                        scale,
                        qv.view().row_block(g.q.start, nq).col_block(h * dh, dh),
                        kv.view().row_block(g.kv.start, nk).col_block(h * dh, dh).t(),
                        T::zero(),
                        ViewMut {
                            data: &mut p,
                            offset: 0,
                            rows: nq,
                            cols: nk,
                            rs: nk,
                            cs: 1,
                        },
                    );
                    for row in p.chunks_exact_mut(nk) {
                        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let mut s = T::zero();
                        for x in row.iter_mut() {
                            *x = (*x - m).exp();
                            s += *x;
                        }
                        for x in row.iter_mut() {
                            *x /= s;
                        }
                    }
                    let pv = View {
                        data: &p,
                        offset: 0,
                        rows: nq,
                        cols: nk,
                        rs: nk,
                        cs: 1,
                    };
                    gemm(
                        T::one(),
                        pv,
                        vv.view().row_block(g.kv.start, nk).col_block(h * dh, dh),
                        T::zero(),
                        out.view_mut().row_block(g.q.start, nq).col_block(h * dh, dh),
                    );
                }
                probs.push(p);
            }
        }
        let tr = self.tracked(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            },
            tr,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols);
        let out = Tensor::from_fn(av.rows, len, |r, c| av.data[r * av.cols + start + c]);
        let tr = self.tracked(&[a]);
        self.push(out, Op::SliceCols(a, start), tr)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows);
        let out = Tensor::new(len, av.cols, av.data[start * av.cols..(start + len) * av.cols].to_vec());
        let tr = self.tracked(&[a]);
        self.push(out, Op::SliceRows(a, start), tr)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols, cols, "concat_rows widths");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let tr = self.tracked(parts);
        self.push(Tensor::new(rows, cols, data), Op::ConcatRows(parts.to_vec()), tr)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut c0 = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows, rows, "concat_cols heights");
            for r in 0..rows {
                out.data[r * cols + c0..r * cols + c0 + pv.cols].copy_from_slice(pv.row(r));
            }
            c0 += pv.cols;
        }
        let tr = self.tracked(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), tr)
    }

    /// Output row `r` is input row `idx[r]`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let av = self.value(a);
        let c = av.cols;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(av.row(i));
        }
        let out = Tensor::new(idx.len(), c, data);
        let tr = self.tracked(&[a]);
        self.push(out, Op::GatherRows(a, idx), tr)
    }

    /// Output element `j` (row-major, shape `rows x cols`) is input element
    /// `idx[j]` of the flattened input.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>, rows: usize, cols: usize) -> Var {
        assert_eq!(idx.len(), rows * cols);
        let av = self.value(a);
        let out = Tensor::new(rows, cols, idx.iter().map(|&i| av.data[i]).collect());
        let tr = self.tracked(&[a]);
        self.push(out, Op::Gather(a, idx), tr)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().copied().sum();
        let tr = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), tr)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols;
        let mut out = av.clone();
        for row in out.data.chunks_exact_mut(c) {
            let n = row.iter().map(|x| *x * *x).sum::<T>().sqrt();
            for x in row.iter_mut() {
                *x /= n;
            }
        }
        let tr = self.tracked(&[a]);
        self.push(out, Op::NormalizeRows(a), tr)
    }

    /// Mean over masked rows and all columns of
    /// `|pred - gt| * exp(-log_sigma) + log_sigma`, with one `log_sigma` per
    /// row. Returns `None` when the mask is empty.
    pub fn aleatoric_l1(&mut self, pred: Var, gt: Tensor<T>, log_sigma: Var, mask: Vec<bool>) -> Option<Var> {
        let pv = self.value(pred);
        let sv = self.value(log_sigma);
        assert_eq!(pv.shape(), gt.shape(), "aleatoric_l1 pred/gt shapes");
        assert_eq!(sv.shape(), (pv.rows, 1), "aleatoric_l1 log_sigma shape");
        assert_eq!(mask.len(), pv.rows, "aleatoric_l1 mask length");
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return None;
        }
        let c = pv.cols;
        let mut total = T::zero();
        for r in (0..pv.rows).filter(|r| mask[*r]) {
            let s = sv.data[r];
            let w = (-s).exp();
            for k in 0..c {
                total += (pv.data[r * c + k] - gt.data[r * c + k]).abs() * w + s;
            }
        }
        let value = total / T::of((count * c) as f64);
        let tr = self.tracked(&[pred, log_sigma]);
        Some(self.push(
            Tensor::scalar(value),
            Op::AleatoricL1 {
                pred,
                gt,
                log_sigma,
                mask,
                count,
            },
            tr,
        ))
    }

    /// Per-row geodesic angle `2 acos(|<q, g>|)` between unit quaternions.
    pub fn quat_geodesic(&mut self, q: Var, gt: Tensor<T>) -> Var {
        let qv = self.value(q);
        assert_eq!(qv.shape(), gt.shape());
        assert_eq!(qv.cols, 4);
        let out = Tensor::from_fn(qv.rows, 1, |r, _| {
            let d: T = (0..4).map(|k| qv.get(r, k) * gt.get(r, k)).sum();
            T::of(2.0) * d.abs().min(T::one()).acos()
        });
        let tr = self.tracked(&[q]);
        self.push(out, Op::QuatGeodesic(q, gt), tr)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        assert_eq!(self.shape(out), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Input | Op::Param => {
                    grads[i] = Some(g);
                }
                op => self.backprop(op, &node.value, &g, &mut grads),
            }
        }
        Gradients { grads }
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut Tensor<T>> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let (r, c) = self.shape(v);
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c)))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl Fn(usize) -> T) {
        if let Some(buf) = self.grad_buf(grads, v) {
            for (i, x) in buf.data.iter_mut().enumerate() {
                *x += f(i);
            }
        }
    }

    fn backprop(&self, op: &Op<T>, y: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match op {
            Op::Constant | Op::Input | Op::Param => unreachable!(),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.grad_buf(grads, *a) {
                    gemm(T::one(), g.view(), bv.view().t(), T::one(), ga.view_mut());
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    gemm(T::one(), av.view().t(), g.view(), T::one(), gb.view_mut());
                }
            }
            Op::Linear(x, w, b) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if let Some(gx) = self.grad_buf(grads, *x) {
                    gemm(T::one(), g.view(), wv.view().t(), T::one(), gx.view_mut());
                }
                if let Some(gw) = self.grad_buf(grads, *w) {
                    gemm(T::one(), xv.view().t(), g.view(), T::one(), gw.view_mut());
                }
                if let Some(b) = b {
                    if let Some(gb) = self.grad_buf(grads, *b) {
                        let c = g.cols;
                        for row in g.data.chunks_exact(c) {
                            for (acc, x) in gb.data.iter_mut().zip(row) {
                                *acc += *x;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |i| g.data[i]);
                self.accumulate(grads, *b, |i| g.data[i]);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |i| g.data[i]);
                self.accumulate(grads, *b, |i| -g.data[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |i| g.data[i] * bv.data[i]);
                self.accumulate(grads, *b, |i| g.data[i] * av.data[i]);
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, |i| g.data[i]);
                if let Some(gr) = self.grad_buf(grads, *row) {
                    for chunk in g.data.chunks_exact(g.cols) {
                        for (acc, x) in gr.data.iter_mut().zip(chunk) {
                            *acc += *x;
                        }
                    }
                }
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                let c = g.cols;
                self.accumulate(grads, *a, |i| g.data[i] * rv.data[i % c]);
                if let Some(gr) = self.grad_buf(grads, *row) {
                    for (gc, ac) in g.data.chunks_exact(c).zip(av.data.chunks_exact(c)) {
                        for k in 0..c {
                            gr.data[k] += gc[k] * ac[k];
                        }
                    }
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, |i| g.data[i] * *c),
            Op::AddScalar(a) => self.accumulate(grads, *a, |i| g.data[i]),
            Op::Unary(a, k) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, |i| g.data[i] * unary_grad(*k, av.data[i], y.data[i]));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let (rows, cols) = xv.shape();
                let n = T::of(cols as f64);
                let gam = gamma.map(|v| self.value(v).data.clone());
                let mut dgamma = vec![T::zero(); cols];
                let mut dbeta = vec![T::zero(); cols];
                let mut dx = vec![T::zero(); rows * cols];
                let mut xhat = vec![T::zero(); cols];
                let mut dxhat = vec![T::zero(); cols];
                for r in 0..rows {
                    let row = xv.row(r);
                    let gr = g.row(r);
                    for c in 0..cols {
                        xhat[c] = (row[c] - mean[r]) * rstd[r];
                        dxhat[c] = match &gam {
                            Some(gm) => gr[c] * gm[c],
                            None => gr[c],
                        };
                        dgamma[c] += gr[c] * xhat[c];
                        dbeta[c] += gr[c];
                    }
                    let m1 = dxhat.iter().copied().sum::<T>() / n;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| *a * *b).sum::<T>() / n;
                    for c in 0..cols {
                        dx[r * cols + c] = rstd[r] * (dxhat[c] - m1 - xhat[c] * m2);
                    }
                }
                self.accumulate(grads, *x, |i| dx[i]);
                if let Some(gm) = gamma {
                    self.accumulate(grads, *gm, |i| dgamma[i]);
                }
                if let Some(b) = beta {
                    self.accumulate(grads, *b, |i| dbeta[i]);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols;
                let dh = d / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let mut dq = Tensor::zeros(qv.rows, d);
                let mut dk = Tensor::zeros(kv.rows, d);
                let mut dv = Tensor::zeros(vv.rows, d);
                for (gi, grp) in groups.iter().enumerate() {
                    let (nq, nk) = (grp.q.len(), grp.kv.len());
                    if nq == 0 || nk == 0 {
                        continue;
                    }
                    for h in 0..*heads {
                        let p = &probs[gi * heads + h];
                        let pv = View {
                            data: p,
                            offset: 0,
                            rows: nq,
                            cols: nk,
                            rs: nk,
                            cs: 1,
                        };
                        let go = g.view().row_block(grp.q.start, nq).col_block(h * dh, dh);
                        // dV += P^T dO
                        gemm(
                            T::one(),
                            pv.t(),
                            go,
                            T::one(),
                            dv.view_mut().row_block(grp.kv.start, nk).col_block(h * dh, dh),
                        );
                        // dP = dO V^T
                        let mut ds = vec![T::zero(); nq * nk];
                        gemm(
                            T::one(),
                            go,
                            vv.view().row_block(grp.kv.start, nk).col_block(h * dh, dh).t(),
                            T::zero(),
                            ViewMut {
                                data: &mut ds,
                                offset: 0,
                                rows: nq,
                                cols: nk,
                                rs: nk,
                                cs: 1,
                            },
                        );
                        for (dr, pr) in ds.chunks_exact_mut(nk).zip(p.chunks_exact(nk)) {
                            let dot: T = dr.iter().zip(pr).map(|(a, b)| *a * *b).sum();
                            for (x, pp) in dr.iter_mut().zip(pr) {
                                *x = *pp * (*x - dot);
                            }
                        }
                        let dsv = View {
                            data: &ds,
                            offset: 0,
                            rows: nq,
                            cols: nk,
                            rs: nk,
                            cs: 1,
                        };
                        gemm(
                            scale,
                            dsv,
                            kv.view().row_block(grp.kv.start, nk).col_block(h * dh, dh),
                            T::one(),
                            dq.view_mut().row_block(grp.q.start, nq).col_block(h * dh, dh),
                        );
                        gemm(
                            scale,
                            dsv.t(),
                            qv.view().row_block(grp.q.start, nq).col_block(h * dh, dh),
                            T::one(),
                            dk.view_mut().row_block(grp.kv.start, nk).col_block(h * dh, dh),
                        );
                    }
                }
                self.accumulate(grads, *q, |i| dq.data[i]);
                self.accumulate(grads, *k, |i| dk.data[i]);
                self.accumulate(grads, *v, |i| dv.data[i]);
            }
            Op::SliceCols(a, start) => {
                let ac = self.shape(*a).1;
                let (gc, start) = (g.cols, *start);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for r in 0..g.rows {
                        for c in 0..gc {
                            ga.data[r * ac + start + c] += g.data[r * gc + c];
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let off = start * g.cols;
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (i, x) in g.data.iter().enumerate() {
                        ga.data[off + i] += *x;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.accumulate(grads, *p, |i| g.data[off + i]);
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for p in parts {
                    let pc = self.shape(*p).1;
                    self.accumulate(grads, *p, |i| g.data[(i / pc) * g.cols + c0 + i % pc]);
                    c0 += pc;
                }
            }
            Op::GatherRows(a, idx) => {
                let c = g.cols;
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (r, &src) in idx.iter().enumerate() {
                        for k in 0..c {
                            ga.data[src * c + k] += g.data[r * c + k];
                        }
                    }
                }
            }
            Op::Gather(a, idx) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (j, &src) in idx.iter().enumerate() {
                        ga.data[src] += g.data[j];
                    }
                }
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accumulate(grads, *a, |_| s);
            }
            Op::NormalizeRows(a) => {
                let av = self.value(*a);
                let c = av.cols;
                let mut dx = vec![T::zero(); av.len()];
                for r in 0..av.rows {
                    let x = av.row(r);
                    let n = x.iter().map(|v| *v * *v).sum::<T>().sqrt();
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    for k in 0..c {
                        dx[r * c + k] = (gr[k] - yr[k] * dot) / n;
                    }
                }
                self.accumulate(grads, *a, |i| dx[i]);
            }
            Op::AleatoricL1 {
                pred,
                gt,
                log_sigma,
                mask,
                count,
            } => {
                let pv = self.value(*pred);
                let sv = self.value(*log_sigma);
                let c = pv.cols;
                let norm = g.item() / T::of((count * c) as f64);
                if let Some(gp) = self.grad_buf(grads, *pred) {
                    for r in (0..pv.rows).filter(|r| mask[*r]) {
                        let w = (-sv.data[r]).exp() * norm;
                        for k in 0..c {
                            let i = r * c + k;
                            gp.data[i] += sign(pv.data[i] - gt.data[i]) * w;
                        }
                    }
                }
                if let Some(gs) = self.grad_buf(grads, *log_sigma) {
                    for r in (0..pv.rows).filter(|r| mask[*r]) {
                        let w = (-sv.data[r]).exp();
                        let mut acc = T::zero();
                        for k in 0..c {
                            let i = r * c + k;
                            acc += T::one() - (pv.data[i] - gt.data[i]).abs() * w;
                        }
                        gs.data[r] += acc * norm;
                    }
                }
            }
            Op::QuatGeodesic(q, gt) => {
                let qv = self.value(*q);
                let floor = T::of(1e-12);
                if let Some(gq) = self.grad_buf(grads, *q) {
                    for r in 0..qv.rows {
                        let d: T = (0..4).map(|k| qv.get(r, k) * gt.get(r, k)).sum();
                        if d.abs() >= T::one() {
                            continue;
                        }
                        let f = -T::of(2.0) * sign(d) / (T::one() - d * d).max(floor).sqrt() * g.data[r];
                        for k in 0..4 {
                            gq.data[r * 4 + k] += f * gt.get(r, k);
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf (input or parameter node); `None` if it did not
    /// influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradients aligned with the store; unused parameters get
    /// zeros.
    pub fn params(&self, graph: &Graph<T>, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.rows, t.cols))
            .collect();
        for (id, var) in &graph.params {
            if let Some(g) = self.get(*var) {
                out[id.0].add_assign(g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_fn(5, 4, |r, c| ((r * 7 + c * 3) % 5) as f64 - 2.0));
        let k = g.constant(Tensor::from_fn(6, 4, |r, c| ((r + c) % 3) as f64));
        let v = g.constant(Tensor::full(6, 4, 1.0));
        let out = g.attention(q, k, v, 2, vec![AttnGroup { q: 0..5, kv: 0..6 }]);
        // Values are all one, so each output equals the row sum of weights.
        for x in &g.value(out).data {
            assert!((x - 1.0).abs() < 1e-12);
        }
        if let Op::Attention { probs, .. } = &g.nodes[out.0].op {
            for p in probs {
                for row in p.chunks_exact(6) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn aleatoric_l1_closed_forms() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_f64(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s = g.constant(Tensor::zeros(2, 1));
        let same = g.aleatoric_l1(p, Tensor::from_f64(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), s, vec![true; 2]).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let off = g.aleatoric_l1(p, Tensor::from_f64(2, 3, &[0.0, 3.0, 2.0, 5.0, 4.0, 7.0]), s, vec![true; 2]).unwrap();
        assert_eq!(g.value(off).item(), 1.0);
        assert!(g.aleatoric_l1(p, Tensor::zeros(2, 3), s, vec![false; 2]).is_none());
    }

    #[test]
    fn geodesic_double_cover() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_f64(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]));
        let out = g.quat_geodesic(q, Tensor::from_f64(2, 4, &[-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]));
        assert_eq!(g.value(out).data[0], 0.0);
        assert!((g.value(out).data[1] - std::f64::consts::PI).abs() < 1e-12);
    }
}
