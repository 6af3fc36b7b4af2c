//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the node index is a valid
//! topological order and `backward` walks it in reverse.

use super::kernels::{axpy, dot, gemm, gemm_tn_acc, transpose};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddBias(usize, usize),
    /// Input and the cached inner tanh.
    Gelu(usize, Vec<T>),
    Exp(usize),
    Abs(usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    SumAll(usize),
    SumAxis(usize, usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    SelectRows {
        x: usize,
        rows: Vec<usize>,
    },
    Gather {
        x: usize,
        index: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Gelu(a, _)
            | Op::Exp(a)
            | Op::Abs(a)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::SumAll(a)
            | Op::SumAxis(a, _) => vec![*a],
            Op::Embedding { table, .. } => vec![*table],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::SelectRows { x, .. } | Op::Gather { x, .. } => vec![*x],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    trainable: bool,
    grad: Option<Tensor<T>>,
}

/// A single-use computation graph. Build the forward pass with the op
/// methods, call [`Graph::backward`] once on a scalar, then read leaf grads.
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    visit_order: Vec<usize>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, axis_len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape {
            op: "axis",
            left: shape.to_vec(),
            right: vec![axis],
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_tanh<T: Real>(x: T) -> T {
    (T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x)).tanh()
}

fn gelu_grad<T: Real>(x: T, t: T) -> T {
    let half = T::of(0.5);
    let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            visit_order: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; its gradient is retained after `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            trainable: true,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            trainable: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    /// Node indices visited by the most recent `backward`, in visit order.
    pub fn backward_order(&self) -> &[usize] {
        &self.visit_order
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            other => Err(Error::Shape {
                op,
                left: other.to_vec(),
                right: vec![],
            }),
        }
    }

    // ---- ops -------------------------------------------------------------

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0)))
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul_nt", a)?;
        let (n, k2) = self.matrix_dims("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let bt = transpose(self.value(b).data(), n, k);
        let mut out = vec![T::zero(); m * n];
        gemm(self.value(a).data(), &bt, &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a.0, b.0)))
    }

    fn zip_with(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let t = self.map(a, |x| x * s);
        self.push(t, Op::Scale(a.0, s))
    }

    /// Adds a length-`n` bias to every row of `a[.., n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.shape(bias) != [n] {
            return Err(Error::Shape {
                op: "add_bias",
                left: self.shape(a).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(a.0, bias.0)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let tanh: Vec<T> = src.data().iter().map(|&x| gelu_tanh(x)).collect();
        let half = T::of(0.5);
        let out = src
            .data()
            .iter()
            .zip(&tanh)
            .map(|(&x, &t)| half * x * (T::one() + t))
            .collect();
        let t = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::Gelu(a.0, tanh))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.exp());
        self.push(t, Op::Exp(a.0))
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.abs());
        self.push(t, Op::Abs(a.0))
    }

    fn check_finite(&self, op: &'static str, a: Var) -> Result<()> {
        if self.value(a).all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    /// Numerically stable softmax along `axis` (max-subtracted, f64 sums).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_finite("softmax", a)?;
        let out = softmax_along(self.value(a), axis, false)?;
        Ok(self.push(out, Op::Softmax(a.0, axis)))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_finite("log_softmax", a)?;
        let out = softmax_along(self.value(a), axis, true)?;
        Ok(self.push(out, Op::LogSoftmax(a.0, axis)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|x| x.as_f64()).sum();
        self.push(Tensor::scalar(T::of(s)), Op::SumAll(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums along `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_extents(&shape, axis)?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0f64;
                for l in 0..len {
                    acc += src[(o * len + l) * inner + i].as_f64();
                }
                out[o * inner + i] = T::of(acc);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis(a.0, axis)))
    }

    /// Row lookup: `table[V,d]` at `ids` gives `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims("embedding", table)?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange {
                    id: id as u32,
                    vocab: v,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).cols();
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let rows = self.value(x).rows();
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![T::zero(); rows * n];
        let mut xhat = vec![T::zero(); rows * n];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = T::of(rs);
            let (m, rs) = (T::of(mean), T::of(rs));
            for j in 0..n {
                let h = (row[j] - m) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
        ))
    }

    /// Multi-head causal self-attention over `batch` sequences of length
    /// `seq`, with `q`, `k`, `v` shaped `[batch*seq, d]`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        self.same_shape("causal_attention", q, k)?;
        self.same_shape("causal_attention", q, v)?;
        let (rows, d) = self.matrix_dims("causal_attention", q)?;
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(Error::Shape {
                op: "causal_attention",
                left: vec![rows, d],
                right: vec![batch, seq, heads],
            });
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for t in 0..seq {
                    let qrow = &qd[(b * seq + t) * d + off..][..dh];
                    let mut mx = T::neg_infinity();
                    for s in 0..=t {
                        let krow = &kd[(b * seq + s) * d + off..][..dh];
                        let sc = dot(qrow, krow) * scale;
                        scores[s] = sc;
                        if sc > mx {
                            mx = sc;
                        }
                    }
                    let mut total = 0.0f64;
                    for sc in scores.iter_mut().take(t + 1) {
                        *sc = (*sc - mx).exp();
                        total += sc.as_f64();
                    }
                    let inv = T::of(1.0 / total);
                    let prow = &mut probs[((b * heads + h) * seq + t) * seq..][..seq];
                    let orow = &mut out[(b * seq + t) * d + off..][..dh];
                    for s in 0..=t {
                        let p = scores[s] * inv;
                        prow[s] = p;
                        axpy(p, &vd[(b * seq + s) * d + off..][..dh], orow);
                    }
                }
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                batch,
                seq,
                heads,
                probs,
            },
        ))
    }

    /// Keeps the listed rows of `x[.., n]`, in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let n = self.value(x).cols();
        let total = self.value(x).rows();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= total {
                return Err(Error::precondition(format!(
                    "row {r} out of range for {total} rows"
                )));
            }
            out.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let t = Tensor::new(vec![rows.len(), n], out)?;
        Ok(self.push(
            t,
            Op::SelectRows {
                x: x.0,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Picks `x[i, index[i]]` for every row of `x[m, n]`.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims("gather", x)?;
        if index.len() != m || index.iter().any(|&j| j >= n) {
            return Err(Error::Shape {
                op: "gather",
                left: vec![m, n],
                right: vec![index.len()],
            });
        }
        let src = self.value(x).data();
        let out = index
            .iter()
            .enumerate()
            .map(|(i, &j)| src[i * n + j])
            .collect();
        let t = Tensor::new(vec![m], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                x: x.0,
                index: index.to_vec(),
            },
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Propagates d(loss)/d(node) to every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::precondition(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        self.visit_order.clear();
        for id in (0..=loss.0).rev() {
            self.visit_order.push(id);
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if self.nodes[id].trainable {
                let shape = self.nodes[id].value.shape().to_vec();
                let t = Tensor::new(shape, g)?;
                match &mut self.nodes[id].grad {
                    Some(prev) => {
                        for (p, &x) in prev.data_mut().iter_mut().zip(t.data()) {
                            *p += x;
                        }
                    }
                    slot @ None => *slot = Some(t),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].requires_grad;
        let numel = |i: usize| nodes[i].value.numel();
        let val = |i: usize| nodes[i].value.data();
        let out = nodes[id].value.data();

        macro_rules! acc {
            ($i:expr) => {{
                let i = $i;
                grads[i].get_or_insert_with(|| vec![T::zero(); numel(i)])
            }};
        }

        match &nodes[id].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
                let n = nodes[b].value.shape()[1];
                if wants(a) {
                    let bt = transpose(val(b), k, n);
                    let mut tmp = vec![T::zero(); m * k];
                    gemm(g, &bt, &mut tmp, m, n, k);
                    add_into(acc!(a), &tmp);
                }
                if wants(b) {
                    gemm_tn_acc(val(a), g, acc!(b), m, k, n);
                }
            }
            &Op::MatMulNT(a, b) => {
                let (m, k) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
                let n = nodes[b].value.shape()[0];
                if wants(a) {
                    let mut tmp = vec![T::zero(); m * k];
                    gemm(g, val(b), &mut tmp, m, n, k);
                    add_into(acc!(a), &tmp);
                }
                if wants(b) {
                    gemm_tn_acc(g, val(a), acc!(b), m, n, k);
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    add_into(acc!(a), g);
                }
                if wants(b) {
                    add_into(acc!(b), g);
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    add_into(acc!(a), g);
                }
                if wants(b) {
                    for (d, &x) in acc!(b).iter_mut().zip(g) {
                        *d -= x;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let vb = val(b);
                    for ((d, &x), &y) in acc!(a).iter_mut().zip(g).zip(vb) {
                        *d += x * y;
                    }
                }
                if wants(b) {
                    let va = val(a);
                    for ((d, &x), &y) in acc!(b).iter_mut().zip(g).zip(va) {
                        *d += x * y;
                    }
                }
            }
            &Op::Scale(a, s) => {
                for (d, &x) in acc!(a).iter_mut().zip(g) {
                    *d += x * s;
                }
            }
            &Op::AddBias(a, b) => {
                if wants(a) {
                    add_into(acc!(a), g);
                }
                if wants(b) {
                    let n = numel(b);
                    let db = acc!(b);
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::Gelu(a, tanh) => {
                let a = *a;
                let va = val(a);
                for (((d, &x), &v), &t) in acc!(a).iter_mut().zip(g).zip(va).zip(tanh) {
                    *d += x * gelu_grad(v, t);
                }
            }
            &Op::Exp(a) => {
                for ((d, &x), &y) in acc!(a).iter_mut().zip(g).zip(out) {
                    *d += x * y;
                }
            }
            &Op::Abs(a) => {
                let va = val(a);
                for ((d, &x), &v) in acc!(a).iter_mut().zip(g).zip(va) {
                    if v > T::zero() {
                        *d += x;
                    } else if v < T::zero() {
                        *d -= x;
                    }
                }
            }
            &Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_extents(nodes[a].value.shape(), axis).unwrap();
                let da = acc!(a);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let s: f64 = (0..len).map(|l| (g[idx(l)] * out[idx(l)]).as_f64()).sum();
                        let s = T::of(s);
                        for l in 0..len {
                            da[idx(l)] += out[idx(l)] * (g[idx(l)] - s);
                        }
                    }
                }
            }
            &Op::LogSoftmax(a, axis) => {
                let (outer, len, inner) = axis_extents(nodes[a].value.shape(), axis).unwrap();
                let da = acc!(a);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let s: f64 = (0..len).map(|l| g[idx(l)].as_f64()).sum();
                        let s = T::of(s);
                        for l in 0..len {
                            da[idx(l)] += g[idx(l)] - out[idx(l)].exp() * s;
                        }
                    }
                }
            }
            &Op::SumAll(a) => {
                let g0 = g[0];
                for d in acc!(a).iter_mut() {
                    *d += g0;
                }
            }
            &Op::SumAxis(a, axis) => {
                let (outer, len, inner) = axis_extents(nodes[a].value.shape(), axis).unwrap();
                let da = acc!(a);
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            da[(o * len + l) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[*table].value.cols();
                let dt = acc!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = nodes[*gain].value.numel();
                let gv = val(*gain);
                if wants(*x) {
                    let dx = acc!(*x);
                    let mut dxhat = vec![T::zero(); n];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for j in 0..n {
                            dxhat[j] = gr[j] * gv[j];
                            m1 += dxhat[j].as_f64();
                            m2 += (dxhat[j] * hr[j]).as_f64();
                        }
                        let m1 = T::of(m1 / n as f64);
                        let m2 = T::of(m2 / n as f64);
                        for j in 0..n {
                            dx[r * n + j] += rs * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                }
                if wants(*gain) {
                    let dg = acc!(*gain);
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if wants(*bias) {
                    let db = acc!(*bias);
                    for gr in g.chunks(n) {
                        add_into(db, gr);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (q, k, v, batch, seq, heads) = (*q, *k, *v, *batch, *seq, *heads);
                let d = nodes[q].value.cols();
                let dh = d / heads;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (val(q), val(k), val(v));
                let mut dq = vec![T::zero(); qd.len()];
                let mut dk = vec![T::zero(); kd.len()];
                let mut dv = vec![T::zero(); vd.len()];
                let mut dp = vec![T::zero(); seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = h * dh;
                        for t in 0..seq {
                            let prow = &probs[((b * heads + h) * seq + t) * seq..][..seq];
                            let go = &g[(b * seq + t) * d + off..][..dh];
                            let mut sum = 0.0f64;
                            for s in 0..=t {
                                let vrow = &vd[(b * seq + s) * d + off..][..dh];
                                dp[s] = dot(go, vrow);
                                sum += (dp[s] * prow[s]).as_f64();
                                axpy(prow[s], go, &mut dv[(b * seq + s) * d + off..][..dh]);
                            }
                            let sum = T::of(sum);
                            let qrow = &qd[(b * seq + t) * d + off..][..dh];
                            for s in 0..=t {
                                let ds = prow[s] * (dp[s] - sum) * scale;
                                let krow = &kd[(b * seq + s) * d + off..][..dh];
                                axpy(ds, krow, &mut dq[(b * seq + t) * d + off..][..dh]);
                                axpy(ds, qrow, &mut dk[(b * seq + s) * d + off..][..dh]);
                            }
                        }
                    }
                }
                if wants(q) {
                    add_into(acc!(q), &dq);
                }
                if wants(k) {
                    add_into(acc!(k), &dk);
                }
                if wants(v) {
                    add_into(acc!(v), &dv);
                }
            }
            Op::SelectRows { x, rows } => {
                let n = nodes[*x].value.cols();
                let dx = acc!(*x);
                for (i, &r) in rows.iter().enumerate() {
                    add_into(&mut dx[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                }
            }
            Op::Gather { x, index } => {
                let n = nodes[*x].value.cols();
                let dx = acc!(*x);
                for (i, &j) in index.iter().enumerate() {
                    dx[i * n + j] += g[i];
                }
            }
        }
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Softmax (or log-softmax) of `x` along `axis`, without a graph.
pub fn softmax_along<T: Real>(x: &Tensor<T>, axis: usize, log: bool) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_extents(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            let mx = (0..len)
                .map(|l| src[idx(l)])
                .fold(T::neg_infinity(), T::max);
            let mut total = 0.0f64;
            for l in 0..len {
                let e = (src[idx(l)] - mx).exp();
                out[idx(l)] = e;
                total += e.as_f64();
            }
            if log {
                let lse = T::of(total.ln());
                for l in 0..len {
                    out[idx(l)] = src[idx(l)] - mx - lse;
                }
            } else {
                let inv = T::of(1.0 / total);
                for l in 0..len {
                    out[idx(l)] *= inv;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
