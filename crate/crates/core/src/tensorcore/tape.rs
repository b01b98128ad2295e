//! Reverse-mode automatic differentiation over row-batched matrices.
//!
//! A [`Tape`] records every operation as it is evaluated. [`Tape::backward`]
//! then sweeps the record in reverse, accumulating exact gradients for every
//! node that transitively depends on a differentiable leaf. Recurrent
//! computations unrolled onto one tape (a GRU over several timesteps, messages
//! exchanged between vehicles) are differentiated through time automatically.

use crate::error::{Error, Result};

use super::kernels::{matmul_nn, matmul_nt, matmul_tn_acc};
use super::{DenseLayer, GruCell, Tensor};

/// Handle to a node on a [`Tape`].
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
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `(1 - z) * a + z * b`
    Lerp { z: Var, a: Var, b: Var },
    Scale(Var, f64),
    RowScale { src: Var, scale: Vec<f64> },
    ConcatCols(Vec<Var>),
    GatherRows { src: Var, idx: Vec<Option<usize>> },
    SegmentSum { src: Var, seg: Vec<usize> },
    Propagate { src: Var, entries: Vec<(usize, usize, f64)> },
    SumSquares(Var),
    WeightedDist { pred: Var, target: Tensor, weights: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Lerp { .. } => "lerp",
            Op::Scale(..) => "scale",
            Op::RowScale { .. } => "row_scale",
            Op::ConcatCols(_) => "concat",
            Op::GatherRows { .. } => "gather",
            Op::SegmentSum { .. } => "segment_sum",
            Op::Propagate { .. } => "propagate",
            Op::SumSquares(_) => "sum_squares",
            Op::WeightedDist { .. } => "weighted_dist",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Registered variables of a dense layer.
#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub w: Var,
    pub b: Var,
}

/// Registered variables of a GRU cell.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape()))
}

impl Tape {
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

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite value produced by `{}` (node {})", op.name(), self.nodes.len())));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Linear { x, w, b } => self.rg(*x) || self.rg(*w) || b.is_some_and(|b| self.rg(b)),
            Op::Relu(x) | Op::Sigmoid(x) | Op::Tanh(x) | Op::Scale(x, _) | Op::SumSquares(x) => self.rg(*x),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => self.rg(*a) || self.rg(*b),
            Op::Lerp { z, a, b } => self.rg(*z) || self.rg(*a) || self.rg(*b),
            Op::RowScale { src, .. } | Op::GatherRows { src, .. } | Op::SegmentSum { src, .. } | Op::Propagate { src, .. } => {
                self.rg(*src)
            }
            Op::ConcatCols(parts) => parts.iter().any(|&p| self.rg(p)),
            Op::WeightedDist { pred, .. } => self.rg(*pred),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf (parameter or input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn register_dense(&mut self, layer: &DenseLayer) -> DenseVars {
        DenseVars { w: self.leaf(layer.w.clone()), b: self.leaf(layer.b.clone()) }
    }

    pub fn register_gru(&mut self, cell: &GruCell) -> GruVars {
        GruVars {
            w_z: self.leaf(cell.w_z.clone()),
            w_r: self.leaf(cell.w_r.clone()),
            w_h: self.leaf(cell.w_h.clone()),
            u_z: self.leaf(cell.u_z.clone()),
            u_r: self.leaf(cell.u_r.clone()),
            u_h: self.leaf(cell.u_h.clone()),
            b_z: self.leaf(cell.b_z.clone()),
            b_r: self.leaf(cell.b_r.clone()),
            b_h: self.leaf(cell.b_h.clone()),
        }
    }

    /// `x W^T + b` for `x: n x in`, `W: out x in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, k) = self.value(x).dims2();
        let (m, kw) = self.value(w).dims2();
        if k != kw {
            return Err(mismatch("linear", self.value(x), self.value(w)));
        }
        let mut out = vec![0.0; n * m];
        matmul_nt(self.value(x).data(), self.value(w).data(), &mut out, n, k, m, false);
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.len() != m {
                return Err(mismatch("linear", self.value(w), bias));
            }
            for row in out.chunks_exact_mut(m) {
                row.iter_mut().zip(bias.data()).for_each(|(o, b)| *o += b);
            }
        }
        self.push(Tensor::matrix(n, m, out)?, Op::Linear { x, w, b })
    }

    pub fn dense(&mut self, x: Var, layer: DenseVars) -> Result<Var> {
        self.linear(x, layer.w, Some(layer.b))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())?;
        self.push(value, op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, super::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `(1 - z) * a + z * b`, elementwise.
    pub fn lerp(&mut self, z: Var, a: Var, b: Var) -> Result<Var> {
        let (tz, ta, tb) = (self.value(z), self.value(a), self.value(b));
        if tz.shape() != ta.shape() || ta.shape() != tb.shape() {
            return Err(mismatch("lerp", ta, tb));
        }
        let data = (0..tz.len())
            .map(|i| {
                let z = tz.data()[i];
                (1.0 - z) * ta.data()[i] + z * tb.data()[i]
            })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, Op::Lerp { z, a, b })
    }

    /// Multiplies row `i` by `scale[i]`.
    pub fn row_scale(&mut self, src: Var, scale: Vec<f64>) -> Result<Var> {
        let (n, c) = self.value(src).dims2();
        if scale.len() != n {
            return Err(Error::shape("row_scale", format!("{} scales for {n} rows", scale.len())));
        }
        let mut data = self.value(src).data().to_vec();
        for (row, s) in data.chunks_exact_mut(c.max(1)).zip(&scale) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let value = Tensor::matrix(n, c, data)?;
        self.push(value, Op::RowScale { src, scale })
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.value(p).dims2()).collect();
        let n = dims.first().map_or(0, |d| d.0);
        if dims.iter().any(|d| d.0 != n) {
            return Err(Error::shape("concat", format!("row counts {dims:?}")));
        }
        let width: usize = dims.iter().map(|d| d.1).sum();
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::matrix(n, width, data)?;
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Output row `r` is `src[idx[r]]`, or zeros for `None`.
    pub fn gather_rows(&mut self, src: Var, idx: Vec<Option<usize>>) -> Result<Var> {
        let (n, c) = self.value(src).dims2();
        let mut data = vec![0.0; idx.len() * c];
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                if i >= n {
                    return Err(Error::shape("gather", format!("row {i} of {n}")));
                }
                data[r * c..(r + 1) * c].copy_from_slice(self.value(src).row(i));
            }
        }
        let value = Tensor::matrix(idx.len(), c, data)?;
        self.push(value, Op::GatherRows { src, idx })
    }

    /// Output row `s` is the sum, in row order, of the `src` rows with `seg[row] == s`.
    pub fn segment_sum(&mut self, src: Var, seg: Vec<usize>, n_out: usize) -> Result<Var> {
        let (n, c) = self.value(src).dims2();
        if seg.len() != n {
            return Err(Error::shape("segment_sum", format!("{} segment ids for {n} rows", seg.len())));
        }
        let mut data = vec![0.0; n_out * c];
        for (r, &s) in seg.iter().enumerate() {
            if s >= n_out {
                return Err(Error::shape("segment_sum", format!("segment {s} of {n_out}")));
            }
            let row = self.value(src).row(r);
            data[s * c..(s + 1) * c].iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        let value = Tensor::matrix(n_out, c, data)?;
        self.push(value, Op::SegmentSum { src, seg })
    }

    /// Sparse row mixing: `out[dst] += weight * src[from]` for each `(dst, from, weight)`.
    pub fn propagate(&mut self, src: Var, entries: Vec<(usize, usize, f64)>, n_out: usize) -> Result<Var> {
        let (n, c) = self.value(src).dims2();
        let mut data = vec![0.0; n_out * c];
        for &(d, s, w) in &entries {
            if d >= n_out || s >= n {
                return Err(Error::shape("propagate", format!("entry ({d}, {s}) for {n} -> {n_out} rows")));
            }
            let row = self.value(src).row(s);
            data[d * c..(d + 1) * c].iter_mut().zip(row).for_each(|(o, v)| *o += w * v);
        }
        let value = Tensor::matrix(n_out, c, data)?;
        self.push(value, Op::Propagate { src, entries })
    }

    /// Scalar `sum(x^2)`.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::vector(vec![s]), Op::SumSquares(x))
    }

    /// Scalar `sum_i weights[i] * ||pred_i - target_i||` over rows.
    pub fn weighted_dist(&mut self, pred: Var, target: Tensor, weights: Vec<f64>) -> Result<Var> {
        let p = self.value(pred);
        let (n, _) = p.dims2();
        if p.shape() != target.shape() || weights.len() != n {
            return Err(mismatch("weighted_dist", p, &target));
        }
        let mut s = 0.0;
        for (i, w) in weights.iter().enumerate() {
            let d: f64 = p.row(i).iter().zip(target.row(i)).map(|(a, b)| (a - b) * (a - b)).sum();
            s += w * d.sqrt();
        }
        self.push(Tensor::vector(vec![s]), Op::WeightedDist { pred, target, weights })
    }

    /// One GRU step on row batches `x: n x in`, `h: n x hidden`.
    pub fn gru(&mut self, x: Var, h: Var, cell: &GruVars) -> Result<Var> {
        let az = self.linear(x, cell.w_z, Some(cell.b_z))?;
        let cz = self.linear(h, cell.u_z, None)?;
        let z_pre = self.add(az, cz)?;
        let z = self.sigmoid(z_pre)?;
        let ar = self.linear(x, cell.w_r, Some(cell.b_r))?;
        let cr = self.linear(h, cell.u_r, None)?;
        let r_pre = self.add(ar, cr)?;
        let r = self.sigmoid(r_pre)?;
        let rh = self.mul(r, h)?;
        let ac = self.linear(x, cell.w_h, Some(cell.b_h))?;
        let cc = self.linear(rh, cell.u_h, None)?;
        let c_pre = self.add(ac, cc)?;
        let cand = self.tanh(c_pre)?;
        self.lerp(z, h, cand)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate_grad(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate_grad(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, k) = self.value(*x).dims2();
                let (m, _) = self.value(*w).dims2();
                if self.rg(*x) {
                    let dx = self.buf(grads, *x);
                    matmul_nn(g, self.value(*w).data(), dx, n, m, k, true);
                }
                if self.rg(*w) {
                    let dw = self.buf(grads, *w);
                    matmul_tn_acc(g, self.value(*x).data(), dw, n, m, k);
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let db = self.buf(grads, b);
                    for row in g.chunks_exact(m.max(1)) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Relu(x) => self.unary(grads, *x, |i| if y[i] > 0.0 { g[i] } else { 0.0 }),
            Op::Sigmoid(x) => self.unary(grads, *x, |i| g[i] * y[i] * (1.0 - y[i])),
            Op::Tanh(x) => self.unary(grads, *x, |i| g[i] * (1.0 - y[i] * y[i])),
            Op::Scale(x, s) => self.unary(grads, *x, |i| g[i] * s),
            Op::Add(a, b) => {
                self.unary(grads, *a, |i| g[i]);
                self.unary(grads, *b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.unary(grads, *a, |i| g[i]);
                self.unary(grads, *b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.unary(grads, *a, |i| g[i] * vb[i]);
                self.unary(grads, *b, |i| g[i] * va[i]);
            }
            Op::Lerp { z, a, b } => {
                let (vz, va, vb) = (self.value(*z).data(), self.value(*a).data(), self.value(*b).data());
                self.unary(grads, *z, |i| g[i] * (vb[i] - va[i]));
                self.unary(grads, *a, |i| g[i] * (1.0 - vz[i]));
                self.unary(grads, *b, |i| g[i] * vz[i]);
            }
            Op::RowScale { src, scale } => {
                let c = self.value(*src).dims2().1.max(1);
                self.unary(grads, *src, |i| g[i] * scale[i / c]);
            }
            Op::ConcatCols(parts) => {
                let n = node.value.dims2().0;
                let width = node.value.dims2().1;
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).dims2().1;
                    if self.rg(p) {
                        let dp = self.buf(grads, p);
                        for r in 0..n {
                            let src = &g[r * width + offset..r * width + offset + c];
                            dp[r * c..(r + 1) * c].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                        }
                    }
                    offset += c;
                }
            }
            Op::GatherRows { src, idx } => {
                if self.rg(*src) {
                    let c = self.value(*src).dims2().1;
                    let ds = self.buf(grads, *src);
                    for (r, i) in idx.iter().enumerate() {
                        if let Some(i) = *i {
                            ds[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]).for_each(|(d, v)| *d += v);
                        }
                    }
                }
            }
            Op::SegmentSum { src, seg } => {
                if self.rg(*src) {
                    let c = self.value(*src).dims2().1;
                    let ds = self.buf(grads, *src);
                    for (r, &s) in seg.iter().enumerate() {
                        ds[r * c..(r + 1) * c].iter_mut().zip(&g[s * c..(s + 1) * c]).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Propagate { src, entries } => {
                if self.rg(*src) {
                    let c = self.value(*src).dims2().1;
                    let ds = self.buf(grads, *src);
                    for &(d, s, w) in entries {
                        ds[s * c..(s + 1) * c].iter_mut().zip(&g[d * c..(d + 1) * c]).for_each(|(o, v)| *o += w * v);
                    }
                }
            }
            Op::SumSquares(x) => {
                let vx = self.value(*x).data();
                self.unary(grads, *x, |i| 2.0 * vx[i] * g[0]);
            }
            Op::WeightedDist { pred, target, weights } => {
                if self.rg(*pred) {
                    let p = self.value(*pred);
                    let c = p.dims2().1;
                    let dp = self.buf(grads, *pred);
                    for (r, w) in weights.iter().enumerate() {
                        let (pr, tr) = (p.row(r), target.row(r));
                        let norm = pr.iter().zip(tr).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                        if norm > 0.0 {
                            for j in 0..c {
                                dp[r * c + j] += g[0] * w * (pr[j] - tr[j]) / norm;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let len = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn unary(&self, grads: &mut [Option<Vec<f64>>], x: Var, f: impl Fn(usize) -> f64) {
        if self.rg(x) {
            let dx = self.buf(grads, x);
            dx.iter_mut().enumerate().for_each(|(i, d)| *d += f(i));
        }
    }
}

/// Result of [`Tape::backward`]: one gradient per differentiable node reached.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` was not reached.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}
