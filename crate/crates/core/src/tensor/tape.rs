use std::rc::Rc;

use super::{gemm, gemm_strided, Tensor};
use crate::entmax;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Grouping of rows (edges) into target segments.
#[derive(Debug, Clone)]
pub struct Segments {
    ids: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl Segments {
    /// `ids[e]` is the segment of row `e`; every segment in `0..count` must be non-empty.
    pub fn new(ids: Vec<usize>, count: usize) -> Result<Self> {
        let mut members = vec![Vec::new(); count];
        for (e, &s) in ids.iter().enumerate() {
            if s >= count {
                return Err(Error::InvalidArgument(format!(
                    "row {e} assigned to segment {s}, only {count} segments"
                )));
            }
            members[s].push(e);
        }
        if let Some(s) = members.iter().position(|m| m.is_empty()) {
            return Err(Error::EmptySegment(s));
        }
        Ok(Segments { ids, members })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn members(&self) -> &[Vec<usize>] {
        &self.members
    }

    pub fn count(&self) -> usize {
        self.members.len()
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Maximum(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sin(Var),
    Cos(Var),
    Atan2(Var, Var),
    WrapAngle(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GruGates {
        gx: Var,
        gh: Var,
        h: Var,
        r: Vec<f64>,
        z: Vec<f64>,
        n: Vec<f64>,
    },
    SegmentEntmax(Var, Rc<Segments>),
    SegmentSoftmax(Var, Rc<Segments>),
    SegmentWeightedSum(Var, Var, Rc<Segments>),
    SegmentMax(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic record of tensor operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any path reached it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
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

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut w = a.rem_euclid(two_pi);
    if w > std::f64::consts::PI {
        w -= two_pi;
    }
    w
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable value.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Param, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, &tb.data, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(mismatch(name, ta, tb));
        }
        let out = zip(ta, tb, f);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    /// Adds a `[1, c]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(row));
        if tb.rows() != 1 || ta.cols() != tb.cols() || ta.shape.len() != 2 {
            return Err(mismatch("add_row", ta, tb));
        }
        let c = ta.cols();
        let mut out = ta.data.clone();
        for chunk in out.chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(&tb.data) {
                *o += b;
            }
        }
        let shape = ta.shape.clone();
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = map(self.value(a), |x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = map(self.value(a), |x| x + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddConst(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = map(self.value(a), f);
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    /// Elementwise `atan2(y, x)`. The gradient is zero where `x = y = 0`.
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        self.binary("atan2", y, x, f64::atan2, Op::Atan2(y, x))
    }

    /// Wraps angles into `(-π, π]`; the gradient passes through unchanged.
    pub fn wrap_angle(&mut self, a: Var) -> Var {
        self.unary(a, wrap_angle, Op::WrapAngle(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat_cols"))?;
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows || self.value(p).shape.len() != 2 {
                return Err(mismatch("concat_cols", self.value(first), self.value(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::matrix(rows, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat_rows"))?;
        let cols = self.value(first).cols();
        for &p in parts {
            if self.value(p).cols() != cols || self.value(p).shape.len() != 2 {
                return Err(mismatch("concat_rows", self.value(first), self.value(p)));
            }
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            out.extend_from_slice(&self.value(p).data);
            rows += self.value(p).rows();
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.cols() || t.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: t.shape.clone(),
                right: vec![start, end],
            });
        }
        let mut out = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            out.extend_from_slice(&t.row_slice(r)[start..end]);
        }
        let rows = t.rows();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::matrix(rows, end - start, out)?,
            Op::SliceCols(a, start),
            rg,
        ))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.rows() || t.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                left: t.shape.clone(),
                right: vec![start, end],
            });
        }
        let c = t.cols();
        let out = t.data[start * c..end * c].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::matrix(end - start, c, out)?,
            Op::SliceRows(a, start),
            rg,
        ))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= t.rows() {
                return Err(Error::ShapeMismatch {
                    op: "gather_rows",
                    left: t.shape.clone(),
                    right: vec![i],
                });
            }
            out.extend_from_slice(t.row_slice(i));
        }
        let n = idx.len();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(n, c, out)?, Op::GatherRows(a, idx), rg))
    }

    /// Row-wise layer normalization with learned `[1, c]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        if tg.cols() != tx.cols() || tg.rows() != 1 {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.shape != tg.shape {
            return Err(mismatch("layer_norm", tg, tb));
        }
        let c = tx.cols();
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = tx.row_slice(r);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mu) * is;
                xhat[r * c + j] = xh;
                out[r * c + j] = tg.data[j] * xh + tb.data[j];
            }
        }
        let shape = tx.shape.clone();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// GRU gate arithmetic. `gx` and `gh` are `[n, 3h]` pre-activations laid
    /// out as reset | update | candidate; `h` is the `[n, h]` previous state.
    ///
    /// ```text
    /// r = σ(gx_r + gh_r)    z = σ(gx_z + gh_z)
    /// n = tanh(gx_n + r ⊙ gh_n)
    /// h' = (1 - z) ⊙ n + z ⊙ h
    /// ```
    pub fn gru_gates(&mut self, gx: Var, gh: Var, h: Var) -> Result<Var> {
        let (tx, th, tp) = (self.value(gx), self.value(gh), self.value(h));
        if tx.shape != th.shape {
            return Err(mismatch("gru_gates", tx, th));
        }
        if tx.rows() != tp.rows() || tx.cols() != 3 * tp.cols() {
            return Err(mismatch("gru_gates", tx, tp));
        }
        let (rows, hd) = (tp.rows(), tp.cols());
        let mut r = vec![0.0; rows * hd];
        let mut z = vec![0.0; rows * hd];
        let mut n = vec![0.0; rows * hd];
        let mut out = vec![0.0; rows * hd];
        for i in 0..rows {
            let gxr = tx.row_slice(i);
            let ghr = th.row_slice(i);
            let hr = tp.row_slice(i);
            for j in 0..hd {
                let k = i * hd + j;
                let rv = sigmoid(gxr[j] + ghr[j]);
                let zv = sigmoid(gxr[hd + j] + ghr[hd + j]);
                let nv = (gxr[2 * hd + j] + rv * ghr[2 * hd + j]).tanh();
                r[k] = rv;
                z[k] = zv;
                n[k] = nv;
                out[k] = (1.0 - zv) * nv + zv * hr[j];
            }
        }
        let rg = self.rg(&[gx, gh, h]);
        Ok(self.push(
            Tensor::matrix(rows, hd, out)?,
            Op::GruGates {
                gx,
                gh,
                h,
                r,
                z,
                n,
            },
            rg,
        ))
    }

    fn check_segments(&self, name: &'static str, a: Var, seg: &Segments) -> Result<()> {
        let t = self.value(a);
        if t.rows() != seg.rows() || t.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: name,
                left: t.shape.clone(),
                right: vec![seg.rows()],
            });
        }
        Ok(())
    }

    /// 1.5-entmax of `[e, 1]` scores within each segment.
    pub fn segment_entmax(&mut self, scores: Var, seg: Rc<Segments>) -> Result<Var> {
        self.check_segments("segment_entmax", scores, &seg)?;
        if self.value(scores).cols() != 1 {
            return Err(mismatch("segment_entmax", self.value(scores), self.value(scores)));
        }
        let w = entmax::segmented_entmax(&self.value(scores).data, &seg)?;
        let e = w.len();
        let rg = self.rg(&[scores]);
        Ok(self.push(
            Tensor::matrix(e, 1, w)?,
            Op::SegmentEntmax(scores, seg),
            rg,
        ))
    }

    /// Softmax of `[e, 1]` scores within each segment.
    pub fn segment_softmax(&mut self, scores: Var, seg: Rc<Segments>) -> Result<Var> {
        self.check_segments("segment_softmax", scores, &seg)?;
        let s = &self.value(scores).data;
        let mut w = vec![0.0; s.len()];
        for m in seg.members() {
            let mx = m.iter().map(|&e| s[e]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = m.iter().map(|&e| (s[e] - mx).exp()).sum();
            for &e in m {
                w[e] = (s[e] - mx).exp() / z;
            }
        }
        let e = w.len();
        let rg = self.rg(&[scores]);
        Ok(self.push(
            Tensor::matrix(e, 1, w)?,
            Op::SegmentSoftmax(scores, seg),
            rg,
        ))
    }

    /// `out[s] = Σ_{e ∈ s} w[e] · msg[e]`.
    pub fn segment_weighted_sum(
        &mut self,
        msgs: Var,
        weights: Var,
        seg: Rc<Segments>,
    ) -> Result<Var> {
        self.check_segments("segment_weighted_sum", msgs, &seg)?;
        self.check_segments("segment_weighted_sum", weights, &seg)?;
        let (tm, tw) = (self.value(msgs), self.value(weights));
        let c = tm.cols();
        let mut out = vec![0.0; seg.count() * c];
        for (e, &s) in seg.ids().iter().enumerate() {
            let w = tw.data[e];
            for (o, &m) in out[s * c..(s + 1) * c].iter_mut().zip(tm.row_slice(e)) {
                *o += w * m;
            }
        }
        let rg = self.rg(&[msgs, weights]);
        Ok(self.push(
            Tensor::matrix(seg.count(), c, out)?,
            Op::SegmentWeightedSum(msgs, weights, seg),
            rg,
        ))
    }

    /// Column-wise maximum over the rows of each segment; ties keep the first row.
    pub fn segment_max(&mut self, msgs: Var, seg: Rc<Segments>) -> Result<Var> {
        self.check_segments("segment_max", msgs, &seg)?;
        let tm = self.value(msgs);
        let c = tm.cols();
        let mut out = vec![0.0; seg.count() * c];
        let mut arg = vec![0usize; seg.count() * c];
        for (s, m) in seg.members().iter().enumerate() {
            for j in 0..c {
                let mut best = m[0];
                for &e in &m[1..] {
                    if tm.get(e, j) > tm.get(best, j) {
                        best = e;
                    }
                }
                out[s * c + j] = tm.get(best, j);
                arg[s * c + j] = best;
            }
        }
        let rg = self.rg(&[msgs]);
        Ok(self.push(
            Tensor::matrix(seg.count(), c, out)?,
            Op::SegmentMax(msgs, arg),
            rg,
        ))
    }

    /// Row indices that won each column of a `segment_max` node.
    pub fn segment_max_winners(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::SegmentMax(_, arg) => Some(arg),
            _ => None,
        }
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn acc_vec(&self, grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
        self.acc(grads, v, |s| {
            for (a, b) in s.iter_mut().zip(d) {
                *a += b;
            }
        });
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[a.0].requires_grad {
                    // dA = G · Bᵀ
                    self.acc(grads, *a, |s| {
                        gemm_strided(m, n, k, g, (n as isize, 1), &tb.data, (1, n as isize), s, 1.0)
                    });
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · G
                    self.acc(grads, *b, |s| {
                        gemm_strided(k, m, n, &ta.data, (1, k as isize), g, (n as isize, 1), s, 1.0)
                    });
                }
            }
            Op::Add(a, b) => {
                self.acc_vec(grads, *a, g);
                self.acc_vec(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc_vec(grads, *a, g);
                self.acc(grads, *b, |s| {
                    for (x, d) in s.iter_mut().zip(g) {
                        *x -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |s| {
                    for ((x, d), y) in s.iter_mut().zip(g).zip(&tb.data) {
                        *x += d * y;
                    }
                });
                self.acc(grads, *b, |s| {
                    for ((x, d), y) in s.iter_mut().zip(g).zip(&ta.data) {
                        *x += d * y;
                    }
                });
            }
            Op::Maximum(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |s| {
                    for j in 0..s.len() {
                        if ta.data[j] >= tb.data[j] {
                            s[j] += g[j];
                        }
                    }
                });
                self.acc(grads, *b, |s| {
                    for j in 0..s.len() {
                        if ta.data[j] < tb.data[j] {
                            s[j] += g[j];
                        }
                    }
                });
            }
            Op::AddRow(a, row) => {
                self.acc_vec(grads, *a, g);
                let c = out.cols();
                self.acc(grads, *row, |s| {
                    for chunk in g.chunks(c) {
                        for (x, d) in s.iter_mut().zip(chunk) {
                            *x += d;
                        }
                    }
                });
            }
            Op::Scale(a, f) => self.acc(grads, *a, |s| {
                for (x, d) in s.iter_mut().zip(g) {
                    *x += f * d;
                }
            }),
            Op::AddConst(a) | Op::WrapAngle(a) => self.acc_vec(grads, *a, g),
            Op::Sigmoid(a) => self.acc(grads, *a, |s| {
                for ((x, d), y) in s.iter_mut().zip(g).zip(&out.data) {
                    *x += d * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => self.acc(grads, *a, |s| {
                for ((x, d), y) in s.iter_mut().zip(g).zip(&out.data) {
                    *x += d * (1.0 - y * y);
                }
            }),
            Op::Relu(a) => self.acc(grads, *a, |s| {
                for ((x, d), y) in s.iter_mut().zip(g).zip(&out.data) {
                    if *y > 0.0 {
                        *x += d;
                    }
                }
            }),
            Op::Exp(a) => self.acc(grads, *a, |s| {
                for ((x, d), y) in s.iter_mut().zip(g).zip(&out.data) {
                    *x += d * y;
                }
            }),
            Op::Log(a) => {
                let ta = self.value(*a);
                self.acc(grads, *a, |s| {
                    for ((x, d), v) in s.iter_mut().zip(g).zip(&ta.data) {
                        *x += d / v;
                    }
                })
            }
            Op::Square(a) => {
                let ta = self.value(*a);
                self.acc(grads, *a, |s| {
                    for ((x, d), v) in s.iter_mut().zip(g).zip(&ta.data) {
                        *x += 2.0 * d * v;
                    }
                })
            }
            Op::Sin(a) => {
                let ta = self.value(*a);
                self.acc(grads, *a, |s| {
                    for ((x, d), v) in s.iter_mut().zip(g).zip(&ta.data) {
                        *x += d * v.cos();
                    }
                })
            }
            Op::Cos(a) => {
                let ta = self.value(*a);
                self.acc(grads, *a, |s| {
                    for ((x, d), v) in s.iter_mut().zip(g).zip(&ta.data) {
                        *x -= d * v.sin();
                    }
                })
            }
            Op::Atan2(y, x) => {
                let (ty, tx) = (self.value(*y), self.value(*x));
                let r2: Vec<f64> = ty
                    .data
                    .iter()
                    .zip(&tx.data)
                    .map(|(a, b)| a * a + b * b)
                    .collect();
                self.acc(grads, *y, |s| {
                    for j in 0..s.len() {
                        if r2[j] > 0.0 {
                            s[j] += g[j] * tx.data[j] / r2[j];
                        }
                    }
                });
                self.acc(grads, *x, |s| {
                    for j in 0..s.len() {
                        if r2[j] > 0.0 {
                            s[j] -= g[j] * ty.data[j] / r2[j];
                        }
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |s| {
                for x in s.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                self.acc(grads, *a, |s| {
                    for x in s.iter_mut() {
                        *x += g[0] / n;
                    }
                })
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    self.acc(grads, *p, |s| {
                        for (r, chunk) in s.chunks_mut(c).enumerate() {
                            let src = &g[r * total + offset..r * total + offset + c];
                            for (x, d) in chunk.iter_mut().zip(src) {
                                *x += d;
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.acc_vec(grads, *p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => {
                let c_in = self.value(*a).cols();
                let c_out = out.cols();
                self.acc(grads, *a, |s| {
                    for (r, chunk) in g.chunks(c_out).enumerate() {
                        let dst = &mut s[r * c_in + start..r * c_in + start + c_out];
                        for (x, d) in dst.iter_mut().zip(chunk) {
                            *x += d;
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let c = out.cols();
                self.acc(grads, *a, |s| {
                    for (x, d) in s[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *x += d;
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let c = out.cols();
                self.acc(grads, *a, |s| {
                    for (k, &r) in idx.iter().enumerate() {
                        for (x, d) in s[r * c..(r + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                            *x += d;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = out.cols();
                let tg = self.value(*gain);
                self.acc(grads, *gain, |s| {
                    for (k, d) in g.iter().enumerate() {
                        s[k % c] += d * xhat[k];
                    }
                });
                self.acc(grads, *bias, |s| {
                    for (k, d) in g.iter().enumerate() {
                        s[k % c] += d;
                    }
                });
                self.acc(grads, *x, |s| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let xr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dxh = gr[j] * tg.data[j];
                            m1 += dxh;
                            m2 += dxh * xr[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dxh = gr[j] * tg.data[j];
                            s[r * c + j] += is * (dxh - m1 - xr[j] * m2);
                        }
                    }
                });
            }
            Op::GruGates {
                gx,
                gh,
                h,
                r,
                z,
                n,
            } => {
                let hd = out.cols();
                let rows = out.rows();
                let th = self.value(*h);
                let tgh = self.value(*gh);
                let mut dg = vec![0.0; rows * 3 * hd];
                let mut dgh = vec![0.0; rows * 3 * hd];
                let mut dh = vec![0.0; rows * hd];
                for i in 0..rows {
                    for j in 0..hd {
                        let k = i * hd + j;
                        let d = g[k];
                        let (rv, zv, nv) = (r[k], z[k], n[k]);
                        let dz = d * (th.data[k] - nv);
                        let dn = d * (1.0 - zv);
                        dh[k] = d * zv;
                        let dpre_n = dn * (1.0 - nv * nv);
                        let dr = dpre_n * tgh.data[i * 3 * hd + 2 * hd + j];
                        let dpre_r = dr * rv * (1.0 - rv);
                        let dpre_z = dz * zv * (1.0 - zv);
                        let b = i * 3 * hd;
                        dg[b + j] = dpre_r;
                        dg[b + hd + j] = dpre_z;
                        dg[b + 2 * hd + j] = dpre_n;
                        dgh[b + j] = dpre_r;
                        dgh[b + hd + j] = dpre_z;
                        dgh[b + 2 * hd + j] = dpre_n * rv;
                    }
                }
                self.acc_vec(grads, *gx, &dg);
                self.acc_vec(grads, *gh, &dgh);
                self.acc_vec(grads, *h, &dh);
            }
            Op::SegmentEntmax(scores, seg) => {
                self.acc(grads, *scores, |s| {
                    for m in seg.members() {
                        let p: Vec<f64> = m.iter().map(|&e| out.data[e]).collect();
                        let up: Vec<f64> = m.iter().map(|&e| g[e]).collect();
                        let d = entmax::entmax15_vjp(&p, &up);
                        for (k, &e) in m.iter().enumerate() {
                            s[e] += d[k];
                        }
                    }
                });
            }
            Op::SegmentSoftmax(scores, seg) => {
                self.acc(grads, *scores, |s| {
                    for m in seg.members() {
                        let dot: f64 = m.iter().map(|&e| out.data[e] * g[e]).sum();
                        for &e in m {
                            s[e] += out.data[e] * (g[e] - dot);
                        }
                    }
                });
            }
            Op::SegmentWeightedSum(msgs, weights, seg) => {
                let (tm, tw) = (self.value(*msgs), self.value(*weights));
                let c = tm.cols();
                self.acc(grads, *msgs, |s| {
                    for (e, &sg) in seg.ids().iter().enumerate() {
                        let w = tw.data[e];
                        for (x, d) in s[e * c..(e + 1) * c].iter_mut().zip(&g[sg * c..(sg + 1) * c]) {
                            *x += w * d;
                        }
                    }
                });
                self.acc(grads, *weights, |s| {
                    for (e, &sg) in seg.ids().iter().enumerate() {
                        s[e] += tm
                            .row_slice(e)
                            .iter()
                            .zip(&g[sg * c..(sg + 1) * c])
                            .map(|(m, d)| m * d)
                            .sum::<f64>();
                    }
                });
            }
            Op::SegmentMax(msgs, arg) => {
                let c = out.cols();
                self.acc(grads, *msgs, |s| {
                    for (k, &e) in arg.iter().enumerate() {
                        s[e * c + k % c] += g[k];
                    }
                });
            }
        }
    }
}
