use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::{self, softmax_in_place};
use super::sinkhorn::{self, SinkhornTrace};
use super::{ParamId, ParamStore, Tensor};

/// Variance stabilizer used by [`Graph::context_normalize`].
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    RepeatRows(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Clamp(Var, T, T),
    ContextNorm(Var, Vec<T>),
    Sum(Var),
    Mean(Var),
    GatherElems(Var, Vec<(usize, usize)>),
    Augment(Var, Var),
    SinkhornLog(Var, Box<SinkhornTrace>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::RepeatRows(..) => "repeat_rows",
            Op::Transpose(..) => "transpose",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Clamp(..) => "clamp",
            Op::ContextNorm(..) => "context_normalize",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::GatherElems(..) => "gather_elems",
            Op::Augment(..) => "augment_dustbin",
            Op::SinkhornLog(..) => "sinkhorn",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Define-by-run computation graph. Every op evaluates eagerly and records
/// enough to replay its derivative in [`Graph::backward`].
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
    score_evals: u64,
    live_bytes: usize,
    peak_bytes: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            score_evals: 0,
            live_bytes: 0,
            peak_bytes: 0,
        }
    }

    /// A graph that is never differentiated; attention may take fused paths.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    /// Query×key score evaluations performed by attention on this graph.
    pub fn score_evals(&self) -> u64 {
        self.score_evals
    }

    pub fn count_score_evals(&mut self, n: u64) {
        self.score_evals += n;
    }

    /// Largest number of tensor bytes held at once (node values plus transients).
    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    /// Records a short-lived buffer that never becomes a node.
    pub fn note_transient(&mut self, bytes: usize) {
        self.peak_bytes = self.peak_bytes.max(self.live_bytes + bytes);
    }

    /// First node (in evaluation order) whose value holds NaN or ±inf.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.live_bytes += value.size_bytes();
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    /// Input tensor; gradients are reported for it but never stored anywhere.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Binds a stored parameter into this graph (once per graph).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(Op::Param(id), store.value(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(Op::MatMulT(a, b), out))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(va.rows(), va.cols(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), out))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), out))
    }

    /// `x + row` with a 1×C row broadcast down every row of x.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr != (1, sx.1) {
            return Err(Error::dim("add_row", sx, sr));
        }
        let mut out = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..sx.0 {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddRow(x, row), out))
    }

    /// `x ⊙ row` with a 1×C row broadcast down every row of x.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr != (1, sx.1) {
            return Err(Error::dim("mul_row", sx, sr));
        }
        let mut out = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..sx.0 {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&r) {
                *o *= b;
            }
        }
        Ok(self.push(Op::MulRow(x, row), out))
    }

    /// Scales row i of x by `col[i]`, i.e. `Diag(col) · x`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (sx, sc) = (self.shape(x), self.shape(col));
        if sc != (sx.0, 1) {
            return Err(Error::dim("mul_col", sx, sc));
        }
        let mut out = self.value(x).clone();
        let c = self.value(col).data().to_vec();
        for (i, &w) in c.iter().enumerate() {
            for o in out.row_mut(i) {
                *o *= w;
            }
        }
        Ok(self.push(Op::MulCol(x, col), out))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(Op::Scale(x, s), out)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.push(Op::AddScalar(x), out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(Error::dim("concat_cols", self.shape(first), s));
            }
            cols += s.1;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let out = self.value(x).gather_rows(indices)?;
        Ok(self.push(Op::GatherRows(x, indices.to_vec()), out))
    }

    /// Stacks a 1×C row `n` times.
    pub fn repeat_rows(&mut self, row: Var, n: usize) -> Result<Var> {
        let s = self.shape(row);
        if s.0 != 1 {
            return Err(Error::dim("repeat_rows", s, (1, s.1)));
        }
        let r = self.value(row).data().to_vec();
        let mut data = Vec::with_capacity(n * s.1);
        for _ in 0..n {
            data.extend_from_slice(&r);
        }
        let out = Tensor::from_vec(n, s.1, data)?;
        Ok(self.push(Op::RepeatRows(row), out))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(Op::Transpose(x), out)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(Op::SoftmaxRows(x), out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            // split on sign so exp never overflows
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.push(Op::Sigmoid(x), out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(Op::Relu(x), out)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.ln());
        self.push(Op::Log(x), out)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        self.push(Op::Exp(x), out)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(Op::Clamp(x, lo, hi), out)
    }

    /// Per-column zero mean, unit variance across rows (population variance
    /// plus [`NORM_EPS`]). Degenerate columns map to zeros.
    pub fn context_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        if rows == 0 {
            return Err(Error::Contract("context_normalize needs at least one row".into()));
        }
        let n = T::of(rows as f64);
        let eps = T::of(NORM_EPS);
        let mut mean = vec![T::zero(); cols];
        for r in 0..rows {
            for (m, &v) in mean.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![T::zero(); cols];
        for r in 0..rows {
            for ((s, &v), &m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s / n + eps).sqrt()).collect();
        let mut out = xv.clone();
        for r in 0..rows {
            for ((o, &m), &is) in out.row_mut(r).iter_mut().zip(&mean).zip(&inv_std) {
                *o = (*o - m) * is;
            }
        }
        Ok(self.push(Op::ContextNorm(x, inv_std), out))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = v.sum() / T::of(v.len() as f64);
        Ok(self.push(Op::Mean(x), Tensor::scalar(s)))
    }

    /// Picks individual cells into an n×1 column.
    pub fn gather_elems(&mut self, x: Var, cells: &[(usize, usize)]) -> Result<Var> {
        let v = self.value(x);
        let mut data = Vec::with_capacity(cells.len());
        for &(r, c) in cells {
            if r >= v.rows() || c >= v.cols() {
                return Err(Error::Index {
                    op: "gather_elems",
                    index: r.max(c),
                    len: v.rows().max(v.cols()),
                });
            }
            data.push(v.get(r, c));
        }
        let out = Tensor::column(data);
        Ok(self.push(Op::GatherElems(x, cells.to_vec()), out))
    }

    /// Appends one row and one column filled with the 1×1 scalar `z`.
    pub fn augment_dustbin(&mut self, s: Var, z: Var) -> Result<Var> {
        let zs = self.shape(z);
        if zs != (1, 1) {
            return Err(Error::dim("augment_dustbin", (1, 1), zs));
        }
        let zv = self.value(z).get(0, 0);
        let sv = self.value(s);
        let (m, n) = sv.shape();
        let mut out = Tensor::full(m + 1, n + 1, zv);
        for i in 0..m {
            out.row_mut(i)[..n].copy_from_slice(sv.row(i));
        }
        Ok(self.push(Op::Augment(s, z), out))
    }

    /// Log-domain Sinkhorn normalization of an augmented score matrix toward
    /// row marginals `(1,…,1,N)` and column marginals `(1,…,1,M)`, where the
    /// input is (M+1)×(N+1). Returns `log P̂`; the iterations are unrolled for
    /// differentiation.
    pub fn sinkhorn_log(&mut self, s_hat: Var, iterations: usize) -> Result<Var> {
        let z = self.value(s_hat);
        let (m1, n1) = z.shape();
        if m1 < 2 || n1 < 2 {
            return Err(Error::Contract(format!(
                "sinkhorn needs at least one keypoint per side, got {m1}x{n1} augmented"
            )));
        }
        if iterations == 0 {
            return Err(Error::Contract("sinkhorn needs at least one iteration".into()));
        }
        let z64: Vec<f64> = z.data().iter().map(|v| v.as_f64()).collect();
        let (log_p, trace) = sinkhorn::forward(&z64, m1, n1, iterations);
        let out = Tensor::from_vec(m1, n1, log_p.into_iter().map(T::of).collect())?;
        Ok(self.push(Op::SinkhornLog(s_hat, Box::new(trace)), out))
    }

    /// Reverse sweep from a 1×1 `loss`. Every node's gradient starts at zero;
    /// the returned gradients cover all nodes that `loss` depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                shape.0, shape.1
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        for (idx, node) in self.nodes.iter().enumerate() {
            let Op::Param(id) = node.op else { continue };
            if let Some(g) = grads.get(Var(idx)) {
                let acc = &mut store.get_mut(id).grad;
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
        Ok(grads)
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                let ga = slot(grads, *a, m, k);
                kernels::mm_nt(g.data(), vb.data(), ga.data_mut(), m, n, k);
                let gb = slot(grads, *b, k, n);
                kernels::mm_tn(va.data(), g.data(), gb.data_mut(), m, k, n);
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                let ga = slot(grads, *a, m, k);
                kernels::mm(g.data(), vb.data(), ga.data_mut(), m, n, k);
                let gb = slot(grads, *b, n, k);
                kernels::mm_tn(g.data(), va.data(), gb.data_mut(), m, n, k);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g, |x| x);
                accumulate(grads, *b, g, |x| x);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g, |x| x);
                accumulate(grads, *b, g, |x| -x);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = slot(grads, *a, va.rows(), va.cols());
                for ((d, &gv), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                    *d += gv * y;
                }
                let gb = slot(grads, *b, vb.rows(), vb.cols());
                for ((d, &gv), &x) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                    *d += gv * x;
                }
            }
            Op::AddRow(x, row) => {
                accumulate(grads, *x, g, |v| v);
                let cols = g.cols();
                let gr = slot(grads, *row, 1, cols);
                for r in 0..g.rows() {
                    for (d, &gv) in gr.data_mut().iter_mut().zip(g.row(r)) {
                        *d += gv;
                    }
                }
            }
            Op::MulRow(x, row) => {
                let (vx, vr) = (self.value(*x), self.value(*row));
                let cols = g.cols();
                let gx = slot(grads, *x, vx.rows(), cols);
                for r in 0..g.rows() {
                    for ((d, &gv), &w) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(vr.data()) {
                        *d += gv * w;
                    }
                }
                let gr = slot(grads, *row, 1, cols);
                for r in 0..g.rows() {
                    for ((d, &gv), &xv) in gr.data_mut().iter_mut().zip(g.row(r)).zip(vx.row(r)) {
                        *d += gv * xv;
                    }
                }
            }
            Op::MulCol(x, col) => {
                let (vx, vc) = (self.value(*x), self.value(*col));
                let gx = slot(grads, *x, vx.rows(), vx.cols());
                for r in 0..g.rows() {
                    let w = vc.data()[r];
                    for (d, &gv) in gx.row_mut(r).iter_mut().zip(g.row(r)) {
                        *d += gv * w;
                    }
                }
                let gc = slot(grads, *col, vx.rows(), 1);
                for r in 0..g.rows() {
                    gc.data_mut()[r] += kernels::dot(g.row(r), vx.row(r));
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                accumulate(grads, *x, g, |v| v * s);
            }
            Op::AddScalar(x) => accumulate(grads, *x, g, |v| v),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    let gp = slot(grads, p, rows, cols);
                    for r in 0..rows {
                        for (d, &gv) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + cols]) {
                            *d += gv;
                        }
                    }
                    offset += cols;
                }
            }
            Op::GatherRows(x, indices) => {
                let (rows, cols) = self.shape(*x);
                let gx = slot(grads, *x, rows, cols);
                for (r, &i) in indices.iter().enumerate() {
                    for (d, &gv) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d += gv;
                    }
                }
            }
            Op::RepeatRows(row) => {
                let cols = g.cols();
                let gr = slot(grads, *row, 1, cols);
                for r in 0..g.rows() {
                    for (d, &gv) in gr.data_mut().iter_mut().zip(g.row(r)) {
                        *d += gv;
                    }
                }
            }
            Op::Transpose(x) => {
                let gt = g.transpose();
                accumulate(grads, *x, &gt, |v| v);
            }
            Op::SoftmaxRows(x) => {
                let gx = slot(grads, *x, out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gy) = (out.row(r), g.row(r));
                    let inner = kernels::dot(y, gy);
                    for ((d, &yv), &gv) in gx.row_mut(r).iter_mut().zip(y).zip(gy) {
                        *d += yv * (gv - inner);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let gx = slot(grads, *x, out.rows(), out.cols());
                for ((d, &y), &gv) in gx.data_mut().iter_mut().zip(out.data()).zip(g.data()) {
                    *d += gv * y * (T::one() - y);
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                let gx = slot(grads, *x, out.rows(), out.cols());
                for ((d, &xv), &gv) in gx.data_mut().iter_mut().zip(vx.data()).zip(g.data()) {
                    if xv > T::zero() {
                        *d += gv;
                    }
                }
            }
            Op::Log(x) => {
                let vx = self.value(*x);
                let gx = slot(grads, *x, out.rows(), out.cols());
                for ((d, &xv), &gv) in gx.data_mut().iter_mut().zip(vx.data()).zip(g.data()) {
                    *d += gv / xv;
                }
            }
            Op::Exp(x) => {
                let gx = slot(grads, *x, out.rows(), out.cols());
                for ((d, &y), &gv) in gx.data_mut().iter_mut().zip(out.data()).zip(g.data()) {
                    *d += gv * y;
                }
            }
            Op::Clamp(x, lo, hi) => {
                let vx = self.value(*x);
                let gx = slot(grads, *x, out.rows(), out.cols());
                for ((d, &xv), &gv) in gx.data_mut().iter_mut().zip(vx.data()).zip(g.data()) {
                    if xv >= *lo && xv <= *hi {
                        *d += gv;
                    }
                }
            }
            Op::ContextNorm(x, inv_std) => {
                let (rows, cols) = out.shape();
                let n = T::of(rows as f64);
                let mut mean_g = vec![T::zero(); cols];
                let mut mean_gy = vec![T::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let gv = g.get(r, c);
                        mean_g[c] += gv;
                        mean_gy[c] += gv * out.get(r, c);
                    }
                }
                mean_g.iter_mut().for_each(|v| *v /= n);
                mean_gy.iter_mut().for_each(|v| *v /= n);
                let gx = slot(grads, *x, rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        let d = inv_std[c] * (g.get(r, c) - mean_g[c] - out.get(r, c) * mean_gy[c]);
                        gx.data_mut()[r * cols + c] += d;
                    }
                }
            }
            Op::Sum(x) => {
                let gv = g.get(0, 0);
                let (rows, cols) = self.shape(*x);
                let gx = slot(grads, *x, rows, cols);
                gx.data_mut().iter_mut().for_each(|d| *d += gv);
            }
            Op::Mean(x) => {
                let (rows, cols) = self.shape(*x);
                let gv = g.get(0, 0) / T::of((rows * cols) as f64);
                let gx = slot(grads, *x, rows, cols);
                gx.data_mut().iter_mut().for_each(|d| *d += gv);
            }
            Op::GatherElems(x, cells) => {
                let (rows, cols) = self.shape(*x);
                let gx = slot(grads, *x, rows, cols);
                for (k, &(r, c)) in cells.iter().enumerate() {
                    gx.data_mut()[r * cols + c] += g.data()[k];
                }
            }
            Op::Augment(s, z) => {
                let (m, n) = self.shape(*s);
                let gs = slot(grads, *s, m, n);
                for i in 0..m {
                    for (d, &gv) in gs.row_mut(i).iter_mut().zip(&g.row(i)[..n]) {
                        *d += gv;
                    }
                }
                let mut border = T::zero();
                for i in 0..m {
                    border += g.get(i, n);
                }
                border += g.row(m).iter().copied().sum::<T>();
                let gz = slot(grads, *z, 1, 1);
                gz.data_mut()[0] += border;
            }
            Op::SinkhornLog(input, trace) => {
                let z = self.value(*input);
                let z64: Vec<f64> = z.data().iter().map(|v| v.as_f64()).collect();
                let g64: Vec<f64> = g.data().iter().map(|v| v.as_f64()).collect();
                let gz = sinkhorn::backward(&z64, z.rows(), z.cols(), trace, &g64);
                let gz = Tensor::from_vec(z.rows(), z.cols(), gz.into_iter().map(T::of).collect()).expect("same shape");
                accumulate(grads, *input, &gz, |v| v);
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, rows: usize, cols: usize) -> &mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: &Tensor<T>, f: impl Fn(T) -> T) {
    let acc = slot(grads, v, g.rows(), g.cols());
    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += f(b);
    }
}


/// Per-node gradients of one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` if the loss does not depend on `v`.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with zeros filled in for nodes the loss does not reach.
    pub fn get_or_zeros(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = graph.shape(v);
            Tensor::zeros(r, c)
        })
    }
}
