use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Tensor, TensorError};

const LAYER_NORM_EPS: f64 = 1e-5;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    index: usize,
    tape: u64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulCol(usize, usize),
    Affine(usize, f64),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Rc<[usize]>),
    SegmentSum(usize, Rc<[usize]>),
    SegmentSoftmax(usize, Rc<[usize]>),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    RowSoftmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Tensor, rstd: Vec<f64> },
    Mse(usize, usize),
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations in execution order; [`Tape::backward`] replays them in
/// reverse, accumulating gradients additively.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: a.shape(), rhs: b.shape() }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            checked: false,
        }
    }

    /// A tape that rejects any operation producing NaN or ±∞.
    pub fn checked() -> Self {
        Self { checked: true, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable used on a foreign tape");
        v.index
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var, TensorError> {
        if self.checked && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var { index: self.nodes.len() - 1, tape: self.id })
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Input tensor; gradients are collected for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var, TensorError> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var { index: self.nodes.len() - 1, tape: self.id }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v)].value
    }

    /// Gradient of the loss with respect to `v`; `None` before backward or
    /// when `v` does not influence the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(self.idx(v)).and_then(Option::as_ref)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if x.cols != y.rows {
            return Err(mismatch("matmul", x, y));
        }
        let mut out = Tensor::zeros(x.rows, y.cols);
        matmul_into(&x.data, &y.data, &mut out.data, x.rows, x.cols, y.cols);
        let ng = self.needs(&[ia, ib]);
        self.push(out, Op::MatMul(ia, ib), ng, "matmul")
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor), TensorError> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if x.shape() != y.shape() {
            return Err(mismatch(name, x, y));
        }
        let data = x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect();
        Ok((ia, ib, Tensor::from_vec(x.rows, x.cols, data)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib, out) = self.zip(a, b, "add", |p, q| p + q)?;
        let ng = self.needs(&[ia, ib]);
        self.push(out, Op::Add(ia, ib), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib, out) = self.zip(a, b, "sub", |p, q| p - q)?;
        let ng = self.needs(&[ia, ib]);
        self.push(out, Op::Sub(ia, ib), ng, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib, out) = self.zip(a, b, "mul", |p, q| p * q)?;
        let ng = self.needs(&[ia, ib]);
        self.push(out, Op::Mul(ia, ib), ng, "mul")
    }

    /// `a (n×d) + bias (1×d)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a), self.idx(bias));
        let (x, b) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if b.rows != 1 || b.cols != x.cols {
            return Err(mismatch("add_row", x, b));
        }
        let mut out = x.clone();
        for row in out.data.chunks_mut(x.cols.max(1)) {
            for (o, bv) in row.iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
        let ng = self.needs(&[ia, ib]);
        self.push(out, Op::AddRow(ia, ib), ng, "add_row")
    }

    /// Scales every row of `a (n×d)` by the matching entry of `c (n×1)`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var, TensorError> {
        let (ia, ic) = (self.idx(a), self.idx(c));
        let (x, s) = (&self.nodes[ia].value, &self.nodes[ic].value);
        if s.cols != 1 || s.rows != x.rows {
            return Err(mismatch("mul_col", x, s));
        }
        let mut out = x.clone();
        if x.cols > 0 {
            for (row, sv) in out.data.chunks_mut(x.cols).zip(&s.data) {
                row.iter_mut().for_each(|v| *v *= sv);
            }
        }
        let ng = self.needs(&[ia, ic]);
        self.push(out, Op::MulCol(ia, ic), ng, "mul_col")
    }

    /// `scale · a`.
    pub fn scale(&mut self, a: Var, scale: f64) -> Result<Var, TensorError> {
        self.affine(a, scale, 0.0)
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var, TensorError> {
        let ia = self.idx(a);
        let x = &self.nodes[ia].value;
        let out = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|v| scale * v + shift).collect());
        let ng = self.needs(&[ia]);
        self.push(out, Op::Affine(ia, scale), ng, "affine")
    }

    /// Side-by-side concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let ids: Vec<usize> = parts.iter().map(|&v| self.idx(v)).collect();
        let rows = self.nodes[ids[0]].value.rows;
        for &i in &ids[1..] {
            if self.nodes[i].value.rows != rows {
                return Err(mismatch("concat_cols", &self.nodes[ids[0]].value, &self.nodes[i].value));
            }
        }
        let cols: usize = ids.iter().map(|&i| self.nodes[i].value.cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &i in &ids {
            let t = &self.nodes[i].value;
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + t.cols].copy_from_slice(t.row_slice(r));
            }
            offset += t.cols;
        }
        let ng = self.needs(&ids);
        self.push(out, Op::ConcatCols(ids), ng, "concat_cols")
    }

    /// Stacks tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let ids: Vec<usize> = parts.iter().map(|&v| self.idx(v)).collect();
        let cols = self.nodes[ids[0]].value.cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &ids {
            let t = &self.nodes[i].value;
            if t.cols != cols {
                return Err(mismatch("concat_rows", &self.nodes[ids[0]].value, t));
            }
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        let ng = self.needs(&ids);
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(ids), ng, "concat_rows")
    }

    /// `out[k] = a[index[k]]`.
    pub fn gather_rows(&mut self, a: Var, index: Rc<[usize]>) -> Result<Var, TensorError> {
        let ia = self.idx(a);
        let x = &self.nodes[ia].value;
        let mut out = Tensor::zeros(index.len(), x.cols);
        for (k, &r) in index.iter().enumerate() {
            if r >= x.rows {
                return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: r, len: x.rows });
            }
            out.data[k * x.cols..(k + 1) * x.cols].copy_from_slice(x.row_slice(r));
        }
        let ng = self.needs(&[ia]);
        self.push(out, Op::GatherRows(ia, index), ng, "gather_rows")
    }

    /// `out[s] = Σ_{i : segment[i] = s} a[i]` with `n_segments` output rows.
    pub fn segment_sum(&mut self, a: Var, segment: Rc<[usize]>, n_segments: usize) -> Result<Var, TensorError> {
        let ia = self.idx(a);
        let x = &self.nodes[ia].value;
        if segment.len() != x.rows {
            return Err(TensorError::ShapeMismatch { op: "segment_sum", lhs: x.shape(), rhs: (segment.len(), 1) });
        }
        let mut out = Tensor::zeros(n_segments, x.cols);
        for (i, &s) in segment.iter().enumerate() {
            if s >= n_segments {
                return Err(TensorError::IndexOutOfRange { op: "segment_sum", index: s, len: n_segments });
            }
            for c in 0..x.cols {
                out.data[s * x.cols + c] += x.data[i * x.cols + c];
            }
        }
        let ng = self.needs(&[ia]);
        self.push(out, Op::SegmentSum(ia, segment), ng, "segment_sum")
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    pub fn segment_softmax(&mut self, a: Var, segment: Rc<[usize]>, n_segments: usize) -> Result<Var, TensorError> {
        let ia = self.idx(a);
        let x = &self.nodes[ia].value;
        if segment.len() != x.rows {
            return Err(TensorError::ShapeMismatch { op: "segment_softmax", lhs: x.shape(), rhs: (segment.len(), 1) });
        }
        if let Some(&s) = segment.iter().find(|&&s| s >= n_segments) {
            return Err(TensorError::IndexOutOfRange { op: "segment_softmax", index: s, len: n_segments });
        }
        let cols = x.cols;
        let mut max = vec![f64::NEG_INFINITY; n_segments * cols];
        for (i, &s) in segment.iter().enumerate() {
            for c in 0..cols {
                let m = &mut max[s * cols + c];
                *m = m.max(x.data[i * cols + c]);
            }
        }
        let mut out = Tensor::zeros(x.rows, cols);
        let mut denom = vec![0.0; n_segments * cols];
        for (i, &s) in segment.iter().enumerate() {
            for c in 0..cols {
                let e = (x.data[i * cols + c] - max[s * cols + c]).exp();
                out.data[i * cols + c] = e;
                denom[s * cols + c] += e;
            }
        }
        for (i, &s) in segment.iter().enumerate() {
            for c in 0..cols {
                out.data[i * cols + c] /= denom[s * cols + c];
            }
        }
        let ng = self.needs(&[ia]);
        self.push(out, Op::SegmentSoftmax(ia, segment), ng, "segment_softmax")
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var, TensorError> {
        let ia = self.idx(a);
        let x = &self.nodes[ia].value;
        let out = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|&v| f(v)).collect());
        let ng = self.needs(&[ia]);
        self.push(out, op(ia), ng, name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, "relu", |v| v.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, "sigmoid", sigmoid, Op::Sigmoid)
    }

    /// `ln(1 + eˣ)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, "softplus", softplus, Op::Softplus)
    }

    /// Softmax along each row, with max subtraction.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a);
        let x = &self.nodes[ia].value;
        let mut out = x.clone();
        if x.cols > 0 {
            for row in out.data.chunks_mut(x.cols) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        let ng = self.needs(&[ia]);
        self.push(out, Op::RowSoftmax(ia), ng, "row_softmax")
    }

    /// Row-wise `(x − μ) / √(σ² + 1e-5) · γ + β` with `γ, β` of shape `1 × d`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (ix, ig, ib) = (self.idx(x), self.idx(gamma), self.idx(beta));
        let (xv, g, b) = (&self.nodes[ix].value, &self.nodes[ig].value, &self.nodes[ib].value);
        if g.shape() != (1, xv.cols) {
            return Err(mismatch("layer_norm", xv, g));
        }
        if b.shape() != (1, xv.cols) {
            return Err(mismatch("layer_norm", xv, b));
        }
        let d = xv.cols;
        let mut xhat = Tensor::zeros(xv.rows, d);
        let mut out = Tensor::zeros(xv.rows, d);
        let mut rstd = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row_slice(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat.data[r * d + c] = h;
                out.data[r * d + c] = h * g.data[c] + b.data[c];
            }
        }
        let ng = self.needs(&[ix, ig, ib]);
        self.push(out, Op::LayerNorm { x: ix, gamma: ig, beta: ib, xhat, rstd }, ng, "layer_norm")
    }

    /// Mean squared difference, as a `1 × 1` tensor.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        let (ip, it, diff) = self.zip(pred, target, "mse", |p, q| p - q)?;
        let n = diff.len().max(1) as f64;
        let loss = diff.data.iter().map(|d| d * d).sum::<f64>() / n;
        let ng = self.needs(&[ip, it]);
        self.push(Tensor::scalar(loss), Op::Mse(ip, it), ng, "mse")
    }

    /// Sum of every entry, as a `1 × 1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a);
        let s = self.nodes[ia].value.data.iter().sum();
        let ng = self.needs(&[ia]);
        self.push(Tensor::scalar(s), Op::Sum(ia), ng, "sum")
    }

    /// Reverse pass from a scalar `loss`. May run once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(TensorError::DetachedLoss);
        }
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.nodes[loss.index].value.shape();
        if shape != (1, 1) {
            return Err(TensorError::NotScalar(shape));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.index).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let mut acc = |target: usize, f: &dyn Fn(&mut Tensor)| {
            if !nodes[target].needs_grad {
                return;
            }
            let (r, c) = nodes[target].value.shape();
            let slot = grads[target].get_or_insert_with(|| Tensor::zeros(r, c));
            f(slot);
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (x, y) = (&nodes[*a].value, &nodes[*b].value);
                // dA = G · Bᵀ, dB = Aᵀ · G
                acc(*a, &|s| {
                    for r in 0..x.rows {
                        for k in 0..x.cols {
                            let mut v = 0.0;
                            for c in 0..y.cols {
                                v += g.data[r * y.cols + c] * y.data[k * y.cols + c];
                            }
                            s.data[r * x.cols + k] += v;
                        }
                    }
                });
                acc(*b, &|s| {
                    for r in 0..x.rows {
                        for k in 0..x.cols {
                            let xv = x.data[r * x.cols + k];
                            if xv == 0.0 {
                                continue;
                            }
                            let grow = &g.data[r * y.cols..(r + 1) * y.cols];
                            let srow = &mut s.data[k * y.cols..(k + 1) * y.cols];
                            for (sv, gv) in srow.iter_mut().zip(grow) {
                                *sv += xv * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|s| s.data.iter_mut().zip(&g.data).for_each(|(s, g)| *s += g));
                acc(*b, &|s| s.data.iter_mut().zip(&g.data).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| s.data.iter_mut().zip(&g.data).for_each(|(s, g)| *s += g));
                acc(*b, &|s| s.data.iter_mut().zip(&g.data).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (x, y) = (&nodes[*a].value, &nodes[*b].value);
                acc(*a, &|s| {
                    for k in 0..s.data.len() {
                        s.data[k] += g.data[k] * y.data[k];
                    }
                });
                acc(*b, &|s| {
                    for k in 0..s.data.len() {
                        s.data[k] += g.data[k] * x.data[k];
                    }
                });
            }
            Op::AddRow(a, b) => {
                acc(*a, &|s| s.data.iter_mut().zip(&g.data).for_each(|(s, g)| *s += g));
                acc(*b, &|s| {
                    let cols = s.cols;
                    if cols > 0 {
                        for row in g.data.chunks(cols) {
                            s.data.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                        }
                    }
                });
            }
            Op::MulCol(a, c) => {
                let (x, col) = (&nodes[*a].value, &nodes[*c].value);
                let d = x.cols;
                acc(*a, &|s| {
                    for r in 0..x.rows {
                        for k in 0..d {
                            s.data[r * d + k] += g.data[r * d + k] * col.data[r];
                        }
                    }
                });
                acc(*c, &|s| {
                    for r in 0..x.rows {
                        let mut v = 0.0;
                        for k in 0..d {
                            v += g.data[r * d + k] * x.data[r * d + k];
                        }
                        s.data[r] += v;
                    }
                });
            }
            Op::Affine(a, scale) => {
                acc(*a, &|s| s.data.iter_mut().zip(&g.data).for_each(|(s, g)| *s += scale * g));
            }
            Op::ConcatCols(ids) => {
                let mut offset = 0;
                for &p in ids {
                    let pc = nodes[p].value.cols;
                    acc(p, &|s| {
                        for r in 0..out.rows {
                            for k in 0..pc {
                                s.data[r * pc + k] += g.data[r * out.cols + offset + k];
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::ConcatRows(ids) => {
                let mut offset = 0;
                for &p in ids {
                    let n = nodes[p].value.len();
                    acc(p, &|s| {
                        s.data.iter_mut().zip(&g.data[offset..offset + n]).for_each(|(s, g)| *s += g)
                    });
                    offset += n;
                }
            }
            Op::GatherRows(a, index) => {
                let cols = out.cols;
                acc(*a, &|s| {
                    for (k, &r) in index.iter().enumerate() {
                        for c in 0..cols {
                            s.data[r * cols + c] += g.data[k * cols + c];
                        }
                    }
                });
            }
            Op::SegmentSum(a, segment) => {
                let cols = out.cols;
                acc(*a, &|s| {
                    for (i, &seg) in segment.iter().enumerate() {
                        for c in 0..cols {
                            s.data[i * cols + c] += g.data[seg * cols + c];
                        }
                    }
                });
            }
            Op::SegmentSoftmax(a, segment) => {
                // dx_i = y_i (g_i − Σ_{j∈seg(i)} g_j y_j)
                let cols = out.cols;
                let n_seg = segment.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n_seg * cols];
                for (i, &seg) in segment.iter().enumerate() {
                    for c in 0..cols {
                        dot[seg * cols + c] += g.data[i * cols + c] * out.data[i * cols + c];
                    }
                }
                acc(*a, &|s| {
                    for (i, &seg) in segment.iter().enumerate() {
                        for c in 0..cols {
                            let y = out.data[i * cols + c];
                            s.data[i * cols + c] += y * (g.data[i * cols + c] - dot[seg * cols + c]);
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let x = &nodes[*a].value;
                acc(*a, &|s| {
                    for k in 0..s.data.len() {
                        if x.data[k] > 0.0 {
                            s.data[k] += g.data[k];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                acc(*a, &|s| {
                    for k in 0..s.data.len() {
                        let y = out.data[k];
                        s.data[k] += g.data[k] * y * (1.0 - y);
                    }
                });
            }
            Op::Softplus(a) => {
                let x = &nodes[*a].value;
                acc(*a, &|s| {
                    for k in 0..s.data.len() {
                        s.data[k] += g.data[k] * sigmoid(x.data[k]);
                    }
                });
            }
            Op::RowSoftmax(a) => {
                let cols = out.cols;
                acc(*a, &|s| {
                    for r in 0..out.rows {
                        let y = &out.data[r * cols..(r + 1) * cols];
                        let gr = &g.data[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            s.data[r * cols + c] += y[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = &nodes[*gamma].value;
                let d = xhat.cols;
                acc(*x, &|s| {
                    for r in 0..xhat.rows {
                        let h = &xhat.data[r * d..(r + 1) * d];
                        let gr = &g.data[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(&gv.data).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            s.data[r * d + c] +=
                                rstd[r] / d as f64 * (d as f64 * dh[c] - sum_dh - h[c] * sum_dh_h);
                        }
                    }
                });
                acc(*gamma, &|s| {
                    for r in 0..xhat.rows {
                        for c in 0..d {
                            s.data[c] += g.data[r * d + c] * xhat.data[r * d + c];
                        }
                    }
                });
                acc(*beta, &|s| {
                    for r in 0..xhat.rows {
                        for c in 0..d {
                            s.data[c] += g.data[r * d + c];
                        }
                    }
                });
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (&nodes[*p].value, &nodes[*t].value);
                let scale = 2.0 * g.data[0] / pv.len().max(1) as f64;
                acc(*p, &|s| {
                    for k in 0..s.data.len() {
                        s.data[k] += scale * (pv.data[k] - tv.data[k]);
                    }
                });
                acc(*t, &|s| {
                    for k in 0..s.data.len() {
                        s.data[k] -= scale * (pv.data[k] - tv.data[k]);
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &|s| s.data.iter_mut().for_each(|v| *v += g.data[0]));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rc(v: &[usize]) -> Rc<[usize]> {
        Rc::from(v.to_vec())
    }

    #[test]
    fn uniform_softmax() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(&[0.0, 0.0, 0.0]));
        let y = t.row_softmax(x).unwrap();
        for v in t.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn segment_sum_matches_loop() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::column(&[1.0, 2.0, 3.0]));
        let y = t.segment_sum(x, rc(&[0, 0, 1]), 2).unwrap();
        // naive sum-by-key reference
        let mut expect = [0.0; 2];
        for (v, s) in [1.0, 2.0, 3.0].iter().zip([0, 0, 1]) {
            expect[s] += v;
        }
        assert_eq!(t.value(y).data(), &expect);
        assert_eq!(t.value(y).data(), &[3.0, 3.0]);
        // empty segment stays zero
        let z = t.segment_sum(x, rc(&[0, 0, 2]), 3).unwrap();
        assert_eq!(t.value(z).data(), &[3.0, 0.0, 3.0]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(&[2.5, 2.5, 2.5, 2.5]));
        let g = t.constant(Tensor::row(&[1.0; 4]));
        let b = t.constant(Tensor::row(&[0.0; 4]));
        let y = t.layer_norm(x, g, b).unwrap();
        assert!(t.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(err, TensorError::ShapeMismatch { op: "matmul", lhs: (2, 3), rhs: (2, 3) });
        assert!(err.to_string().contains("(2, 3)"));
    }

    #[test]
    fn hand_derivative_of_mse() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::scalar(2.0), true).unwrap();
        let x = t.constant(Tensor::scalar(1.0));
        let y = t.constant(Tensor::scalar(0.0));
        let wx = t.matmul(w, x).unwrap();
        let loss = t.mse(wx, y).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap().item(), 4.0);
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::scalar(2.0), true).unwrap();
        let unused = t.leaf(Tensor::row(&[1.0, 2.0]), true).unwrap();
        let loss = t.sum(w).unwrap();
        t.backward(loss).unwrap();
        assert!(t.grad(unused).map_or(true, |g| g.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn backward_errors() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::row(&[1.0, 2.0]), true).unwrap();
        assert_eq!(t.backward(w), Err(TensorError::NotScalar((1, 2))));
        let s = t.sum(w).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.backward(s), Err(TensorError::BackwardTwice));
        let mut other = Tape::new();
        let foreign = other.leaf(Tensor::scalar(1.0), true).unwrap();
        assert_eq!(t.backward(foreign), Err(TensorError::DetachedLoss));
    }

    #[test]
    fn checked_mode_rejects_non_finite() {
        let mut t = Tape::checked();
        assert!(matches!(t.leaf(Tensor::scalar(f64::NAN), true), Err(TensorError::NonFinite { .. })));
        let x = t.leaf(Tensor::scalar(1e300), true).unwrap();
        assert!(matches!(t.affine(x, 1e10, 0.0), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0), true).unwrap();
        let y = t.mul(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        let s = t.sum(z).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().item(), 7.0);
    }

    #[test]
    fn segment_softmax_normalises_each_segment() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(5, 2, vec![1.0, -2.0, 0.5, 3.0, 7.0, 0.0, -1.0, 1.0, 2.0, 2.0]));
        let seg = rc(&[0, 1, 0, 1, 1]);
        let y = t.segment_softmax(x, seg.clone(), 3).unwrap();
        let v = t.value(y);
        for c in 0..2 {
            for s in 0..2 {
                let total: f64 = (0..5).filter(|&i| seg[i] == s).map(|i| v.get(i, c)).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}
