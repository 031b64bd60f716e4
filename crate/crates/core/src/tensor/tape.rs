use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::Array;

/// Recorded primitive with the node ids of its inputs. Inputs always precede
/// the output on the tape, so a single reverse sweep is a valid topological
/// traversal.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRowVec(usize, usize),
    MulColVec(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Abs(usize),
    SoftmaxRows(usize),
    Concat { parts: Vec<usize>, axis: usize },
    SliceCols { input: usize, start: usize, len: usize },
    Sum(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRowVec(..) => "add_row_vec",
            Op::MulColVec(..) => "mul_col_vec",
            Op::AddScalar(..) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Abs(..) => "abs",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::Concat { .. } => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::Sum(..) => "sum",
        }
    }
}

#[derive(Default)]
struct TapeInner {
    values: Vec<Array>,
    grads: Vec<Vec<f64>>,
    ops: Vec<Op>,
}

impl TapeInner {
    fn push(&mut self, value: Array, op: Op) -> usize {
        let id = self.values.len();
        self.grads.push(vec![0.0; value.len()]);
        self.values.push(value);
        self.ops.push(op);
        id
    }
}

/// Differentiation tape for one forward pass. Rebuilt per pass; owned by a
/// single execution context (not `Sync`).
#[derive(Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record an input value. Parameters and constants alike enter here; the
    /// caller keeps the handles it needs gradients from.
    pub fn leaf(&self, value: Array) -> Tensor<'_> {
        let id = self.inner.borrow_mut().push(value, Op::Leaf);
        Tensor { tape: self, id }
    }

    /// One line per node: id, op, shape. For inspection only.
    pub fn dump(&self) -> String {
        let inner = self.inner.borrow();
        let mut out = String::new();
        for (i, (v, op)) in inner.values.iter().zip(&inner.ops).enumerate() {
            out.push_str(&format!("{:>5}  {:<12} {:?}\n", i, op.name(), v.shape()));
        }
        out
    }

    fn record(&self, value: Array, op: Op) -> Tensor<'_> {
        let id = self.inner.borrow_mut().push(value, op);
        Tensor { tape: self, id }
    }
}

fn same_tape(a: &Tape, b: &Tape) -> bool {
    std::ptr::eq(a, b)
}

impl<'t> Tensor<'t> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn value(self) -> Array {
        self.tape.inner.borrow().values[self.id].clone()
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.inner.borrow().values[self.id].shape().to_vec()
    }

    /// Gradient accumulated by the last `backward` call on this tape.
    pub fn grad(self) -> Array {
        let inner = self.tape.inner.borrow();
        let shape = inner.values[self.id].shape().to_vec();
        Array::new(shape, inner.grads[self.id].clone()).expect("grad shape matches value")
    }

    fn binary(self, rhs: Tensor<'t>, ctx: &str) -> Result<(Array, Array)> {
        if !same_tape(self.tape, rhs.tape) {
            return Err(Error::Contract(format!("{ctx}: operands on different tapes")));
        }
        let inner = self.tape.inner.borrow();
        Ok((inner.values[self.id].clone(), inner.values[rhs.id].clone()))
    }

    pub fn matmul(self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        let (a, b) = self.binary(rhs, "matmul")?;
        let out = a.matmul(&b)?;
        Ok(self.tape.record(out, Op::MatMul(self.id, rhs.id)))
    }

    pub fn t(self) -> Tensor<'t> {
        let out = self.value().t();
        self.tape.record(out, Op::Transpose(self.id))
    }

    pub fn add(self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        let (a, b) = self.binary(rhs, "add")?;
        let out = a.zip_map(&b, |x, y| x + y)?;
        Ok(self.tape.record(out, Op::Add(self.id, rhs.id)))
    }

    pub fn sub(self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        let (a, b) = self.binary(rhs, "sub")?;
        let out = a.zip_map(&b, |x, y| x - y)?;
        Ok(self.tape.record(out, Op::Sub(self.id, rhs.id)))
    }

    pub fn mul(self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        let (a, b) = self.binary(rhs, "mul")?;
        let out = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.tape.record(out, Op::Mul(self.id, rhs.id)))
    }

    /// Add a length-n bias row to every row of an m x n matrix.
    pub fn add_row_vec(self, bias: Tensor<'t>) -> Result<Tensor<'t>> {
        let (a, b) = self.binary(bias, "add_row_vec")?;
        let n = a.cols();
        if b.len() != n {
            return Err(Error::dimension("add_row_vec", a.shape(), b.shape()));
        }
        let mut out = a.clone();
        for i in 0..a.rows() {
            for j in 0..n {
                out.set(i, j, a.at(i, j) + b.data()[j]);
            }
        }
        Ok(self.tape.record(out, Op::AddRowVec(self.id, bias.id)))
    }

    /// Scale row i of an m x n matrix by entry i of a length-m column.
    pub fn mul_col_vec(self, col: Tensor<'t>) -> Result<Tensor<'t>> {
        let (a, s) = self.binary(col, "mul_col_vec")?;
        let m = a.rows();
        if s.len() != m {
            return Err(Error::dimension("mul_col_vec", a.shape(), s.shape()));
        }
        let mut out = a.clone();
        for i in 0..m {
            let c = s.data()[i];
            for j in 0..a.cols() {
                out.set(i, j, a.at(i, j) * c);
            }
        }
        Ok(self.tape.record(out, Op::MulColVec(self.id, col.id)))
    }

    pub fn add_scalar(self, c: f64) -> Tensor<'t> {
        let out = self.value().map(|v| v + c);
        self.tape.record(out, Op::AddScalar(self.id))
    }

    pub fn scale(self, c: f64) -> Tensor<'t> {
        let out = self.value().map(|v| v * c);
        self.tape.record(out, Op::Scale(self.id, c))
    }

    pub fn relu(self) -> Tensor<'t> {
        // f64::max(NaN, 0.0) is 0.0, which would silently launder NaNs out
        // of a diverging run; propagate them instead
        let out = self
            .value()
            .map(|v| if v.is_nan() { v } else { v.max(0.0) });
        self.tape.record(out, Op::Relu(self.id))
    }

    pub fn tanh(self) -> Tensor<'t> {
        let out = self.value().map(f64::tanh);
        self.tape.record(out, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Tensor<'t> {
        let out = self.value().map(sigmoid);
        self.tape.record(out, Op::Sigmoid(self.id))
    }

    pub fn exp(self) -> Tensor<'t> {
        let out = self.value().map(f64::exp);
        self.tape.record(out, Op::Exp(self.id))
    }

    pub fn abs(self) -> Tensor<'t> {
        let out = self.value().map(f64::abs);
        self.tape.record(out, Op::Abs(self.id))
    }

    /// Row-wise softmax, stabilized by subtracting each row's max.
    pub fn softmax_rows(self) -> Result<Tensor<'t>> {
        let a = self.value();
        if !a.is_matrix() {
            return Err(Error::dimension("softmax_rows", a.shape(), &[]));
        }
        if !a.is_finite() {
            return Err(Error::Numeric("softmax_rows: non-finite input".into()));
        }
        let mut out = a.clone();
        for i in 0..a.rows() {
            let row = a.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, e) in exps.into_iter().enumerate() {
                out.set(i, j, e / z);
            }
        }
        Ok(self.tape.record(out, Op::SoftmaxRows(self.id)))
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Tensor<'t>> {
        let a = self.value();
        if !a.is_matrix() || start + len > a.cols() {
            return Err(Error::Index(format!(
                "slice_cols [{start}, {}) of shape {:?}",
                start + len,
                a.shape()
            )));
        }
        let mut out = Array::zeros(&[a.rows(), len]);
        for i in 0..a.rows() {
            for j in 0..len {
                out.set(i, j, a.at(i, start + j));
            }
        }
        Ok(self
            .tape
            .record(out, Op::SliceCols { input: self.id, start, len }))
    }

    /// Full reduction to a 1-element tensor.
    pub fn sum(self) -> Tensor<'t> {
        let s = self.value().sum();
        self.tape.record(Array::scalar(s), Op::Sum(self.id))
    }

    /// Reverse sweep seeding d(self) = 1. `self` must hold exactly one value.
    pub fn backward(self) -> Result<()> {
        let mut inner = self.tape.inner.borrow_mut();
        if inner.values[self.id].len() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar tensor of shape {:?}",
                inner.values[self.id].shape()
            )));
        }
        for g in inner.grads.iter_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        inner.grads[self.id][0] = 1.0;

        let TapeInner { values, grads, ops } = &mut *inner;
        for i in (0..ops.len()).rev() {
            let (before, at) = grads.split_at_mut(i);
            let go: &[f64] = &at[0];
            if go.iter().all(|&g| g == 0.0) {
                continue;
            }
            match &ops[i] {
                Op::Leaf => {}
                Op::MatMul(ia, ib) => {
                    let a = &values[*ia];
                    let b = &values[*ib];
                    let (m, k, n) = (a.rows(), a.cols(), b.cols());
                    // dA += go · B^T
                    {
                        let da = &mut before[*ia];
                        for r in 0..m {
                            for c in 0..k {
                                let mut acc = 0.0;
                                let brow = &b.data()[c * n..(c + 1) * n];
                                let grow = &go[r * n..(r + 1) * n];
                                for t in 0..n {
                                    acc += grow[t] * brow[t];
                                }
                                da[r * k + c] += acc;
                            }
                        }
                    }
                    // dB += A^T · go
                    {
                        let db = &mut before[*ib];
                        for r in 0..m {
                            let arow = &a.data()[r * k..(r + 1) * k];
                            let grow = &go[r * n..(r + 1) * n];
                            for (p, &av) in arow.iter().enumerate() {
                                if av == 0.0 {
                                    continue;
                                }
                                let drow = &mut db[p * n..(p + 1) * n];
                                for t in 0..n {
                                    drow[t] += av * grow[t];
                                }
                            }
                        }
                    }
                }
                Op::Transpose(ia) => {
                    let (r, c) = {
                        let v = &values[i];
                        (v.rows(), v.cols())
                    };
                    let da = &mut before[*ia];
                    for p in 0..r {
                        for q in 0..c {
                            da[q * r + p] += go[p * c + q];
                        }
                    }
                }
                Op::Add(ia, ib) => {
                    accumulate(&mut before[*ia], go, |_, g| g);
                    accumulate(&mut before[*ib], go, |_, g| g);
                }
                Op::Sub(ia, ib) => {
                    accumulate(&mut before[*ia], go, |_, g| g);
                    accumulate(&mut before[*ib], go, |_, g| -g);
                }
                Op::Mul(ia, ib) => {
                    let a = values[*ia].data();
                    let b = values[*ib].data();
                    for (j, g) in go.iter().enumerate() {
                        before[*ia][j] += g * b[j];
                        before[*ib][j] += g * a[j];
                    }
                }
                Op::AddRowVec(ia, ib) => {
                    accumulate(&mut before[*ia], go, |_, g| g);
                    let n = values[*ib].len();
                    let db = &mut before[*ib];
                    for (j, g) in go.iter().enumerate() {
                        db[j % n] += g;
                    }
                }
                Op::MulColVec(ia, is) => {
                    let a = &values[*ia];
                    let s = &values[*is];
                    let (m, n) = (a.rows(), a.cols());
                    for r in 0..m {
                        let sv = s.data()[r];
                        let mut acc = 0.0;
                        for c in 0..n {
                            before[*ia][r * n + c] += go[r * n + c] * sv;
                            acc += go[r * n + c] * a.at(r, c);
                        }
                        before[*is][r] += acc;
                    }
                }
                Op::AddScalar(ia) => accumulate(&mut before[*ia], go, |_, g| g),
                Op::Scale(ia, c) => {
                    let c = *c;
                    accumulate(&mut before[*ia], go, move |_, g| c * g);
                }
                Op::Relu(ia) => {
                    let a = &values[*ia];
                    for (j, g) in go.iter().enumerate() {
                        if a.data()[j] > 0.0 {
                            before[*ia][j] += g;
                        }
                    }
                }
                Op::Tanh(ia) => {
                    let y = &values[i];
                    for (j, g) in go.iter().enumerate() {
                        let t = y.data()[j];
                        before[*ia][j] += g * (1.0 - t * t);
                    }
                }
                Op::Sigmoid(ia) => {
                    let y = &values[i];
                    for (j, g) in go.iter().enumerate() {
                        let s = y.data()[j];
                        before[*ia][j] += g * s * (1.0 - s);
                    }
                }
                Op::Exp(ia) => {
                    let y = &values[i];
                    for (j, g) in go.iter().enumerate() {
                        before[*ia][j] += g * y.data()[j];
                    }
                }
                Op::Abs(ia) => {
                    let a = &values[*ia];
                    for (j, g) in go.iter().enumerate() {
                        let v = a.data()[j];
                        before[*ia][j] += g * if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
                    }
                }
                Op::SoftmaxRows(ia) => {
                    let y = &values[i];
                    let (m, n) = (y.rows(), y.cols());
                    for r in 0..m {
                        let yrow = y.row(r);
                        let grow = &go[r * n..(r + 1) * n];
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            before[*ia][r * n + c] += yrow[c] * (grow[c] - dot);
                        }
                    }
                }
                Op::Concat { parts, axis } => {
                    let out = &values[i];
                    match axis {
                        0 => {
                            let mut row_off = 0;
                            for &p in parts {
                                let pr = values[p].rows();
                                let width = out.cols();
                                let chunk = &go[row_off * width..(row_off + pr) * width];
                                for (j, g) in chunk.iter().enumerate() {
                                    before[p][j] += g;
                                }
                                row_off += pr;
                            }
                        }
                        _ => {
                            let rows = out.rows();
                            let total = out.cols();
                            let mut col_off = 0;
                            for &p in parts {
                                let pc = values[p].cols();
                                for r in 0..rows {
                                    for c in 0..pc {
                                        before[p][r * pc + c] += go[r * total + col_off + c];
                                    }
                                }
                                col_off += pc;
                            }
                        }
                    }
                }
                Op::SliceCols { input, start, len } => {
                    let cols = values[*input].cols();
                    let rows = values[*input].rows();
                    for r in 0..rows {
                        for c in 0..*len {
                            before[*input][r * cols + start + c] += go[r * len + c];
                        }
                    }
                }
                Op::Sum(ia) => {
                    let g = go[0];
                    before[*ia].iter_mut().for_each(|d| *d += g);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(dst: &mut [f64], go: &[f64], f: impl Fn(usize, f64) -> f64) {
    for (j, &g) in go.iter().enumerate() {
        dst[j] += f(j, g);
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

/// Concatenate matrices along `axis` (0 = rows, 1 = columns).
pub fn concat<'t>(parts: &[Tensor<'t>], axis: usize) -> Result<Tensor<'t>> {
    let first = *parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    if axis > 1 {
        return Err(Error::Contract(format!("concat axis {axis} unsupported")));
    }
    let values: Vec<Array> = parts.iter().map(|t| t.value()).collect();
    for v in &values {
        if !v.is_matrix() {
            return Err(Error::dimension("concat", v.shape(), &[]));
        }
    }
    let out = if axis == 0 {
        let cols = values[0].cols();
        if values.iter().any(|v| v.cols() != cols) {
            return Err(Error::dimension("concat axis 0", values[0].shape(), values.iter().find(|v| v.cols() != cols).unwrap().shape()));
        }
        let rows = values.iter().map(Array::rows).sum();
        let data = values.iter().flat_map(|v| v.data().iter().copied()).collect();
        Array::new(vec![rows, cols], data)?
    } else {
        let rows = values[0].rows();
        if values.iter().any(|v| v.rows() != rows) {
            return Err(Error::dimension("concat axis 1", values[0].shape(), values.iter().find(|v| v.rows() != rows).unwrap().shape()));
        }
        let total: usize = values.iter().map(Array::cols).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        Array::new(vec![rows, total], data)?
    };
    let ids = parts.iter().map(|t| t.id).collect();
    Ok(first.tape.record(out, Op::Concat { parts: ids, axis }))
}
