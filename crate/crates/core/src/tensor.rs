//! Dense f64 matrices and a reverse-mode autodiff tape.
//!
//! Every value is a row-major matrix; scalars are `1 x 1`. A [`Tape`] records
//! primitive operations in execution order and [`Tape::backward`] walks them
//! in exact reverse, so gradients are bit-reproducible for identical tapes.
//! There is no broadcasting apart from [`Tape::add_row`] (bias addition).

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "tensor of shape [{rows}, {cols}] needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a (m x k) * b (k x n)`.
fn matmul_nn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aik = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Tensor {
        rows: m,
        cols: n,
        data: out,
    }
}

/// `a (m x k) * b^T` with `b` of shape `n x k`.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor {
        rows: m,
        cols: n,
        data: out,
    }
}

/// `a^T * b` with `a` of shape `k x m` and `b` of shape `k x n`.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        rows: m,
        cols: n,
        data: out,
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    RowSoftmax(Var),
    Relu(Var),
    MaskFill(Var, Vec<bool>),
    Sum(Var),
    /// Cached softmax probabilities and targets.
    CrossEntropy(Var, Tensor, Vec<usize>),
}

/// Records a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Tensor>>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    /// A leaf whose gradient will be computed by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        if x.cols != y.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: x.shape(),
                right: y.shape(),
            });
        }
        let out = matmul_nn(x, y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        if x.cols != y.cols {
            return Err(Error::Shape {
                op: "matmul_t",
                left: x.shape(),
                right: y.shape(),
            });
        }
        let out = matmul_nt(x, y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMulT(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        same_shape("add", x, y)?;
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let out = Tensor {
            rows: x.rows,
            cols: x.cols,
            data,
        };
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    /// Adds a `1 x c` row to every row of an `r x c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (&self.values[a.0], &self.values[row.0]);
        if r.rows != 1 || r.cols != x.cols {
            return Err(Error::Shape {
                op: "add_row",
                left: x.shape(),
                right: r.shape(),
            });
        }
        let mut out = x.clone();
        for chunk in out.data.chunks_mut(x.cols.max(1)) {
            for (o, b) in chunk.iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        let g = self.any_grad(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        same_shape("mul", x, y)?;
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let out = Tensor {
            rows: x.rows,
            cols: x.cols,
            data,
        };
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = &self.values[a.0];
        let out = Tensor {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().map(|v| v * s).collect(),
        };
        let g = self.needs_grad[a.0];
        self.push(out, Op::Scale(a, s), g)
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_columns(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_columns of nothing".into()))?;
        let rows = self.values[first.0].rows;
        for p in parts {
            let t = &self.values[p.0];
            if t.rows != rows {
                return Err(Error::Shape {
                    op: "concat_columns",
                    left: self.values[first.0].shape(),
                    right: t.shape(),
                });
            }
        }
        let cols: usize = parts.iter().map(|p| self.values[p.0].cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.values[p.0].row(i));
            }
        }
        let out = Tensor { rows, cols, data };
        let g = self.any_grad(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), g))
    }

    /// Columns `start..end`.
    pub fn slice_columns(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = &self.values[a.0];
        if start > end || end > x.cols {
            return Err(Error::Contract(format!(
                "slice_columns {start}..{end} of shape {:?}",
                x.shape()
            )));
        }
        let out = Tensor::from_fn(x.rows, end - start, |i, j| x.get(i, start + j));
        let g = self.needs_grad[a.0];
        Ok(self.push(out, Op::SliceCols(a, start), g))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = &self.values[a.0];
        if start > end || end > x.rows {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{end} of shape {:?}",
                x.shape()
            )));
        }
        let out = Tensor {
            rows: end - start,
            cols: x.cols,
            data: x.data[start * x.cols..end * x.cols].to_vec(),
        };
        let g = self.needs_grad[a.0];
        Ok(self.push(out, Op::SliceRows(a, start), g))
    }

    /// Row `k` of the output is row `index[k]` of `a`. Rows may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let x = &self.values[a.0];
        if let Some(&bad) = index.iter().find(|&&i| i >= x.rows) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range for shape {:?}",
                x.shape()
            )));
        }
        let mut data = Vec::with_capacity(index.len() * x.cols);
        for &i in index {
            data.extend_from_slice(x.row(i));
        }
        let out = Tensor {
            rows: index.len(),
            cols: x.cols,
            data,
        };
        let g = self.needs_grad[a.0];
        Ok(self.push(out, Op::GatherRows(a, index.to_vec()), g))
    }

    /// Numerically stable softmax along each row.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let mut out = x.clone();
        for row in out.data.chunks_mut(x.cols.max(1)) {
            softmax_in_place(row);
        }
        let g = self.needs_grad[a.0];
        self.push(out, Op::RowSoftmax(a), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let out = Tensor {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        };
        let g = self.needs_grad[a.0];
        self.push(out, Op::Relu(a), g)
    }

    /// Replaces entries where `keep` is false with `value`.
    pub fn mask_fill(&mut self, a: Var, keep: &[bool], value: f64) -> Result<Var> {
        let x = &self.values[a.0];
        if keep.len() != x.data.len() {
            return Err(Error::Contract(format!(
                "mask_fill: mask has {} entries for shape {:?}",
                keep.len(),
                x.shape()
            )));
        }
        let data = x
            .data
            .iter()
            .zip(keep)
            .map(|(&v, &k)| if k { v } else { value })
            .collect();
        let out = Tensor {
            rows: x.rows,
            cols: x.cols,
            data,
        };
        let g = self.needs_grad[a.0];
        Ok(self.push(out, Op::MaskFill(a, keep.to_vec()), g))
    }

    /// Sum of all entries as a `1 x 1` value.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].data.iter().sum();
        let g = self.needs_grad[a.0];
        self.push(Tensor::scalar(s), Op::Sum(a), g)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    ///
    /// An empty logits matrix yields a zero loss.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = &self.values[logits.0];
        if targets.len() != x.rows {
            return Err(Error::Contract(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                x.rows
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= x.cols) {
            return Err(Error::Contract(format!(
                "cross_entropy: target {t} out of range for {} classes",
                x.cols
            )));
        }
        let mut probs = x.clone();
        let mut total = 0.0;
        for (row, &t) in probs.data.chunks_mut(x.cols.max(1)).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = if x.rows == 0 { 0.0 } else { total / x.rows as f64 };
        let g = self.needs_grad[logits.0];
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy(logits, probs, targets.to_vec()),
            g,
        ))
    }

    /// Populates gradients of `loss` with respect to every recorded value
    /// that depends on a [`Tape::param`] leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.values[loss.0].shape();
        if shape != [1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.needs_grad[idx] {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.needs_grad[v.0] {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, up: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs_grad[a.0] {
                    self.accumulate(grads, *a, matmul_nt(up, &self.values[b.0]));
                }
                if self.needs_grad[b.0] {
                    self.accumulate(grads, *b, matmul_tn(&self.values[a.0], up));
                }
            }
            Op::MatMulT(a, b) => {
                if self.needs_grad[a.0] {
                    self.accumulate(grads, *a, matmul_nn(up, &self.values[b.0]));
                }
                if self.needs_grad[b.0] {
                    self.accumulate(grads, *b, matmul_tn(up, &self.values[a.0]));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, up.clone());
                self.accumulate(grads, *b, up.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, up.clone());
                if self.needs_grad[row.0] {
                    let mut r = Tensor::zeros(1, up.cols);
                    for chunk in up.data.chunks(up.cols.max(1)) {
                        for (o, v) in r.data.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *row, r);
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (&self.values[a.0], &self.values[b.0]);
                if self.needs_grad[a.0] {
                    let data = up.data.iter().zip(&y.data).map(|(u, v)| u * v).collect();
                    self.accumulate(grads, *a, Tensor { data, ..up.clone() });
                }
                if self.needs_grad[b.0] {
                    let data = up.data.iter().zip(&x.data).map(|(u, v)| u * v).collect();
                    self.accumulate(grads, *b, Tensor { data, ..up.clone() });
                }
            }
            Op::Scale(a, s) => {
                let data = up.data.iter().map(|u| u * s).collect();
                self.accumulate(grads, *a, Tensor { data, ..up.clone() });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.values[p.0].cols;
                    if self.needs_grad[p.0] {
                        let piece = Tensor::from_fn(up.rows, cols, |i, j| up.get(i, offset + j));
                        self.accumulate(grads, *p, piece);
                    }
                    offset += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let x = &self.values[a.0];
                let mut g = Tensor::zeros(x.rows, x.cols);
                for i in 0..up.rows {
                    for j in 0..up.cols {
                        g.set(i, start + j, up.get(i, j));
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::SliceRows(a, start) => {
                let x = &self.values[a.0];
                let mut g = Tensor::zeros(x.rows, x.cols);
                g.data[start * x.cols..start * x.cols + up.data.len()].copy_from_slice(&up.data);
                self.accumulate(grads, *a, g);
            }
            Op::GatherRows(a, index) => {
                let x = &self.values[a.0];
                let mut g = Tensor::zeros(x.rows, x.cols);
                for (k, &i) in index.iter().enumerate() {
                    let dst = &mut g.data[i * x.cols..(i + 1) * x.cols];
                    for (d, s) in dst.iter_mut().zip(up.row(k)) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::RowSoftmax(a) => {
                let y = &self.values[idx];
                let cols = y.cols.max(1);
                let mut g = Tensor::zeros(y.rows, y.cols);
                for ((gr, yr), ur) in g
                    .data
                    .chunks_mut(cols)
                    .zip(y.data.chunks(cols))
                    .zip(up.data.chunks(cols))
                {
                    let dot: f64 = yr.iter().zip(ur).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &uv) in gr.iter_mut().zip(yr).zip(ur) {
                        *o = yv * (uv - dot);
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::Relu(a) => {
                let x = &self.values[a.0];
                let data = up
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(&u, &v)| if v > 0.0 { u } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor { data, ..up.clone() });
            }
            Op::MaskFill(a, keep) => {
                let data = up
                    .data
                    .iter()
                    .zip(keep)
                    .map(|(&u, &k)| if k { u } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor { data, ..up.clone() });
            }
            Op::Sum(a) => {
                let x = &self.values[a.0];
                self.accumulate(grads, *a, Tensor::full(x.rows, x.cols, up.item()));
            }
            Op::CrossEntropy(a, probs, targets) => {
                let n = probs.rows.max(1) as f64;
                let scale = up.item() / n;
                let mut g = probs.clone();
                for (row, &t) in g.data.chunks_mut(probs.cols.max(1)).zip(targets) {
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.accumulate(grads, *a, g);
            }
        }
    }
}

/// In-place stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
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

/// Softmax of a slice into a new vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[&[0.0, 0.0]]));
        let s = tape.row_softmax(a);
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let a = tape.constant(t(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let out = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(out), tape.value(a));
    }

    #[test]
    fn mask_fill_definition() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let out = tape.mask_fill(a, &[true, false, true, true], -1e9).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, -1e9, 3.0, 4.0]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(err.to_string(), "matmul: incompatible shapes [2, 3] and [2, 3]");
        let c = tape.constant(Tensor::zeros(3, 2));
        assert!(matches!(tape.add(a, c), Err(Error::Shape { .. })));
    }

    #[test]
    fn cross_entropy_uniform_and_limit() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(3, 4));
        let l = tape.cross_entropy(z, &[0, 3, 2]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-15);
        assert!((tape.value(l).item() - 1.386294).abs() < 1e-6);

        let big = tape.constant(t(&[&[0.0, 1e6, 0.0]]));
        let l = tape.cross_entropy(big, &[1]).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);

        assert!(tape.cross_entropy(big, &[3]).is_err());
    }

    #[test]
    fn cross_entropy_matches_hand_evaluation() {
        // Frozen 3x5 case; expected values evaluated term by term from the
        // log-sum-exp definition in extended precision.
        let logits = t(&[
            &[0.3, -1.2, 2.5, 0.0, 0.7],
            &[-0.4, 0.9, 0.1, -2.2, 1.6],
            &[1.1, 1.1, -0.5, 0.25, -3.0],
        ]);
        let targets = [2, 4, 0];
        let mut tape = Tape::new();
        let x = tape.constant(logits.clone());
        let l = tape.cross_entropy(x, &targets).unwrap();
        let oracle: f64 = (0..3)
            .map(|i| {
                let row = logits.row(i);
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                lse - row[targets[i]]
            })
            .sum::<f64>()
            / 3.0;
        assert!((tape.value(l).item() - oracle).abs() < 1e-12);
        assert!((tape.value(l).item() - 0.642364987793039774).abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[&[1.0, -2.0], &[0.5, 3.0]]));
        let s = tape.sum(a);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_sum_matmul() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let bt = t(&[&[0.5, -1.0, 2.0, 0.0], &[1.5, 0.25, -0.5, 3.0]]);
        let b = tape.param(bt.clone());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        // ones(3x4) * B^T: every row holds the row sums of B.
        let row_sums: Vec<f64> = (0..2).map(|i| bt.row(i).iter().sum()).collect();
        for i in 0..3 {
            assert_eq!(tape.grad(a).unwrap().row(i), row_sums.as_slice());
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(2, 2));
        assert!(tape.backward(a).is_err());
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Checks `f` at `inputs` against central differences (eps = 1e-5).
    fn check_gradients(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.backward(out).unwrap();
        let eps = 1e-5;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = tape.grad(vars[k]).unwrap().clone();
            for idx in 0..x.len() {
                let eval = |delta: f64| {
                    let mut shifted = inputs.clone();
                    shifted[k].data_mut()[idx] += delta;
                    let mut t2 = Tape::new();
                    let vs: Vec<Var> = shifted.into_iter().map(|x| t2.constant(x)).collect();
                    let o = f(&mut t2, &vs);
                    t2.value(o).item()
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.data()[idx];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "input {k}[{idx}]: analytic {a} vs numeric {numeric}");
            }
        }
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random(&mut rng, 3, 4);
        let weights = Tape::new().constant(w.clone());
        let _ = weights;
        let weight_sum = move |tape: &mut Tape, v: Var| {
            let c = tape.constant(w.clone());
            let m = tape.mul(v, c).unwrap();
            tape.sum(m)
        };

        check_gradients(vec![random(&mut rng, 3, 2), random(&mut rng, 2, 4)], |t, v| {
            let m = t.matmul(v[0], v[1]).unwrap();
            weight_sum(t, m)
        });
        check_gradients(vec![random(&mut rng, 3, 5), random(&mut rng, 4, 5)], |t, v| {
            let m = t.matmul_t(v[0], v[1]).unwrap();
            weight_sum(t, m)
        });
        check_gradients(vec![random(&mut rng, 3, 4), random(&mut rng, 3, 4)], |t, v| {
            let a = t.add(v[0], v[1]).unwrap();
            let m = t.mul(a, v[1]).unwrap();
            weight_sum(t, m)
        });
        check_gradients(vec![random(&mut rng, 3, 4), random(&mut rng, 1, 4)], |t, v| {
            let a = t.add_row(v[0], v[1]).unwrap();
            let a = t.scale(a, -1.7);
            weight_sum(t, a)
        });
        check_gradients(vec![random(&mut rng, 3, 1), random(&mut rng, 3, 3)], |t, v| {
            let c = t.concat_columns(&[v[0], v[1]]).unwrap();
            weight_sum(t, c)
        });
        check_gradients(vec![random(&mut rng, 5, 6)], |t, v| {
            let r = t.slice_rows(v[0], 1, 4).unwrap();
            let c = t.slice_columns(r, 2, 6).unwrap();
            weight_sum(t, c)
        });
        check_gradients(vec![random(&mut rng, 2, 4)], |t, v| {
            let g = t.gather_rows(v[0], &[1, 0, 1]).unwrap();
            weight_sum(t, g)
        });
        check_gradients(vec![random(&mut rng, 3, 4)], |t, v| {
            let s = t.row_softmax(v[0]);
            weight_sum(t, s)
        });
        check_gradients(vec![random(&mut rng, 3, 4)], |t, v| {
            let r = t.relu(v[0]);
            weight_sum(t, r)
        });
        check_gradients(vec![random(&mut rng, 3, 4)], |t, v| {
            let keep: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
            let m = t.mask_fill(v[0], &keep, -1e9).unwrap();
            let s = t.row_softmax(m);
            weight_sum(t, s)
        });
        check_gradients(vec![random(&mut rng, 4, 5)], |t, v| {
            t.cross_entropy(v[0], &[0, 4, 2, 2]).unwrap()
        });
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b) = (random(&mut rng, 4, 3), random(&mut rng, 3, 6));
        let run = || {
            let mut tape = Tape::new();
            let (va, vb) = (tape.param(a.clone()), tape.param(b.clone()));
            let m = tape.matmul(va, vb).unwrap();
            let s = tape.row_softmax(m);
            let l = tape.cross_entropy(s, &[0, 1, 2, 5]).unwrap();
            tape.backward(l).unwrap();
            (tape.grad(va).unwrap().clone(), tape.grad(vb).unwrap().clone())
        };
        let (x, y) = (run(), run());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.0), bits(&y.0));
        assert_eq!(bits(&x.1), bits(&y.1));
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(values in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::from_vec(3, 4, values).unwrap());
            let s = tape.row_softmax(a);
            for i in 0..3 {
                let row = tape.value(s).row(i);
                prop_assert!(row.iter().all(|&p| p > 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
