//! Minimal reverse-mode differentiation over dense row-major matrices.
//!
//! The loss graph built per training step is small (thousands of nodes of
//! tiny matrices), so a recorded tape of matrix primitives with explicit
//! backward rules is all that is needed. Values are checked for finiteness
//! as they are produced; a non-finite intermediate poisons the tape and
//! `backward` reports the offending operation.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss node must be 1x1, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn scalar(v: f64) -> Self {
        Mat::from_vec(1, 1, vec![v])
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self @ other`
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }

    /// `self @ other^T`
    pub fn matmul_transb(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_transb shape mismatch");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                let b = other.row(j);
                let mut acc = 0.0;
                for (x, y) in a.iter().zip(b) {
                    acc += x * y;
                }
                *out.at_mut(i, j) = acc;
            }
        }
        out
    }

    /// `self^T @ other`
    pub fn matmul_transa(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "matmul_transa shape mismatch");
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            for i in 0..self.cols {
                let a = self.at(k, i);
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                *out.at_mut(c, r) = self.at(r, c);
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Numerically stable in-place row softmax (subtract max, exponentiate,
/// normalize). Shared by the tape and the forward-only inference path so
/// both produce identical values.
pub fn row_softmax_inplace(m: &mut Mat) {
    for r in 0..m.rows {
        let row = &mut m.data[r * m.cols..(r + 1) * m.cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

/// Entropy of a probability vector with the 0*ln(0) = 0 convention.
pub fn entropy(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &x in p {
        if x > 0.0 {
            h -= x * x.ln();
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulTransB(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    MulConst(NodeId, Mat),
    AddRowVec(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    SoftmaxRows(NodeId),
    NormalizeRows(NodeId),
    Narrow {
        src: NodeId,
        row0: usize,
        col0: usize,
    },
    ConcatRows(Vec<NodeId>),
    Transpose(NodeId),
    MaxConst(NodeId, f64),
    Square(NodeId),
    SumAll(NodeId),
    Entropy(NodeId),
    AddScaled(Vec<(NodeId, f64)>),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Records a forward computation; `backward` produces gradients for every
/// leaf reachable from the loss node.
pub struct Tape {
    nodes: Vec<Node>,
    poisoned: Option<&'static str>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            poisoned: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let m = self.value(id);
        debug_assert_eq!((m.rows, m.cols), (1, 1));
        m.data[0]
    }

    fn push(&mut self, value: Mat, op: Op, name: &'static str) -> NodeId {
        if self.poisoned.is_none() && !value.is_finite() {
            self.poisoned = Some(name);
        }
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Mat::scalar(v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    pub fn matmul_transb(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_transb(self.value(b));
        self.push(v, Op::MatMulTransB(a, b), "matmul_transb")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols));
        let mut v = va.clone();
        v.add_assign(vb);
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols));
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let v = Mat::from_vec(va.rows, va.cols, data);
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols));
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let v = Mat::from_vec(va.rows, va.cols, data);
        self.push(v, Op::MulElem(a, b), "mul_elem")
    }

    /// Elementwise product with a constant (non-differentiated) matrix.
    pub fn mul_const(&mut self, a: NodeId, k: Mat) -> NodeId {
        let va = self.value(a);
        assert_eq!((va.rows, va.cols), (k.rows, k.cols));
        let data = va.data.iter().zip(&k.data).map(|(x, y)| x * y).collect();
        let v = Mat::from_vec(va.rows, va.cols, data);
        self.push(v, Op::MulConst(a, k), "mul_const")
    }

    /// Adds a 1xC row vector to every row of `a`.
    pub fn add_row_vec(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows, 1);
        assert_eq!(va.cols, vr.cols);
        let mut v = va.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                *v.at_mut(r, c) += vr.at(0, c);
            }
        }
        self.push(v, Op::AddRowVec(a, row), "add_row_vec")
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let data = self.value(a).data.iter().map(|x| x * s).collect();
        let va = self.value(a);
        let v = Mat::from_vec(va.rows, va.cols, data);
        self.push(v, Op::Scale(a, s), "scale")
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data.iter().map(|x| x.tanh()).collect();
        let v = Mat::from_vec(va.rows, va.cols, data);
        self.push(v, Op::Tanh(a), "tanh")
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        row_softmax_inplace(&mut v);
        self.push(v, Op::SoftmaxRows(a), "softmax_rows")
    }

    /// Normalizes every row to sum to 1. Rows must have a positive sum.
    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = va.clone();
        for r in 0..v.rows {
            let row = &mut v.data[r * v.cols..(r + 1) * v.cols];
            let s: f64 = row.iter().sum();
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.push(v, Op::NormalizeRows(a), "normalize_rows")
    }

    pub fn narrow(&mut self, src: NodeId, row0: usize, rows: usize, col0: usize, cols: usize) -> NodeId {
        let vs = self.value(src);
        assert!(row0 + rows <= vs.rows && col0 + cols <= vs.cols, "narrow out of range");
        let mut v = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                *v.at_mut(r, c) = vs.at(row0 + r, col0 + c);
            }
        }
        self.push(v, Op::Narrow { src, row0, col0 }, "narrow")
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let rows: usize = parts.iter().map(|&p| self.value(p).rows).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut r0 = 0;
        for &p in &parts {
            let vp = self.value(p);
            assert_eq!(vp.cols, cols, "concat_rows column mismatch");
            v.data[r0 * cols..(r0 + vp.rows) * cols].copy_from_slice(&vp.data);
            r0 += vp.rows;
        }
        self.push(v, Op::ConcatRows(parts), "concat_rows")
    }

    pub fn transpose_node(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), "transpose")
    }

    /// Elementwise `max(floor, x)`; gradient is zero at and below the floor.
    pub fn max_const(&mut self, a: NodeId, floor: f64) -> NodeId {
        let va = self.value(a);
        let data = va.data.iter().map(|x| x.max(floor)).collect();
        let v = Mat::from_vec(va.rows, va.cols, data);
        self.push(v, Op::MaxConst(a, floor), "max_const")
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data.iter().map(|x| x * x).collect();
        let v = Mat::from_vec(va.rows, va.cols, data);
        self.push(v, Op::Square(a), "square")
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Mat::scalar(s), Op::SumAll(a), "sum_all")
    }

    /// Entropy of a stored probability matrix, summed over all entries,
    /// with 0*ln(0) = 0.
    pub fn entropy_node(&mut self, a: NodeId) -> NodeId {
        let h = entropy(&self.value(a).data);
        self.push(Mat::scalar(h), Op::Entropy(a), "entropy")
    }

    /// Weighted sum of same-shaped nodes.
    pub fn add_scaled(&mut self, terms: Vec<(NodeId, f64)>) -> NodeId {
        assert!(!terms.is_empty());
        let shape = {
            let v = self.value(terms[0].0);
            (v.rows, v.cols)
        };
        let mut v = Mat::zeros(shape.0, shape.1);
        for &(id, w) in &terms {
            let vt = self.value(id);
            assert_eq!((vt.rows, vt.cols), shape, "add_scaled shape mismatch");
            for (d, s) in v.data.iter_mut().zip(&vt.data) {
                *d += w * s;
            }
        }
        self.push(v, Op::AddScaled(terms), "add_scaled")
    }

    /// Mean of same-shaped nodes.
    pub fn mean_of(&mut self, ids: &[NodeId]) -> NodeId {
        let w = 1.0 / ids.len() as f64;
        self.add_scaled(ids.iter().map(|&id| (id, w)).collect())
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients;
    /// un-reached nodes have no gradient entry.
    pub fn backward(&self, loss: NodeId) -> Result<TapeGrads, TapeError> {
        if let Some(op) = self.poisoned {
            return Err(TapeError::NonFinite { op });
        }
        let lv = self.value(loss);
        if (lv.rows, lv.cols) != (1, 1) {
            return Err(TapeError::NonScalarLoss {
                rows: lv.rows,
                cols: lv.cols,
            });
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_transb(self.value(*b));
                    let db = self.value(*a).matmul_transa(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulTransB(a, b) => {
                    // C = A B^T: dA = G B, dB = G^T A
                    let da = g.matmul(self.value(*b));
                    let db = g.matmul_transa(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = Mat::from_vec(g.rows, g.cols, g.data.iter().map(|x| -x).collect());
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, neg);
                }
                Op::MulElem(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let da = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect());
                    let db = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&va.data).map(|(x, y)| x * y).collect());
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MulConst(a, k) => {
                    let da = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&k.data).map(|(x, y)| x * y).collect());
                    accumulate(&mut grads, *a, da);
                }
                Op::AddRowVec(a, row) => {
                    let mut drow = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            *drow.at_mut(0, c) += g.at(r, c);
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *row, drow);
                }
                Op::Scale(a, s) => {
                    let da = Mat::from_vec(g.rows, g.cols, g.data.iter().map(|x| x * s).collect());
                    accumulate(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    let da = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&y.data).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect(),
                    );
                    accumulate(&mut grads, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[idx].value;
                    let mut da = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                        let dst = &mut da.data[r * y.cols..(r + 1) * y.cols];
                        for c in 0..y.cols {
                            dst[c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::NormalizeRows(a) => {
                    let x = self.value(*a);
                    let y = &self.nodes[idx].value;
                    let mut da = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let s: f64 = x.row(r).iter().sum();
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                        let dst = &mut da.data[r * y.cols..(r + 1) * y.cols];
                        for c in 0..y.cols {
                            dst[c] = (gr[c] - dot) / s;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Narrow { src, row0, col0 } => {
                    let vs = self.value(*src);
                    let mut da = Mat::zeros(vs.rows, vs.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            *da.at_mut(row0 + r, col0 + c) = g.at(r, c);
                        }
                    }
                    accumulate(&mut grads, *src, da);
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for &p in parts {
                        let vp = self.value(p);
                        let mut dp = Mat::zeros(vp.rows, vp.cols);
                        dp.data
                            .copy_from_slice(&g.data[r0 * g.cols..(r0 + vp.rows) * g.cols]);
                        r0 += vp.rows;
                        accumulate(&mut grads, p, dp);
                    }
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.transpose());
                }
                Op::MaxConst(a, floor) => {
                    let x = self.value(*a);
                    let da = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data
                            .iter()
                            .zip(&x.data)
                            .map(|(gi, xi)| if *xi > *floor { *gi } else { 0.0 })
                            .collect(),
                    );
                    accumulate(&mut grads, *a, da);
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    let da = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&x.data).map(|(gi, xi)| 2.0 * xi * gi).collect(),
                    );
                    accumulate(&mut grads, *a, da);
                }
                Op::SumAll(a) => {
                    let va = self.value(*a);
                    let gv = g.data[0];
                    let da = Mat::from_vec(va.rows, va.cols, vec![gv; va.rows * va.cols]);
                    accumulate(&mut grads, *a, da);
                }
                Op::Entropy(a) => {
                    let p = self.value(*a);
                    let gv = g.data[0];
                    let da = Mat::from_vec(
                        p.rows,
                        p.cols,
                        p.data
                            .iter()
                            .map(|&pi| if pi > 0.0 { -gv * (pi.ln() + 1.0) } else { 0.0 })
                            .collect(),
                    );
                    accumulate(&mut grads, *a, da);
                }
                Op::AddScaled(terms) => {
                    for &(id, w) in terms {
                        let dt = Mat::from_vec(g.rows, g.cols, g.data.iter().map(|x| w * x).collect());
                        accumulate(&mut grads, id, dt);
                    }
                }
            }
        }
        Ok(TapeGrads { grads })
    }
}

fn accumulate(grads: &mut [Option<Mat>], id: NodeId, delta: Mat) {
    match &mut grads[id.0] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

#[derive(Debug)]
pub struct TapeGrads {
    grads: Vec<Option<Mat>>,
}

impl TapeGrads {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for a leaf, zeros if the loss does not depend on it.
    pub fn get_or_zeros(&self, id: NodeId, rows: usize, cols: usize) -> Mat {
        self.grads[id.0].clone().unwrap_or_else(|| Mat::zeros(rows, cols))
    }
}
