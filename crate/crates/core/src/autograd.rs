//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a `1 × 1` node walks the record in reverse and
//! returns the gradient of every node, plus the accumulated gradient of
//! every parameter leaf.
//!
//! Constants and detached values are plain leaves: gradient never flows
//! through them, so "detached" means structurally absent from the
//! derivative, not multiplied by zero.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::Matrix;

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a learnable parameter in a [`crate::params::ParamStore`].
pub type ParamId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Affine(Var, f64),
    MaskMul(Var, Rc<Matrix>),
    Relu(Var),
    LeakyRelu(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    InvSqrtPos(Var),
    LayerNormRows(Var),
    L2NormRows(Var, f64),
    SoftmaxRows(Var),
    MaskedSoftmaxRows(Var),
    LogSoftmaxRows(Var),
    MaskedLogSoftmaxRows(Var, Rc<Vec<bool>>),
    SumAll(Var),
    RowSums(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
}

struct Node {
    value: Matrix,
    op: Op,
    /// Per-row auxiliary values (inverse std for layer norm, norms for L2).
    aux: Option<Vec<f64>>,
}

/// Fingerprint of which side of every non-smooth point the forward pass
/// landed on. Two forward passes with equal fingerprints evaluated the same
/// smooth branch everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KinkSignature(u64);

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, Var>>,
    kink_hash: Cell<u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Tape {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), params: RefCell::new(HashMap::new()), kink_hash: Cell::new(FNV_OFFSET) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kink_signature(&self) -> KinkSignature {
        KinkSignature(self.kink_hash.get())
    }

    fn record_branch(&self, bits: impl Iterator<Item = bool>) {
        let mut h = self.kink_hash.get();
        for b in bits {
            h ^= b as u64 + 1;
            h = h.wrapping_mul(FNV_PRIME);
        }
        self.kink_hash.set(h);
    }

    fn push(&self, value: Matrix, op: Op) -> Var {
        self.push_aux(value, op, None)
    }

    fn push_aux(&self, value: Matrix, op: Op, aux: Option<Vec<f64>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, aux });
        Var(nodes.len() - 1)
    }

    fn unary<R>(&self, a: Var, f: impl FnOnce(&Matrix) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value)
    }

    fn binary<R>(&self, a: Var, b: Var, f: impl FnOnce(&Matrix, &Matrix) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    pub fn constant(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter leaf. Repeated calls with the same id return the same node,
    /// so uses across a batch accumulate into one gradient.
    pub fn param(&self, id: ParamId, value: &Matrix) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param(id));
        self.params.borrow_mut().insert(id, v);
        v
    }

    /// Copy of `a` with no gradient path back to its inputs.
    pub fn detach(&self, a: Var) -> Var {
        let v = self.value(a);
        self.constant(v)
    }

    pub fn value(&self, a: Var) -> Matrix {
        self.unary(a, Matrix::clone)
    }

    pub fn with_value<R>(&self, a: Var, f: impl FnOnce(&Matrix) -> R) -> R {
        self.unary(a, f)
    }

    pub fn item(&self, a: Var) -> f64 {
        self.unary(a, Matrix::item)
    }

    pub fn shape(&self, a: Var) -> (usize, usize) {
        self.unary(a, Matrix::shape)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x.matmul(y));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let v = self.unary(a, Matrix::transpose);
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x.zip_map(y, |p, q| p + q));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x.zip_map(y, |p, q| p - q));
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x.zip_map(y, |p, q| p * q));
        self.push(v, Op::Mul(a, b))
    }

    /// `a (m×n) + b (1×n)` broadcast over rows.
    pub fn add_row(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, r| {
            assert_eq!((1, x.cols()), r.shape(), "add_row expects a 1x{} row", x.cols());
            Matrix::from_fn(x.rows(), x.cols(), |i, j| x[(i, j)] + r[(0, j)])
        });
        self.push(v, Op::AddRow(a, b))
    }

    /// `a (m×n) ⊙ b (1×n)` broadcast over rows.
    pub fn mul_row(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, r| {
            assert_eq!((1, x.cols()), r.shape(), "mul_row expects a 1x{} row", x.cols());
            Matrix::from_fn(x.rows(), x.cols(), |i, j| x[(i, j)] * r[(0, j)])
        });
        self.push(v, Op::MulRow(a, b))
    }

    /// `a (m×n) ⊙ c (m×1)` broadcast over columns.
    pub fn mul_col(&self, a: Var, c: Var) -> Var {
        let v = self.binary(a, c, |x, col| {
            assert_eq!((x.rows(), 1), col.shape(), "mul_col expects a {}x1 column", x.rows());
            Matrix::from_fn(x.rows(), x.cols(), |i, j| x[(i, j)] * col[(i, 0)])
        });
        self.push(v, Op::MulCol(a, c))
    }

    /// `a * s` with `s` a `1 × 1` node.
    pub fn mul_scalar(&self, a: Var, s: Var) -> Var {
        let v = self.binary(a, s, |x, sv| x.scale(sv.item()));
        self.push(v, Op::MulScalar(a, s))
    }

    /// `a * scale + shift` with constant coefficients.
    pub fn affine(&self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.unary(a, |x| x.map(|p| p * scale + shift));
        self.push(v, Op::Affine(a, scale))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    /// Elementwise product with a constant matrix (masks, dropout).
    pub fn mask_mul(&self, a: Var, mask: Rc<Matrix>) -> Var {
        let v = self.unary(a, |x| x.zip_map(&mask, |p, q| p * q));
        self.push(v, Op::MaskMul(a, mask))
    }

    /// Zeroes rows whose flag is false.
    pub fn mask_rows(&self, a: Var, valid: &[bool]) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(r, valid.len(), "row mask length mismatch");
        if valid.iter().all(|&v| v) {
            return a;
        }
        let m = Matrix::from_fn(r, c, |i, _| if valid[i] { 1.0 } else { 0.0 });
        self.mask_mul(a, Rc::new(m))
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.unary(a, |x| {
            self.record_branch(x.data().iter().map(|&p| p > 0.0));
            x.map(|p| p.max(0.0))
        });
        self.push(v, Op::Relu(a))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let v = self.unary(a, |x| {
            self.record_branch(x.data().iter().map(|&p| p > 0.0));
            x.map(|p| if p > 0.0 { p } else { slope * p })
        });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self, a: Var) -> Var {
        let v = self.unary(a, |x| x.map(gelu));
        self.push(v, Op::Gelu(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let v = self.unary(a, |x| x.map(f64::tanh));
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.unary(a, |x| x.map(sigmoid));
        self.push(v, Op::Sigmoid(a))
    }

    /// `x^{-1/2}` for positive entries, 0 elsewhere.
    pub fn inv_sqrt_pos(&self, a: Var) -> Var {
        let v = self.unary(a, |x| {
            self.record_branch(x.data().iter().map(|&p| p > 0.0));
            x.map(|p| if p > 0.0 { 1.0 / p.sqrt() } else { 0.0 })
        });
        self.push(v, Op::InvSqrtPos(a))
    }

    /// Per-row standardization `(x − μ) / sqrt(σ² + eps)` without gain/shift.
    pub fn layer_norm_rows(&self, a: Var, eps: f64) -> Var {
        let (v, inv) = self.unary(a, |x| {
            let n = x.cols() as f64;
            let mut out = x.clone();
            let mut inv = Vec::with_capacity(x.rows());
            for i in 0..x.rows() {
                let row = x.row(i);
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
                let r = 1.0 / (var + eps).sqrt();
                for (o, p) in out.row_mut(i).iter_mut().zip(row) {
                    *o = (p - mean) * r;
                }
                inv.push(r);
            }
            (out, inv)
        });
        self.push_aux(v, Op::LayerNormRows(a), Some(inv))
    }

    /// Row-wise `x / max(‖x‖, eps)`.
    pub fn l2_normalize_rows(&self, a: Var, eps: f64) -> Var {
        let (v, norms) = self.unary(a, |x| {
            let mut out = x.clone();
            let mut norms = Vec::with_capacity(x.rows());
            for i in 0..x.rows() {
                let n = crate::tensor::norm(x.row(i));
                let d = n.max(eps);
                for o in out.row_mut(i) {
                    *o /= d;
                }
                norms.push(n);
            }
            self.record_branch(norms.iter().map(|&n| n > eps));
            (out, norms)
        });
        self.push_aux(v, Op::L2NormRows(a, eps), Some(norms))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let v = self.unary(a, |x| {
            let mut out = x.clone();
            for i in 0..x.rows() {
                softmax_in_place(out.row_mut(i));
            }
            out
        });
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Softmax restricted to entries whose mask is true (row-major `rows ×
    /// cols` flags). Masked entries get weight exactly 0; a row with no
    /// valid entry is all zero.
    pub fn masked_softmax_rows(&self, a: Var, mask: &[bool]) -> Var {
        let v = self.unary(a, |x| {
            assert_eq!(mask.len(), x.len(), "softmax mask size mismatch");
            let mut out = Matrix::zeros(x.rows(), x.cols());
            for i in 0..x.rows() {
                let flags = &mask[i * x.cols()..(i + 1) * x.cols()];
                let row = x.row(i);
                let max = row.iter().zip(flags).filter(|(_, &f)| f).map(|(&p, _)| p).fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let o = out.row_mut(i);
                let mut total = 0.0;
                for j in 0..row.len() {
                    if flags[j] {
                        o[j] = (row[j] - max).exp();
                        total += o[j];
                    }
                }
                for p in o.iter_mut() {
                    *p /= total;
                }
            }
            out
        });
        self.push(v, Op::MaskedSoftmaxRows(a))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let v = self.unary(a, |x| {
            let mut out = x.clone();
            for i in 0..x.rows() {
                let row = out.row_mut(i);
                let lse = log_sum_exp(row.iter().copied());
                for p in row {
                    *p -= lse;
                }
            }
            out
        });
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// Log-softmax over the masked-in entries of each row; masked entries
    /// are 0 and receive no gradient.
    pub fn masked_log_softmax_rows(&self, a: Var, mask: Vec<bool>) -> Var {
        let v = self.unary(a, |x| {
            assert_eq!(mask.len(), x.len(), "log-softmax mask size mismatch");
            let mut out = Matrix::zeros(x.rows(), x.cols());
            for i in 0..x.rows() {
                let flags = &mask[i * x.cols()..(i + 1) * x.cols()];
                let row = x.row(i);
                if !flags.iter().any(|&f| f) {
                    continue;
                }
                let lse = log_sum_exp(row.iter().zip(flags).filter(|(_, &f)| f).map(|(&p, _)| p));
                let o = out.row_mut(i);
                for j in 0..row.len() {
                    if flags[j] {
                        o[j] = row[j] - lse;
                    }
                }
            }
            out
        });
        self.push(v, Op::MaskedLogSoftmaxRows(a, Rc::new(mask)))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let v = self.unary(a, |x| Matrix::scalar(x.sum()));
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.with_value(a, Matrix::len) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// `m × 1` column of row sums.
    pub fn row_sums(&self, a: Var) -> Var {
        let v = self.unary(a, |x| Matrix::from_fn(x.rows(), 1, |i, _| x.row(i).iter().sum()));
        self.push(v, Op::RowSums(a))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Matrix> = parts.iter().map(|p| &nodes[p.0].value).collect();
            Matrix::concat_rows(&refs)
        };
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Matrix> = parts.iter().map(|p| &nodes[p.0].value).collect();
            Matrix::concat_cols(&refs)
        };
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Var {
        let v = self.unary(a, |x| x.slice_rows(start, end));
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let v = self.unary(a, |x| x.slice_cols(start, end));
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn row(&self, a: Var, i: usize) -> Var {
        self.slice_rows(a, i, i + 1)
    }

    /// Dot product of two `1 × n` rows as a `1 × 1` node.
    pub fn dot_rows(&self, a: Var, b: Var) -> Var {
        let bt = self.transpose(b);
        self.matmul(a, bt)
    }

    /// Reverse sweep from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.matmul(&val(*b).transpose()));
                    acc(&mut grads, *b, val(*a).transpose().matmul(&g));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, g.zip_map(val(*b), |p, q| p * q));
                    acc(&mut grads, *b, g.zip_map(val(*a), |p, q| p * q));
                }
                Op::AddRow(a, b) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (s, p) in gb.row_mut(0).iter_mut().zip(g.row(i)) {
                            *s += p;
                        }
                    }
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, gb);
                }
                Op::MulRow(a, b) => {
                    let (x, r) = (val(*a), val(*b));
                    let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * r[(0, j)]);
                    let mut gb = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            gb[(0, j)] += g[(i, j)] * x[(i, j)];
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MulCol(a, c) => {
                    let (x, col) = (val(*a), val(*c));
                    let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * col[(i, 0)]);
                    let gc = Matrix::from_fn(g.rows(), 1, |i, _| crate::tensor::dot(g.row(i), x.row(i)));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *c, gc);
                }
                Op::MulScalar(a, s) => {
                    let sv = val(*s).item();
                    let gs = crate::tensor::dot(g.data(), val(*a).data());
                    acc(&mut grads, *a, g.scale(sv));
                    acc(&mut grads, *s, Matrix::scalar(gs));
                }
                Op::Affine(a, scale) => acc(&mut grads, *a, g.scale(*scale)),
                Op::MaskMul(a, m) => acc(&mut grads, *a, g.zip_map(m, |p, q| p * q)),
                Op::Relu(a) => acc(&mut grads, *a, g.zip_map(val(*a), |p, x| if x > 0.0 { p } else { 0.0 })),
                Op::LeakyRelu(a, slope) => {
                    acc(&mut grads, *a, g.zip_map(val(*a), |p, x| if x > 0.0 { p } else { slope * p }))
                }
                Op::Gelu(a) => acc(&mut grads, *a, g.zip_map(val(*a), |p, x| p * gelu_grad(x))),
                Op::Tanh(a) => acc(&mut grads, *a, g.zip_map(&node.value, |p, y| p * (1.0 - y * y))),
                Op::Sigmoid(a) => acc(&mut grads, *a, g.zip_map(&node.value, |p, y| p * y * (1.0 - y))),
                Op::InvSqrtPos(a) => acc(&mut grads, *a, g.zip_map(&node.value, |p, y| -0.5 * p * y * y * y)),
                Op::LayerNormRows(a) => {
                    let inv = node.aux.as_ref().expect("layer norm aux");
                    let y = &node.value;
                    let n = y.cols() as f64;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (gr, yr) = (g.row(i), y.row(i));
                        let mg = gr.iter().sum::<f64>() / n;
                        let mgy = crate::tensor::dot(gr, yr) / n;
                        for (o, (gp, yp)) in ga.row_mut(i).iter_mut().zip(gr.iter().zip(yr)) {
                            *o = inv[i] * (gp - mg - yp * mgy);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::L2NormRows(a, eps) => {
                    let norms = node.aux.as_ref().expect("l2 aux");
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (gr, yr) = (g.row(i), y.row(i));
                        if norms[i] > *eps {
                            let gy = crate::tensor::dot(gr, yr);
                            for (o, (gp, yp)) in ga.row_mut(i).iter_mut().zip(gr.iter().zip(yr)) {
                                *o = (gp - yp * gy) / norms[i];
                            }
                        } else {
                            for (o, gp) in ga.row_mut(i).iter_mut().zip(gr) {
                                *o = gp / eps;
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (gr, yr) = (g.row(i), y.row(i));
                        let s = crate::tensor::dot(gr, yr);
                        for (o, (gp, yp)) in ga.row_mut(i).iter_mut().zip(gr.iter().zip(yr)) {
                            *o = yp * (gp - s);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (gr, yr) = (g.row(i), y.row(i));
                        let s: f64 = gr.iter().sum();
                        for (o, (gp, yp)) in ga.row_mut(i).iter_mut().zip(gr.iter().zip(yr)) {
                            *o = gp - yp.exp() * s;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MaskedLogSoftmaxRows(a, mask) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut ga = Matrix::zeros(y.rows(), c);
                    for i in 0..y.rows() {
                        let flags = &mask[i * c..(i + 1) * c];
                        let (gr, yr) = (g.row(i), y.row(i));
                        let s: f64 = gr.iter().zip(flags).filter(|(_, &f)| f).map(|(p, _)| p).sum();
                        for j in 0..c {
                            if flags[j] {
                                ga[(i, j)] = gr[j] - yr[j].exp() * s;
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let (r, c) = val(*a).shape();
                    acc(&mut grads, *a, Matrix::filled(r, c, g.item()));
                }
                Op::RowSums(a) => {
                    let (r, c) = val(*a).shape();
                    acc(&mut grads, *a, Matrix::from_fn(r, c, |i, _| g[(i, 0)]));
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let r = val(*p).rows();
                        acc(&mut grads, *p, g.slice_rows(off, off + r));
                        off += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let c = val(*p).cols();
                        acc(&mut grads, *p, g.slice_cols(off, off + c));
                        off += c;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..g.rows() {
                        ga.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..g.rows() {
                        ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *a, ga);
                }
            }
            grads[idx] = Some(g);
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => grads[i].clone().map(|g| (id, g)),
                _ => None,
            })
            .collect();
        Gradients { nodes: grads, params }
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: HashMap<ParamId, Matrix>,
}

impl Gradients {
    /// Gradient of a parameter; `None` when the loss does not depend on it.
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &HashMap<ParamId, Matrix> {
        &self.params
    }

    /// Gradient of any node recorded before the loss.
    pub fn of(&self, v: Var) -> Option<&Matrix> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for p in row.iter_mut() {
        *p = (*p - max).exp();
        total += *p;
    }
    for p in row.iter_mut() {
        *p /= total;
    }
}
