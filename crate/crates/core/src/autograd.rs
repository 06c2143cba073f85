//! A small reverse-mode tape over [`Mat`] values.
//!
//! Every trainable module builds its forward pass on a [`Graph`]; inference
//! simply drops the graph without calling [`Graph::backward`].

use crate::tensor::{sigmoid, Mat};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Adds a `1 × c` row to every row of an `r × c` matrix.
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogSigmoid(Var),
    NormalizeRows(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Pick(Var, Vec<(usize, usize)>),
    Sum(Var),
    Abs(Var),
    /// Numerically stable binary cross-entropy with logits against fixed targets.
    BceWithLogits(Var, Mat),
}

struct Node {
    value: Mat,
    op: Op,
    /// Whether any trainable leaf feeds this node.
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`], returned from [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape when `v` did not affect the loss.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(shape.0, shape.1))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.data()[0]
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::MatMul(a, b) | Op::MatMulT(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                self.needs(*a) || self.needs(*b)
            }
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Clamp(a, _, _)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::LogSigmoid(a)
            | Op::NormalizeRows(a, _)
            | Op::GatherRows(a, _)
            | Op::Pick(a, _)
            | Op::Sum(a)
            | Op::Abs(a)
            | Op::BceWithLogits(a, _) => self.needs(*a),
            Op::ConcatRows(parts) => parts.iter().any(|p| self.needs(*p)),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable input; its gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A fixed input. No gradient is computed for it or for anything that
    /// depends only on constants.
    pub fn constant(&mut self, value: Mat) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].needs_grad = false;
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.rows(), 1, "add_row expects a 1 x c row");
        assert_eq!(am.cols(), rm.cols(), "add_row column mismatch");
        let mut out = am.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rm.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = m.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = m.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// `ln σ(x) = −softplus(−x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -softplus(-x));
        self.push(v, Op::LogSigmoid(a))
    }

    /// Unit-normalizes every row. Rows with norm below `1e-12` are left
    /// unscaled by treating the norm as `1e-12`.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = m.clone();
        let mut norms = Vec::with_capacity(m.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in row.iter_mut() {
                *x /= n;
            }
            norms.push(n);
        }
        self.push(out, Op::NormalizeRows(a, norms))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        let mut out = Mat::zeros(idx.len(), m.cols());
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(m.row(i));
        }
        self.push(out, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Picks individual elements into a `1 × n` row.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Var {
        let m = self.value(a);
        let data = at.iter().map(|&(r, c)| m.get(r, c)).collect();
        self.push(Mat::row_vector(data), Op::Pick(a, at.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Mat::from_vec(1, 1, vec![s]), Op::Sum(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    /// Elementwise `softplus(x) − y·x`, the stable form of
    /// `−[y ln σ(x) + (1−y) ln(1−σ(x))]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Mat) -> Var {
        let v = self
            .value(logits)
            .zip_map(&targets, |x, y| softplus(x) - y * x);
        self.push(v, Op::BceWithLogits(logits, targets))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        let lv = self.value(loss);
        grads[loss.0] = Some(Mat::filled(lv.rows(), lv.cols(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let da = g.matmul_t(self.value(*b));
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = self.value(*a).t_matmul(&g);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.needs(*a) {
                        let da = g.matmul(self.value(*b));
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = g.t_matmul(self.value(*a));
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |x, y| x * y);
                    let db = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, x) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *row, dr);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Relu(a) => {
                    let da = g.zip_map(self.value(*a), |x, inp| if inp > 0.0 { x } else { 0.0 });
                    accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let da = g.zip_map(&node.value, |x, s| x * s * (1.0 - s));
                    accumulate(&mut grads, *a, da);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let da = g.zip_map(self.value(*a), |x, inp| {
                        if inp >= lo && inp <= hi {
                            x
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let s = &node.value;
                    let mut da = Mat::zeros(s.rows(), s.cols());
                    for r in 0..s.rows() {
                        let (sr, gr) = (s.row(r), g.row(r));
                        let inner: f64 = sr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (c, d) in da.row_mut(r).iter_mut().enumerate() {
                            *d = sr[c] * (gr[c] - inner);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LogSoftmaxRows(a) => {
                    let ls = &node.value;
                    let mut da = Mat::zeros(ls.rows(), ls.cols());
                    for r in 0..ls.rows() {
                        let gr = g.row(r);
                        let total: f64 = gr.iter().sum();
                        for (c, d) in da.row_mut(r).iter_mut().enumerate() {
                            *d = gr[c] - ls.get(r, c).exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LogSigmoid(a) => {
                    let da = g.zip_map(self.value(*a), |x, inp| x * (1.0 - sigmoid(inp)));
                    accumulate(&mut grads, *a, da);
                }
                Op::NormalizeRows(a, norms) => {
                    let y = &node.value;
                    let mut da = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (c, d) in da.row_mut(r).iter_mut().enumerate() {
                            *d = (gr[c] - yr[c] * inner) / norms[r];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::GatherRows(a, idx) => {
                    let src = self.value(*a);
                    let mut da = Mat::zeros(src.rows(), src.cols());
                    for (o, &i) in idx.iter().enumerate() {
                        for (d, x) in da.row_mut(i).iter_mut().zip(g.row(o)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        accumulate(&mut grads, p, Mat::from_vec(rows, cols, slice));
                        offset += rows;
                    }
                }
                Op::Pick(a, at) => {
                    let src = self.value(*a);
                    let mut da = Mat::zeros(src.rows(), src.cols());
                    for (k, &(r, c)) in at.iter().enumerate() {
                        let cur = da.get(r, c);
                        da.set(r, c, cur + g.data()[k]);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Mat::filled(rows, cols, g.data()[0]));
                }
                Op::Abs(a) => {
                    let da = g.zip_map(self.value(*a), |x, inp| {
                        if inp > 0.0 {
                            x
                        } else if inp < 0.0 {
                            -x
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::BceWithLogits(a, targets) => {
                    let probs = self.value(*a).map(sigmoid);
                    let da = g.zip_map(&probs.zip_map(targets, |p, y| p - y), |x, d| x * d);
                    accumulate(&mut grads, *a, da);
                }
            }
            // leaves keep their gradient for the caller
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
