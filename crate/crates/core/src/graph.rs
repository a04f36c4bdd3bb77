//! Tape-based reverse-mode autodiff over [`Mat`].
//!
//! A [`Graph`] is built per utterance: forward calls append nodes, and
//! [`Graph::backward`] walks the tape in reverse to produce parameter
//! gradients. Nodes only reference earlier nodes, so creation order is a
//! valid topological order. The engine is `f64` throughout, which keeps
//! finite-difference gradient checks meaningful.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op {
    Leaf { param: Option<ParamId> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Broadcast-add a 1xC row vector to every row.
    AddRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    NarrowRows(NodeId, usize),
    NarrowCols(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    /// out[r][j] = a[r][idx[r * out_cols + j]]
    GatherColsPerRow(NodeId, Vec<usize>),
    GatherElems(NodeId, Vec<(usize, usize)>),
    Im2Col(NodeId, usize),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Abs(NodeId),
    Square(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    SumAll(NodeId),
    SpanMeanRows(NodeId, Vec<(usize, usize)>),
    MulRowMask(NodeId, Vec<f64>),
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Graph<'a> {
    params: &'a ParamStore,
    pub mode: Mode,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

/// Gradients produced by one backward pass.
pub struct Grads {
    by_param: HashMap<ParamId, Mat>,
    by_node: Vec<Option<Mat>>,
}

impl Grads {
    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.by_param.get(&id)
    }

    pub fn take_params(self) -> HashMap<ParamId, Mat> {
        self.by_param
    }

    pub fn node(&self, id: NodeId) -> Option<&Mat> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore, mode: Mode, rng: ChaCha8Rng) -> Self {
        Graph { params, mode, rng, nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    /// Evaluation-mode graph; dropout is inert so the rng seed is irrelevant.
    pub fn eval(params: &'a ParamStore) -> Self {
        Graph::new(params, Mode::Eval, ChaCha8Rng::seed_from_u64(0))
    }

    pub fn train(params: &'a ParamStore, rng: ChaCha8Rng) -> Self {
        Graph::new(params, Mode::Train, rng)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let m = self.value(id);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Mat) -> NodeId {
        self.push(m, Op::Leaf { param: None })
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Mat::scalar(v))
    }

    /// Insert a parameter leaf (cached: one node per parameter).
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(self.params.get(id).clone(), Op::Leaf { param: Some(id) });
        self.param_nodes.insert(id, n);
        n
    }

    /// Insert a parameter from a foreign store as a constant: its value is
    /// used in the forward pass but receives no gradient.
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.constant(store.get(id).clone())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let mut out = av.clone();
        out.add_assign(bv);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub shape mismatch");
        let mut out = av.clone();
        out.axpy(-1.0, bv);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Mat::from_vec(av.rows(), av.cols(), data);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_row(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (av, vv) = (self.value(a), self.value(v));
        assert_eq!(vv.rows(), 1, "add_row expects a 1xC vector");
        assert_eq!(av.cols(), vv.cols(), "add_row width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for (o, b) in row.iter_mut().zip(vv.row(0)) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn narrow_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        assert!(start + len <= av.rows(), "narrow_rows out of range");
        let mut out = Mat::zeros(len, av.cols());
        for r in 0..len {
            out.row_mut(r).copy_from_slice(av.row(start + r));
        }
        self.push(out, Op::NarrowRows(a, start))
    }

    pub fn narrow_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "narrow_cols out of range");
        let out = Mat::from_fn(av.rows(), len, |r, c| av.get(r, start + c));
        self.push(out, Op::NarrowCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut r0 = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows width mismatch");
            for r in 0..pv.rows() {
                out.row_mut(r0 + r).copy_from_slice(pv.row(r));
            }
            r0 += pv.rows();
        }
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut c0 = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[c0..c0 + pv.cols()].copy_from_slice(pv.row(r));
            }
            c0 += pv.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let av = self.value(a);
        let mut out = Mat::zeros(idx.len(), av.cols());
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < av.rows(), "gather_rows index out of range");
            out.row_mut(r).copy_from_slice(av.row(i));
        }
        self.push(out, Op::GatherRows(a, idx.to_vec()))
    }

    /// Per-row column gather: out[r][j] = a[r][idx[r][j]], idx flattened row-major.
    pub fn gather_cols_per_row(&mut self, a: NodeId, idx: &[usize], out_cols: usize) -> NodeId {
        let av = self.value(a);
        assert_eq!(idx.len(), av.rows() * out_cols);
        let mut out = Mat::zeros(av.rows(), out_cols);
        for r in 0..av.rows() {
            for j in 0..out_cols {
                let src = idx[r * out_cols + j];
                assert!(src < av.cols(), "gather_cols index out of range");
                out.set(r, j, av.get(r, src));
            }
        }
        self.push(out, Op::GatherColsPerRow(a, idx.to_vec()))
    }

    /// Select individual elements into an Nx1 column.
    pub fn gather_elems(&mut self, a: NodeId, idx: &[(usize, usize)]) -> NodeId {
        let av = self.value(a);
        let mut out = Mat::zeros(idx.len(), 1);
        for (n, &(r, c)) in idx.iter().enumerate() {
            out.set(n, 0, av.get(r, c));
        }
        self.push(out, Op::GatherElems(a, idx.to_vec()))
    }

    /// Unfold a WxC sequence into Wx(k*C) windows with zero padding (odd k).
    pub fn im2col(&mut self, a: NodeId, k: usize) -> NodeId {
        assert!(k % 2 == 1, "im2col kernel must be odd");
        let av = self.value(a);
        let (rows, cols) = av.shape();
        let half = k / 2;
        let mut out = Mat::zeros(rows, k * cols);
        for r in 0..rows {
            for t in 0..k {
                let src = r as isize + t as isize - half as isize;
                if src < 0 || src >= rows as isize {
                    continue;
                }
                let dst = out.row_mut(r);
                dst[t * cols..(t + 1) * cols].copy_from_slice(av.row(src as usize));
            }
        }
        self.push(out, Op::Im2Col(a, k))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for v in row {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let out = self.value(a).map(|v| if v >= 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Ln(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a))
    }

    /// Row-wise layer normalization with learned gain/bias (1xC each).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        assert_eq!(g.shape(), (1, xv.cols()), "layer_norm gain shape");
        assert_eq!(b.shape(), (1, xv.cols()), "layer_norm bias shape");
        let mut out = Mat::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let (mu, sigma) = row_moments(row, eps);
            let dst = out.row_mut(r);
            for c in 0..row.len() {
                dst[c] = (row[c] - mu) / sigma * g.get(0, c) + b.get(0, c);
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Mat::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean of each row span: spans are [start, end) over rows, output SxC.
    ///
    /// A span whose rows are all bitwise identical yields that row exactly
    /// (the mean of k equal values is the value), which makes repeated
    /// pooling idempotent.
    pub fn span_mean_rows(&mut self, a: NodeId, spans: &[(usize, usize)]) -> NodeId {
        let av = self.value(a);
        let mut out = Mat::zeros(spans.len(), av.cols());
        for (s, &(lo, hi)) in spans.iter().enumerate() {
            assert!(lo < hi && hi <= av.rows(), "span_mean_rows bad span");
            if (lo + 1..hi).all(|r| av.row(r) == av.row(lo)) {
                out.row_mut(s).copy_from_slice(av.row(lo));
                continue;
            }
            let dst = out.row_mut(s);
            for r in lo..hi {
                for (d, v) in dst.iter_mut().zip(av.row(r)) {
                    *d += v;
                }
            }
            let inv = 1.0 / (hi - lo) as f64;
            for d in dst {
                *d *= inv;
            }
        }
        self.push(out, Op::SpanMeanRows(a, spans.to_vec()))
    }

    /// Multiply each row by a scalar (used to zero masked rows exactly).
    pub fn mul_row_mask(&mut self, a: NodeId, mask: &[f64]) -> NodeId {
        let av = self.value(a);
        assert_eq!(mask.len(), av.rows(), "mul_row_mask length mismatch");
        let mut out = av.clone();
        for (r, &m) in mask.iter().enumerate() {
            for v in out.row_mut(r) {
                *v *= m;
            }
        }
        self.push(out, Op::MulRowMask(a, mask.to_vec()))
    }

    /// Inverted-dropout: identity in eval mode or when p == 0.
    pub fn dropout(&mut self, a: NodeId, p: f64) -> NodeId {
        if self.mode == Mode::Eval || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let (rows, cols) = self.value(a).shape();
        let rng = &mut self.rng;
        let mask = Mat::from_fn(rows, cols, |_, _| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Mean absolute error between two same-shape nodes.
    pub fn mae(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean_all(d)
    }

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let d = self.square(d);
        self.mean_all(d)
    }

    /// Reverse pass from a 1x1 loss node.
    pub fn backward(&self, loss: NodeId) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut by_node: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        by_node[loss.0] = Some(Mat::scalar(1.0));
        let mut by_param: HashMap<ParamId, Mat> = HashMap::new();

        for id in (0..=loss.0).rev() {
            let Some(dy) = by_node[id].clone() else { continue };
            match &self.nodes[id].op {
                Op::Leaf { param } => {
                    if let Some(p) = param {
                        by_param
                            .entry(*p)
                            .and_modify(|g| g.add_assign(&dy))
                            .or_insert_with(|| dy.clone());
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut by_node, *a, &dy);
                    acc(&mut by_node, *b, &dy);
                }
                Op::Sub(a, b) => {
                    acc(&mut by_node, *a, &dy);
                    acc_scaled(&mut by_node, *b, &dy, -1.0);
                }
                Op::Mul(a, b) => {
                    let da = hadamard(&dy, self.value(*b));
                    let db = hadamard(&dy, self.value(*a));
                    acc(&mut by_node, *a, &da);
                    acc(&mut by_node, *b, &db);
                }
                Op::Scale(a, s) => acc_scaled(&mut by_node, *a, &dy, *s),
                Op::AddRow(a, v) => {
                    acc(&mut by_node, *a, &dy);
                    let mut dv = Mat::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (d, g) in dv.row_mut(0).iter_mut().zip(dy.row(r)) {
                            *d += g;
                        }
                    }
                    acc(&mut by_node, *v, &dv);
                }
                Op::MatMul(a, b) => {
                    let da = dy.matmul_nt(self.value(*b));
                    let db = self.value(*a).matmul_tn(&dy);
                    acc(&mut by_node, *a, &da);
                    acc(&mut by_node, *b, &db);
                }
                Op::Transpose(a) => {
                    let da = dy.transpose();
                    acc(&mut by_node, *a, &da);
                }
                Op::NarrowRows(a, start) => {
                    let av = self.value(*a);
                    let mut da = Mat::zeros(av.rows(), av.cols());
                    for r in 0..dy.rows() {
                        da.row_mut(start + r).copy_from_slice(dy.row(r));
                    }
                    acc(&mut by_node, *a, &da);
                }
                Op::NarrowCols(a, start) => {
                    let av = self.value(*a);
                    let mut da = Mat::zeros(av.rows(), av.cols());
                    for r in 0..dy.rows() {
                        da.row_mut(r)[*start..start + dy.cols()].copy_from_slice(dy.row(r));
                    }
                    acc(&mut by_node, *a, &da);
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for &p in parts {
                        let pr = self.value(p).rows();
                        let mut dp = Mat::zeros(pr, dy.cols());
                        for r in 0..pr {
                            dp.row_mut(r).copy_from_slice(dy.row(r0 + r));
                        }
                        acc(&mut by_node, p, &dp);
                        r0 += pr;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        let dp = Mat::from_fn(dy.rows(), pc, |r, c| dy.get(r, c0 + c));
                        acc(&mut by_node, p, &dp);
                        c0 += pc;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let av = self.value(*a);
                    let mut da = Mat::zeros(av.rows(), av.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, g) in da.row_mut(i).iter_mut().zip(dy.row(r)) {
                            *d += g;
                        }
                    }
                    acc(&mut by_node, *a, &da);
                }
                Op::GatherColsPerRow(a, idx) => {
                    let av = self.value(*a);
                    let out_cols = dy.cols();
                    let mut da = Mat::zeros(av.rows(), av.cols());
                    for r in 0..dy.rows() {
                        for j in 0..out_cols {
                            let src = idx[r * out_cols + j];
                            *da.row_mut(r).get_mut(src).unwrap() += dy.get(r, j);
                        }
                    }
                    acc(&mut by_node, *a, &da);
                }
                Op::GatherElems(a, idx) => {
                    let av = self.value(*a);
                    let mut da = Mat::zeros(av.rows(), av.cols());
                    for (n, &(r, c)) in idx.iter().enumerate() {
                        da.set(r, c, da.get(r, c) + dy.get(n, 0));
                    }
                    acc(&mut by_node, *a, &da);
                }
                Op::Im2Col(a, k) => {
                    let av = self.value(*a);
                    let (rows, cols) = av.shape();
                    let half = k / 2;
                    let mut da = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        for t in 0..*k {
                            let src = r as isize + t as isize - half as isize;
                            if src < 0 || src >= rows as isize {
                                continue;
                            }
                            let src = src as usize;
                            let gy = &dy.row(r)[t * cols..(t + 1) * cols];
                            for (d, g) in da.row_mut(src).iter_mut().zip(gy) {
                                *d += g;
                            }
                        }
                    }
                    acc(&mut by_node, *a, &da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[id].value;
                    let mut da = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = dy.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, d) in da.row_mut(r).iter_mut().enumerate() {
                            *d = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut by_node, *a, &da);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &self.nodes[id].value;
                    let mut da = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let gr = dy.row(r);
                        let gsum: f64 = gr.iter().sum();
                        let yr = y.row(r);
                        for c in 0..yr.len() {
                            da.set(r, c, gr[c] - yr[c].exp() * gsum);
                        }
                    }
                    acc(&mut by_node, *a, &da);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let da = Mat::from_fn(x.rows(), x.cols(), |r, c| {
                        if x.get(r, c) > 0.0 { dy.get(r, c) } else { 0.0 }
                    });
                    acc(&mut by_node, *a, &da);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    let da = Mat::from_fn(x.rows(), x.cols(), |r, c| {
                        if x.get(r, c) >= 0.0 { dy.get(r, c) } else { slope * dy.get(r, c) }
                    });
                    acc(&mut by_node, *a, &da);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[id].value;
                    let da = Mat::from_fn(y.rows(), y.cols(), |r, c| {
                        let t = y.get(r, c);
                        dy.get(r, c) * (1.0 - t * t)
                    });
                    acc(&mut by_node, *a, &da);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[id].value;
                    let da = Mat::from_fn(y.rows(), y.cols(), |r, c| {
                        let s = y.get(r, c);
                        dy.get(r, c) * s * (1.0 - s)
                    });
                    acc(&mut by_node, *a, &da);
                }
                Op::Exp(a) => {
                    let y = &self.nodes[id].value;
                    let da = hadamard(&dy, y);
                    acc(&mut by_node, *a, &da);
                }
                Op::Ln(a) => {
                    let x = self.value(*a);
                    let da = Mat::from_fn(x.rows(), x.cols(), |r, c| dy.get(r, c) / x.get(r, c));
                    acc(&mut by_node, *a, &da);
                }
                Op::Abs(a) => {
                    let x = self.value(*a);
                    let da = Mat::from_fn(x.rows(), x.cols(), |r, c| {
                        let v = x.get(r, c);
                        if v > 0.0 {
                            dy.get(r, c)
                        } else if v < 0.0 {
                            -dy.get(r, c)
                        } else {
                            0.0
                        }
                    });
                    acc(&mut by_node, *a, &da);
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    let da =
                        Mat::from_fn(x.rows(), x.cols(), |r, c| 2.0 * x.get(r, c) * dy.get(r, c));
                    acc(&mut by_node, *a, &da);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let xv = self.value(*x);
                    let g = self.value(*gain);
                    let cols = xv.cols();
                    let mut dx = Mat::zeros(xv.rows(), cols);
                    let mut dg = Mat::zeros(1, cols);
                    let mut db = Mat::zeros(1, cols);
                    for r in 0..xv.rows() {
                        let row = xv.row(r);
                        let (mu, sigma) = row_moments(row, *eps);
                        let gr = dy.row(r);
                        // xhat and the two row means needed by the chain rule
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        let mut xhat = vec![0.0; cols];
                        let mut dxhat = vec![0.0; cols];
                        for c in 0..cols {
                            xhat[c] = (row[c] - mu) / sigma;
                            dxhat[c] = gr[c] * g.get(0, c);
                            mean_dxhat += dxhat[c];
                            mean_dxhat_xhat += dxhat[c] * xhat[c];
                        }
                        mean_dxhat /= cols as f64;
                        mean_dxhat_xhat /= cols as f64;
                        for c in 0..cols {
                            dx.set(
                                r,
                                c,
                                (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat) / sigma,
                            );
                            dg.set(0, c, dg.get(0, c) + gr[c] * xhat[c]);
                            db.set(0, c, db.get(0, c) + gr[c]);
                        }
                    }
                    acc(&mut by_node, *x, &dx);
                    acc(&mut by_node, *gain, &dg);
                    acc(&mut by_node, *bias, &db);
                }
                Op::SumAll(a) => {
                    let av = self.value(*a);
                    let g = dy.data()[0];
                    let da = Mat::from_fn(av.rows(), av.cols(), |_, _| g);
                    acc(&mut by_node, *a, &da);
                }
                Op::SpanMeanRows(a, spans) => {
                    let av = self.value(*a);
                    let mut da = Mat::zeros(av.rows(), av.cols());
                    for (s, &(lo, hi)) in spans.iter().enumerate() {
                        let inv = 1.0 / (hi - lo) as f64;
                        for r in lo..hi {
                            for (d, g) in da.row_mut(r).iter_mut().zip(dy.row(s)) {
                                *d += g * inv;
                            }
                        }
                    }
                    acc(&mut by_node, *a, &da);
                }
                Op::MulRowMask(a, mask) => {
                    let mut da = dy.clone();
                    for (r, &m) in mask.iter().enumerate() {
                        for v in da.row_mut(r) {
                            *v *= m;
                        }
                    }
                    acc(&mut by_node, *a, &da);
                }
            }
        }
        Grads { by_param, by_node }
    }
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, (var + eps).sqrt())
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row {
        *v /= sum;
    }
}

fn hadamard(a: &Mat, b: &Mat) -> Mat {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Mat::from_vec(a.rows(), a.cols(), data)
}

fn acc(grads: &mut [Option<Mat>], id: NodeId, contribution: &Mat) {
    match &mut grads[id.0] {
        Some(g) => g.add_assign(contribution),
        slot => *slot = Some(contribution.clone()),
    }
}

fn acc_scaled(grads: &mut [Option<Mat>], id: NodeId, contribution: &Mat, s: f64) {
    match &mut grads[id.0] {
        Some(g) => g.axpy(s, contribution),
        slot => {
            let mut m = contribution.clone();
            m.scale_in_place(s);
            *slot = Some(m);
        }
    }
}

/// Central finite difference of `f` w.r.t. one scalar of one parameter.
///
/// `f` must be a pure function of the store (dropout off, fixed inputs).
pub fn finite_difference(
    store: &ParamStore,
    id: ParamId,
    flat_index: usize,
    h: f64,
    f: impl Fn(&ParamStore) -> f64,
) -> f64 {
    let mut plus = store.clone();
    plus.get_mut(id).data_mut()[flat_index] += h;
    let mut minus = store.clone();
    minus.get_mut(id).data_mut()[flat_index] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}
