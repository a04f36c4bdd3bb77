//! Neural layers built on the autodiff graph.
//!
//! Layers own [`ParamId`] handles into a [`ParamStore`] and assemble the
//! forward computation on a per-utterance [`Graph`]. All encoders share the
//! same FFT block (relative-position self-attention plus a convolutional
//! feed-forward) and apply an explicit row mask so padded rows come out as
//! exact zeros.

use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

/// Row multipliers (1.0 valid, 0.0 padded) from a boolean mask.
pub fn mask_factors(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

/// Additive attention bias: 0 on valid key columns, a large negative on
/// padded ones, so padded keys receive exactly zero attention weight.
pub fn attention_key_bias(mask: &[bool]) -> Mat {
    let w = mask.len();
    Mat::from_fn(w, w, |_, c| if mask[c] { 0.0 } else { -1e30 })
}

/// Standard sinusoidal embedding rows: PE[pos, 2i] = sin(pos / 10000^(2i/d)),
/// PE[pos, 2i+1] = cos(pos / 10000^(2i/d)). `d` must be even.
pub fn sinusoid_rows(positions: &[usize], d: usize) -> Mat {
    debug_assert!(d % 2 == 0);
    Mat::from_fn(positions.len(), d, |r, c| {
        let pos = positions[r] as f64;
        let i = (c / 2) as f64;
        let angle = pos / 10000f64.powf(2.0 * i / d as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = ps.add_xavier(format!("{name}.w"), in_dim, out_dim, rng);
        let b = bias.then(|| ps.add_zeros(format!("{name}.b"), 1, out_dim));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
}

impl Embedding {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let table = ps.add_xavier(format!("{name}.table"), vocab, dim, rng);
        Embedding { table, vocab }
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> NodeId {
        let t = g.param(self.table);
        g.gather_rows(t, ids)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = ps.add_const(format!("{name}.gain"), 1, dim, 1.0);
        let bias = ps.add_zeros(format!("{name}.bias"), 1, dim);
        LayerNorm { gain, bias, eps: 1e-5 }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }
}

/// Same-padded 1-D convolution over the row (time) axis via im2col.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "conv kernel must be odd");
        let w = ps.add_xavier(format!("{name}.w"), kernel * in_dim, out_dim, rng);
        let b = ps.add_zeros(format!("{name}.b"), 1, out_dim);
        Conv1d { w, b, kernel }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let cols = g.im2col(x, self.kernel);
        let w = g.param(self.w);
        let y = g.matmul(cols, w);
        let b = g.param(self.b);
        g.add_row(y, b)
    }
}

/// One LSTM direction; gate order [input, forget, cell, output], forget
/// bias initialized to 1.
#[derive(Clone, Debug)]
struct LstmDir {
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
    hidden: usize,
}

impl LstmDir {
    fn new(ps: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let w_ih = ps.add_xavier(format!("{name}.w_ih"), in_dim, 4 * hidden, rng);
        let w_hh = ps.add_xavier(format!("{name}.w_hh"), hidden, 4 * hidden, rng);
        let mut bias = Mat::zeros(1, 4 * hidden);
        for c in hidden..2 * hidden {
            bias.set(0, c, 1.0);
        }
        let b = ps.add(format!("{name}.b"), bias, false);
        LstmDir { w_ih, w_hh, b, hidden }
    }

    /// Run over steps given by `order`; returns per-step hidden states in
    /// input order (step t of the output corresponds to row order[t]... | the
    /// caller passes forward or reversed index order and we restore input order).
    fn run(&self, g: &mut Graph, x: NodeId, order: &[usize]) -> Vec<NodeId> {
        let h0 = g.constant(Mat::zeros(1, self.hidden));
        let c0 = g.constant(Mat::zeros(1, self.hidden));
        let w_ih = g.param(self.w_ih);
        let w_hh = g.param(self.w_hh);
        let b = g.param(self.b);
        let mut h = h0;
        let mut c = c0;
        let mut out = vec![h0; order.len()];
        for &t in order {
            let x_t = g.narrow_rows(x, t, 1);
            let gi = g.matmul(x_t, w_ih);
            let gh = g.matmul(h, w_hh);
            let gates = g.add(gi, gh);
            let gates = g.add_row(gates, b);
            let i = g.narrow_cols(gates, 0, self.hidden);
            let f = g.narrow_cols(gates, self.hidden, self.hidden);
            let z = g.narrow_cols(gates, 2 * self.hidden, self.hidden);
            let o = g.narrow_cols(gates, 3 * self.hidden, self.hidden);
            let i = g.sigmoid(i);
            let f = g.sigmoid(f);
            let z = g.tanh(z);
            let o = g.sigmoid(o);
            let fc = g.mul(f, c);
            let iz = g.mul(i, z);
            c = g.add(fc, iz);
            let tc = g.tanh(c);
            h = g.mul(o, tc);
            out[t] = h;
        }
        out
    }
}

/// Stacked bidirectional LSTM; each layer outputs 2*hidden columns.
#[derive(Clone, Debug)]
pub struct BiLstm {
    layers: Vec<(LstmDir, LstmDir)>,
}

impl BiLstm {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let input = if l == 0 { in_dim } else { 2 * hidden };
            let fw = LstmDir::new(ps, &format!("{name}.l{l}.fw"), input, hidden, rng);
            let bw = LstmDir::new(ps, &format!("{name}.l{l}.bw"), input, hidden, rng);
            layers.push((fw, bw));
        }
        BiLstm { layers }
    }

    /// x: WxIn over exactly the valid rows (callers slice off padding first).
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.value(x).rows();
        let fwd_order: Vec<usize> = (0..w).collect();
        let bwd_order: Vec<usize> = (0..w).rev().collect();
        let mut cur = x;
        for (fw, bw) in &self.layers {
            let hf = fw.run(g, cur, &fwd_order);
            let hb = bw.run(g, cur, &bwd_order);
            let rows: Vec<NodeId> =
                (0..w).map(|t| g.concat_cols(&[hf[t], hb[t]])).collect();
            cur = g.concat_rows(&rows);
        }
        cur
    }
}

/// Multi-head self-attention with Shaw-style clipped relative-position key
/// embeddings shared across heads.
#[derive(Clone, Debug)]
pub struct RelSelfAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    rel_k: ParamId,
    n_heads: usize,
    head_dim: usize,
    window: usize,
}

impl RelSelfAttention {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_heads: usize,
        window: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(d_model % n_heads == 0, "d_model must divide by n_heads");
        let head_dim = d_model / n_heads;
        let wq = Linear::new(ps, &format!("{name}.q"), d_model, d_model, true, rng);
        let wk = Linear::new(ps, &format!("{name}.k"), d_model, d_model, true, rng);
        let wv = Linear::new(ps, &format!("{name}.v"), d_model, d_model, true, rng);
        let wo = Linear::new(ps, &format!("{name}.out"), d_model, d_model, true, rng);
        let rel_k = ps.add_xavier(format!("{name}.rel_k"), 2 * window + 1, head_dim, rng);
        RelSelfAttention { wq, wk, wv, wo, rel_k, n_heads, head_dim, window }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, mask: Option<&[bool]>) -> NodeId {
        let w = g.value(x).rows();
        let q = self.wq.forward(g, x);
        let k = self.wk.forward(g, x);
        let v = self.wv.forward(g, x);
        let rel = g.param(self.rel_k);
        let rel_t = g.transpose(rel);

        // idx[i][j] = clip(j - i, -window, window) + window
        let win = self.window as isize;
        let mut rel_idx = Vec::with_capacity(w * w);
        for i in 0..w as isize {
            for j in 0..w as isize {
                rel_idx.push((j - i).clamp(-win, win) as usize + self.window);
            }
        }
        let key_bias = mask.map(|m| {
            let b = attention_key_bias(m);
            g.constant(b)
        });

        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let off = h * self.head_dim;
            let qh = g.narrow_cols(q, off, self.head_dim);
            let kh = g.narrow_cols(k, off, self.head_dim);
            let vh = g.narrow_cols(v, off, self.head_dim);
            let kh_t = g.transpose(kh);
            let content = g.matmul(qh, kh_t);
            let rel_scores = g.matmul(qh, rel_t); // W x (2win+1)
            let rel_full = g.gather_cols_per_row(rel_scores, &rel_idx, w);
            let logits = g.add(content, rel_full);
            let mut logits = g.scale(logits, scale);
            if let Some(b) = key_bias {
                logits = g.add(logits, b);
            }
            let att = g.softmax_rows(logits);
            heads.push(g.matmul(att, vh));
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        self.wo.forward(g, cat)
    }
}

/// Feed-forward Transformer block: relative-position self-attention and a
/// two-layer convolutional feed-forward, each with residual + layer norm.
/// Padded rows are zeroed after every sublayer.
#[derive(Clone, Debug)]
pub struct FftBlock {
    attn: RelSelfAttention,
    ln1: LayerNorm,
    conv1: Conv1d,
    conv2: Conv1d,
    ln2: LayerNorm,
    dropout: f64,
}

impl FftBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_ff: usize,
        kernel: usize,
        n_heads: usize,
        window: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        FftBlock {
            attn: RelSelfAttention::new(ps, &format!("{name}.attn"), d_model, n_heads, window, rng),
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d_model),
            conv1: Conv1d::new(ps, &format!("{name}.ff1"), d_model, d_ff, kernel, rng),
            conv2: Conv1d::new(ps, &format!("{name}.ff2"), d_ff, d_model, kernel, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d_model),
            dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, mask: Option<&[bool]>) -> NodeId {
        let factors = mask.map(mask_factors);
        let apply_mask = |g: &mut Graph, y: NodeId| match &factors {
            Some(f) => g.mul_row_mask(y, f),
            None => y,
        };

        let a = self.attn.forward(g, x, mask);
        let a = g.dropout(a, self.dropout);
        let x1 = g.add(x, a);
        let x1 = self.ln1.forward(g, x1);
        let x1 = apply_mask(g, x1);

        let c = self.conv1.forward(g, x1);
        let c = g.relu(c);
        let c = self.conv2.forward(g, c);
        let c = g.dropout(c, self.dropout);
        let x2 = g.add(x1, c);
        let x2 = self.ln2.forward(g, x2);
        apply_mask(g, x2)
    }
}

#[derive(Clone, Debug)]
pub struct FftStack {
    blocks: Vec<FftBlock>,
}

impl FftStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        n_blocks: usize,
        d_model: usize,
        d_ff: usize,
        kernel: usize,
        n_heads: usize,
        window: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let blocks = (0..n_blocks)
            .map(|i| {
                FftBlock::new(
                    ps,
                    &format!("{name}.block{i}"),
                    d_model,
                    d_ff,
                    kernel,
                    n_heads,
                    window,
                    dropout,
                    rng,
                )
            })
            .collect();
        FftStack { blocks }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, mask: Option<&[bool]>) -> NodeId {
        let mut cur = x;
        for b in &self.blocks {
            cur = b.forward(g, cur, mask);
        }
        cur
    }
}

/// Two conv layers with ReLU, layer norm and dropout, then a linear head
/// to one scalar per row. Shared shape for duration/pitch/energy.
#[derive(Clone, Debug)]
pub struct VariancePredictor {
    conv1: Conv1d,
    ln1: LayerNorm,
    conv2: Conv1d,
    ln2: LayerNorm,
    lin: Linear,
    dropout: f64,
}

impl VariancePredictor {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_model: usize,
        hidden: usize,
        kernel: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        VariancePredictor {
            conv1: Conv1d::new(ps, &format!("{name}.conv1"), d_model, hidden, kernel, rng),
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), hidden),
            conv2: Conv1d::new(ps, &format!("{name}.conv2"), hidden, hidden, kernel, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), hidden),
            lin: Linear::new(ps, &format!("{name}.proj"), hidden, 1, true, rng),
            dropout,
        }
    }

    /// Returns a Wx1 column of predictions.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.conv1.forward(g, x);
        let h = g.relu(h);
        let h = self.ln1.forward(g, h);
        let h = g.dropout(h, self.dropout);
        let h = self.conv2.forward(g, h);
        let h = g.relu(h);
        let h = self.ln2.forward(g, h);
        let h = g.dropout(h, self.dropout);
        self.lin.forward(g, h)
    }
}
