//! Phrasing structure encoder: word-level context plus speaker identity
//! become a speaker-dependent syntactic representation, from which a
//! predictor emits per-word 4-class pause logits; predicted or ground-truth
//! classes index a trainable pause embedding added back onto the encoding.
//!
//! Pipeline: linear projection of the context, additive speaker row,
//! pre-net (stacked BiLSTM + conv/ReLU/LayerNorm/dropout), then FFT blocks
//! with relative-position attention. Padded rows are exactly zero on every
//! output.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::context::WordContext;
use crate::graph::{Graph, NodeId};
use crate::ingest::PauseClass;
use crate::nn::{mask_factors, BiLstm, Conv1d, FftStack, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;
use crate::{Error, Result};

pub const NUM_PAUSE_CLASSES: usize = 4;

/// Pause predictor head: stacked BiLSTM, conv layers with ReLU, layer
/// normalization and dropout, and a linear projection to 4 logits.
#[derive(Clone, Debug)]
pub struct PausePredictor {
    lstm: BiLstm,
    convs: Vec<(Conv1d, LayerNorm)>,
    proj: Linear,
    dropout: f64,
}

impl PausePredictor {
    fn new(ps: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let lstm = BiLstm::new(ps, &format!("{name}.lstm"), d, d / 2, 2, rng);
        let convs = (0..cfg.prenet_conv_layers)
            .map(|i| {
                (
                    Conv1d::new(ps, &format!("{name}.conv{i}"), d, d, cfg.predictor_kernel, rng),
                    LayerNorm::new(ps, &format!("{name}.conv{i}.ln"), d),
                )
            })
            .collect();
        let proj = Linear::new(ps, &format!("{name}.proj"), d, NUM_PAUSE_CLASSES, true, rng);
        PausePredictor { lstm, convs, proj, dropout: cfg.dropout }
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let mut h = self.lstm.forward(g, x);
        for (conv, ln) in &self.convs {
            h = conv.forward(g, h);
            h = g.relu(h);
            h = ln.forward(g, h);
            h = g.dropout(h, self.dropout);
        }
        self.proj.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct PhrasingEncoder {
    pub input_proj: Linear,
    /// N_speakers x D learned lookup, one row added per utterance.
    pub speaker_table: ParamId,
    prenet_lstm: BiLstm,
    prenet_convs: Vec<(Conv1d, LayerNorm)>,
    fft: FftStack,
    predictor: PausePredictor,
    /// 4 x D trainable pause embedding.
    pub pause_table: ParamId,
    n_speakers: usize,
    d_ctx: usize,
    d_model: usize,
    dropout: f64,
}

impl PhrasingEncoder {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let name = "phrasing";
        let input_proj = Linear::new(ps, &format!("{name}.in_proj"), cfg.d_ctx, d, true, rng);
        let speaker_table = ps.add_xavier(format!("{name}.speaker.table"), cfg.n_speakers, d, rng);
        let prenet_lstm =
            BiLstm::new(ps, &format!("{name}.prenet.lstm"), d, d / 2, cfg.prenet_lstm_layers, rng);
        let prenet_convs = (0..cfg.prenet_conv_layers)
            .map(|i| {
                (
                    Conv1d::new(
                        ps,
                        &format!("{name}.prenet.conv{i}"),
                        d,
                        d,
                        cfg.prenet_conv_kernel,
                        rng,
                    ),
                    LayerNorm::new(ps, &format!("{name}.prenet.conv{i}.ln"), d),
                )
            })
            .collect();
        let fft = FftStack::new(
            ps,
            &format!("{name}.fft"),
            cfg.fft_blocks,
            d,
            cfg.d_ff,
            cfg.ff_kernel,
            cfg.n_heads,
            cfg.rel_window,
            cfg.dropout,
            rng,
        );
        let predictor = PausePredictor::new(ps, &format!("{name}.pause_pred"), cfg, rng);
        let pause_table = ps.add_xavier(format!("{name}.pause.table"), NUM_PAUSE_CLASSES, d, rng);
        PhrasingEncoder {
            input_proj,
            speaker_table,
            prenet_lstm,
            prenet_convs,
            fft,
            predictor,
            pause_table,
            n_speakers: cfg.n_speakers,
            d_ctx: cfg.d_ctx,
            d_model: d,
            dropout: cfg.dropout,
        }
    }

    fn check_speaker(&self, speaker_id: usize) -> Result<()> {
        if speaker_id >= self.n_speakers {
            return Err(Error::Config(format!(
                "speaker {speaker_id} outside configured range 0..{}",
                self.n_speakers
            )));
        }
        Ok(())
    }

    /// Project the word context and add the speaker row; shared by the
    /// full encoder and the ablated direct-context path.
    pub fn project_context(
        &self,
        g: &mut Graph,
        word_ctx: &WordContext,
        speaker_id: usize,
    ) -> Result<NodeId> {
        if word_ctx.vectors.cols() != self.d_ctx {
            return Err(Error::Config(format!(
                "context width {} does not match configured d_ctx {}",
                word_ctx.vectors.cols(),
                self.d_ctx
            )));
        }
        self.check_speaker(speaker_id)?;
        let x = g.constant(word_ctx.vectors.clone());
        let x = self.input_proj.forward(g, x);
        let table = g.param(self.speaker_table);
        let spk = g.gather_rows(table, &[speaker_id]);
        Ok(g.add_row(x, spk))
    }

    /// Speaker-dependent syntactic representation, W x D; rows beyond the
    /// true length (trailing-false mask) come out exactly zero.
    pub fn encode_syntactic(
        &self,
        g: &mut Graph,
        word_ctx: &WordContext,
        speaker_id: usize,
        mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        let w = word_ctx.vectors.rows();
        let valid = valid_len(mask, w)?;
        let x = self.project_context(g, word_ctx, speaker_id)?;
        let x = if valid < w { g.narrow_rows(x, 0, valid) } else { x };

        let mut h = self.prenet_lstm.forward(g, x);
        for (conv, ln) in &self.prenet_convs {
            h = conv.forward(g, h);
            h = g.relu(h);
            h = ln.forward(g, h);
            h = g.dropout(h, self.dropout);
        }
        let h = self.fft.forward(g, h, None);
        Ok(pad_rows(g, h, w))
    }

    /// Per-word 4-class pause logits; padded rows are zero and must be
    /// excluded from loss and argmax via the same mask.
    pub fn predict_pauses(&self, g: &mut Graph, syn: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let w = g.value(syn).rows();
        let valid = valid_len(mask, w)?;
        let x = if valid < w { g.narrow_rows(syn, 0, valid) } else { syn };
        let logits = self.predictor.forward(g, x);
        Ok(pad_rows(g, logits, w))
    }

    /// Add the pause embedding row of each word's class onto the syntactic
    /// representation; masked rows stay zero.
    pub fn apply_pause_embedding(
        &self,
        g: &mut Graph,
        syn: NodeId,
        classes: &[u8],
        mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        let w = g.value(syn).rows();
        if classes.len() != w {
            return Err(Error::Shape(format!("{} classes for {w} words", classes.len())));
        }
        let mut idx = Vec::with_capacity(w);
        for &c in classes {
            PauseClass::from_value(c)?;
            idx.push(c as usize);
        }
        let table = g.param(self.pause_table);
        let emb = g.gather_rows(table, &idx);
        let fused = g.add(syn, emb);
        Ok(match mask {
            Some(m) => {
                let f = mask_factors(m);
                g.mul_row_mask(fused, &f)
            }
            None => fused,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn num_speakers(&self) -> usize {
        self.n_speakers
    }
}

/// Mean cross-entropy of softmaxed logits against target classes over
/// unmasked positions.
pub fn pause_loss(
    g: &mut Graph,
    logits: NodeId,
    targets: &[u8],
    mask: Option<&[bool]>,
) -> Result<NodeId> {
    let (w, c) = g.value(logits).shape();
    if c != NUM_PAUSE_CLASSES {
        return Err(Error::Shape(format!("expected {NUM_PAUSE_CLASSES} logit columns, got {c}")));
    }
    if targets.len() != w {
        return Err(Error::Shape(format!("{} targets for {w} rows", targets.len())));
    }
    if let Some(m) = mask {
        if m.len() != w {
            return Err(Error::Shape(format!("mask length {} for {w} rows", m.len())));
        }
    }
    let mut picks = Vec::new();
    for (r, &t) in targets.iter().enumerate() {
        if t as usize >= NUM_PAUSE_CLASSES {
            return Err(Error::InvalidInput(format!("pause label {t} outside 0..=3")));
        }
        if mask.map_or(true, |m| m[r]) {
            picks.push((r, t as usize));
        }
    }
    if picks.is_empty() {
        return Err(Error::InvalidInput("no unmasked positions for pause loss".into()));
    }
    let lsm = g.log_softmax_rows(logits);
    let picked = g.gather_elems(lsm, &picks);
    let mean = g.mean_all(picked);
    Ok(g.scale(mean, -1.0))
}

/// Argmax class per unmasked row (masked rows are skipped).
pub fn argmax_pauses(logits: &Mat, mask: Option<&[bool]>) -> Vec<u8> {
    let mut out = Vec::new();
    for r in 0..logits.rows() {
        if mask.map_or(true, |m| m[r]) {
            let row = logits.row(r);
            let mut best = 0usize;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Trailing-padding masks only: `true^k false^(n-k)`; returns k.
fn valid_len(mask: Option<&[bool]>, n: usize) -> Result<usize> {
    let Some(m) = mask else { return Ok(n) };
    if m.len() != n {
        return Err(Error::Shape(format!("mask length {} for {n} rows", m.len())));
    }
    let k = m.iter().take_while(|&&v| v).count();
    if m[k..].iter().any(|&v| v) {
        return Err(Error::InvalidInput(
            "mask must be contiguous valid rows followed by padding".into(),
        ));
    }
    if k == 0 {
        return Err(Error::InvalidInput("mask has no valid rows".into()));
    }
    Ok(k)
}

/// Extend to `rows` total rows with exact-zero padding.
fn pad_rows(g: &mut Graph, x: NodeId, rows: usize) -> NodeId {
    let (r, c) = g.value(x).shape();
    if r == rows {
        return x;
    }
    let pad = g.constant(Mat::zeros(rows - r, c));
    g.concat_rows(&[x, pad])
}
