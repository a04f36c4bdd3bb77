//! Acoustic core: phoneme encoder, word-to-phoneme fusion, variance
//! adaptor (duration/pitch/energy), length regulation and the mel decoder.
//!
//! Word-level output is broadcast-added over each word's phoneme span
//! before the variance adaptor. Pitch and energy operate at phoneme level:
//! predictors regress scalar values, which are quantized into trained
//! embedding bins and added to the hidden sequence (ground-truth values in
//! training, predictions at inference). Length regulation repeats each
//! phoneme vector for its duration; the decoder maps frames to mel bins.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::graph::{Graph, Mode, NodeId};
use crate::nn::{Embedding, FftStack, Linear, VariancePredictor};
use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct PhonemeSequence {
    pub ids: Vec<usize>,
    /// Per-word contiguous [start, end) phoneme ranges; empty spans mark
    /// punctuation-only words.
    pub word_to_phoneme_spans: Vec<(usize, usize)>,
}

impl PhonemeSequence {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if let Some(&bad) = self.ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::InvalidInput(format!(
                "phoneme id {bad} outside vocabulary of {vocab}"
            )));
        }
        let mut cursor = 0;
        for &(lo, hi) in &self.word_to_phoneme_spans {
            if lo != cursor || hi < lo {
                return Err(Error::InvalidInput(format!(
                    "word spans must be contiguous; got [{lo}, {hi}) at {cursor}"
                )));
            }
            cursor = hi;
        }
        if cursor != self.ids.len() {
            return Err(Error::InvalidInput(format!(
                "word spans cover {cursor} phonemes of {}",
                self.ids.len()
            )));
        }
        Ok(())
    }
}

/// Teacher-forcing targets at phoneme resolution.
#[derive(Clone, Debug)]
pub struct VarianceTargets {
    pub duration_frames: Vec<usize>,
    /// Mean log-F0 over the phoneme's frames, 0 if fully unvoiced.
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
}

impl VarianceTargets {
    pub fn validate(&self, n_phonemes: usize) -> Result<()> {
        if self.duration_frames.len() != n_phonemes
            || self.pitch.len() != n_phonemes
            || self.energy.len() != n_phonemes
        {
            return Err(Error::Shape(format!(
                "variance targets ({}/{}/{}) do not match {n_phonemes} phonemes",
                self.duration_frames.len(),
                self.pitch.len(),
                self.energy.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PhonemeEncoder {
    emb: Embedding,
    fft: FftStack,
}

impl PhonemeEncoder {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let emb = Embedding::new(ps, "phoneme_enc.emb", cfg.phoneme_vocab.len(), cfg.d_model, rng);
        let fft = FftStack::new(
            ps,
            "phoneme_enc.fft",
            cfg.fft_blocks,
            cfg.d_model,
            cfg.d_ff,
            cfg.ff_kernel,
            cfg.n_heads,
            cfg.rel_window,
            cfg.dropout,
            rng,
        );
        PhonemeEncoder { emb, fft }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ph: &PhonemeSequence,
        mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        ph.validate(self.emb.vocab)?;
        let x = self.emb.forward(g, &ph.ids);
        Ok(self.fft.forward(g, x, mask))
    }
}

/// Broadcast-add each word vector over its phoneme span:
/// out[p] = ph_out[p] + word_out[word(p)].
pub fn fuse_word_to_phoneme(
    g: &mut Graph,
    word_out: NodeId,
    spans: &[(usize, usize)],
    ph_out: NodeId,
) -> Result<NodeId> {
    let p = g.value(ph_out).rows();
    let w = g.value(word_out).rows();
    if spans.len() != w {
        return Err(Error::Shape(format!("{} spans for {w} words", spans.len())));
    }
    let mut idx = vec![usize::MAX; p];
    let mut cursor = 0;
    for (word, &(lo, hi)) in spans.iter().enumerate() {
        if lo != cursor || hi < lo || hi > p {
            return Err(Error::InvalidInput(format!(
                "phoneme spans have a gap or overlap at word {word}: [{lo}, {hi}) vs cursor {cursor}"
            )));
        }
        for slot in idx.iter_mut().take(hi).skip(lo) {
            *slot = word;
        }
        cursor = hi;
    }
    if cursor != p {
        return Err(Error::InvalidInput(format!(
            "phoneme spans cover {cursor} of {p} phonemes"
        )));
    }
    let spread = g.gather_rows(word_out, &idx);
    Ok(g.add(ph_out, spread))
}

/// Frame index map of the length regulator: frame t belongs to phoneme
/// `indices[t]`, repeating each phoneme for its duration.
pub fn length_regulate_indices(durations: &[usize]) -> Vec<usize> {
    let total: usize = durations.iter().sum();
    let mut idx = Vec::with_capacity(total);
    for (p, &d) in durations.iter().enumerate() {
        idx.extend(std::iter::repeat(p).take(d));
    }
    idx
}

/// Inference durations: round-half-up of exp(log-duration), clamped >= 1.
pub fn durations_from_log_predictions(log_durs: &[f64]) -> Vec<usize> {
    log_durs
        .iter()
        .map(|&ld| {
            let frames = (ld.exp() + 0.5).floor();
            if frames.is_finite() && frames >= 1.0 {
                frames as usize
            } else {
                1
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct VarianceAdaptor {
    dur: VariancePredictor,
    pitch: VariancePredictor,
    energy: VariancePredictor,
    pitch_emb: Embedding,
    energy_emb: Embedding,
    pitch_bins: usize,
    pitch_range: (f64, f64),
    energy_bins: usize,
    energy_range: (f64, f64),
}

/// Variance adaptor output: expanded frame representations plus the raw
/// per-phoneme predictions for the loss terms.
pub struct VarianceOut {
    pub frame_reps: NodeId,
    pub log_dur_pred: NodeId,
    pub pitch_pred: NodeId,
    pub energy_pred: NodeId,
    /// Durations used by the length regulator (ground truth in training,
    /// predictions at inference).
    pub durations_used: Vec<usize>,
}

impl VarianceAdaptor {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let hidden = d;
        VarianceAdaptor {
            dur: VariancePredictor::new(ps, "variance.dur", d, hidden, cfg.predictor_kernel, cfg.dropout, rng),
            pitch: VariancePredictor::new(ps, "variance.pitch", d, hidden, cfg.predictor_kernel, cfg.dropout, rng),
            energy: VariancePredictor::new(ps, "variance.energy", d, hidden, cfg.predictor_kernel, cfg.dropout, rng),
            pitch_emb: Embedding::new(ps, "variance.pitch_emb", cfg.pitch_bins, d, rng),
            energy_emb: Embedding::new(ps, "variance.energy_emb", cfg.energy_bins, d, rng),
            pitch_bins: cfg.pitch_bins,
            pitch_range: (cfg.pitch_log_min, cfg.pitch_log_max),
            energy_bins: cfg.energy_bins,
            energy_range: (cfg.energy_min, cfg.energy_max),
        }
    }

    fn quantize(v: f64, range: (f64, f64), bins: usize) -> usize {
        let (lo, hi) = range;
        let t = (v - lo) / (hi - lo);
        ((t * bins as f64).floor().max(0.0) as usize).min(bins - 1)
    }

    /// Predict durations/pitch/energy, inject pitch+energy embeddings, and
    /// expand to frame resolution. Training mode (teacher forcing) requires
    /// targets; inference runs on predictions alone.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        targets: Option<&VarianceTargets>,
    ) -> Result<VarianceOut> {
        let p = g.value(x).rows();
        if g.mode == Mode::Train && targets.is_none() {
            return Err(Error::Contract(
                "variance adaptor in training mode needs teacher-forcing targets".into(),
            ));
        }
        if let Some(t) = targets {
            t.validate(p)?;
        }

        let log_dur_pred = self.dur.forward(g, x);
        let pitch_pred = self.pitch.forward(g, x);
        let energy_pred = self.energy.forward(g, x);

        let (pitch_vals, energy_vals, durations): (Vec<f64>, Vec<f64>, Vec<usize>) = match targets
        {
            Some(t) => (t.pitch.clone(), t.energy.clone(), t.duration_frames.clone()),
            None => {
                let pv = g.value(pitch_pred).data().to_vec();
                let ev = g.value(energy_pred).data().to_vec();
                let ld = g.value(log_dur_pred).data().to_vec();
                (pv, ev, durations_from_log_predictions(&ld))
            }
        };

        let pitch_ids: Vec<usize> =
            pitch_vals.iter().map(|&v| Self::quantize(v, self.pitch_range, self.pitch_bins)).collect();
        let energy_ids: Vec<usize> = energy_vals
            .iter()
            .map(|&v| Self::quantize(v, self.energy_range, self.energy_bins))
            .collect();

        let pe = self.pitch_emb.forward(g, &pitch_ids);
        let ee = self.energy_emb.forward(g, &energy_ids);
        let x = g.add(x, pe);
        let x = g.add(x, ee);

        let idx = length_regulate_indices(&durations);
        if idx.is_empty() {
            return Err(Error::Contract("length regulation produced zero frames".into()));
        }
        let frame_reps = g.gather_rows(x, &idx);
        Ok(VarianceOut { frame_reps, log_dur_pred, pitch_pred, energy_pred, durations_used: durations })
    }
}

#[derive(Clone, Debug)]
pub struct MelDecoder {
    fft: FftStack,
    out: Linear,
}

impl MelDecoder {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let fft = FftStack::new(
            ps,
            "decoder.fft",
            cfg.fft_blocks,
            cfg.d_model,
            cfg.d_ff,
            cfg.ff_kernel,
            cfg.n_heads,
            cfg.rel_window,
            cfg.dropout,
            rng,
        );
        let out = Linear::new(ps, "decoder.proj", cfg.d_model, cfg.n_mels, true, rng);
        MelDecoder { fft, out }
    }

    pub fn forward(&self, g: &mut Graph, frame_reps: NodeId, mask: Option<&[bool]>) -> NodeId {
        let h = self.fft.forward(g, frame_reps, mask);
        let mel = self.out.forward(g, h);
        match mask {
            Some(m) => {
                let f = crate::nn::mask_factors(m);
                g.mul_row_mask(mel, &f)
            }
            None => mel,
        }
    }
}
