//! Full acoustic model: phrasing encoder, pause-based word encoder,
//! phoneme encoder, variance adaptor, mel decoder and the discriminator.
//!
//! Training uses teacher forcing: ground-truth pause labels drive the
//! pause embedding and segmentation, ground-truth durations drive length
//! regulation. Inference swaps in predicted pauses (or a user override)
//! and predicted durations. The `use_ps_encoder` / `use_pw_encoder`
//! toggles reroute the word path for ablation runs without changing any
//! parameter shapes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::acoustic::{
    fuse_word_to_phoneme, MelDecoder, PhonemeEncoder, PhonemeSequence, VarianceAdaptor,
    VarianceOut, VarianceTargets,
};
use crate::adversarial::Discriminator;
use crate::config::Config;
use crate::context::WordContext;
use crate::graph::{Graph, NodeId};
use crate::ingest::{PauseLabelSequence, UtteranceRecord};
use crate::pauseword::{
    segment_average_pool, segment_position_embedding, segment_words, PauseWordEncoder, SegmentMap,
};
use crate::phrasing::{argmax_pauses, PhrasingEncoder};
use crate::tensor::Mat;
use crate::{Error, Result};

pub struct Model {
    pub cfg: Config,
    /// Single parameter store; generator parameters are registered first,
    /// discriminator parameters after, so the two optimizers own disjoint
    /// id subsets.
    pub params: crate::params::ParamStore,
    pub gen_ids: Vec<crate::params::ParamId>,
    pub disc_ids: Vec<crate::params::ParamId>,
    pub phrasing: PhrasingEncoder,
    pub pause_word: PauseWordEncoder,
    pub phoneme_enc: PhonemeEncoder,
    pub variance: VarianceAdaptor,
    pub decoder: MelDecoder,
    pub discriminator: Discriminator,
}

/// One preprocessed training example.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub id: String,
    pub speaker_id: usize,
    pub word_ctx: WordContext,
    pub punct_flags: Vec<bool>,
    pub pause_labels: Vec<u8>,
    pub phonemes: PhonemeSequence,
    pub targets: VarianceTargets,
    /// Ground-truth mel, frames x n_mels.
    pub mel: Mat,
}

impl TrainExample {
    /// Attach word-level context to a validated corpus record and derive
    /// phoneme-level variance targets from its frame-level features.
    pub fn from_record(record: &UtteranceRecord, word_ctx: WordContext, cfg: &Config) -> Result<Self> {
        let w = record.words.len();
        if word_ctx.vectors.rows() != w {
            return Err(Error::Load {
                id: record.id.clone(),
                msg: format!("{} context rows for {w} words", word_ctx.vectors.rows()),
            });
        }
        let mut ids = Vec::with_capacity(record.phonemes.len());
        for p in &record.phonemes {
            ids.push(cfg.model.phoneme_id(p).map_err(|e| Error::Load {
                id: record.id.clone(),
                msg: e.to_string(),
            })?);
        }
        let phonemes = PhonemeSequence {
            ids,
            word_to_phoneme_spans: record.word_to_phoneme_spans.clone(),
        };

        let durations = record.features.phoneme_durations.clone();
        let mut pitch = Vec::with_capacity(durations.len());
        let mut energy = Vec::with_capacity(durations.len());
        let mut frame = 0;
        for &d in &durations {
            let hi = frame + d;
            let f0s = &record.features.f0_hz[frame..hi];
            let voiced: Vec<f64> = f0s.iter().cloned().filter(|&v| v > 0.0).collect();
            pitch.push(if voiced.is_empty() {
                0.0
            } else {
                voiced.iter().map(|v| v.ln()).sum::<f64>() / voiced.len() as f64
            });
            let es = &record.features.energy[frame..hi];
            energy.push(if es.is_empty() { 0.0 } else { es.iter().sum::<f64>() / es.len() as f64 });
            frame = hi;
        }

        Ok(TrainExample {
            id: record.id.clone(),
            speaker_id: record.speaker_id,
            word_ctx,
            punct_flags: record.punct_flags(),
            pause_labels: record.pause_labels.values(),
            phonemes,
            targets: VarianceTargets { duration_frames: durations, pitch, energy },
            mel: record.features.mel.clone(),
        })
    }
}

/// Teacher-forced forward pass output handed to the loss.
pub struct TrainForward {
    pub mel_pred: NodeId,
    /// Absent when the phrasing structure encoder is ablated.
    pub pause_logits: Option<NodeId>,
    pub variance: VarianceOut,
}

/// Inference output of the full pipeline.
#[derive(Clone, Debug)]
pub struct SynthesisOutput {
    pub mel: Mat,
    pub pause_classes: Vec<u8>,
    pub durations: Vec<usize>,
    pub segments: SegmentMap,
    /// Frame-level F0 proxy expanded from phoneme-level pitch predictions.
    pub f0_hz: Vec<f64>,
    /// Frame-level energy proxy expanded the same way.
    pub energy: Vec<f64>,
}

/// Text-side inference input: words, flags, phonemes and context.
#[derive(Clone, Debug)]
pub struct TextBundle {
    pub words: Vec<String>,
    pub punct_flags: Vec<bool>,
    pub phonemes: PhonemeSequence,
    pub word_ctx: WordContext,
}

impl TextBundle {
    pub fn validate(&self) -> Result<()> {
        let w = self.words.len();
        if w == 0 {
            return Err(Error::InvalidInput("empty word sequence".into()));
        }
        if self.punct_flags.len() != w
            || self.word_ctx.vectors.rows() != w
            || self.phonemes.word_to_phoneme_spans.len() != w
        {
            return Err(Error::InvalidInput(format!(
                "inconsistent bundle: {w} words, {} flags, {} context rows, {} spans",
                self.punct_flags.len(),
                self.word_ctx.vectors.rows(),
                self.phonemes.word_to_phoneme_spans.len()
            )));
        }
        Ok(())
    }
}

impl Model {
    pub fn new(cfg: &Config, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = crate::params::ParamStore::new();
        let phrasing = PhrasingEncoder::new(&mut params, &cfg.model, &mut rng);
        let pause_word = PauseWordEncoder::new(&mut params, &cfg.model, &mut rng);
        let phoneme_enc = PhonemeEncoder::new(&mut params, &cfg.model, &mut rng);
        let variance = VarianceAdaptor::new(&mut params, &cfg.model, &mut rng);
        let decoder = MelDecoder::new(&mut params, &cfg.model, &mut rng);
        let n_gen = params.len();
        let discriminator = Discriminator::new(&mut params, cfg.model.n_mels, &cfg.adv, &mut rng);
        let gen_ids = (0..n_gen).map(crate::params::ParamId).collect();
        let disc_ids = (n_gen..params.len()).map(crate::params::ParamId).collect();
        Ok(Model {
            cfg: cfg.clone(),
            params,
            gen_ids,
            disc_ids,
            phrasing,
            pause_word,
            phoneme_enc,
            variance,
            decoder,
            discriminator,
        })
    }

    /// SHA-256 over all parameters (generator and discriminator).
    pub fn params_hash(&self) -> String {
        self.params.hash_hex()
    }

    /// Hash of the discriminator parameters alone.
    pub fn disc_hash(&self) -> String {
        self.params.hash_subset(self.disc_ids.iter().copied())
    }

    /// Word-level path shared by training and inference. Returns the
    /// word representation ready for fusion plus the classes used for
    /// segmentation and the segment map.
    fn word_path(
        &self,
        g: &mut Graph,
        word_ctx: &WordContext,
        speaker_id: usize,
        punct_flags: &[bool],
        classes: &[u8],
    ) -> Result<(NodeId, SegmentMap)> {
        let toggles = &self.cfg.train;
        let fused = if toggles.use_ps_encoder {
            let syn = self.phrasing.encode_syntactic(g, word_ctx, speaker_id, None)?;
            self.phrasing.apply_pause_embedding(g, syn, classes, None)?
        } else {
            // ablated: projected pooled context (plus speaker row) directly
            self.phrasing.project_context(g, word_ctx, speaker_id)?
        };

        let seg = segment_words(&PauseLabelSequence::from_values(classes)?, punct_flags)?;

        let word_out = if toggles.use_pw_encoder {
            let pooled = segment_average_pool(g, fused, &seg)?;
            let pe = segment_position_embedding(&seg, self.cfg.model.d_model)?;
            let pe = g.constant(pe);
            self.pause_word.encode(g, fused, pooled, pe, None)?
        } else {
            fused
        };
        Ok((word_out, seg))
    }

    /// Teacher-forced training forward: ground-truth pause labels feed the
    /// pause embedding and segmentation; ground-truth durations drive
    /// length regulation.
    pub fn forward_train(&self, g: &mut Graph, ex: &TrainExample) -> Result<TrainForward> {
        let use_ps = self.cfg.train.use_ps_encoder;

        let pause_logits = if use_ps {
            let syn = self.phrasing.encode_syntactic(g, &ex.word_ctx, ex.speaker_id, None)?;
            Some(self.phrasing.predict_pauses(g, syn, None)?)
        } else {
            None
        };

        let classes: Vec<u8> = if use_ps {
            ex.pause_labels.clone()
        } else {
            vec![0; ex.word_ctx.vectors.rows()]
        };
        let (word_out, _seg) =
            self.word_path(g, &ex.word_ctx, ex.speaker_id, &ex.punct_flags, &classes)?;

        let ph_out = self.phoneme_enc.forward(g, &ex.phonemes, None)?;
        let fused_ph =
            fuse_word_to_phoneme(g, word_out, &ex.phonemes.word_to_phoneme_spans, ph_out)?;
        let variance = self.variance.forward(g, fused_ph, Some(&ex.targets))?;
        let mel_pred = self.decoder.forward(g, variance.frame_reps, None);
        Ok(TrainForward { mel_pred, pause_logits, variance })
    }

    /// Full inference: context -> syntactic encoding -> predicted pauses
    /// (or an override) -> segmentation -> pause-based word encoding ->
    /// fusion -> variance adaptor -> decoder.
    pub fn synthesize(
        &self,
        bundle: &TextBundle,
        speaker_id: usize,
        pause_override: Option<&[u8]>,
    ) -> Result<SynthesisOutput> {
        bundle.validate()?;
        if speaker_id >= self.cfg.model.n_speakers {
            return Err(Error::InvalidInput(format!(
                "speaker {speaker_id} unknown; valid speakers are 0..{}",
                self.cfg.model.n_speakers
            )));
        }
        let w = bundle.words.len();
        if let Some(p) = pause_override {
            if p.len() != w {
                return Err(Error::InvalidInput(format!(
                    "pause override has {} entries for {w} words",
                    p.len()
                )));
            }
        }

        let mut g = Graph::eval(&self.params);
        let use_ps = self.cfg.train.use_ps_encoder;

        let classes: Vec<u8> = match pause_override {
            Some(p) => {
                for &c in p {
                    crate::ingest::PauseClass::from_value(c)?;
                }
                p.to_vec()
            }
            None if use_ps => {
                let syn =
                    self.phrasing.encode_syntactic(&mut g, &bundle.word_ctx, speaker_id, None)?;
                let logits = self.phrasing.predict_pauses(&mut g, syn, None)?;
                argmax_pauses(g.value(logits), None)
            }
            None => vec![0; w],
        };

        let (word_out, seg) =
            self.word_path(&mut g, &bundle.word_ctx, speaker_id, &bundle.punct_flags, &classes)?;
        let ph_out = self.phoneme_enc.forward(&mut g, &bundle.phonemes, None)?;
        let fused_ph = fuse_word_to_phoneme(
            &mut g,
            word_out,
            &bundle.phonemes.word_to_phoneme_spans,
            ph_out,
        )?;
        let variance = self.variance.forward(&mut g, fused_ph, None)?;
        let mel_node = self.decoder.forward(&mut g, variance.frame_reps, None);
        let mel = g.value(mel_node).clone();

        // frame-level F0/energy proxies from the phoneme-level predictions
        let pitch = g.value(variance.pitch_pred).data().to_vec();
        let energy = g.value(variance.energy_pred).data().to_vec();
        let mut f0 = Vec::with_capacity(mel.rows());
        let mut en = Vec::with_capacity(mel.rows());
        for (p, &d) in variance.durations_used.iter().enumerate() {
            let hz = if pitch[p] > 0.5 { pitch[p].exp() } else { 0.0 };
            for _ in 0..d {
                f0.push(hz);
                en.push(energy[p]);
            }
        }

        debug_assert_eq!(mel.rows(), variance.durations_used.iter().sum::<usize>());
        Ok(SynthesisOutput {
            mel,
            pause_classes: classes,
            durations: variance.durations_used,
            segments: seg,
            f0_hz: f0,
            energy: en,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    fn tiny_setup() -> (Config, Model, Vec<TrainExample>) {
        let mut cfg = Config::tiny();
        cfg.model.fft_blocks = 1;
        let model = Model::new(&cfg, 7).unwrap();
        let corpus = synthetic::generate_corpus(&cfg, 3, 11);
        let examples = synthetic::to_examples(&corpus, &cfg).unwrap();
        (cfg, model, examples)
    }

    #[test]
    fn forward_train_shapes_match_targets() {
        let (_, model, examples) = tiny_setup();
        for ex in &examples {
            let mut g = Graph::eval(&model.params);
            let out = model.forward_train(&mut g, ex).unwrap();
            let frames: usize = ex.targets.duration_frames.iter().sum();
            assert_eq!(g.value(out.mel_pred).shape(), (frames, model.cfg.model.n_mels));
            assert_eq!(frames, ex.mel.rows());
            let logits = out.pause_logits.unwrap();
            assert_eq!(g.value(logits).shape(), (ex.word_ctx.vectors.rows(), 4));
        }
    }

    #[test]
    fn ablation_toggles_keep_shapes_valid() {
        let (cfg, _, examples) = tiny_setup();
        for (ps, pw) in [(false, true), (true, false), (false, false)] {
            let mut cfg2 = cfg.clone();
            cfg2.train.use_ps_encoder = ps;
            cfg2.train.use_pw_encoder = pw;
            let model = Model::new(&cfg2, 7).unwrap();
            let ex = &examples[0];
            let mut g = Graph::eval(&model.params);
            let out = model.forward_train(&mut g, ex).unwrap();
            assert_eq!(g.value(out.mel_pred).rows(), ex.mel.rows());
            assert_eq!(out.pause_logits.is_some(), ps);

            let bundle = synthetic::bundle_from_example(ex);
            let synth = model.synthesize(&bundle, ex.speaker_id, None).unwrap();
            assert_eq!(synth.mel.rows(), synth.durations.iter().sum::<usize>());
        }
    }

    #[test]
    fn synthesize_is_deterministic_and_respects_overrides() {
        let (_, model, examples) = tiny_setup();
        let ex = &examples[0];
        let bundle = synthetic::bundle_from_example(ex);
        let a = model.synthesize(&bundle, ex.speaker_id, None).unwrap();
        let b = model.synthesize(&bundle, ex.speaker_id, None).unwrap();
        assert_eq!(a.mel, b.mel);
        assert_eq!(a.pause_classes, b.pause_classes);
        assert_eq!(a.mel.rows(), a.durations.iter().sum::<usize>());

        let w = bundle.words.len();
        let zeros = vec![0u8; w];
        let threes = vec![3u8; w];
        let no_pause = model.synthesize(&bundle, ex.speaker_id, Some(&zeros)).unwrap();
        let all_long = model.synthesize(&bundle, ex.speaker_id, Some(&threes)).unwrap();
        // punctuation-free bundle: all-zero classes give one segment,
        // all-long gives one segment per word
        if !bundle.punct_flags.iter().any(|&p| p) {
            assert_eq!(no_pause.segments.len(), 1);
            assert_eq!(all_long.segments.len(), w);
        }
        assert_ne!(no_pause.mel, all_long.mel);

        let bad = model.synthesize(&bundle, ex.speaker_id, Some(&vec![0u8; w + 1]));
        assert!(bad.is_err());
        let unknown_spk = model.synthesize(&bundle, 99, None);
        let msg = unknown_spk.unwrap_err().to_string();
        assert!(msg.contains("0.."), "{msg}");
    }

    #[test]
    fn seed_determines_init() {
        let cfg = Config::tiny();
        let a = Model::new(&cfg, 3).unwrap();
        let b = Model::new(&cfg, 3).unwrap();
        let c = Model::new(&cfg, 4).unwrap();
        assert_eq!(a.params_hash(), b.params_hash());
        assert_ne!(a.params_hash(), c.params_hash());
    }
}
