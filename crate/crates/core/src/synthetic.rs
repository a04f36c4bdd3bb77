//! Deterministic synthetic corpus for tests, benchmarks and demos.
//!
//! Utterances are built from a tiny word vocabulary. Every structural
//! quantity follows a fixed rule so a model can actually learn it:
//!
//! - the pause class after a word is a function of the word itself
//!   (gap durations 50/200/500/800 ms for classes 0..3),
//! - mel rows are a smooth function of phoneme identity, within-phoneme
//!   progress and speaker, kept inside [0, 1] (unit-normalized targets),
//! - F0 is constant per phoneme (speaker-offset), zero on unvoiced ones,
//! - energy is the mel row mean.
//!
//! Frame durations per phoneme sum exactly to the mel frame count, and
//! word gap timing mirrors the pause-class rule, so generated records pass
//! every corpus invariant by construction.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::context::fallback_word_context;
use crate::ingest::{
    compute_pause_labels, AcousticFeatures, ManifestLine, ManifestWord, UtteranceRecord, WordToken,
};
use crate::model::{TextBundle, TrainExample};
use crate::pst;
use crate::tensor::Mat;
use crate::{acoustic::PhonemeSequence, Result};

/// Word vocabulary; the pause class after word i is `i % 4`.
pub const WORDS: [&str; 8] = ["bola", "tiva", "ruma", "seke", "lopu", "nadi", "gemo", "wuri"];

/// Gap in seconds for each pause class, comfortably inside its bin.
pub const GAP_S: [f64; 4] = [0.05, 0.2, 0.5, 0.8];

/// Pause-class rule: the label after a word depends only on the word.
pub fn rule_class(word: &str) -> u8 {
    (WORDS.iter().position(|&w| w == word).unwrap_or(0) % 4) as u8
}

fn phones_for_word(word_idx: usize) -> Vec<usize> {
    // three phoneme ids per word, spread over a small range
    vec![1 + word_idx, 9 + (word_idx * 3) % 8, 17 + (word_idx * 5) % 8]
}

fn mel_value(phone_id: usize, progress: f64, bin: usize, n_mels: usize, speaker: usize) -> f64 {
    let x = phone_id as f64 * 1.7 + bin as f64 * 7.0 / n_mels as f64
        + progress * 2.0
        + speaker as f64 * 0.9;
    0.5 + 0.45 * x.sin()
}

fn voiced(phone_id: usize) -> bool {
    phone_id % 4 != 0
}

/// Generate `n` consistent utterance records.
pub fn generate_corpus(cfg: &Config, n: usize, seed: u64) -> Vec<UtteranceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_mels = cfg.model.n_mels;
    let sr = 24_000u32;
    let hop = 256usize;
    let hop_s = hop as f64 / sr as f64;

    (0..n)
        .map(|u| {
            let speaker = u % cfg.model.n_speakers;
            let n_words = rng.gen_range(4..=5);
            let word_idxs: Vec<usize> = (0..n_words).map(|_| rng.gen_range(0..WORDS.len())).collect();

            let mut words = Vec::new();
            let mut phoneme_ids = Vec::new();
            let mut spans = Vec::new();
            let mut durations = Vec::new();
            let mut t = 0.0f64;
            for (wi, &word_idx) in word_idxs.iter().enumerate() {
                let phones = phones_for_word(word_idx);
                let lo = phoneme_ids.len();
                let mut word_frames = 0usize;
                for &p in &phones {
                    let d = rng.gen_range(3..=5usize);
                    durations.push(d);
                    word_frames += d;
                    phoneme_ids.push(p);
                }
                spans.push((lo, phoneme_ids.len()));
                let dur_s = word_frames as f64 * hop_s;
                let punct = wi + 1 < n_words && rng.gen_bool(0.2);
                words.push(WordToken {
                    text: WORDS[word_idx].to_string(),
                    is_punctuation_final: punct,
                    phonemes: phones
                        .iter()
                        .map(|&p| cfg.model.phoneme_vocab[p].clone())
                        .collect(),
                    start_s: t,
                    end_s: t + dur_s,
                });
                t += dur_s + GAP_S[rule_class(WORDS[word_idx]) as usize];
            }
            let utt_end = t;

            let total_frames: usize = durations.iter().sum();
            let mut mel = Mat::zeros(total_frames, n_mels);
            let mut f0 = Vec::with_capacity(total_frames);
            let mut energy = Vec::with_capacity(total_frames);
            let mut frame = 0;
            for (pi, &d) in durations.iter().enumerate() {
                let phone = phoneme_ids[pi];
                for k in 0..d {
                    let progress = k as f64 / d as f64;
                    let row = mel.row_mut(frame);
                    let mut sum = 0.0;
                    for (b, slot) in row.iter_mut().enumerate() {
                        *slot = mel_value(phone, progress, b, n_mels, speaker);
                        sum += *slot;
                    }
                    energy.push(sum / n_mels as f64);
                    f0.push(if voiced(phone) {
                        110.0 + 10.0 * phone as f64 + 30.0 * speaker as f64
                    } else {
                        0.0
                    });
                    frame += 1;
                }
            }

            let features = AcousticFeatures {
                mel,
                f0_hz: f0,
                energy,
                phoneme_durations: durations,
                sample_rate: sr,
                hop_length: hop,
            };
            let pause_labels = compute_pause_labels(&words, utt_end).expect("consistent by construction");
            let phonemes = words.iter().flat_map(|w| w.phonemes.iter().cloned()).collect();
            let text = words.iter().map(|w| w.text.clone()).collect::<Vec<_>>().join(" ");
            UtteranceRecord {
                id: format!("synth_{u:03}"),
                speaker_id: speaker,
                text,
                words,
                pause_labels,
                features,
                word_to_phoneme_spans: spans,
                phonemes,
                utt_end_s: utt_end,
            }
        })
        .collect()
}

/// Attach fallback context and derive variance targets for every record.
pub fn to_examples(records: &[UtteranceRecord], cfg: &Config) -> Result<Vec<TrainExample>> {
    records
        .iter()
        .map(|r| {
            let texts: Vec<String> = r.words.iter().map(|w| w.text.clone()).collect();
            let ctx = fallback_word_context(&texts, cfg.model.d_ctx, cfg.data.fallback_ctx_seed);
            TrainExample::from_record(r, ctx, cfg)
        })
        .collect()
}

/// Inference bundle reusing an example's context and phonemes.
pub fn bundle_from_example(ex: &TrainExample) -> TextBundle {
    TextBundle {
        words: (0..ex.word_ctx.vectors.rows()).map(|i| format!("w{i}")).collect(),
        punct_flags: ex.punct_flags.clone(),
        phonemes: ex.phonemes.clone(),
        word_ctx: ex.word_ctx.clone(),
    }
}

/// Write a corpus to disk as feature tensors plus a JSONL manifest;
/// returns the manifest path.
pub fn write_corpus(records: &[UtteranceRecord], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir.display().to_string(), e))?;
    let mut lines = Vec::with_capacity(records.len());
    for r in records {
        let feat_rel = format!("feats/{}.pst", r.id);
        let feat_path = dir.join(&feat_rel);
        pst::write(&feat_path, &pst::PstTensor::from_mat(&r.features.mel))?;
        pst::write(
            &crate::ingest::sibling_path(&feat_path, "f0"),
            &pst::PstTensor::from_vec1(&r.features.f0_hz),
        )?;
        pst::write(
            &crate::ingest::sibling_path(&feat_path, "energy"),
            &pst::PstTensor::from_vec1(&r.features.energy),
        )?;
        let durs: Vec<f64> = r.features.phoneme_durations.iter().map(|&d| d as f64).collect();
        pst::write(&crate::ingest::sibling_path(&feat_path, "dur"), &pst::PstTensor::from_vec1(&durs))?;
        lines.push(ManifestLine {
            id: r.id.clone(),
            speaker: r.speaker_id,
            text: r.text.clone(),
            words: r
                .words
                .iter()
                .map(|w| ManifestWord {
                    w: w.text.clone(),
                    punct: w.is_punctuation_final,
                    phones: w.phonemes.clone(),
                    start: w.start_s,
                    end: w.end_s,
                })
                .collect(),
            features: feat_rel,
            utt_end: r.utt_end_s,
            pauses: None,
        });
    }
    let manifest = dir.join("manifest.jsonl");
    pst::atomic_write(&manifest, crate::ingest::manifest_to_string(&lines).as_bytes())?;
    Ok(manifest)
}

/// Phoneme sequence of a record under a config's vocabulary.
pub fn phoneme_sequence(r: &UtteranceRecord, cfg: &Config) -> Result<PhonemeSequence> {
    let ids = r
        .phonemes
        .iter()
        .map(|p| cfg.model.phoneme_id(p))
        .collect::<Result<Vec<_>>>()?;
    Ok(PhonemeSequence { ids, word_to_phoneme_spans: r.word_to_phoneme_spans.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_consistent_and_deterministic() {
        let cfg = Config::tiny();
        let a = generate_corpus(&cfg, 4, 9);
        let b = generate_corpus(&cfg, 4, 9);
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.features.mel, y.features.mel);
            assert_eq!(x.pause_labels, y.pause_labels);
        }
        for r in &a {
            r.features.validate(r.phonemes.len()).unwrap();
            // labels follow the word rule
            for (w, lbl) in r.words.iter().zip(&r.pause_labels.0) {
                assert_eq!(lbl.value(), rule_class(&w.text), "word {}", w.text);
            }
            // unit-normalized targets
            assert!(r.features.mel.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn written_corpus_loads_back_identically() {
        let cfg = Config::tiny();
        let recs = generate_corpus(&cfg, 3, 5);
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_corpus(&recs, dir.path()).unwrap();
        let loaded = crate::ingest::load_manifest(&manifest, Some(cfg.model.n_speakers)).unwrap();
        assert_eq!(loaded.len(), 3);
        for (orig, back) in recs.iter().zip(&loaded) {
            assert_eq!(orig.id, back.id);
            assert_eq!(orig.pause_labels, back.pause_labels);
            assert_eq!(orig.features.phoneme_durations, back.features.phoneme_durations);
            // mel roundtrips through f32
            for (a, b) in orig.features.mel.data().iter().zip(back.features.mel.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn examples_have_matching_shapes() {
        let cfg = Config::tiny();
        let recs = generate_corpus(&cfg, 2, 3);
        let exs = to_examples(&recs, &cfg).unwrap();
        for (r, e) in recs.iter().zip(&exs) {
            assert_eq!(e.word_ctx.vectors.rows(), r.words.len());
            assert_eq!(e.word_ctx.vectors.cols(), cfg.model.d_ctx);
            assert_eq!(e.targets.duration_frames.iter().sum::<usize>(), r.features.frames());
            assert_eq!(e.targets.pitch.len(), r.phonemes.len());
        }
    }
}
