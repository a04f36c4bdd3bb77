//! Corpus loading: manifest parsing, pause labeling, feature validation.
//!
//! A training corpus is a JSON Lines manifest; each line references one
//! utterance's feature tensors on disk:
//!
//! ```json
//! {"id": "u1", "speaker": 0, "text": "hi there",
//!  "words": [{"w": "hi", "punct": false, "phones": ["HH", "AY"],
//!             "start": 0.0, "end": 0.22}, ...],
//!  "features": "feats/u1.pst", "utt_end": 1.31}
//! ```
//!
//! `features` names the mel tensor; the F0 track, energy curve and
//! per-phoneme frame durations live in sibling files `<base>.f0.pst`,
//! `<base>.energy.pst` and `<base>.dur.pst`. An optional `"pauses"` array
//! overrides the pause labels otherwise derived from word timing (used for
//! synthesized utterances, which have no silence gaps of their own).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::pst;
use crate::tensor::Mat;
use crate::{Error, Result};

/// Word-gap tolerance in seconds; anything more negative is an overlap.
const OVERLAP_EPS: f64 = 1e-9;

/// Four-class pause taxonomy over the silence duration after a word.
///
/// Boundaries are 100/300/700 ms, lower-inclusive: `[0,100)` no pause,
/// `[100,300)` short, `[300,700)` medium, `[700,inf)` long. Medium and
/// long pauses are the intentional ones that delimit segments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PauseClass {
    No = 0,
    Short = 1,
    Medium = 2,
    Long = 3,
}

impl PauseClass {
    pub fn value(self) -> u8 {
        self as u8
    }

    pub fn from_value(v: u8) -> Result<Self> {
        match v {
            0 => Ok(PauseClass::No),
            1 => Ok(PauseClass::Short),
            2 => Ok(PauseClass::Medium),
            3 => Ok(PauseClass::Long),
            other => Err(Error::InvalidInput(format!("pause class {other} outside 0..=3"))),
        }
    }

    /// Medium and long pauses are intentional; short is unintentional.
    pub fn is_intentional(self) -> bool {
        matches!(self, PauseClass::Medium | PauseClass::Long)
    }

    pub const ALL: [PauseClass; 4] =
        [PauseClass::No, PauseClass::Short, PauseClass::Medium, PauseClass::Long];
}

/// Map a silence duration in milliseconds to its pause class.
pub fn classify_pause(duration_ms: f64) -> Result<PauseClass> {
    if !duration_ms.is_finite() || duration_ms < 0.0 {
        return Err(Error::InvalidInput(format!(
            "pause duration must be finite and non-negative, got {duration_ms}"
        )));
    }
    Ok(if duration_ms < 100.0 {
        PauseClass::No
    } else if duration_ms < 300.0 {
        PauseClass::Short
    } else if duration_ms < 700.0 {
        PauseClass::Medium
    } else {
        PauseClass::Long
    })
}

/// One pause class per word; entry `i` labels the silence after word `i`,
/// the last entry labels trailing silence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PauseLabelSequence(pub Vec<PauseClass>);

impl PauseLabelSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> Vec<u8> {
        self.0.iter().map(|c| c.value()).collect()
    }

    pub fn from_values(vals: &[u8]) -> Result<Self> {
        Ok(PauseLabelSequence(vals.iter().map(|&v| PauseClass::from_value(v)).collect::<Result<_>>()?))
    }
}

#[derive(Clone, Debug)]
pub struct WordToken {
    pub text: String,
    /// Word ends with a mark from the configured punctuation set, or is a
    /// punctuation-only token.
    pub is_punctuation_final: bool,
    pub phonemes: Vec<String>,
    pub start_s: f64,
    pub end_s: f64,
}

impl WordToken {
    fn validate(&self) -> Result<()> {
        if !(self.start_s.is_finite() && self.end_s.is_finite()) || self.end_s < self.start_s {
            return Err(Error::InvalidAlignment(format!(
                "word '{}' has span [{}, {}]",
                self.text, self.start_s, self.end_s
            )));
        }
        if self.phonemes.is_empty() && !self.is_punctuation_final {
            return Err(Error::InvalidInput(format!(
                "word '{}' has no phonemes and is not punctuation-only",
                self.text
            )));
        }
        Ok(())
    }
}

/// Derive per-word pause labels from forced-alignment word timing.
///
/// `labels[i]` classifies the gap before word `i+1`; the final label
/// classifies trailing silence up to `utterance_end_s`.
pub fn compute_pause_labels(words: &[WordToken], utterance_end_s: f64) -> Result<PauseLabelSequence> {
    if words.is_empty() {
        return Err(Error::InvalidInput("cannot label an empty word sequence".into()));
    }
    let mut labels = Vec::with_capacity(words.len());
    for pair in words.windows(2) {
        let gap = pair[1].start_s - pair[0].end_s;
        if gap < -OVERLAP_EPS {
            return Err(Error::InvalidAlignment(format!(
                "words '{}' and '{}' overlap by {:.6} s",
                pair[0].text,
                pair[1].text,
                -gap
            )));
        }
        labels.push(classify_pause(1000.0 * gap.max(0.0))?);
    }
    let trailing = utterance_end_s - words.last().unwrap().end_s;
    if trailing < -OVERLAP_EPS {
        return Err(Error::InvalidAlignment(format!(
            "utterance end {utterance_end_s} precedes last word end"
        )));
    }
    labels.push(classify_pause(1000.0 * trailing.max(0.0))?);
    Ok(PauseLabelSequence(labels))
}

#[derive(Clone, Debug)]
pub struct AcousticFeatures {
    /// frames x n_mels
    pub mel: Mat,
    /// Per-frame fundamental frequency in Hz, 0 on unvoiced frames.
    pub f0_hz: Vec<f64>,
    /// Per-frame spectral magnitude norm.
    pub energy: Vec<f64>,
    /// Frames per phoneme, summing to the mel frame count.
    pub phoneme_durations: Vec<usize>,
    pub sample_rate: u32,
    pub hop_length: usize,
}

impl AcousticFeatures {
    pub fn frames(&self) -> usize {
        self.mel.rows()
    }

    /// Total duration in seconds implied by the frame count.
    pub fn duration_s(&self) -> f64 {
        self.frames() as f64 * self.hop_length as f64 / self.sample_rate as f64
    }

    pub fn validate(&self, n_phonemes: usize) -> Result<()> {
        let frames = self.frames();
        let dur_sum: usize = self.phoneme_durations.iter().sum();
        if dur_sum != frames {
            return Err(Error::InvalidInput(format!(
                "phoneme durations sum to {dur_sum} but mel has {frames} frames"
            )));
        }
        if self.phoneme_durations.len() != n_phonemes {
            return Err(Error::InvalidInput(format!(
                "{} durations for {} phonemes",
                self.phoneme_durations.len(),
                n_phonemes
            )));
        }
        if self.f0_hz.len() != frames || self.energy.len() != frames {
            return Err(Error::InvalidInput(format!(
                "f0/energy lengths {}/{} do not match {frames} frames",
                self.f0_hz.len(),
                self.energy.len()
            )));
        }
        if self.f0_hz.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::InvalidInput("f0 must be finite and non-negative".into()));
        }
        if !self.mel.is_finite() || self.energy.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("acoustic features".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct UtteranceRecord {
    pub id: String,
    pub speaker_id: usize,
    pub text: String,
    pub words: Vec<WordToken>,
    pub pause_labels: PauseLabelSequence,
    pub features: AcousticFeatures,
    /// Per-word contiguous [start, end) into the flattened phoneme list;
    /// empty for punctuation-only words.
    pub word_to_phoneme_spans: Vec<(usize, usize)>,
    /// Flattened phoneme symbols across all words.
    pub phonemes: Vec<String>,
    pub utt_end_s: f64,
}

impl UtteranceRecord {
    pub fn punct_flags(&self) -> Vec<bool> {
        self.words.iter().map(|w| w.is_punctuation_final).collect()
    }
}

/// On-disk manifest line (JSON).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestLine {
    pub id: String,
    pub speaker: usize,
    pub text: String,
    pub words: Vec<ManifestWord>,
    pub features: String,
    pub utt_end: f64,
    /// Optional explicit pause labels (e.g. the predicted classes of a
    /// synthesized utterance); otherwise labels come from word timing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pauses: Option<Vec<u8>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestWord {
    pub w: String,
    #[serde(default)]
    pub punct: bool,
    pub phones: Vec<String>,
    pub start: f64,
    pub end: f64,
}

/// Sibling tensor path: `feats/u1.pst` + "f0" -> `feats/u1.f0.pst`.
pub fn sibling_path(features: &Path, tag: &str) -> PathBuf {
    let stem = features
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = stem.strip_suffix(".pst").unwrap_or(&stem);
    features.with_file_name(format!("{stem}.{tag}.pst"))
}

fn load_err(id: &str, msg: impl Into<String>) -> Error {
    Error::Load { id: id.to_string(), msg: msg.into() }
}

/// Load and validate every record of a JSONL manifest.
///
/// `expected_speakers`, when given, bounds speaker ids. Feature paths are
/// resolved relative to the manifest's directory.
pub fn load_manifest(path: &Path, expected_speakers: Option<usize>) -> Result<Vec<UtteranceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestLine = serde_json::from_str(line).map_err(|e| {
            Error::format(path.display().to_string(), format!("line {}: {e}", lineno + 1))
        })?;
        records.push(load_record(&entry, base, expected_speakers)?);
    }
    Ok(records)
}

pub fn load_record(
    entry: &ManifestLine,
    base: &Path,
    expected_speakers: Option<usize>,
) -> Result<UtteranceRecord> {
    let id = &entry.id;
    if let Some(n) = expected_speakers {
        if entry.speaker >= n {
            return Err(load_err(id, format!("speaker {} outside configured count {n}", entry.speaker)));
        }
    }
    if entry.words.is_empty() {
        return Err(load_err(id, "no words"));
    }

    let mut words = Vec::with_capacity(entry.words.len());
    let mut spans = Vec::with_capacity(entry.words.len());
    let mut phonemes = Vec::new();
    for w in &entry.words {
        let start = phonemes.len();
        phonemes.extend(w.phones.iter().cloned());
        spans.push((start, phonemes.len()));
        let token = WordToken {
            text: w.w.clone(),
            is_punctuation_final: w.punct,
            phonemes: w.phones.clone(),
            start_s: w.start,
            end_s: w.end,
        };
        token.validate().map_err(|e| load_err(id, e.to_string()))?;
        words.push(token);
    }

    let feat_path = base.join(&entry.features);
    let mel = pst::read(&feat_path)?
        .to_mat()
        .map_err(|e| load_err(id, format!("mel: {e}")))?;
    let f0 = pst::read(&sibling_path(&feat_path, "f0"))?
        .to_vec1()
        .map_err(|e| load_err(id, format!("f0: {e}")))?;
    let energy = pst::read(&sibling_path(&feat_path, "energy"))?
        .to_vec1()
        .map_err(|e| load_err(id, format!("energy: {e}")))?;
    let dur_raw = pst::read(&sibling_path(&feat_path, "dur"))?
        .to_vec1()
        .map_err(|e| load_err(id, format!("durations: {e}")))?;
    let mut durations = Vec::with_capacity(dur_raw.len());
    for d in dur_raw {
        if d < 0.0 || d.fract() != 0.0 {
            return Err(load_err(id, format!("non-integer phoneme duration {d}")));
        }
        durations.push(d as usize);
    }

    let features = AcousticFeatures {
        mel,
        f0_hz: f0,
        energy,
        phoneme_durations: durations,
        sample_rate: 24_000,
        hop_length: 256,
    };
    features.validate(phonemes.len()).map_err(|e| load_err(id, e.to_string()))?;

    let pause_labels = match &entry.pauses {
        Some(vals) => {
            if vals.len() != words.len() {
                return Err(load_err(
                    id,
                    format!("{} pause labels for {} words", vals.len(), words.len()),
                ));
            }
            PauseLabelSequence::from_values(vals).map_err(|e| load_err(id, e.to_string()))?
        }
        None => compute_pause_labels(&words, entry.utt_end).map_err(|e| load_err(id, e.to_string()))?,
    };

    Ok(UtteranceRecord {
        id: id.clone(),
        speaker_id: entry.speaker,
        text: entry.text.clone(),
        words,
        pause_labels,
        features,
        word_to_phoneme_spans: spans,
        phonemes,
        utt_end_s: entry.utt_end,
    })
}

/// Serialize manifest lines to a JSONL string.
pub fn manifest_to_string(lines: &[ManifestLine]) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(&serde_json::to_string(l).expect("manifest serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn word(text: &str, start: f64, end: f64) -> WordToken {
        WordToken {
            text: text.into(),
            is_punctuation_final: false,
            phonemes: vec!["P".into()],
            start_s: start,
            end_s: end,
        }
    }

    /// Independent oracle: direct table lookup over the bin edges.
    fn table_oracle(ms: f64) -> u8 {
        const EDGES: [(f64, f64, u8); 4] = [
            (0.0, 100.0, 0),
            (100.0, 300.0, 1),
            (300.0, 700.0, 2),
            (700.0, f64::INFINITY, 3),
        ];
        for (lo, hi, class) in EDGES {
            if ms >= lo && ms < hi {
                return class;
            }
        }
        unreachable!()
    }

    #[test]
    fn classify_pause_boundary_probes() {
        for (ms, want) in [
            (50.0, 0u8),
            (0.0, 0),
            (450.0, 2),
            (700.0, 3),
            (299.999, 1),
            (99.9, 0),
            (100.0, 1),
            (299.9, 1),
            (300.0, 2),
            (699.9, 2),
            (10_000.0, 3),
        ] {
            assert_eq!(classify_pause(ms).unwrap().value(), want, "at {ms} ms");
            assert_eq!(table_oracle(ms), want, "oracle at {ms} ms");
        }
    }

    #[test]
    fn classify_pause_rejects_bad_input() {
        assert!(classify_pause(-1.0).is_err());
        assert!(classify_pause(f64::NAN).is_err());
        assert!(classify_pause(f64::INFINITY).is_err());
    }

    #[test]
    fn bins_partition_zero_to_two_seconds() {
        // sweep at 0.5 ms steps against the table oracle
        let mut ms = 0.0;
        while ms <= 2000.0 {
            assert_eq!(classify_pause(ms).unwrap().value(), table_oracle(ms));
            ms += 0.5;
        }
    }

    proptest! {
        #[test]
        fn classify_is_monotone(a in 0.0f64..5000.0, b in 0.0f64..5000.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(classify_pause(lo).unwrap() <= classify_pause(hi).unwrap());
        }
    }

    #[test]
    fn pause_labels_from_gaps() {
        // gaps 0.05 s and 0.45 s, zero trailing silence
        let words = vec![word("a", 0.0, 0.5), word("b", 0.55, 1.0), word("c", 1.45, 2.0)];
        let labels = compute_pause_labels(&words, 2.0).unwrap();
        assert_eq!(labels.values(), vec![0, 2, 0]);

        let one = vec![word("solo", 0.0, 1.0)];
        assert_eq!(compute_pause_labels(&one, 1.0).unwrap().values(), vec![0]);

        // boundary probes 0.1 / 0.3 / 0.7 s
        let words = vec![
            word("a", 0.0, 1.0),
            word("b", 1.1, 2.0),
            word("c", 2.3, 3.0),
            word("d", 3.7, 4.0),
        ];
        assert_eq!(compute_pause_labels(&words, 4.0).unwrap().values(), vec![1, 2, 3, 0]);
    }

    #[test]
    fn overlapping_words_rejected() {
        let words = vec![word("a", 0.0, 0.6), word("b", 0.5, 1.0)];
        assert!(matches!(
            compute_pause_labels(&words, 1.0),
            Err(Error::InvalidAlignment(_))
        ));
    }

    #[test]
    fn labels_are_local_to_adjacent_gaps() {
        let base = vec![
            word("a", 0.0, 0.4),
            word("b", 0.5, 0.9),
            word("c", 1.0, 1.4),
            word("d", 1.5, 1.9),
        ];
        let l0 = compute_pause_labels(&base, 2.0).unwrap();
        // move word 1 inside its slot: only labels 0 and 1 may change
        let mut moved = base.clone();
        moved[1].start_s = 0.45;
        moved[1].end_s = 0.95;
        let l1 = compute_pause_labels(&moved, 2.0).unwrap();
        for i in 2..4 {
            assert_eq!(l0.0[i], l1.0[i], "label {i} should be untouched");
        }
    }

    #[test]
    fn sibling_path_rewrites_extension() {
        assert_eq!(
            sibling_path(Path::new("x/u1.pst"), "f0"),
            PathBuf::from("x/u1.f0.pst")
        );
    }

    #[test]
    fn empty_manifest_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "\n").unwrap();
        assert!(load_manifest(&p, None).unwrap().is_empty());
    }

    fn write_fixture(dir: &Path, durations: &[f64], frames: usize) -> PathBuf {
        let mel = Mat::from_fn(frames, 4, |r, c| (r as f64 * 0.1 + c as f64 * 0.01).sin());
        pst::write(&dir.join("u1.pst"), &pst::PstTensor::from_mat(&mel)).unwrap();
        pst::write(
            &dir.join("u1.f0.pst"),
            &pst::PstTensor::from_vec1(&vec![120.0; frames]),
        )
        .unwrap();
        pst::write(
            &dir.join("u1.energy.pst"),
            &pst::PstTensor::from_vec1(&vec![0.5; frames]),
        )
        .unwrap();
        pst::write(&dir.join("u1.dur.pst"), &pst::PstTensor::from_vec1(durations)).unwrap();
        let line = ManifestLine {
            id: "u1".into(),
            speaker: 0,
            text: "ab cd".into(),
            words: vec![
                ManifestWord {
                    w: "ab".into(),
                    punct: false,
                    phones: vec!["A".into(), "B".into()],
                    start: 0.0,
                    end: 0.4,
                },
                ManifestWord {
                    w: "cd".into(),
                    punct: true,
                    phones: vec!["C".into(), "D".into()],
                    start: 0.5,
                    end: 0.9,
                },
            ],
            features: "u1.pst".into(),
            utt_end: 1.0,
            pauses: None,
        };
        let p = dir.join("m.jsonl");
        std::fs::write(&p, manifest_to_string(&[line])).unwrap();
        p
    }

    #[test]
    fn consistent_fixture_loads_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_fixture(dir.path(), &[3.0, 2.0, 4.0, 1.0], 10);
        let recs = load_manifest(&p, Some(2)).unwrap();
        assert_eq!(recs.len(), 1);
        let r = &recs[0];
        assert_eq!(r.features.phoneme_durations.iter().sum::<usize>(), r.features.frames());
        assert_eq!(r.word_to_phoneme_spans, vec![(0, 2), (2, 4)]);
        assert_eq!(r.pause_labels.values(), vec![1, 1]);
    }

    #[test]
    fn duration_sum_mismatch_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_fixture(dir.path(), &[3.0, 2.0, 4.0, 2.0], 10);
        let err = load_manifest(&p, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("u1"), "error should name the record: {msg}");
        assert!(msg.contains("11") || msg.contains("sum"), "error should describe the mismatch: {msg}");
    }

    #[test]
    fn speaker_bound_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_fixture(dir.path(), &[3.0, 2.0, 4.0, 1.0], 10);
        assert!(load_manifest(&p, Some(0)).is_err());
    }
}
