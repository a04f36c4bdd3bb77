//! Pause-based word encoder.
//!
//! Words are grouped into segments delimited by intentional pauses
//! (medium/long classes) and final punctuation, with the boundary word
//! attached to the preceding segment. The encoder input is the sum of
//! three same-shape components: the fused word representation, each
//! word's segment mean broadcast back to word resolution, and a sinusoidal
//! embedding of the word's offset within its segment. A stack of FFT
//! blocks encodes the sum.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::graph::{Graph, NodeId};
use crate::ingest::PauseLabelSequence;
use crate::nn::{mask_factors, sinusoid_rows, FftStack};
use crate::params::ParamStore;
use crate::tensor::Mat;
use crate::{Error, Result};

/// Ordered, contiguous, non-empty word ranges partitioning [0, W).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentMap {
    pub segments: Vec<(usize, usize)>,
}

impl SegmentMap {
    pub fn word_count(&self) -> usize {
        self.segments.last().map(|&(_, e)| e).unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Segment index of each word, one entry per word.
    pub fn word_to_segment(&self) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.word_count());
        for (s, &(lo, hi)) in self.segments.iter().enumerate() {
            idx.extend(std::iter::repeat(s).take(hi - lo));
        }
        idx
    }

    /// Offset of each word within its own segment (0 at segment starts).
    pub fn word_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.word_count());
        for &(lo, hi) in &self.segments {
            off.extend(0..hi - lo);
        }
        off
    }

    pub fn validate(&self) -> Result<()> {
        let mut cursor = 0;
        for &(lo, hi) in &self.segments {
            if lo != cursor || hi <= lo {
                return Err(Error::InvalidInput(format!(
                    "segments must be contiguous and non-empty; got [{lo}, {hi}) at {cursor}"
                )));
            }
            cursor = hi;
        }
        Ok(())
    }
}

/// Split the word sequence at intentional pauses and final punctuation;
/// the boundary word belongs to the segment it closes.
pub fn segment_words(classes: &PauseLabelSequence, punct_flags: &[bool]) -> Result<SegmentMap> {
    if classes.len() != punct_flags.len() {
        return Err(Error::Shape(format!(
            "{} pause classes vs {} punctuation flags",
            classes.len(),
            punct_flags.len()
        )));
    }
    let w = classes.len();
    let mut segments = Vec::new();
    let mut start = 0;
    for i in 0..w {
        if classes.0[i].is_intentional() || punct_flags[i] {
            segments.push((start, i + 1));
            start = i + 1;
        }
    }
    if start < w {
        segments.push((start, w));
    }
    Ok(SegmentMap { segments })
}

/// Broadcast segment means back to word resolution: every word receives
/// the arithmetic mean of its segment's rows.
pub fn segment_average_pool(g: &mut Graph, fused: NodeId, seg: &SegmentMap) -> Result<NodeId> {
    if g.value(fused).rows() != seg.word_count() {
        return Err(Error::Shape(format!(
            "{} rows for a {}-word segment map",
            g.value(fused).rows(),
            seg.word_count()
        )));
    }
    seg.validate()?;
    let pooled = g.span_mean_rows(fused, &seg.segments);
    Ok(g.gather_rows(pooled, &seg.word_to_segment()))
}

/// Sinusoidal embedding of each word's offset within its segment.
pub fn segment_position_embedding(seg: &SegmentMap, d_model: usize) -> Result<Mat> {
    if d_model % 2 != 0 {
        return Err(Error::Config(format!("d_model must be even for sinusoids, got {d_model}")));
    }
    Ok(sinusoid_rows(&seg.word_offsets(), d_model))
}

#[derive(Clone, Debug)]
pub struct PauseWordEncoder {
    fft: FftStack,
    d_model: usize,
}

impl PauseWordEncoder {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let fft = FftStack::new(
            ps,
            "pause_word.fft",
            cfg.fft_blocks,
            cfg.d_model,
            cfg.d_ff,
            cfg.ff_kernel,
            cfg.n_heads,
            cfg.rel_window,
            cfg.dropout,
            rng,
        );
        PauseWordEncoder { fft, d_model: cfg.d_model }
    }

    /// Sum the three components and encode; masked rows come out zero.
    pub fn encode(
        &self,
        g: &mut Graph,
        fused: NodeId,
        seg_pooled: NodeId,
        pos_emb: NodeId,
        mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        let shape = g.value(fused).shape();
        if shape.1 != self.d_model {
            return Err(Error::Config(format!(
                "pause-word encoder expects width {}, got {}",
                self.d_model, shape.1
            )));
        }
        for (name, n) in [("segment pooling", seg_pooled), ("position embedding", pos_emb)] {
            if g.value(n).shape() != shape {
                return Err(Error::Config(format!(
                    "{name} shape {:?} does not match fused {:?}",
                    g.value(n).shape(),
                    shape
                )));
            }
        }
        let sum = g.add(fused, seg_pooled);
        let mut sum = g.add(sum, pos_emb);
        if let Some(m) = mask {
            let f = mask_factors(m);
            sum = g.mul_row_mask(sum, &f);
        }
        Ok(self.fft.forward(g, sum, mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::PauseClass;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn labels(vals: &[u8]) -> PauseLabelSequence {
        PauseLabelSequence::from_values(vals).unwrap()
    }

    /// Independent oracle: linear scan applying the boundary rule.
    fn scan_oracle(classes: &[u8], punct: &[bool]) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 0..classes.len() {
            if classes[i] >= 2 || punct[i] {
                out.push((start, i + 1));
                start = i + 1;
            }
        }
        if start < classes.len() {
            out.push((start, classes.len()));
        }
        out
    }

    #[test]
    fn segmentation_examples() {
        let cls = [0, 0, 2, 0, 1, 3, 0];
        let punct = vec![false; 7];
        let seg = segment_words(&labels(&cls), &punct).unwrap();
        assert_eq!(seg.segments, vec![(0, 3), (3, 6), (6, 7)]);
        assert_eq!(seg.segments, scan_oracle(&cls, &punct));

        let seg = segment_words(&labels(&[0, 0, 0, 0]), &vec![false; 4]).unwrap();
        assert_eq!(seg.segments, vec![(0, 4)]);

        let seg = segment_words(&labels(&[0, 0, 0, 0]), &[false, true, false, false]).unwrap();
        assert_eq!(seg.segments, vec![(0, 2), (2, 4)]);
    }

    proptest! {
        #[test]
        fn segmentation_always_partitions(
            classes in proptest::collection::vec(0u8..4, 1..32),
            flip in proptest::collection::vec(any::<bool>(), 1..32),
        ) {
            let w = classes.len().min(flip.len());
            let classes = &classes[..w];
            let punct = &flip[..w];
            let seg = segment_words(&labels(classes), punct).unwrap();
            seg.validate().unwrap();
            prop_assert_eq!(seg.word_count(), w);
            prop_assert_eq!(&seg.segments, &scan_oracle(classes, punct));
            // offsets reset at every boundary: max offset == length - 1
            let offs = seg.word_offsets();
            for &(lo, hi) in &seg.segments {
                let max = offs[lo..hi].iter().max().unwrap();
                prop_assert_eq!(*max, hi - lo - 1);
                prop_assert_eq!(offs[lo], 0);
            }
        }
    }

    #[test]
    fn pooling_constant_segment_and_hand_mean() {
        let ps = ParamStore::new();
        let mut g = Graph::eval(&ps);
        let v = Mat::from_vec(3, 2, vec![1.5, -2.0, 1.5, -2.0, 1.5, -2.0]);
        let x = g.constant(v.clone());
        let seg = SegmentMap { segments: vec![(0, 3)] };
        let y = segment_average_pool(&mut g, x, &seg).unwrap();
        assert_eq!(g.value(y), &v);

        let x = g.constant(Mat::from_vec(2, 2, vec![2.0, 0.0, 0.0, 2.0]));
        let seg = SegmentMap { segments: vec![(0, 2)] };
        let y = segment_average_pool(&mut g, x, &seg).unwrap();
        assert_eq!(g.value(y), &Mat::from_vec(2, 2, vec![1.0, 1.0, 1.0, 1.0]));
    }

    #[test]
    fn pooling_matches_loop_oracle_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let w = 6;
            let cut = rng.gen_range(1..w);
            let seg = SegmentMap { segments: vec![(0, cut), (cut, w)] };
            let m = Mat::from_fn(w, 4, |_, _| rng.gen_range(-1.0..1.0));
            let ps = ParamStore::new();
            let mut g = Graph::eval(&ps);
            let x = g.constant(m.clone());
            let y = segment_average_pool(&mut g, x, &seg).unwrap();
            // brute-force mean oracle
            for (lo, hi) in seg.segments.iter().cloned() {
                for c in 0..4 {
                    let mut acc = 0.0;
                    for r in lo..hi {
                        acc += m.get(r, c);
                    }
                    let want = acc / (hi - lo) as f64;
                    for r in lo..hi {
                        assert!((g.value(y).get(r, c) - want).abs() < 1e-6);
                    }
                }
            }
            // pooling the pooled output returns itself exactly
            let y2 = segment_average_pool(&mut g, y, &seg).unwrap();
            assert_eq!(g.value(y2), g.value(y));
        }
    }

    #[test]
    fn position_embedding_offsets_and_closed_form() {
        let seg = SegmentMap { segments: vec![(0, 2), (2, 3)] };
        assert_eq!(seg.word_offsets(), vec![0, 1, 0]);
        let pe = segment_position_embedding(&seg, 8).unwrap();
        for c in 0..8 {
            let want = if c % 2 == 0 { 0.0 } else { 1.0 };
            assert!((pe.get(0, c) - want).abs() < 1e-12, "segment-start row");
            assert!((pe.get(2, c) - want).abs() < 1e-12, "offset resets at new segment");
        }
        assert!((pe.get(1, 0) - 1f64.sin()).abs() < 1e-7);
        assert!(segment_position_embedding(&seg, 7).is_err());
    }

    fn enc() -> (ParamStore, PauseWordEncoder) {
        let mut cfg = crate::config::Config::tiny().model;
        cfg.fft_blocks = 1;
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = PauseWordEncoder::new(&mut ps, &cfg, &mut rng);
        (ps, e)
    }

    #[test]
    fn encode_shapes_and_additive_identity() {
        let (ps, e) = enc();
        let mut g = Graph::eval(&ps);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fused_m = Mat::from_fn(5, 32, |_, _| rng.gen_range(-1.0..1.0));
        let fused = g.constant(fused_m.clone());
        let zeros = g.constant(Mat::zeros(5, 32));
        let zeros2 = g.constant(Mat::zeros(5, 32));
        let out = e.encode(&mut g, fused, zeros, zeros2, None).unwrap();
        assert_eq!(g.value(out).shape(), (5, 32));

        // zero pooled + zero position embedding equals encoding fused alone
        let fused2 = g.constant(fused_m);
        let seg = SegmentMap { segments: vec![(0, 5)] };
        let pooled = segment_average_pool(&mut g, fused2, &seg).unwrap();
        let pe = g.constant(segment_position_embedding(&seg, 32).unwrap());
        let full = e.encode(&mut g, fused2, pooled, pe, None).unwrap();
        assert_eq!(g.value(full).shape(), (5, 32));

        let bad = g.constant(Mat::zeros(4, 32));
        assert!(matches!(
            e.encode(&mut g, fused2, bad, pe, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn permuting_words_across_segments_changes_output() {
        let (ps, e) = enc();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m = Mat::from_fn(4, 32, |_, _| rng.gen_range(-1.0..1.0));
        let seg = SegmentMap { segments: vec![(0, 2), (2, 4)] };

        let run = |mat: &Mat| {
            let ps_ref = &ps;
            let mut g = Graph::eval(ps_ref);
            let fused = g.constant(mat.clone());
            let pooled = segment_average_pool(&mut g, fused, &seg).unwrap();
            let pe = g.constant(segment_position_embedding(&seg, 32).unwrap());
            let out = e.encode(&mut g, fused, pooled, pe, None).unwrap();
            g.value(out).clone()
        };
        let base = run(&m);
        // swap word 1 (segment 0) with word 2 (segment 1)
        let mut swapped = m.clone();
        let r1 = m.row(1).to_vec();
        let r2 = m.row(2).to_vec();
        swapped.row_mut(1).copy_from_slice(&r2);
        swapped.row_mut(2).copy_from_slice(&r1);
        let out = run(&swapped);
        let mut diff: f64 = 0.0;
        for (a, b) in base.data().iter().zip(out.data()) {
            diff = diff.max((a - b).abs());
        }
        assert!(diff > 1e-9, "cross-segment permutation should change the encoding");
    }
}
