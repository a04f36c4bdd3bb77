//! Word-level context vectors.
//!
//! Context comes from one of two sources: a precomputed subword tensor
//! exported by any external language-model tool (`.pst`, rank 2 `[S, D]`
//! or rank 3 `[layers, S, D]` with a 1-based layer selector), or a
//! deterministic keyed-hash fallback that lets everything run hermetically.
//! Subword-to-word spans arrive as a JSON sidecar next to the tensor.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::pst;
use crate::tensor::Mat;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct ContextBundle {
    /// S x D_ctx subword-level vectors.
    pub subword_vectors: Mat,
    /// Per-word contiguous [start, end) subword ranges partitioning [0, S).
    pub word_spans: Vec<(usize, usize)>,
    /// Source layer (1-based for multi-layer tensors; recorded verbatim).
    pub layer_index: usize,
}

impl ContextBundle {
    pub fn validate(&self) -> Result<()> {
        let s = self.subword_vectors.rows();
        let mut cursor = 0;
        for &(lo, hi) in &self.word_spans {
            if lo != cursor || hi <= lo {
                return Err(Error::InvalidInput(format!(
                    "word spans must be non-empty and contiguous; got [{lo}, {hi}) at offset {cursor}"
                )));
            }
            cursor = hi;
        }
        if cursor != s {
            return Err(Error::InvalidInput(format!(
                "word spans cover {cursor} subwords but tensor has {s}"
            )));
        }
        if !self.subword_vectors.is_finite() {
            return Err(Error::NonFinite("context vectors".into()));
        }
        Ok(())
    }
}

/// W x D_ctx word-level context, one row per word.
#[derive(Clone, Debug)]
pub struct WordContext {
    pub vectors: Mat,
}

/// Average subword vectors within each word span.
pub fn word_average_pool(bundle: &ContextBundle) -> Result<WordContext> {
    bundle.validate()?;
    let d = bundle.subword_vectors.cols();
    let mut out = Mat::zeros(bundle.word_spans.len(), d);
    for (w, &(lo, hi)) in bundle.word_spans.iter().enumerate() {
        let dst = out.row_mut(w);
        for s in lo..hi {
            for (o, v) in dst.iter_mut().zip(bundle.subword_vectors.row(s)) {
                *o += v;
            }
        }
        let inv = 1.0 / (hi - lo) as f64;
        for o in dst {
            *o *= inv;
        }
    }
    Ok(WordContext { vectors: out })
}

/// Sidecar path: `x/u1.pst` -> `x/u1.spans.json`.
pub fn spans_sidecar_path(tensor_path: &Path) -> PathBuf {
    let stem = tensor_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = stem.strip_suffix(".pst").unwrap_or(&stem);
    tensor_path.with_file_name(format!("{stem}.spans.json"))
}

/// Load a context tensor and its spans sidecar, selecting one layer.
///
/// Rank-3 tensors are `[layers, S, D]` with `layer_index` counted from 1
/// (so a 12-layer file accepts 1..=12). Rank-2 tensors are a single layer
/// and accept any index, which is recorded as-is.
pub fn load_context(path: &Path, layer_index: usize) -> Result<ContextBundle> {
    let t = pst::read(path)?;
    let (s, d, data_f64): (usize, usize, Vec<f64>) = match t.dims.as_slice() {
        [s, d] => (*s, *d, t.data.iter().map(|&v| v as f64).collect()),
        [layers, s, d] => {
            if layer_index < 1 || layer_index > *layers {
                return Err(Error::InvalidInput(format!(
                    "layer {layer_index} unavailable; tensor {} has layers 1..={layers}",
                    path.display()
                )));
            }
            let plane = s * d;
            let off = (layer_index - 1) * plane;
            (*s, *d, t.data[off..off + plane].iter().map(|&v| v as f64).collect())
        }
        dims => {
            return Err(Error::Shape(format!(
                "context tensor must be rank 2 or 3, got {dims:?}"
            )))
        }
    };

    let spans_path = spans_sidecar_path(path);
    let spans_text = fs::read_to_string(&spans_path)
        .map_err(|e| Error::io(spans_path.display().to_string(), e))?;
    let spans: Vec<(usize, usize)> = serde_json::from_str::<Vec<[usize; 2]>>(&spans_text)
        .map_err(|e| Error::format(spans_path.display().to_string(), e.to_string()))?
        .into_iter()
        .map(|[a, b]| (a, b))
        .collect();

    let bundle = ContextBundle {
        subword_vectors: Mat::from_vec(s, d, data_f64),
        word_spans: spans,
        layer_index,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Deterministic context vector for a word: components in [-1, 1] drawn
/// from a stream keyed by SHA-256(seed, word). Identical (word, seed)
/// pairs map to identical vectors on every platform.
pub fn fallback_embedding(word_text: &str, d_ctx: usize, seed: u64) -> Vec<f64> {
    assert!(d_ctx > 0, "context dimension must be positive");
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(word_text.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(key);
    (0..d_ctx).map(|_| rng.gen_range(-1.0..=1.0)).collect()
}

/// Word-level context built entirely from fallback embeddings.
pub fn fallback_word_context(words: &[String], d_ctx: usize, seed: u64) -> WordContext {
    let mut m = Mat::zeros(words.len(), d_ctx);
    for (i, w) in words.iter().enumerate() {
        m.row_mut(i).copy_from_slice(&fallback_embedding(w, d_ctx, seed));
    }
    WordContext { vectors: m }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn pooling_identity_for_singleton_spans() {
        let m = Mat::from_fn(3, 4, |r, c| (r * 4 + c) as f64);
        let b = ContextBundle {
            subword_vectors: m.clone(),
            word_spans: vec![(0, 1), (1, 2), (2, 3)],
            layer_index: 1,
        };
        let w = word_average_pool(&b).unwrap();
        assert_eq!(w.vectors, m);
    }

    #[test]
    fn pooling_simple_mean() {
        let m = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let b = ContextBundle { subword_vectors: m, word_spans: vec![(0, 2)], layer_index: 1 };
        let w = word_average_pool(&b).unwrap();
        assert_eq!(w.vectors, Mat::from_vec(1, 2, vec![0.5, 0.5]));
    }

    #[test]
    fn pooling_matches_loop_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n_words = rng.gen_range(1..=8usize);
            let d = rng.gen_range(1..=16usize);
            let mut spans = Vec::new();
            let mut s = 0;
            for _ in 0..n_words {
                let len = rng.gen_range(1..=3usize);
                spans.push((s, s + len));
                s += len;
            }
            let m = Mat::from_fn(s, d, |_, _| rng.gen_range(-2.0..2.0));
            let b = ContextBundle {
                subword_vectors: m.clone(),
                word_spans: spans.clone(),
                layer_index: 1,
            };
            let got = word_average_pool(&b).unwrap().vectors;
            // independent per-component loop oracle
            for (w, &(lo, hi)) in spans.iter().enumerate() {
                for c in 0..d {
                    let mut acc = 0.0;
                    for r in lo..hi {
                        acc += m.get(r, c);
                    }
                    let want = acc / (hi - lo) as f64;
                    assert!((got.get(w, c) - want).abs() < 1e-6);
                }
            }
            // pooled max-norm never exceeds the max row max-norm
            let max_in = m.max_abs();
            assert!(got.max_abs() <= max_in + 1e-12);
        }
    }

    #[test]
    fn invalid_spans_rejected() {
        let m = Mat::zeros(3, 2);
        for spans in [vec![(0usize, 0usize), (0, 3)], vec![(0, 2)], vec![(0, 2), (2, 4)]] {
            let b = ContextBundle { subword_vectors: m.clone(), word_spans: spans, layer_index: 1 };
            assert!(b.validate().is_err());
        }
    }

    #[test]
    fn fallback_is_deterministic_bounded_and_seed_sensitive() {
        let a = fallback_embedding("hello", 16, 7);
        let b = fallback_embedding("hello", 16, 7);
        assert_eq!(a, b);
        let c = fallback_embedding("hello", 16, 8);
        assert_ne!(a, c);

        // bounded over many samples
        for i in 0..10_000 {
            let v = fallback_embedding(&format!("w{i}"), 4, 1);
            assert!(v.iter().all(|x| x.abs() <= 1.0));
        }

        // different seeds differ somewhere on a 100-word sample
        let mut any_diff = 0;
        for i in 0..100 {
            let w = format!("word{i}");
            if fallback_embedding(&w, 8, 1) != fallback_embedding(&w, 2, 1)[..].to_vec()
                || fallback_embedding(&w, 8, 1) != fallback_embedding(&w, 8, 2)
            {
                any_diff += 1;
            }
        }
        assert_eq!(any_diff, 100);
    }

    fn write_ctx(dir: &Path, dims: Vec<usize>, spans: &[[usize; 2]]) -> PathBuf {
        let count: usize = dims.iter().product();
        let data: Vec<f32> = (0..count).map(|i| i as f32 * 0.5).collect();
        let p = dir.join("ctx.pst");
        pst::write(&p, &pst::PstTensor::new(dims, data)).unwrap();
        fs::write(spans_sidecar_path(&p), serde_json::to_string(spans).unwrap()).unwrap();
        p
    }

    #[test]
    fn load_rank2_whole_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_ctx(dir.path(), vec![3, 4], &[[0, 2], [2, 3]]);
        let b = load_context(&p, 0).unwrap();
        assert_eq!(b.subword_vectors.shape(), (3, 4));
        assert_eq!(b.layer_index, 0);
    }

    #[test]
    fn load_rank3_selects_layer_and_rejects_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_ctx(dir.path(), vec![12, 2, 3], &[[0, 1], [1, 2]]);
        let l9 = load_context(&p, 9).unwrap();
        // layer 9 (1-based) starts at flat offset (9-1)*2*3 = 48
        assert_eq!(l9.subword_vectors.get(0, 0), 48.0 * 0.5);
        let l1 = load_context(&p, 1).unwrap();
        assert_eq!(l1.subword_vectors.get(0, 0), 0.0);
        let l12 = load_context(&p, 12).unwrap();
        assert_ne!(l12.subword_vectors.get(0, 0), l9.subword_vectors.get(0, 0));

        let err = load_context(&p, 13).unwrap_err().to_string();
        assert!(err.contains("1..=12"), "{err}");
    }
}
