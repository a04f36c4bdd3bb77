//! Objective evaluation: DTW alignment, mel-cepstral distortion, F0 RMSE
//! on the DTW path, utterance-duration differences and pause-prediction
//! scores.
//!
//! MCD converts each mel frame to cepstra with an orthonormal type-2 DCT,
//! aligns the two cepstral sequences by DTW (Euclidean local distance) and
//! averages `(10/ln 10) * sqrt(2 * sum_{d=1..13} (c_d - c'_d)^2)` over the
//! path; c0 is excluded. F0 RMSE is restricted to path pairs where both
//! frames are voiced. Corpus-level evaluation fans out per utterance.

use serde::Serialize;

use crate::parallel::maybe_par_map;
use crate::tensor::Mat;
use crate::{Error, Result};

/// Cepstral order used by MCD (c1..c13).
pub const MCD_ORDER: usize = 13;

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Standard DTW with steps {(1,0),(0,1),(1,1)}; returns the optimal path
/// from (0,0) to (Ta-1, Tb-1), monotone in both coordinates.
pub fn dtw_align(a: &Mat, b: &Mat) -> Result<Vec<(usize, usize)>> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::InvalidInput("cannot align an empty sequence".into()));
    }
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "dtw inputs have widths {} and {}",
            a.cols(),
            b.cols()
        )));
    }
    let (ta, tb) = (a.rows(), b.rows());
    let mut cost = vec![f64::INFINITY; ta * tb];
    let mut back = vec![0u8; ta * tb]; // 0 diag, 1 from (i-1,j), 2 from (i,j-1)
    for i in 0..ta {
        for j in 0..tb {
            let d = euclidean(a.row(i), b.row(j));
            let idx = i * tb + j;
            if i == 0 && j == 0 {
                cost[idx] = d;
                continue;
            }
            let mut best = f64::INFINITY;
            let mut from = 0u8;
            if i > 0 && j > 0 && cost[(i - 1) * tb + (j - 1)] < best {
                best = cost[(i - 1) * tb + (j - 1)];
                from = 0;
            }
            if i > 0 && cost[(i - 1) * tb + j] < best {
                best = cost[(i - 1) * tb + j];
                from = 1;
            }
            if j > 0 && cost[i * tb + (j - 1)] < best {
                best = cost[i * tb + (j - 1)];
                from = 2;
            }
            cost[idx] = best + d;
            back[idx] = from;
        }
    }

    let mut path = Vec::with_capacity(ta.max(tb));
    let (mut i, mut j) = (ta - 1, tb - 1);
    loop {
        path.push((i, j));
        if i == 0 && j == 0 {
            break;
        }
        match back[i * tb + j] {
            0 if i > 0 && j > 0 => {
                i -= 1;
                j -= 1;
            }
            1 if i > 0 => i -= 1,
            _ => j -= 1,
        }
    }
    path.reverse();
    Ok(path)
}

/// Summed local distance along a path.
pub fn path_cost(a: &Mat, b: &Mat, path: &[(usize, usize)]) -> f64 {
    path.iter().map(|&(i, j)| euclidean(a.row(i), b.row(j))).sum()
}

/// Orthonormal type-2 DCT per frame, keeping coefficients 1..=order
/// (c0 excluded).
pub fn mel_to_cepstra(mel: &Mat, order: usize) -> Mat {
    let n = mel.cols();
    let order = order.min(n.saturating_sub(1)).max(1);
    let mut out = Mat::zeros(mel.rows(), order);
    let s = (2.0 / n as f64).sqrt();
    for r in 0..mel.rows() {
        let row = mel.row(r);
        for k in 1..=order {
            let mut acc = 0.0;
            for (i, &x) in row.iter().enumerate() {
                acc += x
                    * (std::f64::consts::PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n as f64))
                        .cos();
            }
            out.set(r, k - 1, s * acc);
        }
    }
    out
}

/// Mel-cepstral distortion in dB plus the cepstral DTW path.
pub fn mcd_with_path(ref_mel: &Mat, hyp_mel: &Mat) -> Result<(f64, Vec<(usize, usize)>)> {
    if ref_mel.cols() != hyp_mel.cols() {
        return Err(Error::Shape(format!(
            "mel widths differ: {} vs {}",
            ref_mel.cols(),
            hyp_mel.cols()
        )));
    }
    let rc = mel_to_cepstra(ref_mel, MCD_ORDER);
    let hc = mel_to_cepstra(hyp_mel, MCD_ORDER);
    let path = dtw_align(&rc, &hc)?;
    let k = 10.0 / std::f64::consts::LN_10;
    let mut acc = 0.0;
    for &(i, j) in &path {
        let mut sq = 0.0;
        for (a, b) in rc.row(i).iter().zip(hc.row(j)) {
            sq += (a - b) * (a - b);
        }
        acc += k * (2.0 * sq).sqrt();
    }
    Ok((acc / path.len() as f64, path))
}

pub fn mcd(ref_mel: &Mat, hyp_mel: &Mat) -> Result<f64> {
    Ok(mcd_with_path(ref_mel, hyp_mel)?.0)
}

/// RMSE in Hz over path pairs where both frames are voiced (f0 > 0);
/// `None` when no such pair exists.
pub fn rmse_f0(ref_f0: &[f64], hyp_f0: &[f64], path: &[(usize, usize)]) -> Option<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for &(i, j) in path {
        let (r, h) = (ref_f0[i], hyp_f0[j]);
        if r > 0.0 && h > 0.0 {
            acc += (r - h) * (r - h);
            n += 1;
        }
    }
    if n == 0 {
        None
    } else {
        Some((acc / n as f64).sqrt())
    }
}

/// Mean absolute difference of utterance durations in seconds.
pub fn ddur(ref_durations_s: &[f64], hyp_durations_s: &[f64]) -> Result<f64> {
    if ref_durations_s.is_empty() {
        return Err(Error::InvalidInput("ddur needs at least one utterance".into()));
    }
    if ref_durations_s.len() != hyp_durations_s.len() {
        return Err(Error::Shape(format!(
            "{} reference durations vs {} hypotheses",
            ref_durations_s.len(),
            hyp_durations_s.len()
        )));
    }
    let sum: f64 =
        ref_durations_s.iter().zip(hyp_durations_s).map(|(r, h)| (r - h).abs()).sum();
    Ok(sum / ref_durations_s.len() as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct PauseMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// confusion[gold][pred]
    pub confusion: [[u64; 4]; 4],
}

/// Micro accuracy and macro F1 over the 4 pause classes.
pub fn pause_metrics(pred: &[Vec<u8>], gold: &[Vec<u8>]) -> Result<PauseMetrics> {
    if pred.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} predicted sequences vs {} gold",
            pred.len(),
            gold.len()
        )));
    }
    let mut confusion = [[0u64; 4]; 4];
    for (p_seq, g_seq) in pred.iter().zip(gold) {
        if p_seq.len() != g_seq.len() {
            return Err(Error::Shape(format!(
                "sequence lengths differ: {} vs {}",
                p_seq.len(),
                g_seq.len()
            )));
        }
        for (&p, &g) in p_seq.iter().zip(g_seq) {
            if p > 3 || g > 3 {
                return Err(Error::InvalidInput(format!("pause class {} outside 0..=3", p.max(g))));
            }
            confusion[g as usize][p as usize] += 1;
        }
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::InvalidInput("no labels to score".into()));
    }
    let correct: u64 = (0..4).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / total as f64;

    let mut f1_sum = 0.0;
    for c in 0..4 {
        let tp = confusion[c][c] as f64;
        let fp: f64 = (0..4).filter(|&g| g != c).map(|g| confusion[g][c] as f64).sum();
        let fn_: f64 = (0..4).filter(|&p| p != c).map(|p| confusion[c][p] as f64).sum();
        let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        f1_sum += if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
    }
    Ok(PauseMetrics { accuracy, macro_f1: f1_sum / 4.0, confusion })
}

/// One reference/hypothesis pair ready for scoring.
pub struct EvalPair {
    pub id: String,
    pub ref_mel: Mat,
    pub hyp_mel: Mat,
    pub ref_f0: Vec<f64>,
    pub hyp_f0: Vec<f64>,
    pub ref_duration_s: f64,
    pub hyp_duration_s: f64,
    pub ref_pauses: Vec<u8>,
    pub hyp_pauses: Vec<u8>,
}

#[derive(Clone, Debug, Serialize)]
pub struct UtteranceEval {
    pub id: String,
    pub mcd: f64,
    pub rmse_f0: Option<f64>,
    pub abs_duration_diff_s: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub mcd: f64,
    pub rmse_f0: Option<f64>,
    pub ddur: f64,
    pub pause_accuracy: f64,
    pub pause_macro_f1: f64,
    pub confusion: [[u64; 4]; 4],
    pub per_utterance: Vec<UtteranceEval>,
    /// Metrics that need external systems and are outside this tool.
    pub not_computed: Vec<String>,
}

/// Score a corpus of aligned pairs; per-utterance work runs in parallel
/// with the `parallel` feature.
pub fn evaluate_corpus(pairs: Vec<EvalPair>) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no utterances to evaluate".into()));
    }
    let pause_inputs: Vec<(Vec<u8>, Vec<u8>)> =
        pairs.iter().map(|p| (p.hyp_pauses.clone(), p.ref_pauses.clone())).collect();
    let durations: Vec<(f64, f64)> =
        pairs.iter().map(|p| (p.ref_duration_s, p.hyp_duration_s)).collect();

    let per: Vec<Result<UtteranceEval>> = maybe_par_map(pairs, |p| {
        let (mcd_db, path) = mcd_with_path(&p.ref_mel, &p.hyp_mel)?;
        let rmse = rmse_f0(&p.ref_f0, &p.hyp_f0, &path);
        Ok(UtteranceEval {
            id: p.id,
            mcd: mcd_db,
            rmse_f0: rmse,
            abs_duration_diff_s: (p.ref_duration_s - p.hyp_duration_s).abs(),
        })
    });
    let per: Vec<UtteranceEval> = per.into_iter().collect::<Result<_>>()?;

    let mcd_mean = per.iter().map(|u| u.mcd).sum::<f64>() / per.len() as f64;
    let rmse_vals: Vec<f64> = per.iter().filter_map(|u| u.rmse_f0).collect();
    let rmse_mean = if rmse_vals.is_empty() {
        None
    } else {
        Some(rmse_vals.iter().sum::<f64>() / rmse_vals.len() as f64)
    };
    let refs: Vec<f64> = durations.iter().map(|d| d.0).collect();
    let hyps: Vec<f64> = durations.iter().map(|d| d.1).collect();
    let ddur_mean = ddur(&refs, &hyps)?;

    let preds: Vec<Vec<u8>> = pause_inputs.iter().map(|p| p.0.clone()).collect();
    let golds: Vec<Vec<u8>> = pause_inputs.iter().map(|p| p.1.clone()).collect();
    let pm = pause_metrics(&preds, &golds)?;

    Ok(EvalReport {
        mcd: mcd_mean,
        rmse_f0: rmse_mean,
        ddur: ddur_mean,
        pause_accuracy: pm.accuracy,
        pause_macro_f1: pm.macro_f1,
        confusion: pm.confusion,
        per_utterance: per,
        not_computed: vec!["MOS".into(), "PER".into(), "WER".into()],
    })
}
