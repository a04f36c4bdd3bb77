//! Frame-level acoustic feature extraction: log-mel spectrogram, F0 via
//! normalized autocorrelation, and per-frame spectral energy.
//!
//! Framing is center-off: frame `i` covers samples `[i*hop, i*hop + win)`,
//! so the frame count is `1 + floor((len - win) / hop)`. All three feature
//! streams share that framing exactly.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::tensor::Mat;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub fmin: f64,
    /// Upper mel band edge; defaults to Nyquist.
    pub fmax: Option<f64>,
    pub f0_min: f64,
    pub f0_max: f64,
    /// Normalized-autocorrelation threshold for voicing.
    pub voicing_threshold: f64,
    /// Floor added before the log of the mel power spectrum.
    pub mel_floor: f64,
}

impl Default for FeConfig {
    fn default() -> Self {
        FeConfig {
            sample_rate: 24_000,
            n_fft: 1024,
            win_length: 1024,
            hop_length: 256,
            n_mels: 128,
            fmin: 0.0,
            fmax: None,
            f0_min: 50.0,
            f0_max: 600.0,
            voicing_threshold: 0.4,
            mel_floor: 1e-5,
        }
    }
}

impl FeConfig {
    pub fn num_frames(&self, samples: usize) -> Result<usize> {
        if samples < self.win_length {
            return Err(Error::InvalidInput(format!(
                "waveform of {samples} samples is shorter than one {}-sample window",
                self.win_length
            )));
        }
        Ok(1 + (samples - self.win_length) / self.hop_length)
    }
}

/// Frame-synchronous features extracted from a mono waveform; phoneme
/// durations come from alignment, not audio, and are attached separately.
#[derive(Clone, Debug)]
pub struct FrameFeatures {
    pub mel: Mat,
    pub f0_hz: Vec<f64>,
    pub energy: Vec<f64>,
}

/// Extract log-mel, F0 and energy with identical frame counts.
pub fn extract_frame_features(waveform: &[f64], cfg: &FeConfig) -> Result<FrameFeatures> {
    if waveform.is_empty() {
        return Err(Error::InvalidInput("empty waveform".into()));
    }
    let frames = cfg.num_frames(waveform.len())?;
    let bins = cfg.n_fft / 2 + 1;
    let window = hann(cfg.win_length);
    let fb = mel_filterbank(cfg);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);
    let mut mel = Mat::zeros(frames, cfg.n_mels);
    let mut f0 = Vec::with_capacity(frames);
    let mut energy = Vec::with_capacity(frames);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];

    for i in 0..frames {
        let frame = &waveform[i * cfg.hop_length..i * cfg.hop_length + cfg.win_length];
        for (b, (x, w)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
            *b = Complex::new(x * w, 0.0);
        }
        for b in buf.iter_mut().skip(cfg.win_length) {
            *b = Complex::new(0.0, 0.0);
        }
        fft.process(&mut buf);

        let mut power = vec![0.0; bins];
        let mut mag_sq_sum = 0.0;
        for (k, p) in power.iter_mut().enumerate() {
            let m2 = buf[k].norm_sqr();
            *p = m2;
            mag_sq_sum += m2;
        }
        energy.push(mag_sq_sum.sqrt());

        let out = mel.row_mut(i);
        for (m, row) in fb.iter().enumerate() {
            let mut acc = 0.0;
            for &(k, w) in row {
                acc += w * power[k];
            }
            out[m] = (acc + cfg.mel_floor).ln();
        }

        f0.push(frame_f0(frame, cfg));
    }

    Ok(FrameFeatures { mel, f0_hz: f0, energy })
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Sparse triangular filterbank rows: (fft bin, weight) pairs per mel band.
fn mel_filterbank(cfg: &FeConfig) -> Vec<Vec<(usize, f64)>> {
    let bins = cfg.n_fft / 2 + 1;
    let fmax = cfg.fmax.unwrap_or(cfg.sample_rate as f64 / 2.0);
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(fmax);
    let centers: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let mut fb = Vec::with_capacity(cfg.n_mels);
    for m in 0..cfg.n_mels {
        let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
        let mut row = Vec::new();
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= mid {
                (f - lo) / (mid - lo)
            } else {
                (hi - f) / (hi - mid)
            };
            if w > 0.0 {
                row.push((k, w));
            }
        }
        fb.push(row);
    }
    fb
}

/// Autocorrelation pitch for one frame; 0.0 when unvoiced.
fn frame_f0(frame: &[f64], cfg: &FeConfig) -> f64 {
    let n = frame.len();
    let rms = (frame.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms < 1e-6 {
        return 0.0;
    }
    let sr = cfg.sample_rate as f64;
    let lag_min = (sr / cfg.f0_max).floor().max(2.0) as usize;
    let lag_max = ((sr / cfg.f0_min).ceil() as usize).min(n - 2);
    if lag_min >= lag_max {
        return 0.0;
    }

    let norm_corr = |lag: usize| -> f64 {
        let m = n - lag;
        let mut num = 0.0;
        let mut e0 = 0.0;
        let mut e1 = 0.0;
        for t in 0..m {
            num += frame[t] * frame[t + lag];
            e0 += frame[t] * frame[t];
            e1 += frame[t + lag] * frame[t + lag];
        }
        if e0 <= 0.0 || e1 <= 0.0 {
            0.0
        } else {
            num / (e0 * e1).sqrt()
        }
    };

    let mut best_lag = 0;
    let mut best = f64::NEG_INFINITY;
    for lag in lag_min..=lag_max {
        let r = norm_corr(lag);
        if r > best {
            best = r;
            best_lag = lag;
        }
    }
    if best < cfg.voicing_threshold {
        return 0.0;
    }

    // parabolic refinement around the peak
    let mut lag = best_lag as f64;
    if best_lag > lag_min && best_lag < lag_max {
        let rm = norm_corr(best_lag - 1);
        let rp = norm_corr(best_lag + 1);
        let denom = rm - 2.0 * best + rp;
        if denom.abs() > 1e-12 {
            let delta = 0.5 * (rm - rp) / denom;
            if delta.abs() <= 0.5 {
                lag += delta;
            }
        }
    }
    sr / lag
}
