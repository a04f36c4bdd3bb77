//! Configuration tree: `model.*`, `train.*`, `adv.*`, `data.*` (TOML).
//!
//! Every field has a default, so a config file only needs the keys it
//! overrides. `Config::tiny()` is the small CPU preset used by tests and
//! the bundled demo corpus.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Environment variable naming the default config path for the CLI.
pub const CONFIG_ENV_VAR: &str = "PAUSESPEECH_CONFIG";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Width of incoming context vectors.
    pub d_ctx: usize,
    pub n_heads: usize,
    /// FFT blocks per encoder/decoder stack.
    pub fft_blocks: usize,
    pub d_ff: usize,
    pub ff_kernel: usize,
    /// Clipping window of the relative-position attention bias.
    pub rel_window: usize,
    pub dropout: f64,
    pub prenet_lstm_layers: usize,
    pub prenet_conv_layers: usize,
    pub prenet_conv_kernel: usize,
    pub predictor_kernel: usize,
    pub n_mels: usize,
    pub n_speakers: usize,
    pub phoneme_vocab: Vec<String>,
    pub pitch_bins: usize,
    /// Quantization range for phoneme-level mean log-F0.
    pub pitch_log_min: f64,
    pub pitch_log_max: f64,
    pub energy_bins: usize,
    pub energy_min: f64,
    pub energy_max: f64,
    /// Which layer of a multi-layer context tensor to consume (1-based).
    pub context_layer: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 256,
            d_ctx: 768,
            n_heads: 2,
            fft_blocks: 4,
            d_ff: 1024,
            ff_kernel: 9,
            rel_window: 4,
            dropout: 0.1,
            prenet_lstm_layers: 2,
            prenet_conv_layers: 2,
            prenet_conv_kernel: 5,
            predictor_kernel: 3,
            n_mels: 128,
            n_speakers: 4,
            phoneme_vocab: default_vocab(),
            pitch_bins: 256,
            pitch_log_min: (50f64).ln(),
            pitch_log_max: (600f64).ln(),
            energy_bins: 256,
            energy_min: 0.0,
            energy_max: 1.0,
            context_layer: 9,
        }
    }
}

fn default_vocab() -> Vec<String> {
    // ARPAbet core set plus a silence symbol
    [
        "sil", "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F",
        "G", "HH", "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH",
        "T", "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config("d_model must divide by n_heads".into()));
        }
        if self.ff_kernel % 2 == 0 || self.prenet_conv_kernel % 2 == 0 || self.predictor_kernel % 2 == 0 {
            return Err(Error::Config("conv kernels must be odd".into()));
        }
        if self.phoneme_vocab.is_empty() {
            return Err(Error::Config("phoneme vocabulary is empty".into()));
        }
        if self.pitch_log_max <= self.pitch_log_min || self.energy_max <= self.energy_min {
            return Err(Error::Config("quantization ranges must be non-empty".into()));
        }
        Ok(())
    }

    pub fn phoneme_id(&self, symbol: &str) -> Result<usize> {
        self.phoneme_vocab
            .iter()
            .position(|s| s == symbol)
            .ok_or_else(|| Error::InvalidInput(format!("phoneme '{symbol}' not in vocabulary")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub w_mel: f64,
    pub w_dur: f64,
    pub w_pitch: f64,
    pub w_energy: f64,
    pub w_pause: f64,
    pub use_ps_encoder: bool,
    pub use_pw_encoder: bool,
    pub use_adv: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            beta1: 0.8,
            beta2: 0.99,
            weight_decay: 0.01,
            batch_size: 8,
            max_steps: 2000,
            seed: 42,
            checkpoint_interval: 500,
            w_mel: 1.0,
            w_dur: 0.1,
            w_pitch: 0.1,
            w_energy: 0.1,
            w_pause: 1.0,
            use_ps_encoder: true,
            use_pw_encoder: true,
            use_adv: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvConfig {
    pub enabled: bool,
    /// Generator-only steps before the discriminator joins.
    pub warmup_steps: u64,
    pub window_lengths: Vec<usize>,
    pub weight: f64,
    pub disc_channels: usize,
    pub disc_layers: usize,
    pub disc_kernel: usize,
}

impl Default for AdvConfig {
    fn default() -> Self {
        AdvConfig {
            enabled: true,
            warmup_steps: 50_000,
            window_lengths: vec![32, 64, 96],
            weight: 1.0,
            disc_channels: 64,
            disc_layers: 3,
            disc_kernel: 3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DataConfig {
    pub manifest: String,
    pub out_dir: String,
    /// Directory of per-utterance context tensors (`<id>.pst` plus
    /// `<id>.spans.json`); when unset, fallback embeddings are used.
    pub context_dir: Option<String>,
    pub fallback_ctx_seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adv: AdvConfig,
    pub data: DataConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.adv.window_lengths.is_empty() {
            return Err(Error::Config("adv.window_lengths must not be empty".into()));
        }
        let mut sorted = self.adv.window_lengths.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.adv.window_lengths || self.adv.window_lengths.contains(&0) {
            return Err(Error::Config(
                "adv.window_lengths must be positive, sorted, distinct".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: Config = toml::from_str(&text)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
        crate::pst::atomic_write(path, text.as_bytes())
    }

    /// Adversarial terms are live only when both switches are on.
    pub fn adv_active(&self) -> bool {
        self.train.use_adv && self.adv.enabled
    }

    /// Small CPU preset: D_model 32, two FFT blocks per stack, short
    /// windows, no dropout, 200-step adversarial warmup.
    pub fn tiny() -> Config {
        let mut cfg = Config::default();
        cfg.model.d_model = 32;
        cfg.model.d_ctx = 16;
        cfg.model.fft_blocks = 2;
        cfg.model.d_ff = 64;
        cfg.model.ff_kernel = 3;
        cfg.model.rel_window = 3;
        cfg.model.dropout = 0.0;
        cfg.model.n_mels = 24;
        cfg.model.n_speakers = 2;
        cfg.model.pitch_bins = 32;
        cfg.model.energy_bins = 32;
        cfg.model.prenet_conv_kernel = 3;
        cfg.adv.warmup_steps = 200;
        cfg.adv.window_lengths = vec![16, 32, 48];
        cfg.adv.disc_channels = 24;
        cfg.adv.disc_layers = 2;
        cfg.train.max_steps = 2000;
        cfg.train.batch_size = 8;
        cfg
    }
}
