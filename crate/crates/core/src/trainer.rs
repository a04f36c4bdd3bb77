//! Training loop: loss aggregation, decoupled-weight-decay Adam, the
//! generator-only warmup schedule, checkpointing and the JSONL metric log.
//!
//! Determinism discipline: every stochastic stream (dropout, window
//! offsets, batch order) is re-derived from `(seed, step, example)` with a
//! keyed hash, so a resumed run continues bit-for-bit like a straight one.
//! Batch gradients are computed per example (optionally in parallel) and
//! reduced in input order.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::{lsgan_d_loss, lsgan_g_loss, sample_windows, WindowSpec};
use crate::config::{Config, TrainConfig};
use crate::graph::{Graph, NodeId};
use crate::model::{Model, TrainExample};
use crate::params::{ParamId, ParamStore};
use crate::parallel::{maybe_par_map, seq_map};
use crate::phrasing::pause_loss;
use crate::tensor::Mat;
use crate::{Error, Result};

const STREAM_DROPOUT: u64 = 1;
const STREAM_WINDOWS: u64 = 2;
const STREAM_BATCH: u64 = 3;

/// Independent deterministic rng stream keyed by (seed, step, lane, tag).
pub fn derive_rng(seed: u64, step: u64, lane: u64, tag: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(step.to_le_bytes());
    h.update(lane.to_le_bytes());
    h.update(tag.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Adam moments aligned with one parameter-id list.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamState {
    pub fn new(store: &ParamStore, ids: &[ParamId]) -> Self {
        let zeros = |id: &ParamId| {
            let p = store.get(*id);
            Mat::zeros(p.rows(), p.cols())
        };
        AdamState { t: 0, m: ids.iter().map(zeros).collect(), v: ids.iter().map(zeros).collect() }
    }
}

/// Decoupled-weight-decay Adam step over `ids`; decay multiplies rank-2
/// weights by (1 - lr*wd) before the moment update, bias rows are exempt.
pub fn adamw_update(
    store: &mut ParamStore,
    ids: &[ParamId],
    grads: &HashMap<ParamId, Mat>,
    opt: &mut AdamState,
    cfg: &TrainConfig,
) {
    const EPS: f64 = 1e-8;
    opt.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(opt.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(opt.t as i32);
    for (slot, &id) in ids.iter().enumerate() {
        let decay = store.entry(id.0).decay;
        let p = store.get_mut(id);
        if decay && cfg.weight_decay != 0.0 {
            p.scale_in_place(1.0 - cfg.lr * cfg.weight_decay);
        }
        let m = &mut opt.m[slot];
        let v = &mut opt.v[slot];
        if let Some(g) = grads.get(&id) {
            for i in 0..p.len() {
                let gi = g.data()[i];
                m.data_mut()[i] = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
                v.data_mut()[i] = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
            }
        } else {
            for i in 0..p.len() {
                m.data_mut()[i] *= cfg.beta1;
                v.data_mut()[i] *= cfg.beta2;
            }
        }
        for i in 0..p.len() {
            let mhat = m.data()[i] / bc1;
            let vhat = v.data()[i] / bc2;
            p.data_mut()[i] -= cfg.lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}

/// Optimizer and schedule state; model parameters live in the [`Model`].
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub seed: u64,
    pub opt_gen: AdamState,
    pub opt_disc: AdamState,
}

impl TrainState {
    pub fn new(model: &Model, seed: u64) -> Self {
        TrainState {
            step: 0,
            seed,
            opt_gen: AdamState::new(&model.params, &model.gen_ids),
            opt_disc: AdamState::new(&model.params, &model.disc_ids),
        }
    }
}

/// Per-step metric line written to the JSONL log.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_total: f64,
    pub loss_mel: f64,
    pub loss_dur: f64,
    pub loss_pitch: f64,
    pub loss_energy: f64,
    pub loss_pause: f64,
    pub loss_adv_g: f64,
    pub loss_adv_d: f64,
}

/// Scalar values of the generator loss terms for one example.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub total: f64,
    pub mel: f64,
    pub dur: f64,
    pub pitch: f64,
    pub energy: f64,
    pub pause: f64,
    pub adv_g: f64,
}

/// Predictions and targets feeding the generator objective.
pub struct GeneratorLossInputs<'a> {
    pub mel_pred: NodeId,
    pub mel_target: &'a Mat,
    pub log_dur_pred: NodeId,
    pub dur_target_frames: &'a [usize],
    pub pitch_pred: NodeId,
    pub pitch_target: &'a [f64],
    pub energy_pred: NodeId,
    pub energy_target: &'a [f64],
    pub pause_logits: Option<NodeId>,
    pub pause_targets: &'a [u8],
    /// Post-warmup adversarial generator term, already built on the graph.
    pub adv_g: Option<NodeId>,
}

/// L = w_mel*MAE + w_dur*MSE(log-dur) + w_pitch*MSE + w_energy*MSE
///   + w_pause*CE + w_adv*g_loss; every term is checked finite and named
/// on failure.
pub fn total_generator_loss(
    g: &mut Graph,
    inputs: GeneratorLossInputs<'_>,
    cfg: &TrainConfig,
    adv_weight: f64,
) -> Result<(NodeId, LossTerms)> {
    let mel_t = g.constant(inputs.mel_target.clone());
    let l_mel = g.mae(inputs.mel_pred, mel_t);

    let dur_t: Vec<f64> =
        inputs.dur_target_frames.iter().map(|&d| (d.max(1) as f64).ln()).collect();
    let n = dur_t.len();
    let dur_t = g.constant(Mat::from_vec(n, 1, dur_t));
    let l_dur = g.mse(inputs.log_dur_pred, dur_t);

    let pitch_t = g.constant(Mat::from_vec(n, 1, inputs.pitch_target.to_vec()));
    let l_pitch = g.mse(inputs.pitch_pred, pitch_t);
    let energy_t = g.constant(Mat::from_vec(n, 1, inputs.energy_target.to_vec()));
    let l_energy = g.mse(inputs.energy_pred, energy_t);

    let l_pause = match inputs.pause_logits {
        Some(logits) => Some(pause_loss(g, logits, inputs.pause_targets, None)?),
        None => None,
    };

    let mut terms = LossTerms {
        mel: g.scalar_value(l_mel),
        dur: g.scalar_value(l_dur),
        pitch: g.scalar_value(l_pitch),
        energy: g.scalar_value(l_energy),
        pause: l_pause.map(|n| g.scalar_value(n)).unwrap_or(0.0),
        adv_g: inputs.adv_g.map(|n| g.scalar_value(n)).unwrap_or(0.0),
        total: 0.0,
    };
    for (name, v) in [
        ("mel", terms.mel),
        ("duration", terms.dur),
        ("pitch", terms.pitch),
        ("energy", terms.energy),
        ("pause", terms.pause),
        ("adv_g", terms.adv_g),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name}")));
        }
    }

    let mut total = g.scale(l_mel, cfg.w_mel);
    let t = g.scale(l_dur, cfg.w_dur);
    total = g.add(total, t);
    let t = g.scale(l_pitch, cfg.w_pitch);
    total = g.add(total, t);
    let t = g.scale(l_energy, cfg.w_energy);
    total = g.add(total, t);
    if let Some(lp) = l_pause {
        let t = g.scale(lp, cfg.w_pause);
        total = g.add(total, t);
    }
    if let Some(adv) = inputs.adv_g {
        let t = g.scale(adv, adv_weight);
        total = g.add(total, t);
    }
    terms.total = g.scalar_value(total);
    if !terms.total.is_finite() {
        return Err(Error::NonFinite("total generator loss".into()));
    }
    Ok((total, terms))
}

/// Gradients and metrics from one example's forward/backward passes.
pub struct ExamplePass {
    pub gen_grads: HashMap<ParamId, Mat>,
    pub disc_grads: Option<HashMap<ParamId, Mat>>,
    pub terms: LossTerms,
    pub adv_d: Option<f64>,
}

fn example_pass(
    model: &Model,
    ex: &TrainExample,
    seed: u64,
    step: u64,
    lane: u64,
    adv_on: bool,
) -> Result<ExamplePass> {
    let cfg = &model.cfg;
    let rng = derive_rng(seed, step, lane, STREAM_DROPOUT);
    let mut g = Graph::train(&model.params, rng);
    let fwd = model.forward_train(&mut g, ex)?;

    // adversarial term: one window per feasible length, offsets shared
    // with the discriminator pass below
    let spec = WindowSpec::from_config(&cfg.adv)?;
    let frames = g.value(fwd.mel_pred).rows();
    let offsets = if adv_on {
        let mut wrng = derive_rng(seed, step, lane, STREAM_WINDOWS);
        sample_windows(frames, &spec, &mut wrng)
    } else {
        Vec::new()
    };
    let adv_g = if !offsets.is_empty() {
        let fake_scores: Vec<NodeId> = offsets
            .iter()
            .map(|&(s, l)| {
                let w = g.narrow_rows(fwd.mel_pred, s, l);
                model.discriminator.score(&mut g, w)
            })
            .collect();
        Some(lsgan_g_loss(&mut g, &fake_scores)?)
    } else {
        None
    };

    let (total, terms) = total_generator_loss(
        &mut g,
        GeneratorLossInputs {
            mel_pred: fwd.mel_pred,
            mel_target: &ex.mel,
            log_dur_pred: fwd.variance.log_dur_pred,
            dur_target_frames: &ex.targets.duration_frames,
            pitch_pred: fwd.variance.pitch_pred,
            pitch_target: &ex.targets.pitch,
            energy_pred: fwd.variance.energy_pred,
            energy_target: &ex.targets.energy,
            pause_logits: fwd.pause_logits,
            pause_targets: &ex.pause_labels,
            adv_g,
        },
        &cfg.train,
        cfg.adv.weight,
    )?;
    let mel_value = g.value(fwd.mel_pred).clone();
    let gen_grads = g.backward(total).take_params();

    // discriminator pass on the same window offsets, fake mel detached
    let (disc_grads, adv_d) = if !offsets.is_empty() {
        let mut dg = Graph::eval(&model.params);
        let real = dg.constant(ex.mel.clone());
        let fake = dg.constant(mel_value);
        let mut real_scores = Vec::with_capacity(offsets.len());
        let mut fake_scores = Vec::with_capacity(offsets.len());
        for &(s, l) in &offsets {
            let rw = dg.narrow_rows(real, s, l);
            real_scores.push(model.discriminator.score(&mut dg, rw));
            let fw = dg.narrow_rows(fake, s, l);
            fake_scores.push(model.discriminator.score(&mut dg, fw));
        }
        let d_loss = lsgan_d_loss(&mut dg, &real_scores, &fake_scores)?;
        let d_val = dg.scalar_value(d_loss);
        if !d_val.is_finite() {
            return Err(Error::NonFinite("discriminator loss".into()));
        }
        (Some(dg.backward(d_loss).take_params()), Some(d_val))
    } else {
        (None, None)
    };

    Ok(ExamplePass { gen_grads, disc_grads, terms, adv_d })
}

/// Forward/backward over a batch, parallel when the feature is on;
/// results come back in input order.
pub fn batch_passes(
    model: &Model,
    batch: &[&TrainExample],
    seed: u64,
    step: u64,
    adv_on: bool,
) -> Vec<Result<ExamplePass>> {
    let items: Vec<(u64, &TrainExample)> =
        batch.iter().enumerate().map(|(i, ex)| (i as u64, *ex)).collect();
    maybe_par_map(items, |(lane, ex)| example_pass(model, ex, seed, step, lane, adv_on))
}

/// Always-sequential variant of [`batch_passes`] for benchmarks.
pub fn batch_passes_seq(
    model: &Model,
    batch: &[&TrainExample],
    seed: u64,
    step: u64,
    adv_on: bool,
) -> Vec<Result<ExamplePass>> {
    let items: Vec<(u64, &TrainExample)> =
        batch.iter().enumerate().map(|(i, ex)| (i as u64, *ex)).collect();
    seq_map(items, |(lane, ex)| example_pass(model, ex, seed, step, lane, adv_on))
}

fn accumulate(
    into: &mut HashMap<ParamId, Mat>,
    from: HashMap<ParamId, Mat>,
    scale: f64,
) {
    for (id, mut g) in from {
        g.scale_in_place(scale);
        match into.get_mut(&id) {
            Some(acc) => acc.add_assign(&g),
            None => {
                into.insert(id, g);
            }
        }
    }
}

/// One optimization step over a batch: generator AdamW update every step,
/// discriminator update only at and after warmup when adversarial training
/// is enabled. Deterministic given (state, batch, config).
pub fn train_step(
    model: &mut Model,
    batch: &[&TrainExample],
    state: &mut TrainState,
    cfg: &Config,
) -> Result<StepMetrics> {
    let adv_on = cfg.adv_active() && state.step >= cfg.adv.warmup_steps;
    let passes = batch_passes(model, batch, state.seed, state.step, adv_on);

    let inv = 1.0 / batch.len() as f64;
    let mut gen_grads: HashMap<ParamId, Mat> = HashMap::new();
    let mut disc_grads: HashMap<ParamId, Mat> = HashMap::new();
    let mut metrics = StepMetrics { step: state.step + 1, ..Default::default() };
    let mut n_disc = 0usize;
    for pass in passes {
        let pass = pass?;
        accumulate(&mut gen_grads, pass.gen_grads, inv);
        if let Some(dgr) = pass.disc_grads {
            accumulate(&mut disc_grads, dgr, 1.0);
            n_disc += 1;
        }
        metrics.loss_total += pass.terms.total * inv;
        metrics.loss_mel += pass.terms.mel * inv;
        metrics.loss_dur += pass.terms.dur * inv;
        metrics.loss_pitch += pass.terms.pitch * inv;
        metrics.loss_energy += pass.terms.energy * inv;
        metrics.loss_pause += pass.terms.pause * inv;
        metrics.loss_adv_g += pass.terms.adv_g * inv;
        metrics.loss_adv_d += pass.adv_d.unwrap_or(0.0);
    }

    adamw_update(&mut model.params, &model.gen_ids, &gen_grads, &mut state.opt_gen, &cfg.train);
    if adv_on && n_disc > 0 {
        metrics.loss_adv_d /= n_disc as f64;
        let inv_d = 1.0 / n_disc as f64;
        for g in disc_grads.values_mut() {
            g.scale_in_place(inv_d);
        }
        adamw_update(&mut model.params, &model.disc_ids, &disc_grads, &mut state.opt_disc, &cfg.train);
    } else {
        metrics.loss_adv_d = 0.0;
    }
    state.step += 1;
    Ok(metrics)
}

/// Deterministic batch for a global step: a per-epoch permutation of the
/// dataset, sliced by the step cursor.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    assert!(n > 0 && batch_size > 0);
    let cursor = (step as usize).wrapping_mul(batch_size) % n.max(1);
    let epoch = (step as u128 * batch_size as u128 / n as u128) as u64;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = derive_rng(seed, epoch, 0, STREAM_BATCH);
    perm.shuffle(&mut rng);
    let end = (cursor + batch_size).min(n);
    perm[cursor..end].to_vec()
}

/// Run (or continue) training: periodic checkpoints under
/// `out/checkpoints/`, per-step JSONL metrics appended to
/// `out/metrics.jsonl`, non-finite losses abort after writing
/// `out/checkpoints/abort.ckpt`.
pub fn run_training(
    model: &mut Model,
    examples: &[TrainExample],
    state: &mut TrainState,
    out_dir: &Path,
) -> Result<Vec<StepMetrics>> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("no training examples".into()));
    }
    let cfg = model.cfg.clone();
    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(ckpt_dir.display().to_string(), e))?;
    let log_path = out_dir.join("metrics.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;

    if state.step == 0 {
        save_checkpoint(&ckpt_dir.join("init.ckpt"), model, state)?;
        save_checkpoint(&out_dir.join("latest.ckpt"), model, state)?;
    }

    let mut all_metrics = Vec::new();
    while state.step < cfg.train.max_steps {
        let idxs = batch_indices(examples.len(), cfg.train.batch_size, state.seed, state.step);
        let batch: Vec<&TrainExample> = idxs.iter().map(|&i| &examples[i]).collect();
        let metrics = match train_step(model, &batch, state, &cfg) {
            Ok(m) => m,
            Err(e) => {
                let abort = ckpt_dir.join("abort.ckpt");
                let _ = save_checkpoint(&abort, model, state);
                return Err(Error::Contract(format!(
                    "aborted at step {}: {e}; state saved to {}",
                    state.step,
                    abort.display()
                )));
            }
        };
        let line = serde_json::to_string(&metrics).expect("metrics serialize");
        writeln!(log, "{line}").map_err(|e| Error::io(log_path.display().to_string(), e))?;
        all_metrics.push(metrics);

        if state.step % cfg.train.checkpoint_interval == 0 || state.step == cfg.train.max_steps {
            let path = ckpt_dir.join(format!("step_{:07}.ckpt", state.step));
            save_checkpoint(&path, model, state)?;
            save_checkpoint(&out_dir.join("latest.ckpt"), model, state)?;
        }
    }
    save_checkpoint(&out_dir.join("latest.ckpt"), model, state)?;
    Ok(all_metrics)
}

pub fn save_checkpoint(path: &Path, model: &Model, state: &TrainState) -> Result<()> {
    crate::checkpoint::save(path, model, state)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainState)> {
    crate::checkpoint::load(path)
}

/// Checkpoint path convention under an output dir.
pub fn latest_checkpoint(out_dir: &Path) -> PathBuf {
    out_dir.join("latest.ckpt")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;
    use rand::Rng;

    fn tiny() -> (Config, Model, Vec<TrainExample>) {
        let mut cfg = Config::tiny();
        cfg.model.fft_blocks = 1;
        cfg.train.batch_size = 2;
        cfg.adv.warmup_steps = 2;
        let model = Model::new(&cfg, 3).unwrap();
        let corpus = synthetic::generate_corpus(&cfg, 2, 5);
        let examples = synthetic::to_examples(&corpus, &cfg).unwrap();
        (cfg, model, examples)
    }

    #[test]
    fn adamw_zero_grad_is_pure_shrinkage() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = store.add_xavier("w", 3, 3, &mut rng);
        let b = store.add_zeros("b", 1, 3);
        store.get_mut(b).data_mut()[0] = 0.7;
        let before_w = store.get(w).clone();
        let before_b = store.get(b).clone();

        let ids = vec![w, b];
        let mut opt = AdamState::new(&store, &ids);
        let cfg = TrainConfig::default();
        adamw_update(&mut store, &ids, &HashMap::new(), &mut opt, &cfg);

        let shrink = 1.0 - cfg.lr * cfg.weight_decay;
        for (a, e) in store.get(w).data().iter().zip(before_w.data()) {
            assert!((a - e * shrink).abs() < 1e-15);
        }
        assert_eq!(store.get(b), &before_b, "bias rows are exempt from decay");
    }

    #[test]
    fn adamw_converges_on_quadratic_toy() {
        // minimize (x - 3)^2 with gradients 2(x - 3)
        let mut store = ParamStore::new();
        let x = store.add("x", Mat::scalar(-2.0), false);
        let ids = vec![x];
        let mut opt = AdamState::new(&store, &ids);
        let cfg = TrainConfig { lr: 0.05, ..Default::default() };
        for _ in 0..500 {
            let v = store.get(x).data()[0];
            let mut grads = HashMap::new();
            grads.insert(x, Mat::scalar(2.0 * (v - 3.0)));
            adamw_update(&mut store, &ids, &grads, &mut opt, &cfg);
        }
        let v = store.get(x).data()[0];
        assert!((v - 3.0).abs() < 1e-2, "got {v}");
    }

    #[test]
    fn total_loss_analytic_cases() {
        let ps = ParamStore::new();
        let mut g = Graph::eval(&ps);
        let cfg = TrainConfig::default();

        let mel_t = Mat::from_fn(4, 3, |r, c| (r + c) as f64 * 0.1);
        let mel_pred = g.constant(mel_t.clone());
        let durs = [2usize, 3];
        let dur_pred = g.constant(Mat::from_vec(
            2,
            1,
            durs.iter().map(|&d| (d as f64).ln()).collect(),
        ));
        let pitch = [4.0, 5.0];
        let pitch_pred = g.constant(Mat::from_vec(2, 1, pitch.to_vec()));
        let energy = [0.5, 0.25];
        let energy_pred = g.constant(Mat::from_vec(2, 1, energy.to_vec()));
        let pause_logits = g.constant(Mat::from_vec(
            2,
            4,
            vec![1e9, 0.0, 0.0, 0.0, 0.0, 1e9, 0.0, 0.0],
        ));

        // perfect predictions, warmup (no adv term): total == 0
        let (total, terms) = total_generator_loss(
            &mut g,
            GeneratorLossInputs {
                mel_pred,
                mel_target: &mel_t,
                log_dur_pred: dur_pred,
                dur_target_frames: &durs,
                pitch_pred,
                pitch_target: &pitch,
                energy_pred,
                energy_target: &energy,
                pause_logits: Some(pause_logits),
                pause_targets: &[0, 1],
                adv_g: None,
            },
            &cfg,
            1.0,
        )
        .unwrap();
        assert!(g.scalar_value(total) < 1e-9, "perfect predictions give zero loss");
        assert!(terms.mel == 0.0 && terms.dur == 0.0);

        // only mel off by a constant 0.5 everywhere, w_mel = 1 -> total 0.5
        let shifted = g.constant(mel_t.map(|v| v + 0.5));
        let (total, terms) = total_generator_loss(
            &mut g,
            GeneratorLossInputs {
                mel_pred: shifted,
                mel_target: &mel_t,
                log_dur_pred: dur_pred,
                dur_target_frames: &durs,
                pitch_pred,
                pitch_target: &pitch,
                energy_pred,
                energy_target: &energy,
                pause_logits: Some(pause_logits),
                pause_targets: &[0, 1],
                adv_g: None,
            },
            &cfg,
            1.0,
        )
        .unwrap();
        assert!((terms.mel - 0.5).abs() < 1e-9);
        assert!((g.scalar_value(total) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn total_loss_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ps = ParamStore::new();
        let mut g = Graph::eval(&ps);
        let cfg = TrainConfig::default();

        let mel_t = Mat::from_fn(3, 4, |_, _| rng.gen_range(0.0..1.0));
        let mel_p = Mat::from_fn(3, 4, |_, _| rng.gen_range(0.0..1.0));
        let durs = [1usize, 4];
        let dur_p: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..2.0)).collect();
        let pitch_t: Vec<f64> = (0..2).map(|_| rng.gen_range(3.0..6.0)).collect();
        let pitch_p: Vec<f64> = (0..2).map(|_| rng.gen_range(3.0..6.0)).collect();
        let energy_t: Vec<f64> = (0..2).map(|_| rng.gen_range(0.0..1.0)).collect();
        let energy_p: Vec<f64> = (0..2).map(|_| rng.gen_range(0.0..1.0)).collect();
        let logits = Mat::from_fn(2, 4, |_, _| rng.gen_range(-2.0..2.0));
        let targets = [3u8, 1];

        // independent scalar oracle of the same formula
        let mut mae = 0.0;
        for (a, b) in mel_p.data().iter().zip(mel_t.data()) {
            mae += (a - b).abs();
        }
        mae /= 12.0;
        let mut mse_d = 0.0;
        for i in 0..2 {
            let t = (durs[i] as f64).ln();
            mse_d += (dur_p[i] - t) * (dur_p[i] - t);
        }
        mse_d /= 2.0;
        let mut mse_p = 0.0;
        let mut mse_e = 0.0;
        for i in 0..2 {
            mse_p += (pitch_p[i] - pitch_t[i]).powi(2);
            mse_e += (energy_p[i] - energy_t[i]).powi(2);
        }
        mse_p /= 2.0;
        mse_e /= 2.0;
        let mut ce = 0.0;
        for r in 0..2 {
            let row = logits.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            ce += -((row[targets[r] as usize] - max).exp() / denom).ln();
        }
        ce /= 2.0;
        let adv = 0.37;
        let want = cfg.w_mel * mae
            + cfg.w_dur * mse_d
            + cfg.w_pitch * mse_p
            + cfg.w_energy * mse_e
            + cfg.w_pause * ce
            + cfg.w_mel * 0.0
            + 1.0 * adv;

        let mel_pred = g.constant(mel_p.clone());
        let dur_pred = g.constant(Mat::from_vec(2, 1, dur_p.clone()));
        let pitch_pred = g.constant(Mat::from_vec(2, 1, pitch_p.clone()));
        let energy_pred = g.constant(Mat::from_vec(2, 1, energy_p.clone()));
        let logit_node = g.constant(logits.clone());
        let adv_node = g.constant(Mat::scalar(adv));
        let (total, _) = total_generator_loss(
            &mut g,
            GeneratorLossInputs {
                mel_pred,
                mel_target: &mel_t,
                log_dur_pred: dur_pred,
                dur_target_frames: &durs,
                pitch_pred,
                pitch_target: &pitch_t,
                energy_pred,
                energy_target: &energy_t,
                pause_logits: Some(logit_node),
                pause_targets: &targets,
                adv_g: Some(adv_node),
            },
            &cfg,
            1.0,
        )
        .unwrap();
        assert!((g.scalar_value(total) - want).abs() < 1e-6);
    }

    #[test]
    fn train_step_is_bitwise_deterministic() {
        let (cfg, model_a, examples) = tiny();
        let batch: Vec<&TrainExample> = examples.iter().collect();

        let mut m1 = model_a;
        let mut s1 = TrainState::new(&m1, cfg.train.seed);
        train_step(&mut m1, &batch, &mut s1, &cfg).unwrap();

        let mut m2 = Model::new(&cfg, 3).unwrap();
        let mut s2 = TrainState::new(&m2, cfg.train.seed);
        train_step(&mut m2, &batch, &mut s2, &cfg).unwrap();

        assert_eq!(m1.params_hash(), m2.params_hash());
    }

    #[test]
    fn warmup_gates_discriminator_updates_and_adv_terms() {
        let (cfg, mut model, examples) = tiny();
        let batch: Vec<&TrainExample> = examples.iter().collect();
        let mut state = TrainState::new(&model, cfg.train.seed);

        // steps 0 and 1 are pre-warmup (warmup_steps = 2)
        let d0 = model.disc_hash();
        let m = train_step(&mut model, &batch, &mut state, &cfg).unwrap();
        assert_eq!(m.loss_adv_d, 0.0);
        assert_eq!(m.loss_adv_g, 0.0);
        let m = train_step(&mut model, &batch, &mut state, &cfg).unwrap();
        assert_eq!(m.loss_adv_d, 0.0);
        assert_eq!(model.disc_hash(), d0, "discriminator untouched during warmup");

        // step 2 crosses warmup: discriminator trains, adv terms active
        let m = train_step(&mut model, &batch, &mut state, &cfg).unwrap();
        assert!(m.loss_adv_d > 0.0);
        assert!(m.loss_adv_g > 0.0);
        assert_ne!(model.disc_hash(), d0);
    }

    #[test]
    fn use_adv_false_leaves_discriminator_bit_identical() {
        let (mut cfg, _, examples) = tiny();
        cfg.train.use_adv = false;
        cfg.adv.warmup_steps = 0;
        let mut model = Model::new(&cfg, 3).unwrap();
        let batch: Vec<&TrainExample> = examples.iter().collect();
        let mut state = TrainState::new(&model, cfg.train.seed);
        let d0 = model.disc_hash();
        for _ in 0..3 {
            train_step(&mut model, &batch, &mut state, &cfg).unwrap();
        }
        assert_eq!(model.disc_hash(), d0);
    }

    #[test]
    fn batch_indices_cover_dataset_deterministically() {
        let a = batch_indices(7, 3, 42, 5);
        let b = batch_indices(7, 3, 42, 5);
        assert_eq!(a, b);
        // one epoch covers every example exactly once
        let mut seen = Vec::new();
        for step in 0..3 {
            seen.extend(batch_indices(7, 3, 1, step));
        }
        // steps 0..2 consume cursor 0,3,6 -> 3+3+1 = 7 items
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn run_training_zero_steps_writes_init_checkpoint_only() {
        let (mut cfg, _, examples) = tiny();
        cfg.train.max_steps = 0;
        let mut model = Model::new(&cfg, 3).unwrap();
        let mut state = TrainState::new(&model, cfg.train.seed);
        let dir = tempfile::tempdir().unwrap();
        let metrics = run_training(&mut model, &examples, &mut state, dir.path()).unwrap();
        assert!(metrics.is_empty());
        assert!(dir.path().join("checkpoints/init.ckpt").exists());
        assert!(dir.path().join("latest.ckpt").exists());
        let entries: Vec<_> = std::fs::read_dir(dir.path().join("checkpoints"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(entries, vec!["init.ckpt".to_string()]);
    }

    #[test]
    fn metric_log_steps_strictly_increase() {
        let (mut cfg, _, examples) = tiny();
        cfg.train.max_steps = 4;
        cfg.adv.warmup_steps = 1;
        let mut model = Model::new(&cfg, 3).unwrap();
        let mut state = TrainState::new(&model, cfg.train.seed);
        let dir = tempfile::tempdir().unwrap();
        let metrics = run_training(&mut model, &examples, &mut state, dir.path()).unwrap();
        assert_eq!(metrics.len(), 4);
        for w in metrics.windows(2) {
            assert!(w[1].step > w[0].step);
        }
        let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 4);
        let first: StepMetrics = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first.step, 1);
    }
}
