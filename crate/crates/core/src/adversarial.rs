//! Multi-length window discriminator and least-squares GAN objective.
//!
//! Each step slices one window per configured length (lengths longer than
//! the utterance are skipped) at a uniformly random start; the same offsets
//! are applied to the real and generated mel so the pair is aligned. The
//! discriminator is a conv stack over time (mel bins as input channels)
//! with per-channel normalization, global average pooling and a linear
//! head producing one score per window.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::AdvConfig;
use crate::graph::{Graph, NodeId};
use crate::nn::{Conv1d, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::tensor::Mat;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct WindowSpec {
    /// Candidate window lengths in frames; positive, sorted, distinct.
    pub lengths: Vec<usize>,
}

impl WindowSpec {
    pub fn new(lengths: Vec<usize>) -> Result<Self> {
        if lengths.is_empty() || lengths.contains(&0) {
            return Err(Error::Config("window lengths must be positive".into()));
        }
        if lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("window lengths must be sorted and distinct".into()));
        }
        Ok(WindowSpec { lengths })
    }

    pub fn from_config(cfg: &AdvConfig) -> Result<Self> {
        WindowSpec::new(cfg.window_lengths.clone())
    }
}

/// Sample one (start, len) per feasible length; starts are uniform in
/// [0, total - len]. Real/fake pairs reuse the same offsets.
pub fn sample_windows(
    total_frames: usize,
    spec: &WindowSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for &len in &spec.lengths {
        if len > total_frames {
            continue;
        }
        let start = rng.gen_range(0..=total_frames - len);
        out.push((start, len));
    }
    out
}

/// Slice windows out of a mel matrix (frames x n_mels).
pub fn slice_windows(mel: &Mat, spec: &WindowSpec, rng: &mut ChaCha8Rng) -> Vec<Mat> {
    sample_windows(mel.rows(), spec, rng)
        .into_iter()
        .map(|(s, l)| {
            let mut w = Mat::zeros(l, mel.cols());
            for r in 0..l {
                w.row_mut(r).copy_from_slice(mel.row(s + r));
            }
            w
        })
        .collect()
}

/// Least-squares GAN losses over window scores:
/// d = mean((r-1)^2)/2 + mean(f^2)/2, g = mean((f-1)^2)/2.
pub fn gan_losses(real_scores: &[f64], fake_scores: &[f64]) -> Result<(f64, f64)> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(Error::Contract(
            "gan_losses needs at least one real and one fake score; skip the adversarial term when no window fits".into(),
        ));
    }
    let mean = |xs: &[f64], f: &dyn Fn(f64) -> f64| {
        xs.iter().map(|&x| f(x)).sum::<f64>() / xs.len() as f64
    };
    let d = mean(real_scores, &|r| (r - 1.0) * (r - 1.0)) / 2.0
        + mean(fake_scores, &|f| f * f) / 2.0;
    let g = mean(fake_scores, &|f| (f - 1.0) * (f - 1.0)) / 2.0;
    Ok((d, g))
}

fn stack_scores(g: &mut Graph, scores: &[NodeId]) -> NodeId {
    if scores.len() == 1 {
        scores[0]
    } else {
        g.concat_rows(scores)
    }
}

/// Graph-side generator loss: mean((f-1)^2)/2 with gradients through the
/// fake windows.
pub fn lsgan_g_loss(g: &mut Graph, fake_scores: &[NodeId]) -> Result<NodeId> {
    if fake_scores.is_empty() {
        return Err(Error::Contract("no fake scores for generator loss".into()));
    }
    let f = stack_scores(g, fake_scores);
    let ones = g.constant(Mat::from_fn(fake_scores.len(), 1, |_, _| 1.0));
    let d = g.sub(f, ones);
    let d = g.square(d);
    let m = g.mean_all(d);
    Ok(g.scale(m, 0.5))
}

/// Graph-side discriminator loss: mean((r-1)^2)/2 + mean(f^2)/2.
pub fn lsgan_d_loss(g: &mut Graph, real_scores: &[NodeId], fake_scores: &[NodeId]) -> Result<NodeId> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(Error::Contract("no scores for discriminator loss".into()));
    }
    let r = stack_scores(g, real_scores);
    let ones = g.constant(Mat::from_fn(real_scores.len(), 1, |_, _| 1.0));
    let rd = g.sub(r, ones);
    let rd = g.square(rd);
    let r_term = g.mean_all(rd);

    let f = stack_scores(g, fake_scores);
    let fd = g.square(f);
    let f_term = g.mean_all(fd);

    let sum = g.add(r_term, f_term);
    Ok(g.scale(sum, 0.5))
}

/// Conv stack over time with per-channel normalization, global average
/// pooling and a linear head; one scalar score per window.
#[derive(Clone, Debug)]
pub struct Discriminator {
    convs: Vec<(Conv1d, LayerNorm)>,
    head: Linear,
}

impl Discriminator {
    pub fn new(ps: &mut ParamStore, n_mels: usize, cfg: &AdvConfig, rng: &mut ChaCha8Rng) -> Self {
        let name = "discriminator";
        let mut convs = Vec::with_capacity(cfg.disc_layers);
        let mut in_ch = n_mels;
        for i in 0..cfg.disc_layers {
            convs.push((
                Conv1d::new(ps, &format!("{name}.conv{i}"), in_ch, cfg.disc_channels, cfg.disc_kernel, rng),
                LayerNorm::new(ps, &format!("{name}.conv{i}.norm"), cfg.disc_channels),
            ));
            in_ch = cfg.disc_channels;
        }
        let head = Linear::new(ps, &format!("{name}.head"), cfg.disc_channels, 1, true, rng);
        Discriminator { convs, head }
    }

    /// Score one L x n_mels window; returns a 1x1 node.
    pub fn score(&self, g: &mut Graph, window: NodeId) -> NodeId {
        let mut h = window;
        for (conv, norm) in &self.convs {
            h = conv.forward(g, h);
            // per-channel normalization over the time axis
            let ht = g.transpose(h);
            let ht = norm.forward(g, ht);
            h = g.transpose(ht);
            h = g.leaky_relu(h, 0.2);
        }
        let frames = g.value(h).rows();
        let pooled = g.span_mean_rows(h, &[(0, frames)]);
        self.head.forward(g, pooled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn spec(lengths: &[usize]) -> WindowSpec {
        WindowSpec::new(lengths.to_vec()).unwrap()
    }

    #[test]
    fn window_spec_validation() {
        assert!(WindowSpec::new(vec![]).is_err());
        assert!(WindowSpec::new(vec![0, 4]).is_err());
        assert!(WindowSpec::new(vec![8, 4]).is_err());
        assert!(WindowSpec::new(vec![4, 4]).is_err());
        assert!(WindowSpec::new(vec![4, 8]).is_ok());
    }

    #[test]
    fn offsets_stay_in_bounds_over_many_seeds() {
        let sp = spec(&[4]);
        for seed in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ws = sample_windows(10, &sp, &mut rng);
            assert_eq!(ws.len(), 1);
            let (s, l) = ws[0];
            assert_eq!(l, 4);
            assert!(s <= 6, "seed {seed}: start {s}");
        }
    }

    #[test]
    fn too_long_lengths_are_skipped_and_exact_fit_forces_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_windows(10, &spec(&[32, 64, 96]), &mut rng).is_empty());
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ws = sample_windows(7, &spec(&[7]), &mut rng);
            assert_eq!(ws, vec![(0, 7)]);
        }
    }

    proptest! {
        #[test]
        fn windows_never_read_out_of_bounds(
            total in 1usize..200,
            lens in proptest::collection::btree_set(1usize..64, 1..4),
            seed in any::<u64>(),
        ) {
            let sp = WindowSpec::new(lens.into_iter().collect()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (s, l) in sample_windows(total, &sp, &mut rng) {
                prop_assert!(s + l <= total);
            }
        }
    }

    #[test]
    fn slice_windows_copies_the_right_rows() {
        let mel = Mat::from_fn(10, 3, |r, c| (r * 3 + c) as f64);
        let sp = spec(&[4]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let offsets = sample_windows(10, &sp, &mut rng.clone());
        let ws = slice_windows(&mel, &sp, &mut rng);
        assert_eq!(ws.len(), 1);
        let (s, l) = offsets[0];
        for r in 0..l {
            assert_eq!(ws[0].row(r), mel.row(s + r));
        }
    }

    #[test]
    fn gan_losses_analytic_cases() {
        let (d, g) = gan_losses(&[1.0], &[0.0]).unwrap();
        assert!(d.abs() < 1e-12);
        assert!((g - 0.5).abs() < 1e-12);

        let (d, g) = gan_losses(&[0.0], &[1.0]).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        assert!(g.abs() < 1e-12);

        assert!(gan_losses(&[], &[1.0]).is_err());
        assert!(gan_losses(&[1.0], &[]).is_err());
    }

    #[test]
    fn gan_losses_match_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.gen_range(1..6);
            let m = rng.gen_range(1..6);
            let real: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let fake: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
            // independent loop oracle
            let mut dr = 0.0;
            for &r in &real {
                dr += (r - 1.0) * (r - 1.0);
            }
            let mut df = 0.0;
            let mut gg = 0.0;
            for &f in &fake {
                df += f * f;
                gg += (f - 1.0) * (f - 1.0);
            }
            let want_d = dr / real.len() as f64 / 2.0 + df / fake.len() as f64 / 2.0;
            let want_g = gg / fake.len() as f64 / 2.0;
            let (d, g) = gan_losses(&real, &fake).unwrap();
            assert!((d - want_d).abs() < 1e-7);
            assert!((g - want_g).abs() < 1e-7);

            // graph route agrees with the pure route
            let ps = ParamStore::new();
            let mut gr = Graph::eval(&ps);
            let real_nodes: Vec<NodeId> =
                real.iter().map(|&v| gr.constant(Mat::scalar(v))).collect();
            let fake_nodes: Vec<NodeId> =
                fake.iter().map(|&v| gr.constant(Mat::scalar(v))).collect();
            let dn = lsgan_d_loss(&mut gr, &real_nodes, &fake_nodes).unwrap();
            let gn = lsgan_g_loss(&mut gr, &fake_nodes).unwrap();
            assert!((gr.scalar_value(dn) - want_d).abs() < 1e-12);
            assert!((gr.scalar_value(gn) - want_g).abs() < 1e-12);
        }
    }

    fn tiny_disc() -> (ParamStore, Discriminator) {
        let cfg = AdvConfig {
            disc_channels: 8,
            disc_layers: 2,
            disc_kernel: 3,
            ..Default::default()
        };
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let d = Discriminator::new(&mut ps, 6, &cfg, &mut rng);
        (ps, d)
    }

    #[test]
    fn discriminator_scalar_finite_and_deterministic() {
        let (ps, disc) = tiny_disc();
        let w = Mat::from_fn(12, 6, |r, c| ((r * 6 + c) as f64 * 0.3).sin());
        let run = || {
            let mut g = Graph::eval(&ps);
            let wn = g.constant(w.clone());
            let s = disc.score(&mut g, wn);
            g.scalar_value(s)
        };
        let s = run();
        assert!(s.is_finite());
        assert_eq!(s, run());

        // single-frame window still works
        let mut g = Graph::eval(&ps);
        let wn = g.constant(Mat::from_fn(1, 6, |_, c| c as f64 * 0.1));
        let s = disc.score(&mut g, wn);
        assert!(g.scalar_value(s).is_finite());
    }

    #[test]
    fn generator_gradient_flows_through_fake_window() {
        let (ps, disc) = tiny_disc();
        let mut g = Graph::eval(&ps);
        let fake = g.constant(Mat::from_fn(8, 6, |r, c| ((r + c) as f64 * 0.21).cos()));
        let score = disc.score(&mut g, fake);
        let loss = lsgan_g_loss(&mut g, &[score]).unwrap();
        let grads = g.backward(loss);
        let d_mel = grads.node(fake).expect("fake window should receive gradient");
        assert!(d_mel.data().iter().any(|&v| v != 0.0));
    }
}
