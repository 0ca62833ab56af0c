use pbm_core::photonic::{
    bandwidth_for_ratio, channel_moments, convolve_patches, quantization_bound, rectified_moments,
    simulate_convolution, ChannelBank, PhotonicConfig, SpectralChannel,
};
use pbm_core::RandomStream;
use proptest::prelude::*;

mod common;

use common::oracle::{correlation, draws, exact_convolution, moments, random_bank};

#[test]
fn noiseless_stream_equals_exact_convolution() {
    let cfg = PhotonicConfig::noiseless();
    let mut rng = RandomStream::new(7, 0);
    for case in 0..1000 {
        let bank = random_bank(&cfg, &mut rng);
        let len = cfg.n_channels + rng.below(24);
        let x: Vec<f64> = (0..len).map(|_| rng.uniform()).collect();
        let got = simulate_convolution(&bank, &x, &cfg, &mut rng).unwrap();
        let want = exact_convolution(&bank.mean_weights(&cfg), &x);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12, "case {case}: {g} vs {w}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn quantized_output_within_one_lsb_bound(seed in any::<u64>(), extra in 0usize..16) {
        let cfg = PhotonicConfig { stochastic: false, ..PhotonicConfig::default() };
        let mut rng = RandomStream::new(seed, 1);
        let bank = random_bank(&cfg, &mut rng);
        let x: Vec<f64> = (0..cfg.n_channels + extra).map(|_| rng.uniform()).collect();
        let got = simulate_convolution(&bank, &x, &cfg, &mut rng).unwrap();
        let want = exact_convolution(&bank.mean_weights(&cfg), &x);
        let bound = quantization_bound(&bank, &cfg);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() <= bound + 1e-12, "{} vs {} bound {}", g, w, bound);
        }
    }

    #[test]
    fn patch_and_stream_paths_agree_without_noise(seed in any::<u64>(), quantize in any::<bool>()) {
        let cfg = PhotonicConfig { stochastic: false, quantize, ..PhotonicConfig::default() };
        let mut rng = RandomStream::new(seed, 2);
        let bank = random_bank(&cfg, &mut rng);
        let patch: Vec<f64> = (0..cfg.n_channels).map(|_| rng.uniform()).collect();
        let stream: Vec<f64> = patch.iter().rev().copied().collect();
        let a = simulate_convolution(&bank, &stream, &cfg, &mut rng).unwrap();
        let b = convolve_patches(&bank, &patch, &cfg, &mut rng).unwrap();
        prop_assert!((a[0] - b[0]).abs() <= 1e-12);
    }
}

#[test]
fn empirical_moments_match_programmed_moments() {
    let cfg = PhotonicConfig::default();
    let (lo, hi) = cfg.ratio_envelope();
    let channels: Vec<SpectralChannel> = (0..9)
        .map(|k| {
            let r = lo + (hi - lo) * k as f64 / 8.0;
            SpectralChannel::new(0.2 + 0.1 * k as f64, bandwidth_for_ratio(r, &cfg), &cfg)
        })
        .collect();
    let negative = (0..9).map(|k| k % 3 == 1).collect();
    let bank = ChannelBank::new(channels, negative, &cfg).unwrap();
    let samples = draws(&bank, &cfg, 100_000, &mut RandomStream::new(3, 9));
    for (k, xs) in samples.iter().enumerate() {
        let (mu, sigma) = channel_moments(&bank.channels()[k], &cfg);
        let (m, s) = rectified_moments(mu, sigma);
        let got = moments(xs);
        let mean = bank.sign(k) * m;
        assert!(
            (got.mean - mean).abs() <= 4.0 * got.se_mean,
            "channel {k}: mean {} vs {mean}",
            got.mean
        );
        assert!(
            (got.std - s).abs() <= 4.0 * got.se_std,
            "channel {k}: std {} vs {s}",
            got.std
        );
    }
}

#[test]
fn low_ratio_channel_matches_untruncated_moments() {
    let cfg = PhotonicConfig::default();
    let ch = SpectralChannel::new(0.8, cfg.bandwidth_max, &cfg);
    let bank = ChannelBank::new(vec![ch; 9], vec![false; 9], &cfg).unwrap();
    let (mu, sigma) = channel_moments(&bank.channels()[0], &cfg);
    let xs = &draws(&bank, &cfg, 100_000, &mut RandomStream::new(4, 0))[0];
    let got = moments(xs);
    assert!((got.mean - mu).abs() <= 4.0 * got.se_mean);
    assert!((got.std - sigma).abs() <= 4.0 * got.se_std);
}

#[test]
fn channels_are_uncorrelated() {
    let cfg = PhotonicConfig::default();
    let mut rng = RandomStream::new(5, 0);
    let bank = random_bank(&cfg, &mut rng);
    let samples = draws(&bank, &cfg, 100_000, &mut rng);
    for i in 0..9 {
        for j in i + 1..9 {
            let r = correlation(&samples[i], &samples[j]);
            assert!(r.abs() < 0.02, "channels {i},{j}: r = {r}");
        }
    }
}

#[test]
fn distinct_stream_ids_give_uncorrelated_draws() {
    let cfg = PhotonicConfig::default();
    let bank = random_bank(&cfg, &mut RandomStream::new(6, 0));
    let a = draws(&bank, &cfg, 50_000, &mut RandomStream::new(6, 1));
    let b = draws(&bank, &cfg, 50_000, &mut RandomStream::new(6, 2));
    assert_ne!(a[0], b[0]);
    assert!(correlation(&a[0], &b[0]).abs() < 0.02);
    let again = draws(&bank, &cfg, 50_000, &mut RandomStream::new(6, 1));
    assert_eq!(a, again);
}

#[test]
fn output_variance_matches_independent_taps() {
    // Var[y] = Σ_k x_k² Var[w_k] for independent per-symbol draws
    let cfg = PhotonicConfig {
        quantize: false,
        ..PhotonicConfig::default()
    };
    let mut rng = RandomStream::new(8, 0);
    let bank = random_bank(&cfg, &mut rng);
    let patch: Vec<f64> = (0..9).map(|_| rng.uniform()).collect();
    let n = 100_000;
    let ys = convolve_patches(&bank, &patch.repeat(n), &cfg, &mut rng).unwrap();
    let want_var: f64 = bank
        .channels()
        .iter()
        .zip(&patch)
        .map(|(ch, x)| {
            let (mu, sigma) = channel_moments(ch, &cfg);
            x * x * rectified_moments(mu, sigma).1.powi(2)
        })
        .sum();
    let got = moments(&ys);
    let se_var = 2.0 * got.std * got.se_std;
    assert!((got.std.powi(2) - want_var).abs() <= 4.0 * se_var);
}
