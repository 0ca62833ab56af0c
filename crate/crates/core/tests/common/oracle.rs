use pbm_core::photonic::{sample_weights, ChannelBank, PhotonicConfig, SpectralChannel};
use pbm_core::RandomStream;

pub fn random_bank(cfg: &PhotonicConfig, rng: &mut RandomStream) -> ChannelBank {
    let channels = (0..cfg.n_channels)
        .map(|_| {
            let b = rng.uniform_range(cfg.bandwidth_min, cfg.bandwidth_max);
            SpectralChannel::new(rng.uniform(), b, cfg)
        })
        .collect();
    let negative = (0..cfg.n_channels).map(|_| rng.uniform() < 0.5).collect();
    ChannelBank::new(channels, negative, cfg).unwrap()
}

/// `y[t] = Σ_k w_k · x[t − k]` for every full window.
pub fn exact_convolution(w: &[f64], x: &[f64]) -> Vec<f64> {
    let n = w.len();
    (n - 1..x.len())
        .map(|t| (0..n).map(|k| w[k] * x[t - k]).sum())
        .collect()
}

pub struct Moments {
    pub mean: f64,
    pub std: f64,
    pub se_mean: f64,
    pub se_std: f64,
}

/// Sample mean and std with their delta-method standard errors.
pub fn moments(xs: &[f64]) -> Moments {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    let std = m2.sqrt();
    Moments {
        mean,
        std,
        se_mean: std / n.sqrt(),
        se_std: ((m4 - m2 * m2) / n).sqrt() / (2.0 * std),
    }
}

pub fn draws(
    bank: &ChannelBank,
    cfg: &PhotonicConfig,
    n: usize,
    rng: &mut RandomStream,
) -> Vec<Vec<f64>> {
    let mut per_channel = vec![Vec::with_capacity(n); bank.len()];
    for _ in 0..n {
        for (k, w) in sample_weights(bank, cfg, rng).into_iter().enumerate() {
            per_channel[k].push(w);
        }
    }
    per_channel
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (moments(a), moments(b));
    let cov = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - ma.mean) * (y - mb.mean))
        .sum::<f64>()
        / a.len() as f64;
    cov / (ma.std * mb.std)
}

/// Monte-Carlo estimate of `KL(N(μ,σ²) ‖ N(0,prior²))` as the mean of
/// `log q − log p` over `n` draws, with its standard error.
pub fn kl_monte_carlo(
    mu: f64,
    sigma: f64,
    prior: f64,
    n: usize,
    rng: &mut RandomStream,
) -> (f64, f64) {
    let terms: Vec<f64> = (0..n)
        .map(|_| {
            let w = mu + sigma * rng.normal();
            let log_q = -((w - mu) / sigma).powi(2) / 2.0 - sigma.ln();
            let log_p = -(w / prior).powi(2) / 2.0 - prior.ln();
            log_q - log_p
        })
        .collect();
    let mean = terms.iter().sum::<f64>() / n as f64;
    let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
