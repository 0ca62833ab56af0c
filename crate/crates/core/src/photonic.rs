//! Sample-level model of the analog chain: spectrally encoded stochastic
//! weights, intensity modulation of the input, per-channel group delay,
//! photodetection and converter quantization.
//!
//! Channel `k` carries weight `w_k` and is delayed by `k` symbols, so the
//! detector sees `y[t] = Σ_k w_k · x[t − k]`, a 9-tap convolution per symbol.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RandomStream;

/// Physical and converter parameters. Defaults describe the reference system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhotonicConfig {
    pub n_channels: usize,
    /// THz
    pub center_freq: f64,
    /// THz
    pub spacing: f64,
    /// ps/THz
    pub dispersion: f64,
    /// GS/s
    pub sample_rate: f64,
    pub samples_per_symbol: usize,
    pub dac_bits: u32,
    pub adc_bits: u32,
    /// GHz
    pub bandwidth_min: f64,
    /// GHz
    pub bandwidth_max: f64,
    /// Weight units per unit optical power.
    pub gain: f64,
    /// Exponent of the bandwidth noise law.
    pub noise_exponent: f64,
    /// Gaussian detector noise, output units.
    pub detector_noise_std: f64,
    /// Fractional ADC headroom above the nominal full-scale output.
    pub adc_headroom: f64,
    /// When false, every channel emits exactly its mean power.
    pub stochastic: bool,
    /// When false, DAC and ADC are ideal.
    pub quantize: bool,
}

impl Default for PhotonicConfig {
    fn default() -> Self {
        Self {
            n_channels: 9,
            center_freq: 194.0,
            spacing: 0.403,
            dispersion: -93.1,
            sample_rate: 80.0,
            samples_per_symbol: 3,
            dac_bits: 8,
            adc_bits: 8,
            bandwidth_min: 25.0,
            bandwidth_max: 150.0,
            gain: 1.0,
            noise_exponent: 0.5,
            detector_noise_std: 0.0,
            adc_headroom: 0.1,
            stochastic: true,
            quantize: true,
        }
    }
}

impl PhotonicConfig {
    /// Ideal converters and deterministic channels.
    pub fn noiseless() -> Self {
        Self {
            stochastic: false,
            quantize: false,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("photonic config: {m}")));
        if self.n_channels == 0 || self.samples_per_symbol == 0 {
            return bad("n_channels and samples_per_symbol must be positive");
        }
        if !(self.sample_rate > 0.0) || !(self.spacing > 0.0) {
            return bad("sample_rate and spacing must be positive");
        }
        if !(0.0 < self.bandwidth_min && self.bandwidth_min <= self.bandwidth_max) {
            return bad("need 0 < bandwidth_min <= bandwidth_max");
        }
        if !(1..=24).contains(&self.dac_bits) || !(1..=24).contains(&self.adc_bits) {
            return bad("converter resolution must be 1..=24 bits");
        }
        if !(self.gain > 0.0) || !(self.noise_exponent > 0.0) {
            return bad("gain and noise_exponent must be positive");
        }
        Ok(())
    }

    /// Symbol duration in ps.
    pub fn symbol_duration(&self) -> f64 {
        1e3 * self.samples_per_symbol as f64 / self.sample_rate
    }

    /// Center frequency of channel `k` in THz.
    pub fn channel_frequency(&self, k: usize) -> f64 {
        self.center_freq + (k as f64 - (self.n_channels as f64 - 1.0) / 2.0) * self.spacing
    }

    /// Relative group delay between adjacent channels in ps.
    pub fn channel_delay_step(&self) -> f64 {
        self.dispersion.abs() * self.spacing
    }

    fn dac_levels(&self) -> f64 {
        ((1u64 << self.dac_bits) - 1) as f64
    }

    fn adc_levels(&self) -> f64 {
        ((1u64 << self.adc_bits) - 1) as f64
    }

    /// `σ/μ` reachable at the bandwidth limits: (at `bandwidth_max`, at `bandwidth_min`).
    pub fn ratio_envelope(&self) -> (f64, f64) {
        (
            noise_ratio(self.bandwidth_max, self),
            noise_ratio(self.bandwidth_min, self),
        )
    }

    /// Std/mean of the zero-truncated draws at the bandwidth limits, i.e. the
    /// ratio an impulse measurement can actually observe.
    pub fn measured_ratio_envelope(&self) -> (f64, f64) {
        let (lo, hi) = self.ratio_envelope();
        let observed = |r: f64| {
            let (m, s) = rectified_moments(1.0, r);
            s / m
        };
        (observed(lo), observed(hi))
    }
}

/// `σ/μ` of a channel of bandwidth `bandwidth` GHz: `(1 + B·τ)^-α`.
pub fn noise_ratio(bandwidth: f64, cfg: &PhotonicConfig) -> f64 {
    (1.0 + bandwidth * cfg.symbol_duration() * 1e-3).powf(-cfg.noise_exponent)
}

/// Bandwidth realizing noise ratio `ratio`, clamped to the legal range.
pub fn bandwidth_for_ratio(ratio: f64, cfg: &PhotonicConfig) -> f64 {
    let b = if ratio <= 0.0 {
        f64::INFINITY
    } else {
        (ratio.powf(-1.0 / cfg.noise_exponent) - 1.0) / (cfg.symbol_duration() * 1e-3)
    };
    b.clamp(cfg.bandwidth_min, cfg.bandwidth_max)
}

/// One spectral slice of the chaotic source.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralChannel {
    power: f64,
    bandwidth: f64,
}

impl SpectralChannel {
    /// Negative powers clamp to zero and bandwidth to the configured range.
    pub fn new(power: f64, bandwidth: f64, cfg: &PhotonicConfig) -> Self {
        Self {
            power: if power.is_finite() {
                power.max(0.0)
            } else {
                0.0
            },
            bandwidth: if bandwidth.is_nan() {
                cfg.bandwidth_min
            } else {
                bandwidth.clamp(cfg.bandwidth_min, cfg.bandwidth_max)
            },
        }
    }

    pub fn power(&self) -> f64 {
        self.power
    }

    /// GHz
    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }
}

/// Mean and standard deviation of the weight a channel encodes.
pub fn channel_moments(ch: &SpectralChannel, cfg: &PhotonicConfig) -> (f64, f64) {
    let mu = cfg.gain * ch.power;
    (mu, mu * noise_ratio(ch.bandwidth, cfg))
}

/// The channels of one 9-weight kernel plus the digital sign bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelBank {
    channels: Vec<SpectralChannel>,
    negative: Vec<bool>,
}

impl ChannelBank {
    pub fn new(
        channels: Vec<SpectralChannel>,
        negative: Vec<bool>,
        cfg: &PhotonicConfig,
    ) -> Result<Self> {
        if channels.len() != cfg.n_channels || negative.len() != cfg.n_channels {
            return Err(Error::InvalidArgument(format!(
                "bank needs {} channels and signs, got {} and {}",
                cfg.n_channels,
                channels.len(),
                negative.len()
            )));
        }
        Ok(Self { channels, negative })
    }

    /// Zero-power bank at minimum bandwidth.
    pub fn dark(cfg: &PhotonicConfig) -> Self {
        Self {
            channels: vec![SpectralChannel::new(0.0, cfg.bandwidth_min, cfg); cfg.n_channels],
            negative: vec![false; cfg.n_channels],
        }
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn channels(&self) -> &[SpectralChannel] {
        &self.channels
    }

    pub fn channel_mut(&mut self, k: usize) -> &mut SpectralChannel {
        &mut self.channels[k]
    }

    pub fn is_negative(&self, k: usize) -> bool {
        self.negative[k]
    }

    pub fn sign(&self, k: usize) -> f64 {
        if self.negative[k] {
            -1.0
        } else {
            1.0
        }
    }

    /// Signed mean weights `sign ⊙ g·P`.
    pub fn mean_weights(&self, cfg: &PhotonicConfig) -> Vec<f64> {
        (0..self.len())
            .map(|k| self.sign(k) * channel_moments(&self.channels[k], cfg).0)
            .collect()
    }

    /// ADC full scale shared by both readout passes: `(1 + headroom)·Σ_k g·P_k`.
    pub fn adc_full_scale(&self, cfg: &PhotonicConfig) -> f64 {
        let total: f64 = self.channels.iter().map(|ch| cfg.gain * ch.power).sum();
        total * (1.0 + cfg.adc_headroom)
    }

    fn has_negative(&self) -> bool {
        self.negative.iter().any(|&n| n)
    }
}

/// Relative delay of channel `channel_index` in DAC/ADC samples.
pub fn delay_samples(channel_index: usize, cfg: &PhotonicConfig) -> Result<usize> {
    if channel_index >= cfg.n_channels {
        return Err(Error::InvalidArgument(format!(
            "channel {channel_index} out of range for {} channels",
            cfg.n_channels
        )));
    }
    let ps = channel_index as f64 * cfg.channel_delay_step();
    Ok((ps * cfg.sample_rate * 1e-3).round() as usize)
}

fn dac_level(x: f64, cfg: &PhotonicConfig) -> f64 {
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
    if cfg.quantize {
        let l = cfg.dac_levels();
        (x * l).round() / l
    } else {
        x
    }
}

/// Drive waveform: each element clamped to `[0, 1]`, quantized when enabled,
/// and held for `samples_per_symbol` samples.
pub fn dac_encode(x: &[f64], cfg: &PhotonicConfig) -> Vec<f64> {
    x.iter()
        .flat_map(|&v| std::iter::repeat_n(dac_level(v, cfg), cfg.samples_per_symbol))
        .collect()
}

/// Uniform `2^adc_bits`-level quantizer over `[lo, hi]`, saturating outside.
pub fn adc_quantize(y: f64, range: (f64, f64), cfg: &PhotonicConfig) -> f64 {
    let (lo, hi) = range;
    let l = cfg.adc_levels();
    let u = ((y - lo) / (hi - lo)).clamp(0.0, 1.0);
    lo + (u * l).round() / l * (hi - lo)
}

/// Draws one realization of all channel weights: `sign · max(0, N(μ, σ²))`.
pub fn sample_weights(
    bank: &ChannelBank,
    cfg: &PhotonicConfig,
    rng: &mut RandomStream,
) -> Vec<f64> {
    let mut w = vec![0.0; bank.len()];
    draw_magnitudes(bank, cfg, rng, &mut w);
    for (k, wk) in w.iter_mut().enumerate() {
        *wk *= bank.sign(k);
    }
    w
}

fn draw_magnitudes(
    bank: &ChannelBank,
    cfg: &PhotonicConfig,
    rng: &mut RandomStream,
    out: &mut [f64],
) {
    for (o, ch) in out.iter_mut().zip(&bank.channels) {
        let (mu, sigma) = channel_moments(ch, cfg);
        *o = if cfg.stochastic && sigma > 0.0 {
            (mu + sigma * rng.normal()).max(0.0)
        } else {
            mu
        };
    }
}

/// Photodetector output for one symbol given positive/negative pass powers.
fn readout(
    pos: f64,
    neg: f64,
    full_scale: f64,
    has_neg: bool,
    cfg: &PhotonicConfig,
    rng: &mut RandomStream,
) -> f64 {
    let detect = |y: f64, rng: &mut RandomStream| {
        let y = if cfg.detector_noise_std > 0.0 {
            y + cfg.detector_noise_std * rng.normal()
        } else {
            y
        };
        if cfg.quantize && full_scale > 0.0 {
            adc_quantize(y, (0.0, full_scale), cfg)
        } else {
            y
        }
    };
    let p = detect(pos, rng);
    if has_neg {
        p - detect(neg, rng)
    } else {
        p
    }
}

/// Runs the full analog chain over the input stream `x` (values in `[0, 1]`).
///
/// Returns one output per valid symbol `t = n−1 .. len(x)−1`, each computed
/// with a fresh weight draw and read at the middle sample of its symbol.
pub fn simulate_convolution(
    bank: &ChannelBank,
    x: &[f64],
    cfg: &PhotonicConfig,
    rng: &mut RandomStream,
) -> Result<Vec<f64>> {
    let n = cfg.n_channels;
    if bank.len() != n {
        return Err(Error::InvalidArgument(format!(
            "bank has {} channels, config expects {n}",
            bank.len()
        )));
    }
    if x.len() < n {
        return Err(Error::InvalidArgument(format!(
            "input of length {} shorter than {n} taps",
            x.len()
        )));
    }
    let wave = dac_encode(x, cfg);
    let delays = (0..n)
        .map(|k| delay_samples(k, cfg))
        .collect::<Result<Vec<_>>>()?;
    let full_scale = bank.adc_full_scale(cfg);
    let has_neg = bank.has_negative();
    let sps = cfg.samples_per_symbol;
    let mut w = vec![0.0; n];
    let mut out = Vec::with_capacity(x.len() - n + 1);
    for t in n - 1..x.len() {
        draw_magnitudes(bank, cfg, rng, &mut w);
        let s = t * sps + sps / 2;
        let (mut pos, mut neg) = (0.0, 0.0);
        for k in 0..n {
            let v = s.checked_sub(delays[k]).map_or(0.0, |i| w[k] * wave[i]);
            if bank.is_negative(k) {
                neg += v;
            } else {
                pos += v;
            }
        }
        out.push(readout(pos, neg, full_scale, has_neg, cfg, rng));
    }
    Ok(out)
}

/// Symbol-level fast path: each `n`-long patch is one convolution window,
/// `patch[k]` being the input that meets tap `k`. Equivalent to
/// [`simulate_convolution`] over the patch laid out in reverse, taking its
/// single valid output.
pub fn convolve_patches(
    bank: &ChannelBank,
    patches: &[f64],
    cfg: &PhotonicConfig,
    rng: &mut RandomStream,
) -> Result<Vec<f64>> {
    let n = cfg.n_channels;
    if !patches.len().is_multiple_of(n) || bank.len() != n {
        return Err(Error::InvalidArgument(format!(
            "patch stream of length {} is not a multiple of {n}",
            patches.len()
        )));
    }
    let full_scale = bank.adc_full_scale(cfg);
    let has_neg = bank.has_negative();
    let mut w = vec![0.0; n];
    Ok(patches
        .chunks(n)
        .map(|patch| {
            draw_magnitudes(bank, cfg, rng, &mut w);
            let (mut pos, mut neg) = (0.0, 0.0);
            for k in 0..n {
                let v = w[k] * dac_level(patch[k], cfg);
                if bank.is_negative(k) {
                    neg += v;
                } else {
                    pos += v;
                }
            }
            readout(pos, neg, full_scale, has_neg, cfg, rng)
        })
        .collect())
}

/// Worst-case deviation of a quantized noiseless output from the exact
/// convolution: half a DAC LSB per tap plus half an ADC LSB per readout pass.
/// Outputs beyond the ADC full scale are not covered.
pub fn quantization_bound(bank: &ChannelBank, cfg: &PhotonicConfig) -> f64 {
    let dac =
        bank.mean_weights(cfg).iter().map(|w| w.abs()).sum::<f64>() / (2.0 * cfg.dac_levels());
    let passes = if bank.has_negative() { 2.0 } else { 1.0 };
    dac + passes * bank.adc_full_scale(cfg) / (2.0 * cfg.adc_levels())
}

/// Convolutions per second: one per symbol.
pub fn simulated_throughput(cfg: &PhotonicConfig) -> f64 {
    cfg.sample_rate * 1e9 / cfg.samples_per_symbol as f64
}

/// Mean and standard deviation of `max(0, X)` for `X ~ N(mu, sigma²)`.
pub fn rectified_moments(mu: f64, sigma: f64) -> (f64, f64) {
    if sigma <= 0.0 {
        return (mu.max(0.0), 0.0);
    }
    let a = mu / sigma;
    let cdf = 0.5 * erfc(-a / std::f64::consts::SQRT_2);
    let pdf = (-0.5 * a * a).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let m1 = mu * cdf + sigma * pdf;
    let m2 = (mu * mu + sigma * sigma) * cdf + mu * sigma * pdf;
    (m1, (m2 - m1 * m1).max(0.0).sqrt())
}

/// Complementary error function (Chebyshev fit, relative error < 1.2e-7).
pub fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t
        * (-z * z - 1.265_512_23
            + t * (1.000_023_68
                + t * (0.374_091_96
                    + t * (0.096_784_18
                        + t * (-0.186_288_06
                            + t * (0.278_868_07
                                + t * (-1.135_203_98
                                    + t * (1.488_515_87
                                        + t * (-0.822_152_23 + t * 0.170_872_77)))))))))
            .exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

/// A set of programmed kernels sharing one configuration: the handle the
/// network's photonic prediction path talks to.
#[derive(Clone, Debug)]
pub struct PhotonicMachine {
    cfg: PhotonicConfig,
    banks: Vec<Option<ChannelBank>>,
}

impl PhotonicMachine {
    pub fn new(cfg: PhotonicConfig, n_kernels: usize) -> Self {
        Self {
            cfg,
            banks: vec![None; n_kernels],
        }
    }

    pub fn config(&self) -> &PhotonicConfig {
        &self.cfg
    }

    pub fn n_kernels(&self) -> usize {
        self.banks.len()
    }

    pub fn program(&mut self, kernel: usize, bank: ChannelBank) {
        self.banks[kernel] = Some(bank);
    }

    pub fn bank(&self, kernel: usize) -> Result<&ChannelBank> {
        self.banks
            .get(kernel)
            .and_then(Option::as_ref)
            .ok_or(Error::UnprogrammedKernel(kernel))
    }

    /// Convolves a patch stream with kernel `kernel`. Inputs are scaled into
    /// the DAC's `[0, 1]` range by their maximum and the result scaled back.
    pub fn convolve(
        &self,
        kernel: usize,
        patches: &[f64],
        rng: &mut RandomStream,
    ) -> Result<Vec<f64>> {
        let bank = self.bank(kernel)?;
        let full_scale = patches.iter().fold(0.0f64, |m, &v| m.max(v));
        if full_scale <= 0.0 {
            return Ok(vec![0.0; patches.len() / self.cfg.n_channels]);
        }
        let scaled: Vec<f64> = patches.iter().map(|v| v / full_scale).collect();
        let mut y = convolve_patches(bank, &scaled, &self.cfg, rng)?;
        y.iter_mut().for_each(|v| *v *= full_scale);
        Ok(y)
    }
}
