//! Closed-loop programming of channel power and bandwidth toward target
//! weight distributions, and the normalized computation-error metric.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::photonic::{
    bandwidth_for_ratio, convolve_patches, ChannelBank, PhotonicConfig, SpectralChannel,
};
use crate::rng::RandomStream;

/// Desired `(μ*, σ*)` per tap; the sign of `μ*` selects the readout pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetKernel {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl TargetKernel {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::InvalidArgument(format!(
                "target has {} means but {} scales",
                mu.len(),
                sigma.len()
            )));
        }
        if sigma.iter().chain(&mu).any(|v| !v.is_finite()) || sigma.iter().any(|&s| s < 0.0) {
            return Err(Error::InvalidArgument(
                "target moments must be finite with non-negative scales".into(),
            ));
        }
        Ok(Self { mu, sigma })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    fn scale(&self) -> f64 {
        self.mu.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationOptions {
    pub tol_mu: f64,
    pub tol_sigma: f64,
    pub max_iters: usize,
    pub probes: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            tol_mu: 0.02,
            tol_sigma: 0.02,
            max_iters: 50,
            probes: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub iterations: usize,
    pub converged: bool,
    /// Per-tap `|μ̂ − μ*| / W` at the last estimate.
    pub err_mu: Vec<f64>,
    /// Per-tap `|σ̂ − σ*| / W` at the last estimate.
    pub err_sigma: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Impulse-response moments of every tap: for tap `k`, `probes` symbols with
/// input `e_k`, returning the sample mean and (n−1)-normalized std.
pub fn estimate_moments(
    bank: &ChannelBank,
    cfg: &PhotonicConfig,
    probes: usize,
    rng: &mut RandomStream,
) -> Result<Vec<(f64, f64)>> {
    if probes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 probes, got {probes}"
        )));
    }
    let n = cfg.n_channels;
    let mut stream = vec![0.0; n * probes];
    (0..n)
        .map(|k| {
            stream.iter_mut().for_each(|v| *v = 0.0);
            for p in 0..probes {
                stream[p * n + k] = 1.0;
            }
            let y = convolve_patches(bank, &stream, cfg, rng)?;
            Ok(mean_std(&y))
        })
        .collect()
}

fn mean_std(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Programs a bank from an open-loop initial guess.
pub fn program_kernel(
    target: &TargetKernel,
    cfg: &PhotonicConfig,
    opts: &CalibrationOptions,
    rng: &mut RandomStream,
) -> Result<(ChannelBank, CalibrationReport)> {
    let mut warnings = Vec::new();
    let bank = initial_bank(target, cfg, &mut warnings)?;
    let (bank, mut report) = program_kernel_from(bank, target, cfg, opts, rng)?;
    warnings.append(&mut report.warnings);
    report.warnings = warnings;
    Ok((bank, report))
}

/// Open-loop guess `P = |μ*|/g`, bandwidth inverted from `σ*/|μ*|`.
pub fn initial_bank(
    target: &TargetKernel,
    cfg: &PhotonicConfig,
    warnings: &mut Vec<String>,
) -> Result<ChannelBank> {
    if target.len() != cfg.n_channels {
        return Err(Error::InvalidArgument(format!(
            "target has {} taps, config has {} channels",
            target.len(),
            cfg.n_channels
        )));
    }
    let (lo, hi) = cfg.measured_ratio_envelope();
    let mut channels = Vec::with_capacity(target.len());
    for k in 0..target.len() {
        let m = target.mu[k].abs();
        let ratio = if m > 0.0 { target.sigma[k] / m } else { 0.0 };
        if m > 0.0 && cfg.stochastic && !(lo..=hi).contains(&ratio) {
            warnings.push(format!(
                "tap {k}: sigma/mu {ratio:.4} outside achievable [{lo:.4}, {hi:.4}], bandwidth clamped"
            ));
        }
        channels.push(SpectralChannel::new(
            m / cfg.gain,
            bandwidth_for_ratio(ratio, cfg),
            cfg,
        ));
    }
    ChannelBank::new(channels, target.mu.iter().map(|&m| m < 0.0).collect(), cfg)
}

/// Runs the feedback loop starting from `bank`.
///
/// Each iteration estimates impulse moments, stops if every tap is within
/// tolerance (relative to `W = max|μ*|`), else applies
/// `P ← P·clip(|μ*|/|μ̂|, ½, 2)` and `B ← B·clip((r̂/r*)^{1/α}, ½, 2)`.
pub fn program_kernel_from(
    mut bank: ChannelBank,
    target: &TargetKernel,
    cfg: &PhotonicConfig,
    opts: &CalibrationOptions,
    rng: &mut RandomStream,
) -> Result<(ChannelBank, CalibrationReport)> {
    let n = cfg.n_channels;
    if target.len() != n || bank.len() != n {
        return Err(Error::InvalidArgument(format!(
            "target/bank must have {n} taps, got {} and {}",
            target.len(),
            bank.len()
        )));
    }
    let w = target.scale();
    if w == 0.0 {
        return Ok((
            ChannelBank::dark(cfg),
            CalibrationReport {
                iterations: 0,
                converged: true,
                err_mu: vec![0.0; n],
                err_sigma: vec![0.0; n],
                warnings: Vec::new(),
            },
        ));
    }
    let mut report = CalibrationReport {
        iterations: 0,
        converged: false,
        err_mu: vec![f64::INFINITY; n],
        err_sigma: vec![f64::INFINITY; n],
        warnings: Vec::new(),
    };
    let inv_alpha = 1.0 / cfg.noise_exponent;
    for iter in 1..=opts.max_iters {
        report.iterations = iter;
        let est = estimate_moments(&bank, cfg, opts.probes, rng)?;
        for (k, &(m, s)) in est.iter().enumerate() {
            report.err_mu[k] = (m - target.mu[k]).abs() / w;
            report.err_sigma[k] = (s - target.sigma[k]).abs() / w;
        }
        if max(&report.err_mu) < opts.tol_mu && max(&report.err_sigma) < opts.tol_sigma {
            report.converged = true;
            break;
        }
        if iter == opts.max_iters {
            break;
        }
        for (k, &(m_hat, s_hat)) in est.iter().enumerate() {
            let mu_t = target.mu[k].abs();
            let mu_hat = m_hat.abs();
            let ch = bank.channel_mut(k);
            if mu_t == 0.0 {
                *ch = SpectralChannel::new(0.0, ch.bandwidth(), cfg);
                continue;
            }
            let p_step = if mu_hat > 0.0 {
                (mu_t / mu_hat).clamp(0.5, 2.0)
            } else {
                2.0
            };
            let r_t = target.sigma[k] / mu_t;
            let b = if r_t == 0.0 {
                cfg.bandwidth_max
            } else if mu_hat > 0.0 && s_hat > 0.0 {
                let r_hat = s_hat / mu_hat;
                ch.bandwidth() * (r_hat / r_t).powf(inv_alpha).clamp(0.5, 2.0)
            } else {
                ch.bandwidth()
            };
            *ch = SpectralChannel::new(ch.power() * p_step, b, cfg);
        }
    }
    if !report.converged {
        report.warnings.push(format!(
            "not converged after {} iterations (max err mu {:.4}, sigma {:.4})",
            report.iterations,
            max(&report.err_mu),
            max(&report.err_sigma)
        ));
    }
    Ok((bank, report))
}

fn max(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, &x| m.max(x))
}

/// Normalized errors of one statistic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputationError {
    pub eps_mu: f64,
    pub eps_sigma: f64,
    /// Set when the target means are constant and `eps_mu` is a raw RMSE.
    pub mu_unnormalized: bool,
    pub sigma_unnormalized: bool,
}

/// RMSE between measured and target values divided by the (population)
/// standard deviation of the targets, separately for means and scales.
pub fn computation_error(
    measured: &[(f64, f64)],
    target: &[(f64, f64)],
) -> Result<ComputationError> {
    if measured.len() != target.len() || measured.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "need equal non-empty lists, got {} and {}",
            measured.len(),
            target.len()
        )));
    }
    let one = |pick: fn(&(f64, f64)) -> f64| {
        let n = target.len() as f64;
        let rmse = (measured
            .iter()
            .zip(target)
            .map(|(m, t)| (pick(m) - pick(t)).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
        let mean = target.iter().map(pick).sum::<f64>() / n;
        let std = (target.iter().map(|t| (pick(t) - mean).powi(2)).sum::<f64>() / n).sqrt();
        if std > 0.0 {
            (rmse / std, false)
        } else {
            (rmse, true)
        }
    };
    let (eps_mu, mu_unnormalized) = one(|p| p.0);
    let (eps_sigma, sigma_unnormalized) = one(|p| p.1);
    Ok(ComputationError {
        eps_mu,
        eps_sigma,
        mu_unnormalized,
        sigma_unnormalized,
    })
}

/// Target generator for the sweep: `μ* ~ U[−1, 1]`, `σ* = r·|μ*|` with `r`
/// drawn from the central 80% of the measurable ratio envelope (or 0 for
/// deterministic channels).
pub fn random_target(cfg: &PhotonicConfig, rng: &mut RandomStream) -> TargetKernel {
    let (lo, hi) = cfg.measured_ratio_envelope();
    let (lo, hi) = (lo + 0.1 * (hi - lo), hi - 0.1 * (hi - lo));
    let mut mu = Vec::with_capacity(cfg.n_channels);
    let mut sigma = Vec::with_capacity(cfg.n_channels);
    for _ in 0..cfg.n_channels {
        let m = rng.uniform_range(-1.0, 1.0);
        let r = if cfg.stochastic {
            rng.uniform_range(lo, hi)
        } else {
            0.0
        };
        mu.push(m);
        sigma.push(r * m.abs());
    }
    TargetKernel { mu, sigma }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub kernel_id: usize,
    pub tap: usize,
    pub target_mu: f64,
    pub measured_mu: f64,
    pub target_sigma: f64,
    pub measured_sigma: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub n_kernels: usize,
    pub converged: usize,
    pub iterations: Vec<usize>,
    pub eps_mu: f64,
    pub eps_sigma: f64,
    pub warnings: Vec<String>,
}

pub struct Sweep {
    pub rows: Vec<SweepRow>,
    pub report: SweepReport,
}

/// Programs `n_kernels` random targets and measures each programmed bank with
/// a fresh set of probes. Kernel `i` uses stream `rng.fork(i)`, so the result
/// is independent of scheduling.
pub fn kernel_sweep(
    n_kernels: usize,
    cfg: &PhotonicConfig,
    opts: &CalibrationOptions,
    rng: &RandomStream,
) -> Result<Sweep> {
    cfg.validate()?;
    let per_kernel = par::map_range(n_kernels, |i| -> Result<_> {
        let mut r = rng.fork(i as u64);
        let target = random_target(cfg, &mut r);
        let (bank, report) = program_kernel(&target, cfg, opts, &mut r)?;
        let measured = estimate_moments(&bank, cfg, opts.probes, &mut r)?;
        Ok((target, report, measured))
    });
    let mut rows = Vec::new();
    let mut report = SweepReport {
        n_kernels,
        converged: 0,
        iterations: Vec::new(),
        eps_mu: 0.0,
        eps_sigma: 0.0,
        warnings: Vec::new(),
    };
    let (mut all_m, mut all_t) = (Vec::new(), Vec::new());
    for (i, item) in per_kernel.into_iter().enumerate() {
        let (target, rep, measured) = item?;
        report.converged += rep.converged as usize;
        report.iterations.push(rep.iterations);
        report
            .warnings
            .extend(rep.warnings.into_iter().map(|w| format!("kernel {i}: {w}")));
        for (k, &(mm, ms)) in measured.iter().enumerate() {
            rows.push(SweepRow {
                kernel_id: i,
                tap: k,
                target_mu: target.mu[k],
                measured_mu: mm,
                target_sigma: target.sigma[k],
                measured_sigma: ms,
            });
            all_m.push((mm, ms));
            all_t.push((target.mu[k], target.sigma[k]));
        }
    }
    if !rows.is_empty() {
        let e = computation_error(&all_m, &all_t)?;
        report.eps_mu = e.eps_mu;
        report.eps_sigma = e.eps_sigma;
    }
    Ok(Sweep { rows, report })
}

impl Sweep {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_report(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        serde_json::to_writer_pretty(&mut f, &self.report)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}
