use serde::{Deserialize, Serialize};

use crate::calibration::{program_kernel, CalibrationOptions, TargetKernel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::par;
use crate::photonic::{PhotonicConfig, PhotonicMachine};
use crate::rng::RandomStream;
use crate::tensor::{softmax, Graph, Tensor};
use crate::uncertainty::PredictionEnsemble;

use super::{forward_prefix, forward_suffix, DepthwiseSource, Network, KERNEL_TAPS};

pub enum PredictMode<'a> {
    Surrogate,
    Photonic(&'a PhotonicMachine),
}

/// Unrolls the 3×3 neighbourhoods (zero padded) of one `[h, w]` plane into
/// `h·w` consecutive 9-value patches, tap `k = 3·dy + dx`.
fn patches(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * KERNEL_TAPS];
    for y in 0..h {
        for x in 0..w {
            let p = &mut out[(y * w + x) * KERNEL_TAPS..][..KERNEL_TAPS];
            for dy in 0..3 {
                for dx in 0..3 {
                    let (yy, xx) = (y + dy, x + dx);
                    if (1..=h).contains(&yy) && (1..=w).contains(&xx) {
                        p[dy * 3 + dx] = plane[(yy - 1) * w + xx - 1];
                    }
                }
            }
        }
    }
    out
}

/// Depthwise 3×3 convolution (padding 1) of a non-negative `[b, c, h, w]`
/// tensor, channel `c` running on kernel `c` of the machine. Plane `i` draws
/// from `rng.fork(i)`.
pub fn photonic_depthwise(
    x: &Tensor,
    machine: &PhotonicMachine,
    rng: &RandomStream,
) -> Result<Tensor> {
    let &[b, c, h, w] = x.shape() else {
        return Err(Error::shape(
            "photonic_depthwise",
            format!("expected [b, c, h, w], got {:?}", x.shape()),
        ));
    };
    if c != machine.n_kernels() {
        return Err(Error::shape(
            "photonic_depthwise",
            format!(
                "{c} channels but {} programmed kernels",
                machine.n_kernels()
            ),
        ));
    }
    if x.data().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument(
            "photonic inputs must be non-negative intensities".into(),
        ));
    }
    let planes = par::map_range(b * c, |i| {
        let plane = &x.data()[i * h * w..(i + 1) * h * w];
        let mut r = rng.fork(i as u64);
        machine.convolve(i % c, &patches(plane, h, w), &mut r)
    });
    let mut data = Vec::with_capacity(x.len());
    for p in planes {
        data.extend(p?);
    }
    Tensor::new(vec![b, c, h, w], data)
}

/// `n` stochastic forward passes of the batch `x`. The blocks before the
/// probabilistic one are evaluated once; pass `s` draws from `rng.fork(s)`.
/// Returns one ensemble per image.
pub fn predict_samples(
    net: &Network,
    x: &Tensor,
    n: usize,
    mode: &PredictMode<'_>,
    rng: &RandomStream,
) -> Result<Vec<PredictionEnsemble>> {
    if n < 1 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let mut g = Graph::new();
    let b = net.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let h = forward_prefix(&mut g, net, &b, xv)?;
    let features = g.value(h).clone();
    let mu_shape = net.variational()?.mu.shape().to_vec();
    let passes = par::map_range(n, |s| -> Result<Tensor> {
        let mut stream = rng.fork(s as u64);
        let mut g = Graph::new();
        let b = net.bind(&mut g, false);
        let hv = g.constant(features.clone());
        let logits = match mode {
            PredictMode::Surrogate => {
                let eps = Tensor::randn(mu_shape.clone(), 1.0, &mut stream);
                forward_suffix(&mut g, net, &b, hv, DepthwiseSource::Sampled { eps: &eps })?
            }
            PredictMode::Photonic(machine) => forward_suffix(
                &mut g,
                net,
                &b,
                hv,
                DepthwiseSource::Photonic {
                    machine,
                    rng: stream,
                },
            )?,
        };
        softmax(g.value(logits))
    });
    let passes = passes.into_iter().collect::<Result<Vec<_>>>()?;
    let classes = net.cfg.classes;
    let images = x.shape()[0];
    (0..images)
        .map(|i| {
            let mut probs = Vec::with_capacity(n * classes);
            for p in &passes {
                probs.extend_from_slice(&p.data()[i * classes..(i + 1) * classes]);
            }
            PredictionEnsemble::new(n, classes, probs)
        })
        .collect()
}

/// Images per forward batch in [`predict_dataset`].
pub const EVAL_BATCH: usize = 250;

/// Ensembles for `data[indices]` normalized as `(x/255 − mean)/std`, in chunks
/// of [`EVAL_BATCH`] images; chunk `i` draws from `rng.fork(i)`.
pub fn predict_dataset(
    net: &Network,
    data: &Dataset,
    indices: &[usize],
    n: usize,
    mode: &PredictMode<'_>,
    (mean, std): (f64, f64),
    rng: &RandomStream,
) -> Result<Vec<PredictionEnsemble>> {
    let mut out = Vec::with_capacity(indices.len());
    for (i, chunk) in indices.chunks(EVAL_BATCH).enumerate() {
        let x = data.tensor(chunk, mean, std)?;
        out.extend(predict_samples(net, &x, n, mode, &rng.fork(i as u64))?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MachineReport {
    pub kernels: usize,
    pub converged: usize,
    pub mean_iterations: f64,
    /// Taps whose `σ*/|μ*|` lay outside the measurable envelope and were
    /// moved onto its boundary before programming.
    pub projected_taps: usize,
    pub warnings: Vec<String>,
}

/// Programs one bank per probabilistic kernel with targets `μ* = μ`,
/// `σ* = softplus(ρ)` (zero when the machine is deterministic). Scale targets
/// outside the achievable ratio envelope are projected onto it.
pub fn program_machine(
    net: &Network,
    cfg: &PhotonicConfig,
    opts: &CalibrationOptions,
    rng: &RandomStream,
) -> Result<(PhotonicMachine, MachineReport)> {
    cfg.validate()?;
    if cfg.n_channels != KERNEL_TAPS {
        return Err(Error::InvalidArgument(format!(
            "kernels have {KERNEL_TAPS} taps but the machine has {} channels",
            cfg.n_channels
        )));
    }
    let q = net.variational()?;
    let sigma = q.sigma();
    let kernels = q.mu.shape()[0];
    let (lo, hi) = cfg.measured_ratio_envelope();
    let results = par::map_range(kernels, |k| -> Result<_> {
        let span = k * KERNEL_TAPS..(k + 1) * KERNEL_TAPS;
        let mu = q.mu.data()[span.clone()].to_vec();
        let mut projected = 0;
        let s: Vec<f64> = mu
            .iter()
            .zip(&sigma.data()[span])
            .map(|(&m, &s)| {
                if !cfg.stochastic {
                    return 0.0;
                }
                let clamped = s.clamp(lo * m.abs(), hi * m.abs());
                projected += (clamped != s) as usize;
                clamped
            })
            .collect();
        let target = TargetKernel::new(mu, s)?;
        let mut r = rng.fork(k as u64);
        let (bank, rep) = program_kernel(&target, cfg, opts, &mut r)?;
        Ok((bank, rep, projected))
    });
    let mut machine = PhotonicMachine::new(cfg.clone(), kernels);
    let mut report = MachineReport {
        kernels,
        ..MachineReport::default()
    };
    let mut iters = 0;
    for (k, r) in results.into_iter().enumerate() {
        let (bank, rep, projected) = r?;
        machine.program(k, bank);
        report.converged += rep.converged as usize;
        report.projected_taps += projected;
        iters += rep.iterations;
        if !rep.converged {
            report
                .warnings
                .push(format!("kernel {k}: calibration did not converge"));
        }
    }
    report.mean_iterations = iters as f64 / kernels.max(1) as f64;
    Ok((machine, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patches_follow_tap_order() {
        let plane: Vec<f64> = (1..=9).map(f64::from).collect();
        let p = patches(&plane, 3, 3);
        assert_eq!(&p[4 * 9..5 * 9], &plane[..]);
        assert_eq!(&p[..9], &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
    }
}
