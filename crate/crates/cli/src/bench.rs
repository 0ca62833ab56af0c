use std::time::{Duration, Instant};

use pbm_core::calibration::{initial_bank, random_target};
use pbm_core::par;
use pbm_core::photonic::{convolve_patches, simulated_throughput, PhotonicConfig};
use pbm_core::RandomStream;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// Convolutions per second of the modeled hardware, one per symbol.
    pub simulated_throughput: f64,
    /// Wall-clock convolutions per second of the stochastic simulator.
    pub simulator_rate: f64,
    /// Wall-clock convolutions per second of a digital baseline drawing each
    /// weight from a seeded Gaussian PRNG.
    pub digital_baseline_rate: f64,
    pub seconds: f64,
    pub threads: usize,
}

/// Patches per timed call.
const BATCH: usize = 4096;

/// Runs `work` on every thread, each with its own fork of `rng`, until
/// `budget` has elapsed and returns the total convolutions per second.
fn rate(
    threads: usize,
    budget: Duration,
    rng: &RandomStream,
    work: impl Fn(&mut RandomStream) -> usize + Sync,
) -> f64 {
    let start = Instant::now();
    let counts = par::map_range(threads, |t| {
        let mut r = rng.fork(t as u64);
        let mut done = 0;
        while start.elapsed() < budget {
            done += work(&mut r);
        }
        done
    });
    counts.iter().sum::<usize>() as f64 / start.elapsed().as_secs_f64()
}

pub fn run(cfg: &PhotonicConfig, seconds: f64, seed: u64) -> pbm_core::Result<BenchReport> {
    cfg.validate()?;
    let threads = par::threads();
    let budget = Duration::from_secs_f64(seconds.max(0.0) / 2.0);
    let mut r = RandomStream::new(seed, 0);
    let target = random_target(cfg, &mut r);
    let bank = initial_bank(&target, cfg, &mut Vec::new())?;
    let taps = cfg.n_channels;
    let patches: Vec<f64> = (0..BATCH * taps).map(|_| r.uniform()).collect();

    let simulator_rate = rate(threads, budget, &RandomStream::new(seed, 1), |rng| {
        convolve_patches(&bank, &patches, cfg, rng)
            .map(|y| y.len())
            .unwrap_or(0)
    });
    let digital_baseline_rate = rate(threads, budget, &RandomStream::new(seed, 2), |rng| {
        let mut acc = 0.0;
        for p in patches.chunks_exact(taps) {
            for (k, x) in p.iter().enumerate() {
                acc += x * (target.mu[k] + target.sigma[k] * rng.normal());
            }
        }
        std::hint::black_box(acc);
        BATCH
    });
    Ok(BenchReport {
        simulated_throughput: simulated_throughput(cfg),
        simulator_rate,
        digital_baseline_rate,
        seconds,
        threads,
    })
}
