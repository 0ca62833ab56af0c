//! Fast invariant suites. Each suite takes the kernels under test as function
//! pointers, so a deliberately broken kernel can be plugged in.

use std::time::Instant;

use pbm_core::bnn::{elbo_loss, forward, Bound, DepthwiseSource, Network, NetworkConfig};
use pbm_core::photonic::{simulate_convolution, ChannelBank, PhotonicConfig, SpectralChannel};
use pbm_core::tensor::gradcheck::directional_error;
use pbm_core::tensor::{ConvSpec, Graph, Tensor, Var};
use pbm_core::uncertainty::{self, PredictionEnsemble, RocCurve};
use pbm_core::RandomStream;

pub struct Kernels {
    pub entropy: fn(&[f64]) -> f64,
    pub mutual_information: fn(&PredictionEnsemble) -> f64,
    pub roc_auroc: fn(&[f64], &[f64]) -> pbm_core::Result<RocCurve>,
    pub simulate: Simulator,
}

pub type Simulator =
    fn(&ChannelBank, &[f64], &PhotonicConfig, &mut RandomStream) -> pbm_core::Result<Vec<f64>>;

impl Default for Kernels {
    fn default() -> Self {
        Self {
            entropy: uncertainty::entropy,
            mutual_information: uncertainty::mutual_information,
            roc_auroc: uncertainty::roc_auroc,
            simulate: simulate_convolution,
        }
    }
}

pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Suite = fn(&Kernels) -> (bool, String);

const SUITES: [(&str, Suite); 4] = [
    ("gradients", gradients),
    ("entropy", entropy_identities),
    ("noiseless-equivalence", noiseless_equivalence),
    ("auroc", auroc_oracle),
];

pub fn run(k: &Kernels) -> Vec<SuiteResult> {
    SUITES
        .iter()
        .map(|&(name, suite)| {
            let start = Instant::now();
            let (passed, detail) = suite(k);
            SuiteResult {
                name,
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

const GRAD_TOL: f64 = 1e-4;

fn small_network(r: &mut RandomStream) -> Network {
    let cfg = NetworkConfig {
        input_shape: [8, 8, 1],
        classes: 3,
        conv_width: 2,
        quantize_weights: false,
        init_sigma: 0.3,
        ..NetworkConfig::default()
    };
    let mut net = Network::new(cfg, r).expect("valid config");
    // nonzero biases keep pre-activations off the ReLU kink
    for (name, p) in net.names.clone().iter().zip(net.params.iter_mut()) {
        if name.ends_with("bias") {
            *p = Tensor::from_fn(p.shape().to_vec(), |_| r.uniform_range(0.05, 0.3));
        }
    }
    net
}

fn gradients(_: &Kernels) -> (bool, String) {
    let mut r = RandomStream::new(1, 0);
    let mut results: Vec<(&str, f64)> = Vec::new();
    let mut check = |name, inputs: Vec<Tensor>, op: &dyn Fn(&mut Graph, &[Var]) -> Var| {
        let e = directional_error(&inputs, op, 20, 1e-5, &mut RandomStream::new(2, 0));
        results.push((name, e));
    };
    let t = |shape: &[usize], r: &mut RandomStream| Tensor::randn(shape.to_vec(), 1.0, r);

    check(
        "mul",
        vec![t(&[3, 4], &mut r), t(&[3, 4], &mut r)],
        &|g, v| g.mul(v[0], v[1]).unwrap(),
    );
    check("softplus", vec![t(&[5, 3], &mut r)], &|g, v| {
        g.softplus(v[0])
    });
    check(
        "conv2d",
        vec![t(&[2, 4, 5, 5], &mut r), t(&[4, 2, 3, 3], &mut r)],
        &|g, v| g.conv2d(v[0], v[1], ConvSpec::new(2, 1, 1)).unwrap(),
    );
    check("cross_entropy", vec![t(&[4, 5], &mut r)], &|g, v| {
        g.cross_entropy(v[0], &[0, 3, 1, 4]).unwrap()
    });
    let sigma = Tensor::from_fn(vec![6], |_| r.uniform_range(0.1, 1.0));
    check("kl_gaussian", vec![t(&[6], &mut r), sigma], &|g, v| {
        g.kl_gaussian(v[0], v[1], 0.5).unwrap()
    });

    let net = small_network(&mut r);
    let x = t(&[3, 1, 8, 8], &mut r);
    let eps = Tensor::randn(net.variational().unwrap().mu.shape().to_vec(), 1.0, &mut r);
    let pb = net.cfg.prob_block;
    let (mi, ri) = (
        net.index(&format!("dws{pb}.mu")).unwrap(),
        net.index(&format!("dws{pb}.rho")).unwrap(),
    );
    check("elbo", net.params.clone(), &|g, v| {
        let bound = Bound { vars: v.to_vec() };
        let xv = g.constant(x.clone());
        let logits = forward(g, &net, &bound, xv, DepthwiseSource::Sampled { eps: &eps }).unwrap();
        elbo_loss(g, logits, &[0, 2, 1], v[mi], v[ri], &net.cfg, 50)
            .unwrap()
            .0
    });

    let failed: Vec<String> = results
        .iter()
        .filter(|(_, e)| e.is_nan() || *e >= GRAD_TOL)
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    if failed.is_empty() {
        (
            true,
            format!("{} ops, worst rel err {worst:.1e}", results.len()),
        )
    } else {
        (false, format!("failed: {}", failed.join(", ")))
    }
}

fn reference_entropy(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &x in p {
        if x > 0.0 {
            h -= x * x.ln();
        }
    }
    h
}

fn random_ensemble(r: &mut RandomStream) -> PredictionEnsemble {
    let (n, c) = (1 + r.below(10), 2 + r.below(9));
    let mut probs = Vec::with_capacity(n * c);
    for _ in 0..n {
        let sharp = r.uniform_range(0.2, 8.0);
        let row: Vec<f64> = (0..c).map(|_| (sharp * r.normal()).exp()).collect();
        let z: f64 = row.iter().sum();
        probs.extend(row.iter().map(|v| v / z));
    }
    PredictionEnsemble::new(n, c, probs).expect("normalized rows")
}

fn entropy_identities(k: &Kernels) -> (bool, String) {
    let mut r = RandomStream::new(3, 0);
    let mut bad = 0;
    let cases = 2000;
    for _ in 0..cases {
        let e = random_ensemble(&mut r);
        let mean = e.mean();
        let h = (k.entropy)(&mean);
        let se = e.rows().map(k.entropy).sum::<f64>() / e.samples() as f64;
        let mi = (k.mutual_information)(&e);
        let ok = (h - reference_entropy(&mean)).abs() <= 1e-9
            && (h - se - mi).abs() <= 1e-12
            && mi >= -1e-12
            && (0.0..=(e.classes() as f64).ln() + 1e-12).contains(&h);
        bad += !ok as usize;
    }
    (
        bad == 0,
        format!("{bad}/{cases} ensembles violate H = SE + MI or its bounds"),
    )
}

fn noiseless_equivalence(k: &Kernels) -> (bool, String) {
    let cfg = PhotonicConfig::noiseless();
    let mut r = RandomStream::new(4, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let channels = (0..cfg.n_channels)
            .map(|_| {
                let b = r.uniform_range(cfg.bandwidth_min, cfg.bandwidth_max);
                SpectralChannel::new(r.uniform(), b, &cfg)
            })
            .collect();
        let negative = (0..cfg.n_channels).map(|_| r.uniform() < 0.5).collect();
        let bank = ChannelBank::new(channels, negative, &cfg).expect("valid bank");
        let w = bank.mean_weights(&cfg);
        let x: Vec<f64> = (0..cfg.n_channels + r.below(16))
            .map(|_| r.uniform())
            .collect();
        let Ok(y) = (k.simulate)(&bank, &x, &cfg, &mut r) else {
            return (false, "simulation returned an error".into());
        };
        if y.len() != x.len() + 1 - w.len() {
            return (false, format!("{} outputs for {} inputs", y.len(), x.len()));
        }
        for (t, out) in y.iter().enumerate() {
            let t = t + w.len() - 1;
            let want: f64 = w.iter().enumerate().map(|(j, wj)| wj * x[t - j]).sum();
            worst = worst.max((out - want).abs());
        }
    }
    (
        worst <= 1e-12,
        format!("max error {worst:.1e} over 200 cases"),
    )
}

fn mann_whitney(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for p in pos {
        for n in neg {
            s += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (pos.len() * neg.len()) as f64
}

fn auroc_oracle(k: &Kernels) -> (bool, String) {
    let mut r = RandomStream::new(5, 0);
    let mut bad = 0;
    for case in 0..100 {
        let (np, nn) = (1 + r.below(60), 1 + r.below(60));
        let mut draw = |shift: f64| {
            let v = r.normal() + shift;
            if case % 2 == 0 {
                v.round()
            } else {
                v
            }
        };
        let pos: Vec<f64> = (0..np).map(|_| draw(0.5)).collect();
        let neg: Vec<f64> = (0..nn).map(|_| draw(0.0)).collect();
        match (k.roc_auroc)(&pos, &neg) {
            Ok(roc) if roc.auroc == mann_whitney(&pos, &neg) => {}
            _ => bad += 1,
        }
    }
    (
        bad == 0,
        format!("{bad}/100 instances differ from Mann-Whitney"),
    )
}
