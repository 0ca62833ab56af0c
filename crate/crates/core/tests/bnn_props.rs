use pbm_core::bnn::{
    apply_block, elbo_loss, fit, forward, inverse_softplus, photonic_depthwise, predict_samples,
    probabilistic_forward_surrogate, program_machine, DepthwiseSource, Network, NetworkConfig,
    PredictMode, TrainConfig, TrainState,
};
use pbm_core::calibration::CalibrationOptions;
use pbm_core::data::{Array, Dataset};
use pbm_core::photonic::{quantization_bound, PhotonicConfig};
use pbm_core::tensor::{conv2d, kl_gaussian, softplus, ConvSpec, Graph};
use pbm_core::uncertainty::mutual_information;
use pbm_core::{RandomStream, Tensor};

mod common;

use common::oracle::kl_monte_carlo;

fn small(classes: usize) -> NetworkConfig {
    NetworkConfig {
        input_shape: [8, 8, 1],
        classes,
        conv_width: 4,
        ..NetworkConfig::default()
    }
}

/// Sets every probabilistic σ to exactly zero.
fn collapse_sigma(net: &mut Network) {
    let pb = net.cfg.prob_block;
    let rho = net.param_mut(&format!("dws{pb}.rho")).unwrap();
    *rho = rho.map(|_| -1e3);
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Loop oracle of a deterministic DWS block: depthwise 3×3 (pad 1) → ReLU →
/// per-pixel 3-tap conv across channels (pad 1) + bias → ReLU → concat.
fn naive_dws(x: &Tensor, dw: &Tensor, cw: &[f64], cb: f64) -> Tensor {
    let [b, c, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let at = |n: usize, ch: usize, y: isize, xx: isize| {
        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
            0.0
        } else {
            x.data()[((n * c + ch) * h + y as usize) * w + xx as usize]
        }
    };
    let mut d = vec![0.0; b * c * h * w];
    for n in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = 0.0;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            s += dw.data()[ch * 9 + dy * 3 + dx]
                                * at(
                                    n,
                                    ch,
                                    y as isize + dy as isize - 1,
                                    xx as isize + dx as isize - 1,
                                );
                        }
                    }
                    d[((n * c + ch) * h + y) * w + xx] = relu(s);
                }
            }
        }
    }
    let mut out = Vec::with_capacity(2 * x.len());
    for n in 0..b {
        out.extend_from_slice(&x.data()[n * c * h * w..(n + 1) * c * h * w]);
        for ch in 0..c {
            for p in 0..h * w {
                let get = |k: isize| {
                    if k < 0 || k >= c as isize {
                        0.0
                    } else {
                        d[(n * c + k as usize) * h * w + p]
                    }
                };
                let s: f64 = (0..3)
                    .map(|t| cw[t] * get(ch as isize + t as isize - 1))
                    .sum();
                out.push(relu(s + cb));
            }
        }
    }
    Tensor::new(vec![b, 2 * c, h, w], out).unwrap()
}

#[test]
fn dws_block_matches_loop_oracle() {
    let mut r = RandomStream::new(1, 0);
    let cfg = NetworkConfig {
        conv_width: 2,
        ..small(3)
    };
    let mut net = Network::new(cfg, &mut r).unwrap();
    *net.param_mut("dws1.channel.bias").unwrap() = Tensor::scalar(0.1).reshape(vec![1]).unwrap();
    let x = Tensor::randn(vec![1, 4, 8, 8], 1.0, &mut r);
    let mut g = Graph::new();
    let b = net.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = apply_block(&mut g, &net, &b, 1, xv).unwrap();
    let want = naive_dws(
        &x,
        net.param("dws1.depthwise").unwrap(),
        net.param("dws1.channel.weight").unwrap().data(),
        0.1,
    );
    assert_eq!(g.value(y).shape(), want.shape());
    let diff = g
        .value(y)
        .zip_map(&want, |a, b| (a - b).abs())
        .unwrap()
        .max_abs();
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn network_layout() {
    for (classes, prob_block) in [(10, 2), (7, 1)] {
        let cfg = NetworkConfig {
            classes,
            prob_block,
            ..NetworkConfig::default()
        };
        let net = Network::new(cfg.clone(), &mut RandomStream::new(0, 0)).unwrap();
        assert_eq!(net.conv_layers().len(), 6);
        assert_eq!(
            net.param("head.weight").unwrap().shape(),
            &[classes, cfg.head_inputs()]
        );
        let q = net.variational().unwrap();
        assert_eq!(q.mu.shape()[1..], [1, 3, 3]);
        assert!(q.sigma().data().iter().all(|&s| s > 0.0));
        let x = Tensor::zeros(vec![2, 1, 28, 28]);
        let mut g = Graph::new();
        let b = net.bind(&mut g, false);
        let xv = g.constant(x);
        let eps = Tensor::zeros(q.mu.shape().to_vec());
        let logits = forward(&mut g, &net, &b, xv, DepthwiseSource::Sampled { eps: &eps }).unwrap();
        assert_eq!(g.value(logits).shape(), &[2, classes]);
    }
}

fn random_images(n: usize, r: &mut RandomStream) -> Tensor {
    // normalized like real data: (u − 0.5)/0.5
    Tensor::from_fn(vec![n, 1, 8, 8], |_| 2.0 * r.uniform() - 1.0)
}

fn probs_of(ens: &[pbm_core::uncertainty::PredictionEnsemble]) -> Vec<Vec<f64>> {
    ens.iter().map(|e| e.row(0).to_vec()).collect()
}

#[test]
fn surrogate_and_photonic_agree_at_zero_sigma() {
    let mut r = RandomStream::new(2, 0);
    let mut net = Network::new(
        NetworkConfig {
            quantize_weights: false,
            ..small(5)
        },
        &mut r,
    )
    .unwrap();
    collapse_sigma(&mut net);
    let cfg = PhotonicConfig::noiseless();
    let rng = RandomStream::new(3, 0);
    let (machine, report) =
        program_machine(&net, &cfg, &CalibrationOptions::default(), &rng).unwrap();
    assert_eq!(report.converged, report.kernels);
    let x = random_images(100, &mut r);
    let a = predict_samples(&net, &x, 1, &PredictMode::Surrogate, &rng).unwrap();
    let b = predict_samples(&net, &x, 1, &PredictMode::Photonic(&machine), &rng).unwrap();
    for (pa, pb) in probs_of(&a).iter().zip(&probs_of(&b)) {
        for (u, v) in pa.iter().zip(pb) {
            assert!((u - v).abs() < 1e-9);
        }
    }
    let labels_a: Vec<usize> = a.iter().map(|e| e.predicted_class()).collect();
    let labels_b: Vec<usize> = b.iter().map(|e| e.predicted_class()).collect();
    assert_eq!(labels_a, labels_b);
}

#[test]
fn quantized_photonic_block_within_converter_bound() {
    let mut r = RandomStream::new(4, 0);
    let net = Network::new(small(3), &mut r).unwrap();
    let cfg = PhotonicConfig {
        stochastic: false,
        ..PhotonicConfig::default()
    };
    let rng = RandomStream::new(5, 0);
    let (machine, _) = program_machine(&net, &cfg, &CalibrationOptions::default(), &rng).unwrap();
    let c = machine.n_kernels();
    let x = Tensor::from_fn(vec![2, c, 4, 4], |_| r.uniform() * 3.0);
    let got = photonic_depthwise(&x, &machine, &rng).unwrap();
    let mut kernel = Vec::new();
    for k in 0..c {
        kernel.extend(machine.bank(k).unwrap().mean_weights(&cfg));
    }
    let kernel = Tensor::new(vec![c, 1, 3, 3], kernel).unwrap();
    let want = conv2d(&x, &kernel, ConvSpec::new(c, 1, 1)).unwrap();
    for plane in 0..2 * c {
        let span = plane * 16..(plane + 1) * 16;
        let scale = x.data()[span.clone()].iter().fold(0.0f64, |m, &v| m.max(v));
        let bound = scale * quantization_bound(machine.bank(plane % c).unwrap(), &cfg);
        for i in span {
            assert!((got.data()[i] - want.data()[i]).abs() <= bound + 1e-12);
        }
    }
    // calibrated means stay close to the trained means
    let mu = net.variational().unwrap().mu;
    let w = mu.max_abs();
    assert!(kernel.zip_map(&mu, |a, b| (a - b).abs()).unwrap().max_abs() <= 0.05 * w);
}

#[test]
fn prediction_rows_and_sample_diversity() {
    let mut r = RandomStream::new(6, 0);
    let net = Network::new(
        NetworkConfig {
            init_sigma: 0.2,
            ..small(4)
        },
        &mut r,
    )
    .unwrap();
    let x = random_images(8, &mut r);
    let rng = RandomStream::new(7, 0);
    let ens = predict_samples(&net, &x, 10, &PredictMode::Surrogate, &rng).unwrap();
    assert_eq!(ens.len(), 8);
    for e in &ens {
        assert_eq!(e.samples(), 10);
        for row in e.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        assert_ne!(e.row(0), e.row(1));
    }
    let again = predict_samples(&net, &x, 10, &PredictMode::Surrogate, &rng).unwrap();
    assert_eq!(ens, again);
    let other = predict_samples(
        &net,
        &x,
        10,
        &PredictMode::Surrogate,
        &RandomStream::new(8, 0),
    )
    .unwrap();
    assert_ne!(ens, other);

    let (machine, _) = program_machine(
        &net,
        &PhotonicConfig::default(),
        &CalibrationOptions::default(),
        &rng,
    )
    .unwrap();
    let p = predict_samples(&net, &x, 10, &PredictMode::Photonic(&machine), &rng).unwrap();
    assert!(p.iter().all(|e| e.row(0) != e.row(1)));
}

#[test]
fn zero_sigma_gives_identical_rows_and_zero_mi() {
    let mut r = RandomStream::new(9, 0);
    let mut net = Network::new(small(4), &mut r).unwrap();
    collapse_sigma(&mut net);
    let x = random_images(5, &mut r);
    let ens = predict_samples(
        &net,
        &x,
        10,
        &PredictMode::Surrogate,
        &RandomStream::new(1, 1),
    )
    .unwrap();
    for e in &ens {
        assert!(e.rows().all(|row| row == e.row(0)));
        assert!(mutual_information(e).abs() <= 1e-12);
    }
}

#[test]
fn surrogate_block_with_zero_noise_is_mean_convolution() {
    let mut r = RandomStream::new(10, 0);
    let net = Network::new(small(3), &mut r).unwrap();
    let q = net.variational().unwrap();
    let c = q.mu.shape()[0];
    let x = Tensor::randn(vec![1, c, 5, 5], 1.0, &mut r);
    let eps = Tensor::zeros(q.mu.shape().to_vec());
    let got = probabilistic_forward_surrogate(&x, &q, &eps, None).unwrap();
    let want = conv2d(&x, &q.mu, ConvSpec::new(c, 1, 1)).unwrap();
    assert_eq!(got, want);
}

#[test]
fn kl_matches_monte_carlo() {
    let kl = kl_gaussian(&Tensor::scalar(0.5), &Tensor::scalar(0.5), 1.0).unwrap();
    assert!((kl - (2f64.ln() + 0.25 - 0.5)).abs() < 1e-12);
    let mut r = RandomStream::new(11, 0);
    for _ in 0..20 {
        let mu = r.uniform_range(-1.0, 1.0);
        let sigma = r.uniform_range(0.05, 1.0);
        let prior = r.uniform_range(0.1, 2.0);
        let closed = kl_gaussian(&Tensor::scalar(mu), &Tensor::scalar(sigma), prior).unwrap();
        let (mean, se) = kl_monte_carlo(mu, sigma, prior, 100_000, &mut r);
        assert!(
            (mean - closed).abs() <= 3.0 * se,
            "{mean} vs {closed} (se {se})"
        );
    }
}

#[test]
fn elbo_is_cross_entropy_plus_scaled_kl() {
    let mut r = RandomStream::new(12, 0);
    let net = Network::new(small(3), &mut r).unwrap();
    let q = net.variational().unwrap();
    let x = random_images(4, &mut r);
    let labels = [0, 1, 2, 1];
    let eps = Tensor::randn(q.mu.shape().to_vec(), 1.0, &mut r);
    let mut g = Graph::new();
    let b = net.bind(&mut g, false);
    let xv = g.constant(x);
    let logits = forward(&mut g, &net, &b, xv, DepthwiseSource::Sampled { eps: &eps }).unwrap();
    let pb = net.cfg.prob_block;
    let (mu, rho) = (
        b.vars[net.index(&format!("dws{pb}.mu")).unwrap()],
        b.vars[net.index(&format!("dws{pb}.rho")).unwrap()],
    );
    let (loss, ce, kl) = elbo_loss(&mut g, logits, &labels, mu, rho, &net.cfg, 1000).unwrap();
    let kl_ref = kl_gaussian(&q.mu, &softplus(&q.rho), net.cfg.prior_sigma).unwrap();
    let ce_ref = pbm_core::tensor::cross_entropy(g.value(logits), &labels).unwrap();
    assert!((g.value(kl).data()[0] - kl_ref).abs() < 1e-9 * kl_ref.abs().max(1.0));
    assert!((g.value(ce).data()[0] - ce_ref).abs() < 1e-12);
    assert!((g.value(loss).data()[0] - (ce_ref + kl_ref / 1000.0)).abs() < 1e-9);
    assert!(ce_ref >= 0.0 && kl_ref >= 0.0);
}

/// Two classes separated by which half of the image is bright.
fn toy_dataset(n: usize, seed: u64) -> Dataset {
    let mut r = RandomStream::new(seed, 0);
    let mut images = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u16;
        for _y in 0..8 {
            for x in 0..8 {
                let bright = (x < 4) == (label == 0);
                let base = if bright { 170.0 } else { 40.0 };
                images.push((base + 60.0 * r.uniform()) as u8);
            }
        }
        labels.push(label);
    }
    Dataset::new(
        "toy",
        Array::new(vec![n, 8, 8], images).unwrap(),
        labels,
        None,
    )
    .unwrap()
}

fn toy_train() -> TrainConfig {
    TrainConfig {
        epochs: 5,
        batch_size: 16,
        lr: 3e-3,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn toy_training_separates_classes_and_is_deterministic() {
    let data = toy_dataset(200, 1);
    let mut seen = Vec::new();
    let a = fit(&data, small(2), toy_train(), |m| seen.push(m.clone())).unwrap();
    assert_eq!(seen.len(), 5);
    assert!(seen.last().unwrap().accuracy > 0.95, "{:?}", seen.last());
    assert!(seen.iter().all(|m| m.loss.is_finite() && m.kl >= 0.0));
    let b = fit(&data, small(2), toy_train(), |_| {}).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let data = toy_dataset(40, 2);
    let train = TrainConfig {
        lr: 0.0,
        epochs: 1,
        ..toy_train()
    };
    let start = TrainState::new(small(2), train.clone()).unwrap();
    let end = fit(&data, small(2), train, |_| {}).unwrap();
    assert_eq!(start.net.params, end.net.params);
}

#[test]
fn checkpoint_round_trip_and_resume_are_bit_exact() {
    let data = toy_dataset(48, 3);
    let train = TrainConfig {
        epochs: 2,
        ..toy_train()
    };
    let straight = fit(&data, small(2), train.clone(), |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let mut s = TrainState::new(small(2), train).unwrap();
    s.train_epoch(&data).unwrap();
    s.save(&path).unwrap();
    let mut resumed = TrainState::load(&path).unwrap();
    assert_eq!(resumed, s);
    resumed.train_epoch(&data).unwrap();
    assert_eq!(resumed.net.params, straight.net.params);
    assert_eq!(resumed.metrics, straight.metrics);

    let mut bad: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    bad["version"] = 99.into();
    std::fs::write(&path, serde_json::to_vec(&bad).unwrap()).unwrap();
    assert!(TrainState::load(&path).is_err());
}

#[test]
fn init_sigma_is_respected() {
    let net = Network::new(small(2), &mut RandomStream::new(0, 0)).unwrap();
    let s = net.variational().unwrap().sigma();
    assert!(s.data().iter().all(|&v| (v - 0.02).abs() < 1e-12));
    assert!((inverse_softplus(0.02) - net.variational().unwrap().rho.data()[0]).abs() < 1e-15);
}
