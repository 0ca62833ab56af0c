//! Directional finite-difference checks of every differentiable graph op and
//! of the full variational loss.

use pbm_core::bnn::{elbo_loss, forward, DepthwiseSource, Network, NetworkConfig};
use pbm_core::tensor::gradcheck::directional_error;
use pbm_core::tensor::{ConvSpec, Graph, Tensor, Var};
use pbm_core::RandomStream;

const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
const PROBES: usize = 100;

/// Worst relative error per checked op.
#[derive(Default)]
pub struct Suite {
    pub results: Vec<(String, f64)>,
}

impl Suite {
    fn check(&mut self, name: &str, inputs: Vec<Tensor>, op: &dyn Fn(&mut Graph, &[Var]) -> Var) {
        let mut rng = RandomStream::new(42, name.len() as u64);
        let worst = directional_error(&inputs, op, PROBES, EPS, &mut rng);
        self.results.push((name.to_string(), worst));
    }

    pub fn failures(&self) -> Vec<&(String, f64)> {
        self.results
            .iter()
            .filter(|r| r.1.is_nan() || r.1 >= TOL)
            .collect()
    }
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: Vec<usize>, rng: &mut RandomStream) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform_range(0.1, 1.0);
        if rng.uniform() < 0.5 {
            -m
        } else {
            m
        }
    })
}

fn randn(shape: &[usize], rng: &mut RandomStream) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

pub fn elementwise_ops(s: &mut Suite) {
    let mut r = RandomStream::new(1, 0);
    let (a, b) = (randn(&[3, 4], &mut r), randn(&[3, 4], &mut r));
    s.check("add", vec![a.clone(), b.clone()], &|g, v| {
        g.add(v[0], v[1]).unwrap()
    });
    s.check("sub", vec![a.clone(), b.clone()], &|g, v| {
        g.sub(v[0], v[1]).unwrap()
    });
    s.check("mul", vec![a.clone(), b.clone()], &|g, v| {
        g.mul(v[0], v[1]).unwrap()
    });
    s.check("scale", vec![a.clone()], &|g, v| g.scale(v[0], -2.5));
    s.check("sum", vec![a.clone()], &|g, v| g.sum(v[0]));
    s.check("softplus", vec![a.clone()], &|g, v| g.softplus(v[0]));
    s.check("reshape", vec![a.clone()], &|g, v| {
        g.reshape(v[0], vec![2, 6]).unwrap()
    });
    s.check("relu", vec![away_from_zero(vec![3, 4], &mut r)], &|g, v| {
        g.relu(v[0])
    });
}

pub fn convolutions(s: &mut Suite) {
    let mut r = RandomStream::new(2, 0);
    let x = randn(&[2, 4, 6, 5], &mut r);
    s.check(
        "conv2d",
        vec![x.clone(), randn(&[3, 4, 3, 3], &mut r)],
        &|g, v| g.conv2d(v[0], v[1], ConvSpec::new(1, 1, 1)).unwrap(),
    );
    s.check(
        "conv2d_grouped",
        vec![x.clone(), randn(&[4, 2, 3, 3], &mut r)],
        &|g, v| g.conv2d(v[0], v[1], ConvSpec::new(2, 1, 0)).unwrap(),
    );
    s.check(
        "conv2d_depthwise_strided",
        vec![x.clone(), randn(&[4, 1, 3, 3], &mut r)],
        &|g, v| g.conv2d(v[0], v[1], ConvSpec::new(4, 2, 1)).unwrap(),
    );
    s.check(
        "conv1d",
        vec![randn(&[5, 1, 7], &mut r), randn(&[1, 1, 3], &mut r)],
        &|g, v| g.conv1d(v[0], v[1], 1).unwrap(),
    );
    s.check(
        "conv1d_multi",
        vec![randn(&[2, 3, 9], &mut r), randn(&[2, 3, 5], &mut r)],
        &|g, v| g.conv1d(v[0], v[1], 2).unwrap(),
    );
}

pub fn structural_ops(s: &mut Suite) {
    let mut r = RandomStream::new(3, 0);
    let x = randn(&[2, 3, 4, 5], &mut r);
    s.check(
        "channel_bias",
        vec![x.clone(), randn(&[3], &mut r)],
        &|g, v| g.channel_bias(v[0], v[1]).unwrap(),
    );
    s.check(
        "concat",
        vec![x.clone(), randn(&[2, 2, 4, 5], &mut r)],
        &|g, v| g.concat_channels(v[0], v[1]).unwrap(),
    );
    s.check("reorder_for_dws", vec![x.clone()], &|g, v| {
        g.reorder_for_dws(v[0]).unwrap()
    });
    s.check(
        "reorder_from_dws",
        vec![randn(&[40, 1, 3], &mut r)],
        &|g, v| g.reorder_from_dws(v[0], 2, 4, 5).unwrap(),
    );
    s.check("avgpool2", vec![randn(&[2, 3, 5, 4], &mut r)], &|g, v| {
        g.avgpool2(v[0]).unwrap()
    });
    s.check("global_avg_pool", vec![x.clone()], &|g, v| {
        g.global_avg_pool(v[0]).unwrap()
    });
    s.check(
        "linear",
        vec![
            randn(&[4, 6], &mut r),
            randn(&[3, 6], &mut r),
            randn(&[3], &mut r),
        ],
        &|g, v| g.linear(v[0], v[1], v[2]).unwrap(),
    );
}

pub fn losses(s: &mut Suite) {
    let mut r = RandomStream::new(4, 0);
    s.check("cross_entropy", vec![randn(&[5, 4], &mut r)], &|g, v| {
        g.cross_entropy(v[0], &[0, 3, 1, 1, 2]).unwrap()
    });
    let sigma_raw = randn(&[6], &mut r);
    s.check(
        "kl_gaussian",
        vec![randn(&[6], &mut r), sigma_raw],
        &|g, v| {
            let s = g.softplus(v[1]);
            g.kl_gaussian(v[0], s, 0.3).unwrap()
        },
    );
}

fn small_config() -> NetworkConfig {
    NetworkConfig {
        input_shape: [8, 8, 1],
        classes: 3,
        conv_width: 2,
        quantize_weights: false,
        init_sigma: 0.3,
        ..NetworkConfig::default()
    }
}

/// A freshly initialized network with random biases, so no pre-activation sits
/// exactly on a ReLU kink.
fn small_network(cfg: NetworkConfig, r: &mut RandomStream) -> Network {
    let mut net = Network::new(cfg, r).unwrap();
    for (name, p) in net.names.clone().iter().zip(net.params.iter_mut()) {
        if name.ends_with("bias") {
            *p = Tensor::from_fn(p.shape().to_vec(), |_| r.uniform_range(0.05, 0.3));
        }
    }
    net
}

fn elbo_op(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    eps: &Tensor,
    only: Option<(usize, usize)>,
) -> impl Fn(&mut Graph, &[Var]) -> Var {
    let (net, x, labels, eps) = (net.clone(), x.clone(), labels.to_vec(), eps.clone());
    move |g: &mut Graph, v: &[Var]| {
        // with `only`, v holds just (mu, rho) and every other parameter is constant
        let all: Vec<Var> = match only {
            None => v.to_vec(),
            Some((mi, ri)) => net
                .params
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    if i == mi {
                        v[0]
                    } else if i == ri {
                        v[1]
                    } else {
                        g.constant(p.clone())
                    }
                })
                .collect(),
        };
        let bound = pbm_core::bnn::Bound { vars: all.clone() };
        let xv = g.constant(x.clone());
        let logits = forward(g, &net, &bound, xv, DepthwiseSource::Sampled { eps: &eps }).unwrap();
        let pb = net.cfg.prob_block;
        let mi = net.index(&format!("dws{pb}.mu")).unwrap();
        let ri = net.index(&format!("dws{pb}.rho")).unwrap();
        elbo_loss(g, logits, &labels, all[mi], all[ri], &net.cfg, 50)
            .unwrap()
            .0
    }
}

pub fn full_elbo_with_frozen_noise(s: &mut Suite) {
    let mut r = RandomStream::new(5, 0);
    let net = small_network(small_config(), &mut r);
    let x = Tensor::randn(vec![3, 1, 8, 8], 1.0, &mut r);
    let eps = Tensor::randn(net.variational().unwrap().mu.shape().to_vec(), 1.0, &mut r);
    let labels = [0, 2, 1];
    s.check(
        "elbo",
        net.params.clone(),
        &elbo_op(&net, &x, &labels, &eps, None),
    );
    let pb = net.cfg.prob_block;
    let mi = net.index(&format!("dws{pb}.mu")).unwrap();
    let ri = net.index(&format!("dws{pb}.rho")).unwrap();
    s.check(
        "elbo_variational",
        vec![net.params[mi].clone(), net.params[ri].clone()],
        &elbo_op(&net, &x, &labels, &eps, Some((mi, ri))),
    );
}

pub fn elbo_with_first_depthwise_block_probabilistic(s: &mut Suite) {
    let mut r = RandomStream::new(6, 0);
    let cfg = NetworkConfig {
        prob_block: 1,
        ..small_config()
    };
    let net = small_network(cfg, &mut r);
    let x = Tensor::randn(vec![2, 1, 8, 8], 1.0, &mut r);
    let eps = Tensor::randn(net.variational().unwrap().mu.shape().to_vec(), 1.0, &mut r);
    s.check(
        "elbo_block1",
        net.params.clone(),
        &elbo_op(&net, &x, &[1, 0], &eps, None),
    );
}

/// Every op group plus the full loss.
pub fn run_all() -> Suite {
    let mut s = Suite::default();
    elementwise_ops(&mut s);
    convolutions(&mut s);
    structural_ops(&mut s);
    losses(&mut s);
    full_elbo_with_frozen_noise(&mut s);
    elbo_with_first_depthwise_block_probabilistic(&mut s);
    s
}
