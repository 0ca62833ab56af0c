//! The hybrid Bayesian network: a plain convolution block and two
//! depthwise-separable blocks with concatenation skips, one of which carries
//! Gaussian weight distributions, followed by a linear head over the flattened
//! feature map.
//!
//! Layout for a `[c, h, w]` input and conv width `k`:
//!
//! ```text
//! conv block   c  -> 2k   (two 3×3 convs, outputs concatenated), avgpool
//! dws block 1  2k -> 4k   (depthwise 3×3, channel-axis 1-D conv, skip concat), avgpool
//! dws block 2  4k -> 8k
//! flatten, linear 8k·(h/4)·(w/4) -> classes
//! ```

mod predict;
mod train;

pub use predict::{
    photonic_depthwise, predict_dataset, predict_samples, program_machine, MachineReport,
    PredictMode, EVAL_BATCH,
};
pub use train::{elbo_loss, fit, EpochMetrics, TrainConfig, TrainState};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::photonic::PhotonicMachine;
use crate::rng::RandomStream;
use crate::tensor::{softplus, ConvSpec, Graph, Tensor, Var};

/// Taps per probabilistic kernel.
pub const KERNEL_TAPS: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// `[height, width, channels]`
    pub input_shape: [usize; 3],
    pub classes: usize,
    /// Output channels of each convolution in the first block.
    pub conv_width: usize,
    /// Which depthwise block (1 or 2) holds the weight distributions.
    pub prob_block: usize,
    pub n_samples: usize,
    pub quantize_weights: bool,
    pub weight_bits: u32,
    pub prior_sigma: f64,
    pub kl_weight: f64,
    /// Initial standard deviation of the variational weights.
    pub init_sigma: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_shape: [28, 28, 1],
            classes: 10,
            conv_width: 16,
            prob_block: 2,
            n_samples: 10,
            quantize_weights: true,
            weight_bits: 8,
            prior_sigma: 0.1,
            kl_weight: 1.0,
            init_sigma: 0.02,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("network config: {m}")));
        let [h, w, c] = self.input_shape;
        if h < 4 || w < 4 || c == 0 {
            return bad(format!("input {h}x{w}x{c} too small for two poolings"));
        }
        if self.classes < 2 || self.conv_width == 0 || self.n_samples == 0 {
            return bad("classes ≥ 2, conv_width ≥ 1 and n_samples ≥ 1 required".into());
        }
        if !(1..=2).contains(&self.prob_block) {
            return bad(format!(
                "prob_block must name a depthwise block (1 or 2), got {}",
                self.prob_block
            ));
        }
        if !(2..=24).contains(&self.weight_bits) {
            return bad(format!("weight_bits {} outside 2..=24", self.weight_bits));
        }
        if !(self.prior_sigma > 0.0) || !(self.init_sigma > 0.0) || self.kl_weight < 0.0 {
            return bad("prior_sigma, init_sigma > 0 and kl_weight ≥ 0 required".into());
        }
        Ok(())
    }

    /// Output channels of blocks 0, 1, 2.
    pub fn block_widths(&self) -> [usize; 3] {
        let k = self.conv_width;
        [2 * k, 4 * k, 8 * k]
    }

    /// Length of the flattened feature vector entering the head.
    pub fn head_inputs(&self) -> usize {
        let [h, w, _] = self.input_shape;
        self.block_widths()[2] * (h / 4) * (w / 4)
    }

    /// Channels entering the probabilistic block (= its kernel count).
    pub fn prob_channels(&self) -> usize {
        self.block_widths()[self.prob_block - 1]
    }
}

/// Variational parameters of the probabilistic kernels, `[c, 1, 3, 3]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianVariational {
    pub mu: Tensor,
    pub rho: Tensor,
}

impl GaussianVariational {
    pub fn sigma(&self) -> Tensor {
        softplus(&self.rho)
    }
}

/// `ρ` with `softplus(ρ) = σ`.
pub fn inverse_softplus(sigma: f64) -> f64 {
    sigma + (-(-sigma).exp_m1()).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub cfg: NetworkConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
}

impl Network {
    pub fn new(cfg: NetworkConfig, rng: &mut RandomStream) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.conv_width;
        let c_in = cfg.input_shape[2];
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut add = |name: String, t: Tensor| {
            names.push(name);
            params.push(t);
        };
        add(
            "conv0.a.weight".into(),
            Tensor::randn(vec![k, c_in, 3, 3], he(9 * c_in), rng),
        );
        add("conv0.a.bias".into(), Tensor::zeros(vec![k]));
        add(
            "conv0.b.weight".into(),
            Tensor::randn(vec![k, k, 3, 3], he(9 * k), rng),
        );
        add("conv0.b.bias".into(), Tensor::zeros(vec![k]));
        let widths = cfg.block_widths();
        for block in 1..=2 {
            let c = widths[block - 1];
            if block == cfg.prob_block {
                add(
                    format!("dws{block}.mu"),
                    Tensor::randn(vec![c, 1, 3, 3], he(9), rng),
                );
                add(
                    format!("dws{block}.rho"),
                    Tensor::full(vec![c, 1, 3, 3], inverse_softplus(cfg.init_sigma)),
                );
            } else {
                add(
                    format!("dws{block}.depthwise"),
                    Tensor::randn(vec![c, 1, 3, 3], he(9), rng),
                );
            }
            add(
                format!("dws{block}.channel.weight"),
                Tensor::randn(vec![1, 1, 3], he(3), rng),
            );
            add(format!("dws{block}.channel.bias"), Tensor::zeros(vec![1]));
        }
        add(
            "head.weight".into(),
            Tensor::randn(
                vec![cfg.classes, cfg.head_inputs()],
                (1.0 / cfg.head_inputs() as f64).sqrt(),
                rng,
            ),
        );
        add("head.bias".into(), Tensor::zeros(vec![cfg.classes]));
        Ok(Self { cfg, names, params })
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.params[self.index(name)?])
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.index(name)?;
        Ok(&mut self.params[i])
    }

    pub fn variational(&self) -> Result<GaussianVariational> {
        let b = self.cfg.prob_block;
        Ok(GaussianVariational {
            mu: self.param(&format!("dws{b}.mu"))?.clone(),
            rho: self.param(&format!("dws{b}.rho"))?.clone(),
        })
    }

    /// Names of the convolution layers in evaluation order.
    pub fn conv_layers(&self) -> Vec<String> {
        let mut layers = vec!["conv0.a".to_string(), "conv0.b".to_string()];
        for block in 1..=2 {
            layers.push(format!("dws{block}.depthwise"));
            layers.push(format!("dws{block}.channel"));
        }
        layers
    }

    pub fn head_outputs(&self) -> usize {
        self.cfg.classes
    }

    /// Registers every parameter in `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a network's parameters, in `Network::params` order.
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    fn get(&self, net: &Network, name: &str) -> Result<Var> {
        Ok(self.vars[net.index(name)?])
    }
}

/// Where the probabilistic block's depthwise output comes from.
#[allow(clippy::large_enum_variant)]
pub enum DepthwiseSource<'a> {
    /// `w = μ + softplus(ρ) ⊙ ε` for the given standard-normal `ε`,
    /// optionally through the straight-through weight quantizer.
    Sampled { eps: &'a Tensor },
    /// Each kernel application runs on the programmed machine.
    Photonic {
        machine: &'a PhotonicMachine,
        rng: RandomStream,
    },
}

fn same3() -> ConvSpec {
    ConvSpec::new(1, 1, 1)
}

fn conv_block(g: &mut Graph, net: &Network, b: &Bound, x: Var) -> Result<Var> {
    let a = g.conv2d(x, b.get(net, "conv0.a.weight")?, same3())?;
    let a = g.channel_bias(a, b.get(net, "conv0.a.bias")?)?;
    let a = g.relu(a);
    let c = g.conv2d(a, b.get(net, "conv0.b.weight")?, same3())?;
    let c = g.channel_bias(c, b.get(net, "conv0.b.bias")?)?;
    let c = g.relu(c);
    g.concat_channels(a, c)
}

/// Depthwise output `d` → ReLU → channel-axis 1-D conv → ReLU → skip concat with `x`.
fn dws_tail(g: &mut Graph, net: &Network, b: &Bound, block: usize, x: Var, d: Var) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let d = g.relu(d);
    let r = g.reorder_for_dws(d)?;
    let e = g.conv1d(r, b.get(net, &format!("dws{block}.channel.weight"))?, 1)?;
    let e = g.channel_bias(e, b.get(net, &format!("dws{block}.channel.bias"))?)?;
    let e = g.relu(e);
    let e = g.reorder_from_dws(e, shape[0], shape[2], shape[3])?;
    g.concat_channels(x, e)
}

fn depthwise(g: &mut Graph, x: Var, kernel: Var) -> Result<Var> {
    let c = g.value(x).shape()[1];
    g.conv2d(x, kernel, ConvSpec::new(c, 1, 1))
}

/// Block `idx` on its own (0 = conv block, otherwise a deterministic DWS block).
pub fn apply_block(g: &mut Graph, net: &Network, b: &Bound, idx: usize, x: Var) -> Result<Var> {
    if idx == 0 {
        conv_block(g, net, b, x)
    } else {
        let d = depthwise(g, x, b.get(net, &format!("dws{idx}.depthwise"))?)?;
        dws_tail(g, net, b, idx, x, d)
    }
}

fn pool_after(idx: usize) -> bool {
    idx < 2
}

/// Runs every block before the probabilistic one (with pooling).
pub fn forward_prefix(g: &mut Graph, net: &Network, b: &Bound, x: Var) -> Result<Var> {
    let [h, w, c] = net.cfg.input_shape;
    let s = g.value(x).shape();
    if s.len() != 4 || s[1..] != [c, h, w] {
        return Err(Error::shape(
            "network input",
            format!("expected [b, {c}, {h}, {w}], got {s:?}"),
        ));
    }
    let mut x = x;
    for idx in 0..net.cfg.prob_block {
        x = apply_block(g, net, b, idx, x)?;
        if pool_after(idx) {
            x = g.avgpool2(x)?;
        }
    }
    Ok(x)
}

/// The probabilistic block, the remaining blocks and the head; returns logits.
pub fn forward_suffix(
    g: &mut Graph,
    net: &Network,
    b: &Bound,
    h: Var,
    source: DepthwiseSource<'_>,
) -> Result<Var> {
    let pb = net.cfg.prob_block;
    let d = match source {
        DepthwiseSource::Sampled { eps } => {
            let mu = b.get(net, &format!("dws{pb}.mu"))?;
            let rho = b.get(net, &format!("dws{pb}.rho"))?;
            if g.value(mu).shape() != eps.shape() {
                return Err(Error::shape(
                    "probabilistic block",
                    format!(
                        "noise {:?} vs kernels {:?}",
                        eps.shape(),
                        g.value(mu).shape()
                    ),
                ));
            }
            let sigma = g.softplus(rho);
            let e = g.constant(eps.clone());
            let noise = g.mul(sigma, e)?;
            let mut w = g.add(mu, noise)?;
            if net.cfg.quantize_weights {
                w = g.quantize_ste(w, KERNEL_TAPS, net.cfg.weight_bits);
            }
            depthwise(g, h, w)?
        }
        DepthwiseSource::Photonic { machine, rng } => {
            let out = photonic_depthwise(g.value(h), machine, &rng)?;
            g.constant(out)
        }
    };
    let mut x = dws_tail(g, net, b, pb, h, d)?;
    if pool_after(pb) {
        x = g.avgpool2(x)?;
    }
    for idx in pb + 1..3 {
        x = apply_block(g, net, b, idx, x)?;
        if pool_after(idx) {
            x = g.avgpool2(x)?;
        }
    }
    let s = g.value(x).shape().to_vec();
    let x = g.reshape(x, vec![s[0], s[1..].iter().product()])?;
    g.linear(x, b.get(net, "head.weight")?, b.get(net, "head.bias")?)
}

/// Full forward pass with the given probabilistic-block source.
pub fn forward(
    g: &mut Graph,
    net: &Network,
    b: &Bound,
    x: Var,
    source: DepthwiseSource<'_>,
) -> Result<Var> {
    let h = forward_prefix(g, net, b, x)?;
    forward_suffix(g, net, b, h, source)
}

/// Probabilistic block in isolation on a tensor: surrogate depthwise conv with
/// `w = μ + σ⊙ε`, optionally weight-quantized.
pub fn probabilistic_forward_surrogate(
    x: &Tensor,
    q: &GaussianVariational,
    eps: &Tensor,
    quantize: Option<u32>,
) -> Result<Tensor> {
    let noise = q.sigma().zip_map(eps, |s, e| s * e)?;
    let w = q.mu.zip_map(&noise, |m, n| m + n)?;
    let w = match quantize {
        Some(bits) => crate::tensor::quantize_rows(&w, KERNEL_TAPS, bits),
        None => w,
    };
    crate::tensor::conv2d(x, &w, ConvSpec::new(x.shape()[1], 1, 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_size_and_conv_count() {
        for classes in [7, 10] {
            let cfg = NetworkConfig {
                classes,
                ..NetworkConfig::default()
            };
            let net = Network::new(cfg, &mut RandomStream::new(0, 0)).unwrap();
            assert_eq!(net.param("head.weight").unwrap().shape()[0], classes);
            assert_eq!(net.conv_layers().len(), 6);
        }
    }

    #[test]
    fn inverse_softplus_round_trips() {
        for s in [1e-4, 0.02, 0.5, 3.0] {
            let r = inverse_softplus(s);
            assert!(
                (crate::tensor::softplus(&Tensor::scalar(r)).data()[0] - s).abs()
                    < 1e-12 * s.max(1.0)
            );
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = NetworkConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.prob_block = 0;
        assert!(cfg.validate().is_err());
        cfg.prob_block = 1;
        cfg.input_shape = [2, 2, 1];
        assert!(cfg.validate().is_err());
    }
}
