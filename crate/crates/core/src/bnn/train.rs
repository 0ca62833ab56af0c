use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{normalize_batches, Dataset};
use crate::error::{Error, Result};
use crate::rng::{RandomStream, StreamState};
use crate::tensor::{adam_step, Adam, AdamState, Graph, Tensor, Var};
use crate::uncertainty::argmax;

use super::{forward, DepthwiseSource, Network, NetworkConfig};

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub norm_mean: f64,
    pub norm_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            norm_mean: 0.5,
            norm_std: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub cross_entropy: f64,
    pub kl: f64,
    pub accuracy: f64,
}

/// Everything needed to resume training bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub version: u32,
    pub net: Network,
    pub train: TrainConfig,
    pub adam: AdamState,
    pub epoch: usize,
    pub rng: StreamState,
    pub metrics: Vec<EpochMetrics>,
}

/// `CE + β·KL/n_train` as a graph node.
pub fn elbo_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    mu: Var,
    rho: Var,
    cfg: &NetworkConfig,
    dataset_size: usize,
) -> Result<(Var, Var, Var)> {
    let ce = g.cross_entropy(logits, labels)?;
    let sigma = g.softplus(rho);
    let kl = g.kl_gaussian(mu, sigma, cfg.prior_sigma)?;
    let scaled = g.scale(kl, cfg.kl_weight / dataset_size.max(1) as f64);
    let loss = g.add(ce, scaled)?;
    Ok((loss, ce, kl))
}

impl TrainState {
    pub fn new(cfg: NetworkConfig, train: TrainConfig) -> Result<Self> {
        let root = RandomStream::new(train.seed, 0);
        let net = Network::new(cfg, &mut root.fork(1))?;
        Ok(Self {
            version: CHECKPOINT_VERSION,
            net,
            train,
            adam: AdamState::default(),
            epoch: 0,
            rng: root.fork(2).state(),
            metrics: Vec::new(),
        })
    }

    fn hyper(&self) -> Adam {
        Adam {
            lr: self.train.lr,
            ..Adam::default()
        }
    }

    /// One pass over `data` with one reparameterized weight sample per batch.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let mut rng = RandomStream::from_state(self.rng);
        let batches: Vec<_> = normalize_batches(
            data,
            self.train.norm_mean,
            self.train.norm_std,
            self.train.batch_size,
            &mut rng,
        )?
        .collect();
        let pb = self.net.cfg.prob_block;
        let (mu_i, rho_i) = (
            self.net.index(&format!("dws{pb}.mu"))?,
            self.net.index(&format!("dws{pb}.rho"))?,
        );
        let hyper = self.hyper();
        let (mut loss_sum, mut ce_sum, mut kl_last, mut correct) = (0.0, 0.0, 0.0, 0usize);
        for (bi, batch) in batches.into_iter().enumerate() {
            let eps = Tensor::randn(self.net.params[mu_i].shape().to_vec(), 1.0, &mut rng);
            let mut g = Graph::new();
            let bound = self.net.bind(&mut g, true);
            let x = g.constant(batch.x);
            let logits = forward(
                &mut g,
                &self.net,
                &bound,
                x,
                DepthwiseSource::Sampled { eps: &eps },
            )?;
            let (loss, ce, kl) = elbo_loss(
                &mut g,
                logits,
                &batch.labels,
                bound.vars[mu_i],
                bound.vars[rho_i],
                &self.net.cfg,
                data.len(),
            )?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    value,
                    epoch: self.epoch,
                    batch: bi,
                });
            }
            let n = batch.labels.len();
            loss_sum += value * n as f64;
            ce_sum += g.value(ce).data()[0] * n as f64;
            kl_last = g.value(kl).data()[0];
            let classes = self.net.cfg.classes;
            correct += g
                .value(logits)
                .data()
                .chunks(classes)
                .zip(&batch.labels)
                .filter(|(row, &y)| argmax(row) == y)
                .count();
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor> = bound
                .vars
                .iter()
                .map(|&v| grads.take(v).expect("trainable leaf"))
                .collect();
            adam_step(&mut self.net.params, &grads, &mut self.adam, &hyper)?;
        }
        self.rng = rng.state();
        self.epoch += 1;
        let n = data.len() as f64;
        let m = EpochMetrics {
            epoch: self.epoch,
            loss: loss_sum / n,
            cross_entropy: ce_sum / n,
            kl: kl_last,
            accuracy: correct as f64 / n,
        };
        self.metrics.push(m.clone());
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: TrainState = serde_json::from_slice(&fs::read(path)?)?;
        if s.version != CHECKPOINT_VERSION {
            return Err(Error::MalformedHeader(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                s.version
            )));
        }
        s.net.cfg.validate()?;
        Ok(s)
    }
}

/// Trains a fresh network for `train.epochs` epochs, calling `on_epoch`
/// after each.
pub fn fit(
    data: &Dataset,
    cfg: NetworkConfig,
    train: TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainState> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let [h, w, c] = cfg.input_shape;
    if (data.height, data.width, data.channels) != (h, w, c) {
        return Err(Error::shape(
            "fit",
            format!(
                "dataset images are {}x{}x{}, network expects {h}x{w}x{c}",
                data.height, data.width, data.channels
            ),
        ));
    }
    let mut state = TrainState::new(cfg, train)?;
    for _ in 0..state.train.epochs {
        let m = state.train_epoch(data)?;
        on_epoch(&m);
    }
    Ok(state)
}
