//! Mini-batch SGD with momentum and a step-drop learning-rate schedule.
//!
//! Training is fully deterministic given the config seed: mini-batch order,
//! dropout masks, and parameter updates all derive from labeled splits of
//! one stream.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::softmax_cross_entropy;
use crate::matrix::Matrix;
use crate::network::{BnPolicy, Network};
use crate::rng::Rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    /// Epochs at which the learning rate is divided by `lr_drop_factor`;
    /// strictly increasing, all below `epochs`.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Contract(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if !self.lr_initial.is_finite() || self.lr_initial <= 0.0 {
            return Err(Error::Contract(format!(
                "lr_initial must be positive, got {}",
                self.lr_initial
            )));
        }
        if !self.lr_drop_factor.is_finite() || self.lr_drop_factor <= 0.0 {
            return Err(Error::Contract(format!(
                "lr_drop_factor must be positive, got {}",
                self.lr_drop_factor
            )));
        }
        if !self.lr_drop_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Contract("lr_drop_epochs must be strictly increasing".into()));
        }
        if let Some(&last) = self.lr_drop_epochs.last() {
            if last >= self.epochs {
                return Err(Error::Contract(format!(
                    "lr drop epoch {last} is not below epochs {}",
                    self.epochs
                )));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Contract(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Contract(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// A labeled classification dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Dataset> {
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if features.rows() == 0 {
            return Err(Error::Contract("dataset must contain at least one point".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Dataset { features, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-epoch mean training loss and training accuracy.
#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub loss: Vec<f64>,
    pub accuracy: Vec<f64>,
}

/// Splits a uniform random permutation of `0..n` into consecutive chunks of
/// `batch_size`, dropping a trailing partial chunk so every batch carries the
/// same number of rows.
pub fn epoch_minibatches(n: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Contract(format!("batch_size must be >= 2, got {batch_size}")));
    }
    if batch_size > n {
        return Err(Error::Contract(format!(
            "batch_size {batch_size} exceeds dataset size {n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    Ok(perm.chunks_exact(batch_size).map(|c| c.to_vec()).collect())
}

/// One momentum update: `g = grad + weight_decay * param`,
/// `v <- momentum * v + g`, `param <- param - lr * v`.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Contract(format!(
            "parameter/gradient/velocity lengths disagree: {} / {} / {}",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// `lr_initial * lr_drop_factor^(-k)` where `k` counts drop epochs `<= epoch`.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    let k = config.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
    config.lr_initial * config.lr_drop_factor.powi(-(k as i32))
}

/// Trains a copy of `net` and returns it with its history. Per epoch:
/// shuffle, iterate mini-batches, forward in batch-norm batch mode with
/// running-statistics updates, backward, momentum step.
pub fn train(net: &Network, data: &Dataset, config: &TrainConfig) -> Result<(Network, TrainHistory)> {
    config.validate()?;
    if config.batch_size > data.len() {
        return Err(Error::Contract(format!(
            "batch_size {} exceeds dataset size {}",
            config.batch_size,
            data.len()
        )));
    }
    let mut net = net.clone();
    let mut history = TrainHistory::default();
    let mut velocity = vec![0.0; net.param_count()];
    let base_rng = Rng::new(config.seed);

    for epoch in 0..config.epochs {
        let lr = lr_at_epoch(config, epoch);
        let epoch_rng = base_rng.split(1 + epoch as u64);
        let batches =
            epoch_minibatches(data.len(), config.batch_size, &mut epoch_rng.split(0))?;

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (t, batch) in batches.iter().enumerate() {
            let x = data.features.gather_rows(batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();

            let mut dropout_rng = epoch_rng.split(1 + t as u64);
            let (logits, caches) =
                net.forward_logits(&x, BnPolicy::Batch, true, &mut dropout_rng)?;
            let xent = softmax_cross_entropy(&logits, &y)?;
            let (_, layer_grads) = net.backward(&xent.dlogits, &caches)?;
            let grads = net.grad_vector(&layer_grads)?;

            let mut params = net.param_vector();
            sgd_momentum_step(
                &mut params,
                &grads,
                &mut velocity,
                lr,
                config.momentum,
                config.weight_decay,
            )?;
            net.set_param_vector(&params)?;
            net.apply_bn_running_updates(&caches, batch.len())?;

            loss_sum += xent.loss;
            for (pred, &label) in xent.probs.argmax_rows().iter().zip(&y) {
                if *pred == label {
                    correct += 1;
                }
            }
            seen += batch.len();
        }

        let batches_run = batches.len().max(1) as f64;
        history.loss.push(loss_sum / batches_run);
        history.accuracy.push(if seen == 0 { 0.0 } else { correct as f64 / seen as f64 });
    }
    Ok((net, history))
}
