//! Layer sequencing: forward/backward composition, parameter flattening,
//! and harvesting of per-layer batch-normalisation statistics.

use crate::error::{Error, Result};
use crate::layers::{
    affine_backward, affine_forward, bn_backward, bn_backward_fixed_stats, bn_forward,
    dropout_backward, dropout_forward, relu_backward, relu_forward, softmax_rows, AffineCache,
    BatchNormState, BnCache, BnMode, DenseParams, DropoutMask, ReluCache,
};
use crate::matrix::Matrix;
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(DenseParams),
    BatchNorm(BatchNormState),
    Relu,
    Dropout(f64),
    Softmax,
}

/// One `(mean, biased var)` pair per batch-norm layer, in network order.
#[derive(Debug, Clone, PartialEq)]
pub struct BnLayerStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Frozen normalisation statistics for every batch-norm layer of a network,
/// e.g. one instantiation of the stochastic parameters drawn by MCBN.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrozenBnStats {
    pub layers: Vec<BnLayerStats>,
}

impl FrozenBnStats {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// How batch-norm layers pick their statistics during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum BnPolicy<'a> {
    /// Each layer normalises with the statistics of its current input batch,
    /// computed layer by layer in one pass.
    Batch,
    /// Each layer uses its stored running statistics.
    Running,
    /// Each layer uses the supplied statistics, one entry per layer.
    Frozen(&'a FrozenBnStats),
}

#[derive(Debug, Clone)]
pub enum LayerCache {
    Dense(AffineCache),
    BatchNorm(BnCache),
    Relu(ReluCache),
    Dropout(DropoutMask),
}

/// Per-layer parameter gradients, aligned with the network's layer list.
#[derive(Debug, Clone)]
pub enum LayerGrads {
    Dense { d_weights: Matrix, d_bias: Vec<f64> },
    BatchNorm { d_gamma: Vec<f64>, d_beta: Vec<f64> },
    None,
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    /// Validates layer wiring: adjacent dimensions agree, dropout rates lie
    /// in `[0, 1)`, and at most one softmax head sits at the end.
    pub fn new(layers: Vec<Layer>) -> Result<Network> {
        let mut width: Option<usize> = None;
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Dense(p) => {
                    if p.weights.cols() != p.bias.len() {
                        return Err(Error::Shape(format!(
                            "layer {i}: bias length {} does not match weights {}x{}",
                            p.bias.len(),
                            p.weights.rows(),
                            p.weights.cols()
                        )));
                    }
                    if let Some(w) = width {
                        if p.in_dim() != w {
                            return Err(Error::Shape(format!(
                                "layer {i}: dense expects {} inputs but previous layer emits {w}",
                                p.in_dim()
                            )));
                        }
                    }
                    width = Some(p.out_dim());
                }
                Layer::BatchNorm(s) => {
                    s.validate().map_err(|e| Error::Shape(format!("layer {i}: {e}")))?;
                    if let Some(w) = width {
                        if s.features() != w {
                            return Err(Error::Shape(format!(
                                "layer {i}: batch-norm has {} features but previous layer emits {w}",
                                s.features()
                            )));
                        }
                    }
                    width = Some(s.features());
                }
                Layer::Relu => {}
                Layer::Dropout(p) => {
                    if !(0.0..1.0).contains(p) {
                        return Err(Error::Contract(format!(
                            "layer {i}: dropout rate must lie in [0, 1), got {p}"
                        )));
                    }
                }
                Layer::Softmax => {
                    if i + 1 != layers.len() {
                        return Err(Error::Contract(format!(
                            "layer {i}: softmax head must be the final layer"
                        )));
                    }
                }
            }
        }
        Ok(Network { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    #[cfg(test)]
    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Folds the batch statistics recorded in `caches` (a batch-mode forward
    /// over `n` rows) into each batch-norm layer's running averages.
    pub fn apply_bn_running_updates(&mut self, caches: &[LayerCache], n: usize) -> Result<()> {
        let mut cache_iter = caches.iter().filter_map(|c| match c {
            LayerCache::BatchNorm(b) => Some(b),
            _ => None,
        });
        for layer in &mut self.layers {
            if let Layer::BatchNorm(state) = layer {
                let cache = cache_iter.next().ok_or_else(|| {
                    Error::Contract("fewer batch-norm caches than layers".into())
                })?;
                if !cache.from_batch_mode() {
                    return Err(Error::Contract(
                        "running-statistics update from a non-batch-mode cache".into(),
                    ));
                }
                crate::layers::bn_update_running(
                    state,
                    cache.batch_mean(),
                    cache.batch_var_biased(),
                    n,
                )?;
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::Dense(p) => Some(p.in_dim()),
            Layer::BatchNorm(s) => Some(s.features()),
            _ => None,
        })
    }

    pub fn bn_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::BatchNorm(_))).count()
    }

    pub fn has_dropout(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::Dropout(_)))
    }

    pub fn has_softmax_head(&self) -> bool {
        matches!(self.layers.last(), Some(Layer::Softmax))
    }

    /// Applies all layers in order. Batch-norm layers consume `bn_policy`;
    /// dropout layers draw one mask each from `rng` when `dropout_active`.
    /// With running statistics and inactive dropout the map is deterministic.
    pub fn forward(
        &self,
        x: &Matrix,
        bn_policy: BnPolicy,
        dropout_active: bool,
        rng: &mut Rng,
    ) -> Result<(Matrix, Vec<LayerCache>)> {
        self.forward_impl(x, bn_policy, dropout_active, rng, false)
    }

    /// Like [`Network::forward`] but stops before a terminal softmax head,
    /// returning logits for use with softmax cross-entropy.
    pub fn forward_logits(
        &self,
        x: &Matrix,
        bn_policy: BnPolicy,
        dropout_active: bool,
        rng: &mut Rng,
    ) -> Result<(Matrix, Vec<LayerCache>)> {
        self.forward_impl(x, bn_policy, dropout_active, rng, true)
    }

    fn forward_impl(
        &self,
        x: &Matrix,
        bn_policy: BnPolicy,
        dropout_active: bool,
        rng: &mut Rng,
        stop_before_softmax: bool,
    ) -> Result<(Matrix, Vec<LayerCache>)> {
        if let BnPolicy::Frozen(stats) = bn_policy {
            let expected = self.bn_layer_count();
            if stats.len() != expected {
                return Err(Error::Contract(format!(
                    "frozen statistics cover {} layers but the network has {} batch-norm layers",
                    stats.len(),
                    expected
                )));
            }
        }
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut bn_index = 0usize;
        for (i, layer) in self.layers.iter().enumerate() {
            let at_layer = |e: Error| match e {
                Error::Shape(m) => Error::Shape(format!("layer {i}: {m}")),
                other => other,
            };
            match layer {
                Layer::Dense(p) => {
                    let (out, cache) = affine_forward(&h, p).map_err(at_layer)?;
                    h = out;
                    caches.push(LayerCache::Dense(cache));
                }
                Layer::BatchNorm(s) => {
                    let mode = match bn_policy {
                        BnPolicy::Batch => BnMode::Batch,
                        BnPolicy::Running => BnMode::Running,
                        BnPolicy::Frozen(stats) => {
                            let entry = &stats.layers[bn_index];
                            BnMode::Frozen { mean: entry.mean.clone(), var: entry.var.clone() }
                        }
                    };
                    let (out, cache) = bn_forward(&h, s, &mode).map_err(at_layer)?;
                    bn_index += 1;
                    h = out;
                    caches.push(LayerCache::BatchNorm(cache));
                }
                Layer::Relu => {
                    let (out, cache) = relu_forward(&h);
                    h = out;
                    caches.push(LayerCache::Relu(cache));
                }
                Layer::Dropout(p) => {
                    let (out, mask) = dropout_forward(&h, *p, dropout_active, rng)?;
                    h = out;
                    caches.push(LayerCache::Dropout(mask));
                }
                Layer::Softmax => {
                    if stop_before_softmax {
                        return Ok((h, caches));
                    }
                    h = softmax_rows(&h);
                    // the head carries no parameters and is fused with the
                    // loss gradient; no cache entry
                    return Ok((h, caches));
                }
            }
            debug_assert!(h.all_finite(), "non-finite activations after layer {i}");
        }
        Ok((h, caches))
    }

    /// Backpropagates `d_logits` through the caches of a logits forward pass
    /// (the softmax head is fused into the cross-entropy gradient).
    /// Returns the input gradient and per-layer parameter gradients aligned
    /// with [`Network::layers`].
    pub fn backward(
        &self,
        d_logits: &Matrix,
        caches: &[LayerCache],
    ) -> Result<(Matrix, Vec<LayerGrads>)> {
        let body_len =
            if self.has_softmax_head() { self.layers.len() - 1 } else { self.layers.len() };
        if caches.len() != body_len {
            return Err(Error::Contract(format!(
                "{} caches for a network body of {} layers",
                caches.len(),
                body_len
            )));
        }
        let mut grads = vec![LayerGrads::None; self.layers.len()];
        let mut dy = d_logits.clone();
        for (i, cache) in caches.iter().enumerate().rev() {
            match (&self.layers[i], cache) {
                (Layer::Dense(_), LayerCache::Dense(c)) => {
                    let (dx, dw, db) = affine_backward(&dy, c)?;
                    grads[i] = LayerGrads::Dense { d_weights: dw, d_bias: db };
                    dy = dx;
                }
                (Layer::BatchNorm(_), LayerCache::BatchNorm(c)) => {
                    // batch-mode caches carry the statistics' dependence on
                    // the input; running/frozen statistics are a fixed
                    // affine map
                    let (dx, dg, db) = if c.from_batch_mode() {
                        bn_backward(&dy, c)?
                    } else {
                        bn_backward_fixed_stats(&dy, c)?
                    };
                    grads[i] = LayerGrads::BatchNorm { d_gamma: dg, d_beta: db };
                    dy = dx;
                }
                (Layer::Relu, LayerCache::Relu(c)) => {
                    dy = relu_backward(&dy, c)?;
                }
                (Layer::Dropout(_), LayerCache::Dropout(mask)) => {
                    dy = dropout_backward(&dy, mask)?;
                }
                _ => {
                    return Err(Error::Contract(format!(
                        "cache at position {i} does not match the layer type"
                    )))
                }
            }
        }
        Ok((dy, grads))
    }

    /// Collects each batch-norm layer's `(mean, biased var)` from the caches
    /// of a batch-mode forward pass.
    pub fn harvest_bn_stats(&self, caches: &[LayerCache]) -> Result<FrozenBnStats> {
        let mut layers = Vec::with_capacity(self.bn_layer_count());
        for cache in caches {
            if let LayerCache::BatchNorm(c) = cache {
                if !c.from_batch_mode() {
                    return Err(Error::Contract(
                        "batch statistics requested from a non-batch-mode cache".into(),
                    ));
                }
                layers.push(BnLayerStats {
                    mean: c.batch_mean().to_vec(),
                    var: c.batch_var_biased().to_vec(),
                });
            }
        }
        Ok(FrozenBnStats { layers })
    }

    /// Overwrites every batch-norm layer's running statistics.
    pub fn set_running_stats(&mut self, stats: &FrozenBnStats) -> Result<()> {
        if stats.len() != self.bn_layer_count() {
            return Err(Error::Contract(format!(
                "{} statistics entries for {} batch-norm layers",
                stats.len(),
                self.bn_layer_count()
            )));
        }
        let mut k = 0;
        for layer in &mut self.layers {
            if let Layer::BatchNorm(s) = layer {
                let entry = &stats.layers[k];
                if entry.mean.len() != s.features() || entry.var.len() != s.features() {
                    return Err(Error::Shape(format!(
                        "statistics entry {k} has lengths ({}, {}) for {} features",
                        entry.mean.len(),
                        entry.var.len(),
                        s.features()
                    )));
                }
                if entry.var.iter().any(|&v| v < 0.0) {
                    return Err(Error::Contract("negative variance entry".into()));
                }
                s.running_mean = entry.mean.clone();
                s.running_var = entry.var.clone();
                k += 1;
            }
        }
        Ok(())
    }

    /// Learnable parameters (dense weights row-major then bias; batch-norm
    /// gamma then beta) flattened in layer order. Running statistics are not
    /// parameters and are excluded.
    pub fn param_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense(p) => {
                    out.extend_from_slice(p.weights.data());
                    out.extend_from_slice(&p.bias);
                }
                Layer::BatchNorm(s) => {
                    out.extend_from_slice(&s.gamma);
                    out.extend_from_slice(&s.beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense(p) => p.weights.data().len() + p.bias.len(),
                Layer::BatchNorm(s) => 2 * s.features(),
                _ => 0,
            })
            .sum()
    }

    /// Writes back a flat parameter vector in [`Network::param_vector`] order.
    pub fn set_param_vector(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Contract(format!(
                "parameter vector has length {} but the network has {} parameters",
                params.len(),
                self.param_count()
            )));
        }
        let mut pos = 0;
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(p) => {
                    let nw = p.weights.data().len();
                    p.weights.data_mut().copy_from_slice(&params[pos..pos + nw]);
                    pos += nw;
                    let nb = p.bias.len();
                    p.bias.copy_from_slice(&params[pos..pos + nb]);
                    pos += nb;
                }
                Layer::BatchNorm(s) => {
                    let d = s.features();
                    s.gamma.copy_from_slice(&params[pos..pos + d]);
                    pos += d;
                    s.beta.copy_from_slice(&params[pos..pos + d]);
                    pos += d;
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Flattens per-layer gradients into [`Network::param_vector`] order.
    pub fn grad_vector(&self, grads: &[LayerGrads]) -> Result<Vec<f64>> {
        if grads.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "{} gradient entries for {} layers",
                grads.len(),
                self.layers.len()
            )));
        }
        let mut out = Vec::with_capacity(self.param_count());
        for (layer, grad) in self.layers.iter().zip(grads) {
            match (layer, grad) {
                (Layer::Dense(_), LayerGrads::Dense { d_weights, d_bias }) => {
                    out.extend_from_slice(d_weights.data());
                    out.extend_from_slice(d_bias);
                }
                (Layer::BatchNorm(_), LayerGrads::BatchNorm { d_gamma, d_beta }) => {
                    out.extend_from_slice(d_gamma);
                    out.extend_from_slice(d_beta);
                }
                (Layer::Dense(_) | Layer::BatchNorm(_), _) => {
                    return Err(Error::Contract(
                        "gradient entry does not match its layer type".into(),
                    ))
                }
                _ => {}
            }
        }
        Ok(out)
    }
}

/// Builds a classifier MLP: for each hidden width a dense layer, optional
/// batch-norm, ReLU, and (when `dropout_p` is given, even at rate 0) a
/// dropout layer; then a dense layer to `class_count` logits and a softmax
/// head. Dense weights are drawn from `N(0, 2/fan_in)`, biases start at
/// zero.
pub fn build_mlp(
    input_dim: usize,
    hidden: &[usize],
    class_count: usize,
    batch_norm: bool,
    dropout_p: Option<f64>,
    rng: &mut Rng,
) -> Result<Network> {
    if input_dim == 0 || class_count == 0 {
        return Err(Error::Contract("input_dim and class_count must be positive".into()));
    }
    let mut layers = Vec::new();
    let mut prev = input_dim;
    for &h in hidden {
        layers.push(Layer::Dense(he_dense(prev, h, rng)));
        if batch_norm {
            layers.push(Layer::BatchNorm(BatchNormState::new(h)));
        }
        layers.push(Layer::Relu);
        if let Some(p) = dropout_p {
            layers.push(Layer::Dropout(p));
        }
        prev = h;
    }
    layers.push(Layer::Dense(he_dense(prev, class_count, rng)));
    layers.push(Layer::Softmax);
    Network::new(layers)
}

fn he_dense(in_dim: usize, out_dim: usize, rng: &mut Rng) -> DenseParams {
    let std = (2.0 / in_dim as f64).sqrt();
    let mut weights = Matrix::zeros(in_dim, out_dim);
    for w in weights.data_mut() {
        *w = std * rng.normal();
    }
    DenseParams { weights, bias: vec![0.0; out_dim] }
}
