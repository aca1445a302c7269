//! Layer primitives with exact manual gradients: affine, batch
//! normalisation (batch / running / frozen statistics), ReLU, inverted
//! dropout, and softmax cross-entropy.
//!
//! Every forward op returns a cache holding exactly what its backward op
//! needs; caches are plain data and never borrow from the network.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

/// Weights are `in x out`; the forward map is `X * W + bias` broadcast per row.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl DenseParams {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<DenseParams> {
        if weights.cols() != bias.len() {
            return Err(Error::Shape(format!(
                "bias length {} does not match weight shape {}x{}",
                bias.len(),
                weights.rows(),
                weights.cols()
            )));
        }
        Ok(DenseParams { weights, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }
}

/// Per-feature scale/shift parameters plus running statistics.
///
/// `running_var` stores the unbiased convention: batch-mode variance is
/// biased (divide by n) and the running update rescales it by `n/(n-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum_alpha: f64,
    pub num_updates: u64,
}

impl BatchNormState {
    /// Fresh state: gamma 1, beta 0, running stats (0, 1), eps 1e-5, alpha 0.1.
    pub fn new(features: usize) -> BatchNormState {
        BatchNormState {
            gamma: vec![1.0; features],
            beta: vec![0.0; features],
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            eps: 1e-5,
            momentum_alpha: 0.1,
            num_updates: 0,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.gamma.len();
        if self.beta.len() != d || self.running_mean.len() != d || self.running_var.len() != d {
            return Err(Error::Shape(format!(
                "batch-norm parameter lengths disagree: gamma {}, beta {}, mean {}, var {}",
                d,
                self.beta.len(),
                self.running_mean.len(),
                self.running_var.len()
            )));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::Contract("running_var has a negative entry".into()));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Contract(format!("eps must be finite and >= 0, got {}", self.eps)));
        }
        if !(self.momentum_alpha > 0.0 && self.momentum_alpha <= 1.0) {
            return Err(Error::Contract(format!(
                "momentum_alpha must lie in (0, 1], got {}",
                self.momentum_alpha
            )));
        }
        Ok(())
    }
}

/// Which statistics normalise the batch.
#[derive(Debug, Clone, PartialEq)]
pub enum BnMode {
    /// Statistics of the current input batch (training mode; needs n >= 2).
    Batch,
    /// Stored running statistics.
    Running,
    /// Externally supplied statistics, e.g. harvested from a training
    /// mini-batch.
    Frozen { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct AffineCache {
    x: Matrix,
    weights: Matrix,
}

pub fn affine_forward(x: &Matrix, params: &DenseParams) -> Result<(Matrix, AffineCache)> {
    if x.cols() != params.in_dim() {
        return Err(Error::Shape(format!(
            "input is {}x{} but weights are {}x{}",
            x.rows(),
            x.cols(),
            params.in_dim(),
            params.out_dim()
        )));
    }
    let mut out = x.matmul(&params.weights)?;
    for i in 0..out.rows() {
        for (o, &b) in out.row_mut(i).iter_mut().zip(&params.bias) {
            *o += b;
        }
    }
    Ok((out, AffineCache { x: x.clone(), weights: params.weights.clone() }))
}

/// Exact gradients of the affine map: `dX = dY W^T`, `dW = X^T dY`,
/// `dbias = column sums of dY`.
pub fn affine_backward(dy: &Matrix, cache: &AffineCache) -> Result<(Matrix, Matrix, Vec<f64>)> {
    if dy.rows() != cache.x.rows() || dy.cols() != cache.weights.cols() {
        return Err(Error::Contract(format!(
            "upstream gradient {}x{} does not match cache ({}x{} input, {}x{} weights)",
            dy.rows(),
            dy.cols(),
            cache.x.rows(),
            cache.x.cols(),
            cache.weights.rows(),
            cache.weights.cols()
        )));
    }
    let dx = dy.matmul(&cache.weights.transpose())?;
    let dw = cache.x.transpose().matmul(dy)?;
    let mut dbias = vec![0.0; dy.cols()];
    for i in 0..dy.rows() {
        for (db, &g) in dbias.iter_mut().zip(dy.row(i)) {
            *db += g;
        }
    }
    Ok((dx, dw, dbias))
}

#[derive(Debug, Clone)]
pub struct BnCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
    from_batch_mode: bool,
    batch_mean: Vec<f64>,
    batch_var_biased: Vec<f64>,
}

impl BnCache {
    pub fn from_batch_mode(&self) -> bool {
        self.from_batch_mode
    }

    /// Per-feature mean of the batch this cache was computed from.
    /// Empty unless the forward ran in `Batch` mode.
    pub fn batch_mean(&self) -> &[f64] {
        &self.batch_mean
    }

    /// Per-feature biased variance of the batch this cache was computed
    /// from. Empty unless the forward ran in `Batch` mode.
    pub fn batch_var_biased(&self) -> &[f64] {
        &self.batch_var_biased
    }

    pub fn normalized(&self) -> &Matrix {
        &self.normalized
    }
}

/// `((H - mu) / sqrt(var + eps)) * gamma + beta`, with `(mu, var)` picked by
/// `mode`. Batch mode uses the biased (divide-by-n) variance of the current
/// input and requires n >= 2.
pub fn bn_forward(h: &Matrix, state: &BatchNormState, mode: &BnMode) -> Result<(Matrix, BnCache)> {
    let d = state.features();
    if h.cols() != d {
        return Err(Error::Shape(format!(
            "input is {}x{} but batch-norm state has {} features",
            h.rows(),
            h.cols(),
            d
        )));
    }
    let (mean, var, from_batch) = match mode {
        BnMode::Batch => {
            if h.rows() < 2 {
                return Err(Error::DegenerateBatch(format!(
                    "batch-mode statistics need at least 2 rows, got {}",
                    h.rows()
                )));
            }
            let mean = h.col_mean();
            let var = h.col_var_biased(&mean);
            (mean, var, true)
        }
        BnMode::Running => (state.running_mean.clone(), state.running_var.clone(), false),
        BnMode::Frozen { mean, var } => {
            if mean.len() != d || var.len() != d {
                return Err(Error::Shape(format!(
                    "frozen statistics have lengths ({}, {}) but the layer has {} features",
                    mean.len(),
                    var.len(),
                    d
                )));
            }
            if var.iter().any(|&v| v < 0.0) {
                return Err(Error::Contract("frozen variance has a negative entry".into()));
            }
            (mean.clone(), var.clone(), false)
        }
    };

    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + state.eps).sqrt()).collect();
    let mut normalized = Matrix::zeros(h.rows(), d);
    let mut out = Matrix::zeros(h.rows(), d);
    for i in 0..h.rows() {
        for j in 0..d {
            let z = (h[(i, j)] - mean[j]) * inv_std[j];
            normalized[(i, j)] = z;
            out[(i, j)] = z * state.gamma[j] + state.beta[j];
        }
    }
    let cache = BnCache {
        normalized,
        inv_std,
        gamma: state.gamma.clone(),
        from_batch_mode: from_batch,
        batch_mean: if from_batch { mean } else { Vec::new() },
        batch_var_biased: if from_batch { var } else { Vec::new() },
    };
    Ok((out, cache))
}

/// Exact gradients of batch-mode normalisation, including the dependence of
/// the batch statistics on the input. Requires a cache from a `Batch`-mode
/// forward; running/frozen statistics backpropagate as a fixed affine map
/// (see [`bn_backward_fixed_stats`]).
pub fn bn_backward(dy: &Matrix, cache: &BnCache) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
    if !cache.from_batch_mode {
        return Err(Error::Contract(
            "batch-mode gradients requested from a running/frozen-statistics cache".into(),
        ));
    }
    if dy.shape() != cache.normalized.shape() {
        return Err(Error::Contract(format!(
            "upstream gradient {}x{} does not match cached batch {}x{}",
            dy.rows(),
            dy.cols(),
            cache.normalized.rows(),
            cache.normalized.cols()
        )));
    }
    let (n, d) = dy.shape();
    let n_f = n as f64;

    let mut d_gamma = vec![0.0; d];
    let mut d_beta = vec![0.0; d];
    // Per-feature sums of dz and dz * z, where dz = dy * gamma.
    let mut sum_dz = vec![0.0; d];
    let mut sum_dz_z = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            let g = dy[(i, j)];
            let z = cache.normalized[(i, j)];
            d_beta[j] += g;
            d_gamma[j] += g * z;
            let dz = g * cache.gamma[j];
            sum_dz[j] += dz;
            sum_dz_z[j] += dz * z;
        }
    }

    let mut dh = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let dz = dy[(i, j)] * cache.gamma[j];
            let z = cache.normalized[(i, j)];
            dh[(i, j)] = cache.inv_std[j] / n_f * (n_f * dz - sum_dz[j] - z * sum_dz_z[j]);
        }
    }
    Ok((dh, d_gamma, d_beta))
}

/// Gradient through normalisation with statistics held fixed (running or
/// frozen mode): the map is affine in the input.
pub fn bn_backward_fixed_stats(dy: &Matrix, cache: &BnCache) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
    if dy.shape() != cache.normalized.shape() {
        return Err(Error::Contract(format!(
            "upstream gradient {}x{} does not match cached batch {}x{}",
            dy.rows(),
            dy.cols(),
            cache.normalized.rows(),
            cache.normalized.cols()
        )));
    }
    let (n, d) = dy.shape();
    let mut d_gamma = vec![0.0; d];
    let mut d_beta = vec![0.0; d];
    let mut dh = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let g = dy[(i, j)];
            d_beta[j] += g;
            d_gamma[j] += g * cache.normalized[(i, j)];
            dh[(i, j)] = g * cache.gamma[j] * cache.inv_std[j];
        }
    }
    Ok((dh, d_gamma, d_beta))
}

/// Folds one batch's statistics into the running averages:
/// `running_mean <- (1-a) running_mean + a batch_mean` and
/// `running_var <- (1-a) running_var + a batch_var_biased * n/(n-1)`.
pub fn bn_update_running(
    state: &mut BatchNormState,
    batch_mean: &[f64],
    batch_var_biased: &[f64],
    n: usize,
) -> Result<()> {
    if n < 2 {
        return Err(Error::DegenerateBatch(format!(
            "running-statistics update needs n >= 2, got {n}"
        )));
    }
    let d = state.features();
    if batch_mean.len() != d || batch_var_biased.len() != d {
        return Err(Error::Shape(format!(
            "batch statistics have lengths ({}, {}) but the layer has {} features",
            batch_mean.len(),
            batch_var_biased.len(),
            d
        )));
    }
    let a = state.momentum_alpha;
    let unbias = n as f64 / (n as f64 - 1.0);
    for j in 0..d {
        state.running_mean[j] = (1.0 - a) * state.running_mean[j] + a * batch_mean[j];
        state.running_var[j] = (1.0 - a) * state.running_var[j] + a * batch_var_biased[j] * unbias;
    }
    state.num_updates += 1;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ReluCache {
    mask: Matrix,
}

/// Elementwise `max(0, x)`; the subgradient at exactly 0 is 0.
pub fn relu_forward(h: &Matrix) -> (Matrix, ReluCache) {
    let out = h.map(|x| if x > 0.0 { x } else { 0.0 });
    let mask = h.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
    (out, ReluCache { mask })
}

pub fn relu_backward(dy: &Matrix, cache: &ReluCache) -> Result<Matrix> {
    if dy.shape() != cache.mask.shape() {
        return Err(Error::Contract(format!(
            "upstream gradient {}x{} does not match cached mask {}x{}",
            dy.rows(),
            dy.cols(),
            cache.mask.rows(),
            cache.mask.cols()
        )));
    }
    let mut out = dy.clone();
    for (o, &m) in out.data_mut().iter_mut().zip(cache.mask.data()) {
        *o *= m;
    }
    Ok(out)
}

/// Binary keep mask plus the inverted-dropout scale `1/(1-p)`.
/// An inactive mask is all ones with scale 1, so applying it is the identity.
#[derive(Debug, Clone)]
pub struct DropoutMask {
    pub keep: Matrix,
    pub scale: f64,
}

/// Inverted dropout: each entry is kept with probability `1-p` and scaled by
/// `1/(1-p)`; when `active` is false the map is the identity (bit-exact).
pub fn dropout_forward(
    h: &Matrix,
    p: f64,
    active: bool,
    rng: &mut Rng,
) -> Result<(Matrix, DropoutMask)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Contract(format!("dropout rate must lie in [0, 1), got {p}")));
    }
    let mask = if active {
        let mut keep = Matrix::zeros(h.rows(), h.cols());
        for k in keep.data_mut() {
            // P(u >= p) = 1 - p for u uniform in [0, 1).
            *k = if rng.uniform() >= p { 1.0 } else { 0.0 };
        }
        DropoutMask { keep, scale: 1.0 / (1.0 - p) }
    } else {
        DropoutMask { keep: Matrix::filled(h.rows(), h.cols(), 1.0), scale: 1.0 }
    };
    Ok((dropout_apply(h, &mask)?, mask))
}

/// Applies a fixed mask: `h * keep * scale`.
pub fn dropout_apply(h: &Matrix, mask: &DropoutMask) -> Result<Matrix> {
    if h.shape() != mask.keep.shape() {
        return Err(Error::Contract(format!(
            "input {}x{} does not match mask {}x{}",
            h.rows(),
            h.cols(),
            mask.keep.rows(),
            mask.keep.cols()
        )));
    }
    let mut out = h.clone();
    for (o, &k) in out.data_mut().iter_mut().zip(mask.keep.data()) {
        *o *= k * mask.scale;
    }
    Ok(out)
}

pub fn dropout_backward(dy: &Matrix, mask: &DropoutMask) -> Result<Matrix> {
    dropout_apply(dy, mask)
}

/// Numerically stable row softmax via log-sum-exp.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        for (o, &z) in out.row_mut(i).iter_mut().zip(row) {
            *o = (z - lse).exp();
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct SoftmaxXent {
    /// Mean over rows of `-log p[label]`.
    pub loss: f64,
    /// `(probs - onehot) / n`.
    pub dlogits: Matrix,
    pub probs: Matrix,
}

pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<SoftmaxXent> {
    let (n, k) = logits.shape();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
    }
    if n == 0 {
        return Err(Error::Contract("cross-entropy over an empty batch".into()));
    }
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    loss /= n as f64;

    let mut dlogits = probs.clone();
    let n_f = n as f64;
    for (i, &y) in labels.iter().enumerate() {
        dlogits[(i, y)] -= 1.0;
        for g in dlogits.row_mut(i) {
            *g /= n_f;
        }
    }
    Ok(SoftmaxXent { loss, dlogits, probs })
}
