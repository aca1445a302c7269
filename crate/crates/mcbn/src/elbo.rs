//! Evidence-lower-bound machinery on an analytically tractable model.
//!
//! The variational family is a diagonal Gaussian over the weights of a
//! linear-Gaussian regression with known noise, so the KL term, the expected
//! log-likelihood, the full ELBO, and its gradients all have closed forms,
//! and the mini-batch estimator can be checked against exhaustive
//! enumeration at machine precision. The loss convention follows the
//! negative-ELBO form: `-E_q[log p(y|x, theta)] + KL(q || prior)`, a
//! quantity to minimise.
//!
//! The batch-statistic side (population statistics and the mini-batch bias
//! study) runs on the classification network and its cross-entropy
//! objective.

use crate::error::{Error, Result};
use crate::inference::{bn_stats_of_batch, mcbn_sample_stats};
use crate::layers::softmax_cross_entropy;
use crate::matrix::Matrix;
use crate::network::{BnPolicy, FrozenBnStats, Network};
use crate::rng::Rng;
use crate::train::Dataset;

fn ln_2pi() -> f64 {
    (2.0 * std::f64::consts::PI).ln()
}

/// Diagonal-Gaussian variational distribution, parameterised by means and
/// log standard deviations so that sigma stays positive by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMeanField {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl GaussianMeanField {
    pub fn new(mu: Vec<f64>, log_sigma: Vec<f64>) -> Result<GaussianMeanField> {
        if mu.len() != log_sigma.len() {
            return Err(Error::Shape(format!(
                "mu has length {} but log_sigma has length {}",
                mu.len(),
                log_sigma.len()
            )));
        }
        Ok(GaussianMeanField { mu, log_sigma })
    }

    pub fn standard(dim: usize) -> GaussianMeanField {
        GaussianMeanField { mu: vec![0.0; dim], log_sigma: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|l| l.exp()).collect()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.log_sigma)
            .map(|(&m, &l)| m + l.exp() * rng.normal())
            .collect()
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        let mut lp = 0.0;
        for ((&t, &m), &l) in theta.iter().zip(&self.mu).zip(&self.log_sigma) {
            let s = l.exp();
            let z = (t - m) / s;
            lp += -0.5 * z * z - l - 0.5 * ln_2pi();
        }
        lp
    }
}

/// Zero-mean isotropic Gaussian prior over the weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsotropicPrior {
    pub sigma_p: f64,
}

impl IsotropicPrior {
    pub fn new(sigma_p: f64) -> Result<IsotropicPrior> {
        if !(sigma_p > 0.0 && sigma_p.is_finite()) {
            return Err(Error::Contract(format!("sigma_p must be positive, got {sigma_p}")));
        }
        Ok(IsotropicPrior { sigma_p })
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        let s = self.sigma_p;
        theta
            .iter()
            .map(|&t| -0.5 * (t / s) * (t / s) - s.ln() - 0.5 * ln_2pi())
            .sum()
    }
}

/// Linear regression with known Gaussian noise: the analytic oracle model.
#[derive(Debug, Clone)]
pub struct LinearGaussianModel {
    pub design: Matrix,
    pub targets: Vec<f64>,
    pub noise_sigma: f64,
}

impl LinearGaussianModel {
    pub fn new(design: Matrix, targets: Vec<f64>, noise_sigma: f64) -> Result<LinearGaussianModel> {
        if design.rows() != targets.len() {
            return Err(Error::Shape(format!(
                "design has {} rows but there are {} targets",
                design.rows(),
                targets.len()
            )));
        }
        if !(noise_sigma > 0.0 && noise_sigma.is_finite()) {
            return Err(Error::Contract(format!(
                "noise_sigma must be positive, got {noise_sigma}"
            )));
        }
        Ok(LinearGaussianModel { design, targets, noise_sigma })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.design.cols()
    }

    /// `log p(y_i | x_i, theta)` for one point under fixed weights.
    pub fn point_loglik(&self, i: usize, theta: &[f64]) -> f64 {
        let pred: f64 = self.design.row(i).iter().zip(theta).map(|(&x, &t)| x * t).sum();
        let r = self.targets[i] - pred;
        let s = self.noise_sigma;
        -0.5 * (r / s) * (r / s) - s.ln() - 0.5 * ln_2pi()
    }

    pub fn loglik(&self, theta: &[f64]) -> f64 {
        (0..self.len()).map(|i| self.point_loglik(i, theta)).sum()
    }

    fn check_dim(&self, q: &GaussianMeanField) -> Result<()> {
        if q.dim() != self.dim() {
            return Err(Error::Shape(format!(
                "variational distribution has dimension {} but the model has {}",
                q.dim(),
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Closed-form `KL(q || prior)` for a diagonal Gaussian against an isotropic
/// zero-mean Gaussian:
/// `sum_j [ ln(sigma_p / sigma_j) + (sigma_j^2 + mu_j^2) / (2 sigma_p^2) - 1/2 ]`.
pub fn kl_meanfield_gaussian(q: &GaussianMeanField, prior: &IsotropicPrior) -> f64 {
    let sp2 = prior.sigma_p * prior.sigma_p;
    q.mu.iter()
        .zip(&q.log_sigma)
        .map(|(&m, &l)| {
            let s2 = (2.0 * l).exp();
            prior.sigma_p.ln() - l + (s2 + m * m) / (2.0 * sp2) - 0.5
        })
        .sum()
}

/// Exact `E_q[log p(y_i | x_i, theta)]` for one point: the Gaussian integral
/// leaves the residual at the mean plus a variance penalty
/// `sum_j sigma_j^2 x_ij^2`.
pub fn point_expected_loglik(q: &GaussianMeanField, model: &LinearGaussianModel, i: usize) -> f64 {
    let row = model.design.row(i);
    let pred: f64 = row.iter().zip(&q.mu).map(|(&x, &m)| x * m).sum();
    let r = model.targets[i] - pred;
    let var_term: f64 = row
        .iter()
        .zip(&q.log_sigma)
        .map(|(&x, &l)| (2.0 * l).exp() * x * x)
        .sum();
    let s = model.noise_sigma;
    -(r * r + var_term) / (2.0 * s * s) - s.ln() - 0.5 * ln_2pi()
}

/// Exact `E_q[log p(Y | X, theta)]` over the whole dataset.
pub fn expected_loglik_closed(q: &GaussianMeanField, model: &LinearGaussianModel) -> Result<f64> {
    model.check_dim(q)?;
    Ok((0..model.len()).map(|i| point_expected_loglik(q, model, i)).sum())
}

/// Monte Carlo estimate of the expected log-likelihood with its standard
/// error over the `s` draws (0 when `s < 2`).
pub fn expected_loglik_mc_stats(
    q: &GaussianMeanField,
    model: &LinearGaussianModel,
    s: usize,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    model.check_dim(q)?;
    if s == 0 {
        return Err(Error::Contract("sample count must be >= 1".into()));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..s {
        let theta = q.sample(rng);
        let ll = model.loglik(&theta);
        sum += ll;
        sum_sq += ll * ll;
    }
    let mean = sum / s as f64;
    let se = if s >= 2 {
        let var = (sum_sq - sum * sum / s as f64) / (s as f64 - 1.0);
        (var.max(0.0) / s as f64).sqrt()
    } else {
        0.0
    };
    Ok((mean, se))
}

/// Unbiased Monte Carlo estimate of [`expected_loglik_closed`].
pub fn expected_loglik_mc(
    q: &GaussianMeanField,
    model: &LinearGaussianModel,
    s: usize,
    rng: &mut Rng,
) -> Result<f64> {
    Ok(expected_loglik_mc_stats(q, model, s, rng)?.0)
}

/// Full-data negative ELBO: `-expected_loglik_closed + KL`.
pub fn elbo_full(
    q: &GaussianMeanField,
    prior: &IsotropicPrior,
    model: &LinearGaussianModel,
) -> Result<f64> {
    Ok(-expected_loglik_closed(q, model)? + kl_meanfield_gaussian(q, prior))
}

/// Mini-batch negative-ELBO estimator with the `N/|B|` likelihood scaling:
/// `-(N/|B|) sum_{i in B} E_q[log p(y_i|x_i, theta)] + KL`.
pub fn elbo_minibatch(
    q: &GaussianMeanField,
    prior: &IsotropicPrior,
    model: &LinearGaussianModel,
    batch_indices: &[usize],
    n_total: usize,
) -> Result<f64> {
    model.check_dim(q)?;
    if batch_indices.is_empty() {
        return Err(Error::Contract("mini-batch must be nonempty".into()));
    }
    if let Some(&bad) = batch_indices.iter().find(|&&i| i >= n_total) {
        return Err(Error::Contract(format!(
            "batch index {bad} out of range for dataset size {n_total}"
        )));
    }
    if n_total > model.len() {
        return Err(Error::Contract(format!(
            "dataset size {n_total} exceeds the model's {} points",
            model.len()
        )));
    }
    let scale = n_total as f64 / batch_indices.len() as f64;
    let mut ll = 0.0;
    for &i in batch_indices {
        ll += point_expected_loglik(q, model, i);
    }
    Ok(-scale * ll + kl_meanfield_gaussian(q, prior))
}

fn binomial_checked(n: usize, k: usize, cap: u128) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)?;
        acc /= (i + 1) as u128;
        if acc > cap {
            return None;
        }
    }
    Some(acc)
}

/// Exact average of [`elbo_minibatch`] over every size-`batch_size` subset
/// of the dataset — the exhaustive unbiasedness oracle. Refuses to
/// enumerate more than 10^6 subsets.
pub fn enumerate_minibatch_mean(
    q: &GaussianMeanField,
    prior: &IsotropicPrior,
    model: &LinearGaussianModel,
    batch_size: usize,
) -> Result<f64> {
    model.check_dim(q)?;
    let n = model.len();
    if batch_size == 0 || batch_size > n {
        return Err(Error::Contract(format!(
            "subset size must lie in [1, {n}], got {batch_size}"
        )));
    }
    let count = binomial_checked(n, batch_size, 1_000_000).ok_or_else(|| {
        Error::Resource(format!(
            "C({n}, {batch_size}) exceeds the 10^6 enumeration bound"
        ))
    })?;

    let mut indices: Vec<usize> = (0..batch_size).collect();
    let mut sum = 0.0;
    loop {
        sum += elbo_minibatch(q, prior, model, &indices, n)?;
        // advance to the next combination in lexicographic order
        let mut i = batch_size;
        loop {
            if i == 0 {
                return Ok(sum / count as f64);
            }
            i -= 1;
            if indices[i] != i + n - batch_size {
                break;
            }
        }
        indices[i] += 1;
        for j in i + 1..batch_size {
            indices[j] = indices[j - 1] + 1;
        }
    }
}

/// Analytic gradients of [`elbo_full`] with respect to `(mu, log_sigma)`.
pub fn elbo_gradients(
    q: &GaussianMeanField,
    prior: &IsotropicPrior,
    model: &LinearGaussianModel,
) -> Result<(Vec<f64>, Vec<f64>)> {
    model.check_dim(q)?;
    let d = q.dim();
    let sn2 = model.noise_sigma * model.noise_sigma;
    let sp2 = prior.sigma_p * prior.sigma_p;
    let sigma2: Vec<f64> = q.log_sigma.iter().map(|&l| (2.0 * l).exp()).collect();

    let mut grad_mu = vec![0.0; d];
    let mut sum_x2 = vec![0.0; d];
    for i in 0..model.len() {
        let row = model.design.row(i);
        let pred: f64 = row.iter().zip(&q.mu).map(|(&x, &m)| x * m).sum();
        let r = model.targets[i] - pred;
        for (j, &x) in row.iter().enumerate() {
            grad_mu[j] += -r * x / sn2;
            sum_x2[j] += x * x;
        }
    }
    let mut grad_log_sigma = vec![0.0; d];
    for j in 0..d {
        grad_mu[j] += q.mu[j] / sp2;
        grad_log_sigma[j] = sigma2[j] * sum_x2[j] / sn2 - 1.0 + sigma2[j] / sp2;
    }
    Ok((grad_mu, grad_log_sigma))
}

/// Plain gradient descent on [`elbo_full`] using the analytic gradients.
/// Deterministic; errors with the offending step if the objective leaves the
/// finite range.
pub fn optimize_meanfield(
    q0: &GaussianMeanField,
    prior: &IsotropicPrior,
    model: &LinearGaussianModel,
    steps: usize,
    lr: f64,
) -> Result<GaussianMeanField> {
    model.check_dim(q0)?;
    let mut q = q0.clone();
    for step in 0..steps {
        let (g_mu, g_ls) = elbo_gradients(&q, prior, model)?;
        for (m, g) in q.mu.iter_mut().zip(&g_mu) {
            *m -= lr * g;
        }
        for (l, g) in q.log_sigma.iter_mut().zip(&g_ls) {
            *l -= lr * g;
        }
        let objective = elbo_full(&q, prior, model)?;
        if !objective.is_finite() {
            return Err(Error::Numeric(format!(
                "objective became non-finite at step {step}"
            )));
        }
    }
    Ok(q)
}

/// Batch-norm statistics of one batch-mode pass over the entire dataset —
/// the deterministic limit of mini-batch statistics. Shares the code path of
/// [`mcbn_sample_stats`], so sampling with `batch_size = n` reproduces it
/// bitwise.
pub fn bn_population_stats(net: &Network, dataset_features: &Matrix) -> Result<FrozenBnStats> {
    if dataset_features.rows() == 0 {
        return Err(Error::Contract("population statistics need a nonempty dataset".into()));
    }
    bn_stats_of_batch(net, dataset_features)
}

/// One batch size's Monte Carlo bias estimate from the batch-statistic study.
#[derive(Debug, Clone)]
pub struct BiasEstimate {
    pub batch_size: usize,
    /// `E_B[loss under per-batch statistics] - loss under population
    /// statistics`, loss being mean cross-entropy over the full dataset.
    pub bias: f64,
    /// Standard error of the mean over trials (0 when `trials < 2`).
    pub std_error: f64,
    pub trials: usize,
}

fn full_dataset_loss(net: &Network, data: &Dataset, stats: &FrozenBnStats) -> Result<f64> {
    let mut rng = Rng::new(0); // dropout inactive; never drawn from
    let (logits, _) = net.forward_logits(&data.features, BnPolicy::Frozen(stats), false, &mut rng)?;
    Ok(softmax_cross_entropy(&logits, &data.labels)?.loss)
}

/// Monte Carlo study of how replacing population statistics with per-batch
/// statistics shifts the full-dataset cross-entropy, per batch size.
pub fn bn_minibatch_bias_study(
    net: &Network,
    data: &Dataset,
    batch_sizes: &[usize],
    trials: usize,
    rng: &Rng,
) -> Result<Vec<BiasEstimate>> {
    if trials == 0 {
        return Err(Error::Contract("trials must be >= 1".into()));
    }
    let pop_stats = bn_population_stats(net, &data.features)?;
    let pop_loss = full_dataset_loss(net, data, &pop_stats)?;

    let mut out = Vec::with_capacity(batch_sizes.len());
    for (bi, &b) in batch_sizes.iter().enumerate() {
        if b < 2 {
            return Err(Error::Contract(format!("batch size must be >= 2, got {b}")));
        }
        let mut batch_rng = rng.split(bi as u64);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..trials {
            let stats = mcbn_sample_stats(net, &data.features, b, &mut batch_rng)?;
            let diff = full_dataset_loss(net, data, &stats)? - pop_loss;
            sum += diff;
            sum_sq += diff * diff;
        }
        let mean = sum / trials as f64;
        let se = if trials >= 2 {
            let var = (sum_sq - sum * sum / trials as f64) / (trials as f64 - 1.0);
            (var.max(0.0) / trials as f64).sqrt()
        } else {
            0.0
        };
        out.push(BiasEstimate { batch_size: b, bias: mean, std_error: se, trials });
    }
    Ok(out)
}

/// One row of the mini-batch estimator diagnostic table.
#[derive(Debug, Clone)]
pub struct ElboCheckRow {
    pub batch_size: usize,
    /// Monte Carlo mean of the estimator over randomly sampled batches.
    pub estimator_mean: f64,
    /// Exact mean over all batches of this size.
    pub exhaustive_mean: f64,
    pub full_elbo: f64,
    /// `exhaustive_mean - full_elbo`; zero up to rounding by unbiasedness.
    pub bias: f64,
    /// Standard error of the Monte Carlo mean.
    pub std_error: f64,
}

/// Builds the estimator table printed by the `elbo-check` subcommand.
pub fn minibatch_estimator_table(
    q: &GaussianMeanField,
    prior: &IsotropicPrior,
    model: &LinearGaussianModel,
    batch_sizes: &[usize],
    trials: usize,
    rng: &Rng,
) -> Result<Vec<ElboCheckRow>> {
    if trials < 2 {
        return Err(Error::Contract("trials must be >= 2 for a standard error".into()));
    }
    let n = model.len();
    let full = elbo_full(q, prior, model)?;
    let mut rows = Vec::with_capacity(batch_sizes.len());
    for (bi, &b) in batch_sizes.iter().enumerate() {
        if b == 0 || b > n {
            return Err(Error::Contract(format!(
                "batch size must lie in [1, {n}], got {b}"
            )));
        }
        let exhaustive = enumerate_minibatch_mean(q, prior, model, b)?;
        let mut batch_rng = rng.split(bi as u64);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..trials {
            let mut idx = batch_rng.sample_without_replacement(n, b);
            idx.sort_unstable();
            let est = elbo_minibatch(q, prior, model, &idx, n)?;
            sum += est;
            sum_sq += est * est;
        }
        let mean = sum / trials as f64;
        let var = (sum_sq - sum * sum / trials as f64) / (trials as f64 - 1.0);
        rows.push(ElboCheckRow {
            batch_size: b,
            estimator_mean: mean,
            exhaustive_mean: exhaustive,
            full_elbo: full,
            bias: exhaustive - full,
            std_error: (var.max(0.0) / trials as f64).sqrt(),
        });
    }
    Ok(rows)
}
