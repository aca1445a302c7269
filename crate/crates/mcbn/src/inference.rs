//! Stochastic-forward-pass samplers.
//!
//! MCBN draws a fresh training mini-batch per pass, freezes the batch-norm
//! statistics it induces, and forwards the test points under those frozen
//! statistics; the test points never join the normalisation batch. MC
//! dropout keeps running statistics and redraws dropout masks per pass.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::network::{BnPolicy, FrozenBnStats, Network};
use crate::rng::Rng;

/// Class probabilities from `T` stochastic forward passes: `T x n x K`.
#[derive(Debug, Clone)]
pub struct PredictiveSamples {
    passes: Vec<Matrix>,
}

impl PredictiveSamples {
    /// Validates that there is at least one pass, all passes share one
    /// shape, and every row lies on the simplex within 1e-9.
    pub fn from_passes(passes: Vec<Matrix>) -> Result<PredictiveSamples> {
        let first = passes
            .first()
            .ok_or_else(|| Error::Contract("predictive samples need at least one pass".into()))?;
        let shape = first.shape();
        for (t, pass) in passes.iter().enumerate() {
            if pass.shape() != shape {
                return Err(Error::Shape(format!(
                    "pass {t} has shape {}x{} but pass 0 has {}x{}",
                    pass.rows(),
                    pass.cols(),
                    shape.0,
                    shape.1
                )));
            }
            for i in 0..pass.rows() {
                let row = pass.row(i);
                if row.iter().any(|&p| p < -1e-9) {
                    return Err(Error::Contract(format!(
                        "pass {t} row {i} has a negative probability"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::Contract(format!(
                        "pass {t} row {i} sums to {sum}, not 1"
                    )));
                }
            }
        }
        Ok(PredictiveSamples { passes })
    }

    pub fn pass_count(&self) -> usize {
        self.passes.len()
    }

    pub fn point_count(&self) -> usize {
        self.passes[0].rows()
    }

    pub fn class_count(&self) -> usize {
        self.passes[0].cols()
    }

    pub fn pass(&self, t: usize) -> &Matrix {
        &self.passes[t]
    }

    pub fn passes(&self) -> &[Matrix] {
        &self.passes
    }

    /// Writes one row per `(t, point, class)` triple:
    /// `t,point_index,class_index,prob`.
    pub fn export_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("t,point_index,class_index,prob\n");
        for (t, pass) in self.passes.iter().enumerate() {
            for i in 0..pass.rows() {
                for (k, &p) in pass.row(i).iter().enumerate() {
                    out.push_str(&format!("{t},{i},{k},{}\n", crate::report::fmt_f64(p)));
                }
            }
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// MCBN sampler settings. `batch_size` should match the training batch size;
/// `passes` defaults to 20.
#[derive(Debug, Clone)]
pub struct McbnConfig {
    pub passes: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl McbnConfig {
    pub fn new(batch_size: usize, seed: u64) -> McbnConfig {
        McbnConfig { passes: 20, batch_size, seed }
    }
}

/// Draws one training mini-batch uniformly without replacement and records
/// the batch-norm statistics a batch-mode pass over it induces, layer by
/// layer. Running statistics are left untouched. Indices are sorted before
/// the pass, so `batch_size = n` always reproduces the population pass
/// exactly.
pub fn mcbn_sample_stats(
    net: &Network,
    train_features: &Matrix,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<FrozenBnStats> {
    let n = train_features.rows();
    if batch_size < 2 || batch_size > n {
        return Err(Error::Contract(format!(
            "mini-batch size must lie in [2, {n}], got {batch_size}"
        )));
    }
    let mut indices = rng.sample_without_replacement(n, batch_size);
    indices.sort_unstable();
    let batch = train_features.gather_rows(&indices)?;
    bn_stats_of_batch(net, &batch)
}

/// Batch-norm statistics induced by one batch-mode pass over `batch`.
pub(crate) fn bn_stats_of_batch(net: &Network, batch: &Matrix) -> Result<FrozenBnStats> {
    if net.bn_layer_count() == 0 {
        return Ok(FrozenBnStats::default());
    }
    let mut rng = Rng::new(0); // dropout inactive; never drawn from
    let (_, caches) = net.forward(batch, BnPolicy::Batch, false, &mut rng)?;
    net.harvest_bn_stats(&caches)
}

/// `T` stochastic forward passes over `x_star`, each under batch-norm
/// statistics frozen from a fresh training mini-batch. Dropout stays
/// inactive. Deterministic given `cfg.seed`; pass `t` uses the split stream
/// labeled `t`, so the output is independent of evaluation order.
pub fn mcbn_predict(
    net: &Network,
    train_features: &Matrix,
    x_star: &Matrix,
    cfg: &McbnConfig,
) -> Result<PredictiveSamples> {
    if cfg.passes == 0 {
        return Err(Error::Contract("pass count must be >= 1".into()));
    }
    let base = Rng::new(cfg.seed);
    let mut passes = Vec::with_capacity(cfg.passes);
    for t in 0..cfg.passes {
        let mut pass_rng = base.split(t as u64);
        let stats = mcbn_sample_stats(net, train_features, cfg.batch_size, &mut pass_rng)?;
        let mut fwd_rng = Rng::new(0);
        let (probs, _) = net.forward(x_star, BnPolicy::Frozen(&stats), false, &mut fwd_rng)?;
        passes.push(probs);
    }
    PredictiveSamples::from_passes(passes)
}

/// `T` forward passes with dropout active and a fresh mask per pass;
/// batch-norm layers use their running statistics. Errors if the network has
/// no dropout layer.
pub fn mc_dropout_predict(
    net: &Network,
    x_star: &Matrix,
    passes: usize,
    rng: &Rng,
) -> Result<PredictiveSamples> {
    if !net.has_dropout() {
        return Err(Error::Contract(
            "MC dropout needs at least one dropout layer in the network".into(),
        ));
    }
    if passes == 0 {
        return Err(Error::Contract("pass count must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(passes);
    for t in 0..passes {
        let mut pass_rng = rng.split(t as u64);
        let (probs, _) = net.forward(x_star, BnPolicy::Running, true, &mut pass_rng)?;
        out.push(probs);
    }
    PredictiveSamples::from_passes(out)
}

/// Mean over the pass axis; rows stay on the simplex.
pub fn predictive_mean(samples: &PredictiveSamples) -> Matrix {
    let t = samples.pass_count() as f64;
    let (n, k) = samples.pass(0).shape();
    let mut mean = Matrix::zeros(n, k);
    for pass in samples.passes() {
        for (m, &p) in mean.data_mut().iter_mut().zip(pass.data()) {
            *m += p;
        }
    }
    for m in mean.data_mut() {
        *m /= t;
    }
    mean
}

/// Standard deterministic evaluation: running statistics, dropout inactive.
pub fn deterministic_predict(net: &Network, x_star: &Matrix) -> Result<Matrix> {
    let mut rng = Rng::new(0); // never drawn from
    let (probs, _) = net.forward(x_star, BnPolicy::Running, false, &mut rng)?;
    Ok(probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_mlp, Layer};
    use crate::layers::BatchNormState;

    fn features(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        let mut m = Matrix::zeros(n, d);
        for v in m.data_mut() {
            *v = rng.normal();
        }
        m
    }

    #[test]
    fn full_batch_stats_equal_population_stats() {
        let net = Network::new(vec![Layer::BatchNorm(BatchNormState::new(3))]).unwrap();
        let x = features(12, 3, 1);
        let mut rng = Rng::new(2);
        let stats = mcbn_sample_stats(&net, &x, 12, &mut rng).unwrap();
        let mean = x.col_mean();
        let var = x.col_var_biased(&mean);
        assert_eq!(stats.layers[0].mean, mean);
        assert_eq!(stats.layers[0].var, var);
    }

    #[test]
    fn no_bn_layers_give_empty_stats() {
        let net = build_mlp(2, &[4], 2, false, None, &mut Rng::new(3)).unwrap();
        let x = features(8, 2, 4);
        let stats = mcbn_sample_stats(&net, &x, 4, &mut Rng::new(5)).unwrap();
        assert!(stats.is_empty());
    }

    #[test]
    fn single_bn_layer_on_raw_inputs_sees_sampled_batch_stats() {
        let net = Network::new(vec![Layer::BatchNorm(BatchNormState::new(2))]).unwrap();
        let x = features(10, 2, 6);
        let mut outer = Rng::new(7);
        let stats = mcbn_sample_stats(&net, &x, 4, &mut outer).unwrap();
        // replay the draw to know which rows were picked
        let mut replay = Rng::new(7);
        let mut idx = replay.sample_without_replacement(10, 4);
        idx.sort_unstable();
        let batch = x.gather_rows(&idx).unwrap();
        let mean = batch.col_mean();
        assert_eq!(stats.layers[0].mean, mean);
        assert_eq!(stats.layers[0].var, batch.col_var_biased(&mean));
    }

    #[test]
    fn batch_size_bounds_enforced() {
        let net = Network::new(vec![Layer::BatchNorm(BatchNormState::new(2))]).unwrap();
        let x = features(6, 2, 8);
        assert!(mcbn_sample_stats(&net, &x, 1, &mut Rng::new(0)).is_err());
        assert!(mcbn_sample_stats(&net, &x, 7, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn full_batch_mcbn_passes_are_bit_identical() {
        let net = build_mlp(2, &[6], 3, true, None, &mut Rng::new(10)).unwrap();
        let train = features(16, 2, 11);
        let test = features(5, 2, 12);
        let mut cfg = McbnConfig::new(16, 99);
        cfg.passes = 7;
        let samples = mcbn_predict(&net, &train, &test, &cfg).unwrap();
        for t in 1..samples.pass_count() {
            for (a, b) in samples.pass(t).data().iter().zip(samples.pass(0).data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn single_pass_shape() {
        let net = build_mlp(2, &[4], 3, true, None, &mut Rng::new(13)).unwrap();
        let train = features(12, 2, 14);
        let test = features(4, 2, 15);
        let mut cfg = McbnConfig::new(6, 1);
        cfg.passes = 1;
        let samples = mcbn_predict(&net, &train, &test, &cfg).unwrap();
        assert_eq!(samples.pass_count(), 1);
        assert_eq!(samples.point_count(), 4);
        assert_eq!(samples.class_count(), 3);
    }

    #[test]
    fn default_pass_count_is_twenty() {
        assert_eq!(McbnConfig::new(8, 0).passes, 20);
    }

    #[test]
    fn mcbn_predict_never_mutates_the_network() {
        let net = build_mlp(2, &[5], 2, true, None, &mut Rng::new(16)).unwrap();
        let before = crate::checkpoint::network_to_json(&net);
        let train = features(20, 2, 17);
        let test = features(6, 2, 18);
        mcbn_predict(&net, &train, &test, &McbnConfig::new(5, 3)).unwrap();
        assert_eq!(crate::checkpoint::network_to_json(&net), before);
    }

    #[test]
    fn mc_dropout_requires_dropout_layer() {
        let net = build_mlp(2, &[4], 2, true, None, &mut Rng::new(19)).unwrap();
        let x = features(3, 2, 20);
        let err = mc_dropout_predict(&net, &x, 5, &Rng::new(1)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn mc_dropout_zero_rate_passes_identical() {
        // a dropout layer with p = 0 keeps every entry, so all passes agree
        let with_dropout = build_mlp(2, &[4], 2, true, Some(0.25), &mut Rng::new(21)).unwrap();
        let layers: Vec<Layer> = with_dropout
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Dropout(_) => Layer::Dropout(0.0),
                other => other.clone(),
            })
            .collect();
        let net = Network::new(layers).unwrap();
        let x = features(3, 2, 22);
        let samples = mc_dropout_predict(&net, &x, 4, &Rng::new(2)).unwrap();
        for t in 1..4 {
            assert_eq!(samples.pass(t), samples.pass(0));
        }
    }

    #[test]
    fn mc_dropout_deterministic_given_seed() {
        let net = build_mlp(2, &[6], 3, true, Some(0.25), &mut Rng::new(23)).unwrap();
        let x = features(4, 2, 24);
        let a = mc_dropout_predict(&net, &x, 6, &Rng::new(5)).unwrap();
        let b = mc_dropout_predict(&net, &x, 6, &Rng::new(5)).unwrap();
        for t in 0..6 {
            for (x, y) in a.pass(t).data().iter().zip(b.pass(t).data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn predictive_mean_symmetry() {
        let passes = vec![
            Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap(),
        ];
        let samples = PredictiveSamples::from_passes(passes).unwrap();
        let mean = predictive_mean(&samples);
        assert_eq!(mean.data(), &[0.5, 0.5]);
    }

    #[test]
    fn predictive_mean_of_single_pass_is_the_pass() {
        let pass = Matrix::from_rows(&[vec![0.25, 0.75]]).unwrap();
        let samples = PredictiveSamples::from_passes(vec![pass.clone()]).unwrap();
        assert_eq!(predictive_mean(&samples), pass);
    }

    #[test]
    fn predictive_mean_rows_stay_on_simplex() {
        let mut rng = Rng::new(77);
        for _ in 0..200 {
            let passes: Vec<Matrix> = (0..5)
                .map(|_| {
                    let mut m = Matrix::zeros(3, 4);
                    for i in 0..3 {
                        let mut row: Vec<f64> = (0..4).map(|_| rng.uniform() + 1e-9).collect();
                        let sum: f64 = row.iter().sum();
                        for v in &mut row {
                            *v /= sum;
                        }
                        m.row_mut(i).copy_from_slice(&row);
                    }
                    m
                })
                .collect();
            let mean = predictive_mean(&PredictiveSamples::from_passes(passes).unwrap());
            for i in 0..mean.rows() {
                let s: f64 = mean.row(i).iter().sum();
                assert!((s - 1.0).abs() <= 1e-9, "mean row sums to {s}");
            }
        }
    }

    #[test]
    fn deterministic_predict_repeatable_and_on_simplex() {
        let net = build_mlp(2, &[5], 3, true, None, &mut Rng::new(25)).unwrap();
        let x = features(7, 2, 26);
        let a = deterministic_predict(&net, &x).unwrap();
        let b = deterministic_predict(&net, &x).unwrap();
        assert_eq!(a, b);
        for i in 0..a.rows() {
            let s: f64 = a.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn samples_validation_rejects_off_simplex_rows() {
        let bad = Matrix::from_rows(&[vec![0.6, 0.6]]).unwrap();
        assert!(PredictiveSamples::from_passes(vec![bad]).is_err());
    }
}
