//! Batch-size sweep harness: trains one model per (batch size, seed) cell,
//! evaluates MCBN or MC-dropout uncertainty on in-distribution and
//! out-of-distribution sets, and aggregates records for CSV/SVG reporting.
//!
//! Cells are independent; they may run concurrently (the ambient rayon pool)
//! and every cell derives its own random stream from
//! `(master_seed, batch_size, seed)`, so results do not depend on thread
//! count or execution order.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::inference::{
    deterministic_predict, mc_dropout_predict, mcbn_predict, predictive_mean, McbnConfig,
    PredictiveSamples,
};
use crate::matrix::Matrix;
use crate::network::build_mlp;
use crate::rng::{derive_seed, Rng};
use crate::train::{train, Dataset, TrainConfig};
use crate::uncertainty::{mean_of, uncertainty_report};

/// Hidden widths plus the normalisation/regularisation switches. A missing
/// `dropout_p` means no dropout layers at all; `0.0` inserts dropout layers
/// with rate zero (the degenerate MC-dropout control).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
    #[serde(default)]
    pub dropout_p: Option<f64>,
}

/// Training hyperparameters shared by every sweep cell; the cell supplies
/// its own batch size and seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainTemplate {
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl TrainTemplate {
    pub fn to_config(&self, batch_size: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size,
            epochs: self.epochs,
            lr_initial: self.lr_initial,
            lr_drop_epochs: self.lr_drop_epochs.clone(),
            lr_drop_factor: self.lr_drop_factor,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed,
        }
    }
}

/// Full sweep description; mirrors the JSON config file field-for-field.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub master_seed: u64,
    pub train: DatasetSpec,
    pub test_in: DatasetSpec,
    pub test_ood: DatasetSpec,
    pub architecture: Architecture,
    pub batch_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Stochastic forward passes per evaluation.
    pub passes: usize,
    pub train_template: TrainTemplate,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_sizes.is_empty() {
            return Err(Error::Contract("batch_sizes must be nonempty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Contract("seeds must be nonempty".into()));
        }
        if self.passes == 0 {
            return Err(Error::Contract("passes must be >= 1".into()));
        }
        Ok(())
    }
}

/// One (batch size, seed) cell of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub batch_size: usize,
    pub seed: u64,
    pub test_accuracy: f64,
    pub mean_mi_in: f64,
    pub mean_mi_ood: f64,
    pub mean_pred_entropy_in: f64,
    pub mean_pred_entropy_ood: f64,
    /// Mean held-out log-likelihood of the predictive mean.
    pub val_loglik: f64,
}

/// A cell that could not run (batch size above the training-set size).
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedCell {
    pub batch_size: usize,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutput {
    /// Sorted by (batch_size, seed).
    pub records: Vec<SweepRecord>,
    pub skipped: Vec<SkippedCell>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UncertaintyMethod {
    Mcbn,
    McDropout,
}

struct CellInputs<'a> {
    train_data: &'a Dataset,
    test_in: &'a Dataset,
    test_ood: &'a Matrix,
    architecture: &'a Architecture,
    template: &'a TrainTemplate,
    passes: usize,
    master_seed: u64,
    method: UncertaintyMethod,
    save_models: Option<&'a Path>,
}

fn predictive_summaries(samples: &PredictiveSamples) -> (f64, f64) {
    let report = uncertainty_report(samples);
    (mean_of(&report.mutual_information), mean_of(&report.predictive_entropy))
}

fn mean_label_loglik(pred_mean: &Matrix, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        total += pred_mean[(i, y)].max(1e-300).ln();
    }
    total / labels.len() as f64
}

fn run_cell(inp: &CellInputs, batch_size: usize, seed: u64) -> Result<SweepRecord> {
    let cell_seed = derive_seed(derive_seed(inp.master_seed, batch_size as u64), seed);
    let mut init_rng = Rng::new(cell_seed).split(1);
    let net0 = build_mlp(
        inp.train_data.features.cols(),
        &inp.architecture.hidden,
        inp.train_data.class_count,
        inp.architecture.batch_norm,
        inp.architecture.dropout_p,
        &mut init_rng,
    )?;
    let config = inp.template.to_config(batch_size, derive_seed(cell_seed, 2));
    let (trained, _) = train(&net0, inp.train_data, &config)?;
    if let Some(dir) = inp.save_models {
        let path = dir.join(format!("model_b{batch_size}_seed{seed}.json"));
        crate::checkpoint::save_network(&trained, path)?;
    }

    let preds = deterministic_predict(&trained, &inp.test_in.features)?;
    let correct = preds
        .argmax_rows()
        .iter()
        .zip(&inp.test_in.labels)
        .filter(|(p, y)| p == y)
        .count();
    let test_accuracy = correct as f64 / inp.test_in.labels.len() as f64;

    let (samples_in, samples_ood) = match inp.method {
        UncertaintyMethod::Mcbn => {
            let mut cfg_in = McbnConfig::new(batch_size, derive_seed(cell_seed, 3));
            cfg_in.passes = inp.passes;
            let mut cfg_ood = McbnConfig::new(batch_size, derive_seed(cell_seed, 4));
            cfg_ood.passes = inp.passes;
            (
                mcbn_predict(&trained, &inp.train_data.features, &inp.test_in.features, &cfg_in)?,
                mcbn_predict(&trained, &inp.train_data.features, inp.test_ood, &cfg_ood)?,
            )
        }
        UncertaintyMethod::McDropout => (
            mc_dropout_predict(
                &trained,
                &inp.test_in.features,
                inp.passes,
                &Rng::new(derive_seed(cell_seed, 5)),
            )?,
            mc_dropout_predict(
                &trained,
                inp.test_ood,
                inp.passes,
                &Rng::new(derive_seed(cell_seed, 6)),
            )?,
        ),
    };

    let (mean_mi_in, mean_pred_entropy_in) = predictive_summaries(&samples_in);
    let (mean_mi_ood, mean_pred_entropy_ood) = predictive_summaries(&samples_ood);
    let val_loglik = mean_label_loglik(&predictive_mean(&samples_in), &inp.test_in.labels);

    Ok(SweepRecord {
        batch_size,
        seed,
        test_accuracy,
        mean_mi_in,
        mean_mi_ood,
        mean_pred_entropy_in,
        mean_pred_entropy_ood,
        val_loglik,
    })
}

fn run_sweep_cells(
    cfg: &SweepConfig,
    method: UncertaintyMethod,
    save_models: Option<&Path>,
) -> Result<SweepOutput> {
    cfg.validate()?;
    if let Some(dir) = save_models {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let train_data = cfg.train.build_labeled()?;
    let test_in = cfg.test_in.build_labeled()?;
    let test_ood = cfg.test_ood.build_features()?;
    if test_in.class_count != train_data.class_count {
        return Err(Error::Contract(format!(
            "train has {} classes but test_in has {}",
            train_data.class_count, test_in.class_count
        )));
    }
    if test_in.features.cols() != train_data.features.cols()
        || test_ood.cols() != train_data.features.cols()
    {
        return Err(Error::Shape(format!(
            "feature dimensions disagree: train {}, test_in {}, test_ood {}",
            train_data.features.cols(),
            test_in.features.cols(),
            test_ood.cols()
        )));
    }

    let mut cells: Vec<(usize, u64)> = Vec::new();
    for &b in &cfg.batch_sizes {
        for &s in &cfg.seeds {
            cells.push((b, s));
        }
    }
    cells.sort_unstable();

    let inputs = CellInputs {
        train_data: &train_data,
        test_in: &test_in,
        test_ood: &test_ood,
        architecture: &cfg.architecture,
        template: &cfg.train_template,
        passes: cfg.passes,
        master_seed: cfg.master_seed,
        method,
        save_models,
    };

    enum Outcome {
        Record(SweepRecord),
        Skipped(SkippedCell),
    }
    let outcomes: Vec<Result<Outcome>> = cells
        .par_iter()
        .map(|&(b, s)| {
            if b > train_data.len() {
                return Ok(Outcome::Skipped(SkippedCell {
                    batch_size: b,
                    seed: s,
                    reason: format!(
                        "batch size {b} exceeds training-set size {}",
                        train_data.len()
                    ),
                }));
            }
            run_cell(&inputs, b, s).map(Outcome::Record)
        })
        .collect();

    let mut output = SweepOutput::default();
    for outcome in outcomes {
        match outcome? {
            Outcome::Record(r) => output.records.push(r),
            Outcome::Skipped(w) => output.skipped.push(w),
        }
    }
    output.records.sort_by_key(|r| (r.batch_size, r.seed));
    Ok(output)
}

/// The batch-size sweep: per (batch size, seed), train with that batch size
/// and evaluate MCBN with the same batch size. Cells whose batch size
/// exceeds the training set are skipped with a recorded warning.
pub fn run_batch_size_sweep(cfg: &SweepConfig) -> Result<SweepOutput> {
    run_sweep_cells(cfg, UncertaintyMethod::Mcbn, None)
}

/// [`run_batch_size_sweep`] that also writes a checkpoint per trained cell
/// into `save_models`.
pub fn run_batch_size_sweep_saving(
    cfg: &SweepConfig,
    save_models: Option<&Path>,
) -> Result<SweepOutput> {
    run_sweep_cells(cfg, UncertaintyMethod::Mcbn, save_models)
}

/// Same sweep over training batch sizes, but uncertainty comes from MC
/// dropout (running batch-norm statistics, dropout active at test time).
/// The architecture must include dropout layers.
pub fn run_mc_dropout_control(cfg: &SweepConfig) -> Result<SweepOutput> {
    run_mc_dropout_control_saving(cfg, None)
}

/// [`run_mc_dropout_control`] that also writes a checkpoint per trained cell.
pub fn run_mc_dropout_control_saving(
    cfg: &SweepConfig,
    save_models: Option<&Path>,
) -> Result<SweepOutput> {
    if cfg.architecture.dropout_p.is_none() {
        return Err(Error::Contract(
            "the MC-dropout control needs dropout layers: set architecture.dropout_p".into(),
        ));
    }
    run_sweep_cells(cfg, UncertaintyMethod::McDropout, save_models)
}

/// Grid search over candidate batch sizes: each candidate is trained and
/// MCBN-evaluated with its own batch size; the winner maximises the
/// seed-averaged held-out log-likelihood of the MCBN predictive mean (a
/// proxy objective — the sweep defines no ELBO for the MCBN network itself).
/// Ties break toward the smaller batch size.
pub fn grid_search_batch_size(cfg: &SweepConfig) -> Result<(usize, SweepOutput)> {
    grid_search_batch_size_saving(cfg, None)
}

/// [`grid_search_batch_size`] that also writes a checkpoint per trained cell.
pub fn grid_search_batch_size_saving(
    cfg: &SweepConfig,
    save_models: Option<&Path>,
) -> Result<(usize, SweepOutput)> {
    let output = run_batch_size_sweep_saving(cfg, save_models)?;
    let best = best_by_val_loglik(&output.records)
        .ok_or_else(|| Error::Contract("no candidate batch size could be evaluated".into()))?;
    Ok((best, output))
}

/// Argmax of seed-averaged val_loglik; ties break toward the smaller batch
/// size because candidates are visited in ascending order.
fn best_by_val_loglik(records: &[SweepRecord]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (b, mean) in seed_averaged(records, |r| r.val_loglik) {
        let better = match best {
            None => true,
            Some((_, best_val)) => mean > best_val,
        };
        if better {
            best = Some((b, mean));
        }
    }
    best.map(|(b, _)| b)
}

/// Batch-size policy for the dataset-size study.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum BatchPolicy {
    /// Constant batch size regardless of dataset size.
    Fixed { batch_size: usize },
    /// Batch size grows with the data: `n / divisor` (at least 2).
    Scaled { divisor: usize },
}

impl BatchPolicy {
    pub fn batch_size(&self, n: usize) -> usize {
        match self {
            BatchPolicy::Fixed { batch_size } => *batch_size,
            BatchPolicy::Scaled { divisor } => (n / divisor).max(2),
        }
    }

    pub fn label(&self) -> String {
        match self {
            BatchPolicy::Fixed { batch_size } => format!("fixed:{batch_size}"),
            BatchPolicy::Scaled { divisor } => format!("scaled:{divisor}"),
        }
    }
}

/// Dataset-size study description; mirrors its JSON config field-for-field.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsymptoticsConfig {
    pub master_seed: u64,
    pub class_count: usize,
    pub cluster_radius: f64,
    pub cluster_std: f64,
    pub dataset_seed: u64,
    pub test_ood: DatasetSpec,
    pub architecture: Architecture,
    /// Nominal training-set sizes; each realises as
    /// `class_count * floor(N / class_count)` balanced points.
    pub dataset_sizes: Vec<usize>,
    pub policies: Vec<BatchPolicy>,
    pub seeds: Vec<u64>,
    pub passes: usize,
    pub train_template: TrainTemplate,
}

/// One (dataset size, policy, seed) cell of the asymptotics study.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticsRecord {
    /// Realised training-set size.
    pub dataset_size: usize,
    pub policy: String,
    pub batch_size: usize,
    pub seed: u64,
    pub mean_mi_ood: f64,
}

/// Trains and MCBN-evaluates across dataset sizes under each batch-size
/// policy, recording mean out-of-distribution mutual information. Shows that
/// fixed-batch MI stays bounded away from zero as the data grows while
/// scaled-batch MI shrinks.
pub fn run_asymptotics_study(cfg: &AsymptoticsConfig) -> Result<Vec<AsymptoticsRecord>> {
    run_asymptotics_study_saving(cfg, None)
}

/// [`run_asymptotics_study`] that also writes a checkpoint per trained cell.
pub fn run_asymptotics_study_saving(
    cfg: &AsymptoticsConfig,
    save_models: Option<&Path>,
) -> Result<Vec<AsymptoticsRecord>> {
    if cfg.dataset_sizes.is_empty() || cfg.policies.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Contract(
            "dataset_sizes, policies, and seeds must all be nonempty".into(),
        ));
    }
    if cfg.passes == 0 {
        return Err(Error::Contract("passes must be >= 1".into()));
    }
    if let Some(dir) = save_models {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let test_ood = cfg.test_ood.build_features()?;

    let mut cells: Vec<(usize, BatchPolicy, u64)> = Vec::new();
    for &n in &cfg.dataset_sizes {
        for &p in &cfg.policies {
            for &s in &cfg.seeds {
                cells.push((n, p, s));
            }
        }
    }

    let records: Vec<Result<Option<AsymptoticsRecord>>> = cells
        .par_iter()
        .map(|&(nominal_n, policy, seed)| {
            let n_per_class = (nominal_n / cfg.class_count).max(1);
            let train_data = crate::data::gen_clusters(
                cfg.class_count,
                n_per_class,
                cfg.cluster_radius,
                cfg.cluster_std,
                derive_seed(cfg.dataset_seed, nominal_n as u64),
            )?;
            let n = train_data.len();
            let b = policy.batch_size(n);
            if b > n {
                eprintln!(
                    "warning: skipping (n={n}, policy={}, seed={seed}): batch size {b} > {n}",
                    policy.label()
                );
                return Ok(None);
            }
            let cell_seed = derive_seed(
                derive_seed(derive_seed(cfg.master_seed, nominal_n as u64), b as u64),
                seed,
            );
            let mut init_rng = Rng::new(cell_seed).split(1);
            let net0 = build_mlp(
                2,
                &cfg.architecture.hidden,
                cfg.class_count,
                cfg.architecture.batch_norm,
                cfg.architecture.dropout_p,
                &mut init_rng,
            )?;
            let config = cfg.train_template.to_config(b, derive_seed(cell_seed, 2));
            let (trained, _) = train(&net0, &train_data, &config)?;
            if let Some(dir) = save_models {
                let name = format!("model_n{n}_{}_seed{seed}.json", policy.label().replace(':', "_"));
                crate::checkpoint::save_network(&trained, dir.join(name))?;
            }
            let mut mcbn_cfg = McbnConfig::new(b, derive_seed(cell_seed, 4));
            mcbn_cfg.passes = cfg.passes;
            let samples = mcbn_predict(&trained, &train_data.features, &test_ood, &mcbn_cfg)?;
            let (mean_mi_ood, _) = predictive_summaries(&samples);
            Ok(Some(AsymptoticsRecord {
                dataset_size: n,
                policy: policy.label(),
                batch_size: b,
                seed,
                mean_mi_ood,
            }))
        })
        .collect();

    let mut out = Vec::new();
    for r in records {
        if let Some(rec) = r? {
            out.push(rec);
        }
    }
    out.sort_by(|a, b| {
        (a.dataset_size, a.policy.clone(), a.batch_size, a.seed)
            .cmp(&(b.dataset_size, b.policy.clone(), b.batch_size, b.seed))
    });
    Ok(out)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "spearman needs paired samples");
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("comparable values"));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg_rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Seed-averaged value of `f` per batch size, sorted by batch size.
pub fn seed_averaged(
    records: &[SweepRecord],
    f: impl Fn(&SweepRecord) -> f64,
) -> Vec<(usize, f64)> {
    let mut sizes: Vec<usize> = records.iter().map(|r| r.batch_size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    sizes
        .into_iter()
        .map(|b| {
            let vals: Vec<f64> =
                records.iter().filter(|r| r.batch_size == b).map(&f).collect();
            (b, mean_of(&vals))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> SweepConfig {
        SweepConfig {
            master_seed: 7,
            train: DatasetSpec::Clusters {
                class_count: 2,
                n_per_class: 24,
                radius: 3.0,
                std: 0.8,
                seed: 11,
            },
            test_in: DatasetSpec::Clusters {
                class_count: 2,
                n_per_class: 8,
                radius: 3.0,
                std: 0.8,
                seed: 12,
            },
            test_ood: DatasetSpec::OodRing {
                n: 16,
                inner_radius: 9.0,
                outer_radius: 12.0,
                seed: 13,
            },
            architecture: Architecture { hidden: vec![8], batch_norm: true, dropout_p: None },
            batch_sizes: vec![4, 48],
            seeds: vec![1, 2],
            passes: 5,
            train_template: TrainTemplate {
                epochs: 8,
                lr_initial: 0.1,
                lr_drop_epochs: vec![6],
                lr_drop_factor: 10.0,
                momentum: 0.9,
                weight_decay: 0.0,
            },
        }
    }

    #[test]
    fn sweep_records_sorted_and_complete() {
        let out = run_batch_size_sweep(&tiny_config()).unwrap();
        assert_eq!(out.records.len(), 4);
        assert!(out.skipped.is_empty());
        let keys: Vec<(usize, u64)> =
            out.records.iter().map(|r| (r.batch_size, r.seed)).collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn sweep_is_deterministic() {
        let a = run_batch_size_sweep(&tiny_config()).unwrap();
        let b = run_batch_size_sweep(&tiny_config()).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn full_batch_cell_has_zero_mi() {
        let out = run_batch_size_sweep(&tiny_config()).unwrap();
        for r in out.records.iter().filter(|r| r.batch_size == 48) {
            assert!(r.mean_mi_in.abs() <= 1e-9, "mi_in {}", r.mean_mi_in);
            assert!(r.mean_mi_ood.abs() <= 1e-9, "mi_ood {}", r.mean_mi_ood);
        }
    }

    #[test]
    fn oversized_batch_cells_are_skipped_with_warning() {
        let mut cfg = tiny_config();
        cfg.batch_sizes = vec![4, 1000];
        let out = run_batch_size_sweep(&cfg).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.skipped.len(), 2);
        assert!(out.skipped[0].reason.contains("exceeds"));
    }

    #[test]
    fn dropout_control_requires_dropout() {
        let cfg = tiny_config();
        assert!(run_mc_dropout_control(&cfg).is_err());
    }

    #[test]
    fn degenerate_zero_rate_control_has_zero_mi() {
        let mut cfg = tiny_config();
        cfg.architecture.dropout_p = Some(0.0);
        let out = run_mc_dropout_control(&cfg).unwrap();
        assert_eq!(out.records.len(), 4);
        for r in &out.records {
            assert!(
                r.mean_mi_in.abs() <= 1e-12 && r.mean_mi_ood.abs() <= 1e-12,
                "rate-0 dropout produced MI ({}, {}) at b={}",
                r.mean_mi_in,
                r.mean_mi_ood,
                r.batch_size
            );
        }
    }

    #[test]
    fn grid_search_tie_breaks_toward_smaller_batch() {
        let record = |b: usize, seed: u64, ll: f64| SweepRecord {
            batch_size: b,
            seed,
            test_accuracy: 1.0,
            mean_mi_in: 0.0,
            mean_mi_ood: 0.0,
            mean_pred_entropy_in: 0.0,
            mean_pred_entropy_ood: 0.0,
            val_loglik: ll,
        };
        // identical seed-averaged metric at 16 and 4: smaller wins
        let records = vec![
            record(16, 1, -0.2),
            record(16, 2, -0.4),
            record(4, 1, -0.1),
            record(4, 2, -0.5),
            record(32, 1, -0.9),
            record(32, 2, -0.9),
        ];
        assert_eq!(best_by_val_loglik(&records), Some(4));
        assert_eq!(best_by_val_loglik(&[]), None);
        // single candidate comes straight back
        assert_eq!(best_by_val_loglik(&[record(8, 1, -3.0)]), Some(8));
    }

    #[test]
    fn grid_search_picks_argmax_with_smallest_tiebreak() {
        let (best, out) = grid_search_batch_size(&tiny_config()).unwrap();
        let by_b = seed_averaged(&out.records, |r| r.val_loglik);
        let max_val = by_b.iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
        let expected = by_b.iter().find(|&&(_, v)| v == max_val).unwrap().0;
        assert_eq!(best, expected);
    }

    #[test]
    fn grid_search_single_candidate_returned() {
        let mut cfg = tiny_config();
        cfg.batch_sizes = vec![8];
        let (best, _) = grid_search_batch_size(&cfg).unwrap();
        assert_eq!(best, 8);
    }

    #[test]
    fn spearman_monotone_sequences() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_batch_policy_collapses_mi_everywhere() {
        let cfg = AsymptoticsConfig {
            master_seed: 3,
            class_count: 2,
            cluster_radius: 3.0,
            cluster_std: 0.8,
            dataset_seed: 21,
            test_ood: DatasetSpec::OodRing {
                n: 12,
                inner_radius: 9.0,
                outer_radius: 12.0,
                seed: 22,
            },
            architecture: Architecture { hidden: vec![8], batch_norm: true, dropout_p: None },
            dataset_sizes: vec![16, 32],
            policies: vec![BatchPolicy::Scaled { divisor: 1 }],
            seeds: vec![1],
            passes: 4,
            train_template: TrainTemplate {
                epochs: 4,
                lr_initial: 0.1,
                lr_drop_epochs: vec![],
                lr_drop_factor: 10.0,
                momentum: 0.9,
                weight_decay: 0.0,
            },
        };
        let records = run_asymptotics_study(&cfg).unwrap();
        assert_eq!(records.len(), 2);
        for r in records {
            assert_eq!(r.batch_size, r.dataset_size);
            assert!(r.mean_mi_ood.abs() <= 1e-9, "mi {}", r.mean_mi_ood);
        }
    }
}
