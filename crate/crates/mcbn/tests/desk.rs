//! Pinned-seed desk-scale behavior: training sanity, MCBN dispersion
//! ordering, the batch-statistic bias study, and the ELBO bound and
//! gradient properties that need the test-side oracles.

mod common;

use common::{central_diff_grad, max_rel_err, neg_log_evidence, random_matrix, FD_STEP};
use mcbn::data::gen_clusters;
use mcbn::elbo::{
    bn_minibatch_bias_study, bn_population_stats, elbo_full, elbo_gradients,
    expected_loglik_closed, expected_loglik_mc_stats, GaussianMeanField, IsotropicPrior,
    LinearGaussianModel,
};
use mcbn::experiments::{run_mc_dropout_control, SweepConfig};
use mcbn::inference::{
    deterministic_predict, mc_dropout_predict, mcbn_predict, predictive_mean, McbnConfig,
    PredictiveSamples,
};
use mcbn::matrix::Matrix;
use mcbn::network::build_mlp;
use mcbn::rng::Rng;
use mcbn::train::{train, TrainConfig};

fn desk_train_config(batch_size: usize, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size,
        epochs,
        lr_initial: 0.1,
        lr_drop_epochs: vec![epochs / 2, 3 * epochs / 4],
        lr_drop_factor: 10.0,
        momentum: 0.9,
        weight_decay: 0.0,
        seed,
    }
}

#[test]
fn training_reaches_95_percent_on_separated_clusters() {
    let data = gen_clusters(3, 100, 4.0, 1.0, 501).unwrap();
    let net = build_mlp(2, &[16], 3, true, None, &mut Rng::new(502)).unwrap();
    let (_, history) = train(&net, &data, &desk_train_config(30, 200, 503)).unwrap();
    let final_acc = *history.accuracy.last().unwrap();
    assert!(final_acc >= 0.95, "final training accuracy {final_acc}");
    assert_eq!(history.loss.len(), 200);
}

/// Across-pass variance of MCBN outputs, averaged over points and classes.
fn mean_pass_variance(samples: &PredictiveSamples) -> f64 {
    let t = samples.pass_count() as f64;
    let mean = predictive_mean(samples);
    let mut total = 0.0;
    for pass in samples.passes() {
        for (p, m) in pass.data().iter().zip(mean.data()) {
            total += (p - m) * (p - m);
        }
    }
    total / (t * mean.data().len() as f64)
}

#[test]
fn mcbn_dispersion_nonincreasing_in_batch_size() {
    let data = gen_clusters(3, 128, 4.0, 1.0, 521).unwrap();
    let test = gen_clusters(3, 32, 4.0, 1.0, 522).unwrap();
    let n = data.len();
    let mut averaged = [0.0_f64; 3];
    let seeds = [1u64, 2, 3, 4];
    for &seed in &seeds {
        let net = build_mlp(2, &[16], 3, true, None, &mut Rng::new(523 + seed)).unwrap();
        let (trained, _) = train(&net, &data, &desk_train_config(64, 40, 524 + seed)).unwrap();
        for (slot, &b) in [8usize, 64, n].iter().enumerate() {
            let mut cfg = McbnConfig::new(b, 525 + seed);
            cfg.passes = 20;
            let samples = mcbn_predict(&trained, &data.features, &test.features, &cfg).unwrap();
            averaged[slot] += mean_pass_variance(&samples) / seeds.len() as f64;
        }
    }
    assert!(
        averaged[0] >= averaged[1] && averaged[1] >= averaged[2],
        "dispersion not nonincreasing over b in {{8, 64, {n}}}: {averaged:?}"
    );
    assert!(averaged[2] <= 1e-12, "full-batch dispersion {} not ~0", averaged[2]);
}

#[test]
fn mc_dropout_varies_across_passes_on_trained_net() {
    let data = gen_clusters(3, 100, 4.0, 1.0, 531).unwrap();
    let test = gen_clusters(3, 20, 4.0, 1.0, 532).unwrap();
    let net = build_mlp(2, &[16], 3, true, Some(0.25), &mut Rng::new(533)).unwrap();
    let (trained, _) = train(&net, &data, &desk_train_config(30, 60, 534)).unwrap();
    let samples = mc_dropout_predict(&trained, &test.features, 20, &Rng::new(535)).unwrap();
    assert!(
        mean_pass_variance(&samples) > 0.0,
        "dropout passes produced no across-pass variance"
    );
}

#[test]
fn deterministic_predict_matches_mcbn_mean_under_population_stats() {
    let data = gen_clusters(3, 100, 4.0, 1.0, 541).unwrap();
    let test = gen_clusters(3, 25, 4.0, 1.0, 542).unwrap();
    let net = build_mlp(2, &[16], 3, true, None, &mut Rng::new(543)).unwrap();
    let (mut trained, _) = train(&net, &data, &desk_train_config(50, 60, 544)).unwrap();

    // force the running statistics to the population statistics, the limit
    // long training approaches
    let pop = bn_population_stats(&trained, &data.features).unwrap();
    trained.set_running_stats(&pop).unwrap();

    let det = deterministic_predict(&trained, &test.features).unwrap();
    let mut cfg = McbnConfig::new(data.len(), 545);
    cfg.passes = 5;
    let mcbn_mean =
        predictive_mean(&mcbn_predict(&trained, &data.features, &test.features, &cfg).unwrap());
    let worst = det
        .data()
        .iter()
        .zip(mcbn_mean.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    assert!(worst <= 1e-6, "deterministic vs full-batch MCBN mean differ by {worst}");
}

#[test]
fn bias_study_shrinks_with_batch_size_on_trained_net() {
    let data = gen_clusters(3, 128, 4.0, 1.0, 551).unwrap();
    let net = build_mlp(2, &[16], 3, true, None, &mut Rng::new(552)).unwrap();
    let (trained, _) = train(&net, &data, &desk_train_config(64, 40, 553)).unwrap();
    let estimates =
        bn_minibatch_bias_study(&trained, &data, &[4, 64], 64, &Rng::new(554)).unwrap();
    let small = &estimates[0];
    let large = &estimates[1];
    // the large-batch bias must not exceed the small-batch bias, with two
    // standard errors of slack
    assert!(
        large.bias.abs() <= small.bias.abs() + 2.0 * (small.std_error + large.std_error),
        "bias at b=64 ({} +- {}) vs b=4 ({} +- {})",
        large.bias,
        large.std_error,
        small.bias,
        small.std_error
    );
}

#[test]
fn dropout_control_mi_strictly_positive_at_quarter_rate() {
    // a quarter dropout rate on the desk defaults; one seed keeps it fast
    let text = std::fs::read_to_string(format!(
        "{}/../../configs/desk_dropout.json",
        env!("CARGO_MANIFEST_DIR")
    ))
    .unwrap();
    let mut cfg: SweepConfig = serde_json::from_str(&text).unwrap();
    cfg.architecture.dropout_p = Some(0.25);
    cfg.train_template.lr_initial = 0.1;
    cfg.seeds = vec![1];
    let output = run_mc_dropout_control(&cfg).unwrap();
    assert_eq!(output.records.len(), cfg.batch_sizes.len());
    for r in &output.records {
        assert!(r.mean_mi_in > 0.0, "MI_in not positive at b={}", r.batch_size);
        assert!(r.mean_mi_ood > 0.0, "MI_ood not positive at b={}", r.batch_size);
    }
}

#[test]
fn mc_dropout_is_decoupled_from_mcbn_batch_size() {
    // the dropout sampler takes no batch size; interleaving MCBN calls with
    // different batch sizes must not perturb it
    let data = gen_clusters(2, 30, 3.0, 0.8, 601).unwrap();
    let test = gen_clusters(2, 10, 3.0, 0.8, 602).unwrap();
    let net = build_mlp(2, &[8], 2, true, Some(0.25), &mut Rng::new(603)).unwrap();
    let baseline = mc_dropout_predict(&net, &test.features, 6, &Rng::new(604)).unwrap();
    for b in [2usize, 16, 60] {
        let mut cfg = McbnConfig::new(b, 605);
        cfg.passes = 3;
        mcbn_predict(&net, &data.features, &test.features, &cfg).unwrap();
        let again = mc_dropout_predict(&net, &test.features, 6, &Rng::new(604)).unwrap();
        for t in 0..6 {
            for (x, y) in again.pass(t).data().iter().zip(baseline.pass(t).data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}

#[test]
fn desk_config_ood_ring_clears_the_cluster_support() {
    let text = std::fs::read_to_string(format!(
        "{}/../../configs/desk.json",
        env!("CARGO_MANIFEST_DIR")
    ))
    .unwrap();
    let cfg: SweepConfig = serde_json::from_str(&text).unwrap();
    let (radius, std) = match cfg.train {
        mcbn::data::DatasetSpec::Clusters { radius, std, .. } => (radius, std),
        other => panic!("desk training data should be clusters, got {other:?}"),
    };
    match cfg.test_ood {
        mcbn::data::DatasetSpec::OodRing { inner_radius, .. } => {
            assert!(
                inner_radius > radius + 6.0 * std,
                "ring inner radius {inner_radius} inside the 6-sigma cluster support"
            );
        }
        other => panic!("desk OOD data should be a ring, got {other:?}"),
    }
}

#[test]
fn mc_loglik_concentrates_with_sample_count() {
    let mut rng = Rng::new(561);
    let design = random_matrix(6, 3, &mut rng);
    let targets: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
    let model = LinearGaussianModel::new(design, targets, 0.8).unwrap();
    let q = GaussianMeanField::new(vec![0.1, -0.5, 0.4], vec![-0.4, -0.1, -0.7]).unwrap();
    let closed = expected_loglik_closed(&q, &model).unwrap();

    let (mc_small, se_small) =
        expected_loglik_mc_stats(&q, &model, 1_000, &mut Rng::new(562)).unwrap();
    let (mc_large, se_large) =
        expected_loglik_mc_stats(&q, &model, 100_000, &mut Rng::new(563)).unwrap();
    assert!((closed - mc_small).abs() <= 3.0 * se_small);
    assert!((closed - mc_large).abs() <= 3.0 * se_large);
    assert!(se_large < se_small, "standard error did not shrink: {se_small} -> {se_large}");
}

#[test]
fn elbo_upper_bounds_negative_log_evidence() {
    let mut rng = Rng::new(571);
    for trial in 0..25 {
        let design = random_matrix(6, 2, &mut rng);
        let targets: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let model = LinearGaussianModel::new(design, targets, 0.9).unwrap();
        let prior = IsotropicPrior::new(1.1).unwrap();
        let q = GaussianMeanField::new(
            vec![rng.normal(), rng.normal()],
            vec![0.5 * rng.normal() - 0.4, 0.5 * rng.normal() - 0.4],
        )
        .unwrap();
        let bound = elbo_full(&q, &prior, &model).unwrap();
        let nle = neg_log_evidence(&model, &prior);
        assert!(
            bound >= nle - 1e-9,
            "trial {trial}: negative ELBO {bound} fell below -log evidence {nle}"
        );
    }
}

#[test]
fn elbo_gradients_match_finite_differences() {
    let mut rng = Rng::new(581);
    let design = random_matrix(5, 3, &mut rng);
    let targets: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
    let model = LinearGaussianModel::new(design, targets, 0.7).unwrap();
    let prior = IsotropicPrior::new(1.3).unwrap();
    let q = GaussianMeanField::new(
        vec![0.3, -0.2, 0.8],
        vec![-0.1, -0.6, 0.2],
    )
    .unwrap();
    let (g_mu, g_ls) = elbo_gradients(&q, &prior, &model).unwrap();

    let mut f_mu = |v: &[f64]| {
        let qq = GaussianMeanField::new(v.to_vec(), q.log_sigma.clone()).unwrap();
        elbo_full(&qq, &prior, &model).unwrap()
    };
    let n_mu = central_diff_grad(&mut f_mu, &q.mu, FD_STEP);
    assert!(max_rel_err(&g_mu, &n_mu, 1e-3) < 1e-6);

    let mut f_ls = |v: &[f64]| {
        let qq = GaussianMeanField::new(q.mu.clone(), v.to_vec()).unwrap();
        elbo_full(&qq, &prior, &model).unwrap()
    };
    let n_ls = central_diff_grad(&mut f_ls, &q.log_sigma, FD_STEP);
    assert!(max_rel_err(&g_ls, &n_ls, 1e-3) < 1e-6);
}

#[test]
fn samples_csv_export_has_full_grid() {
    let data = gen_clusters(2, 20, 3.0, 0.8, 591).unwrap();
    let net = build_mlp(2, &[6], 2, true, None, &mut Rng::new(592)).unwrap();
    let mut cfg = McbnConfig::new(10, 593);
    cfg.passes = 3;
    let test = Matrix::from_rows(&[vec![0.0, 0.0], vec![5.0, 5.0]]).unwrap();
    let samples = mcbn_predict(&net, &data.features, &test, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("samples.csv");
    samples.export_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,point_index,class_index,prob");
    // T * n * K rows
    assert_eq!(text.lines().count(), 1 + 3 * 2 * 2);
    let last = text.lines().last().unwrap();
    assert!(last.starts_with("2,1,1,"));
}
