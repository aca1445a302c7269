//! Command-line entry points.
//!
//! Exit codes: 0 on success, 1 for config/runtime failures (including a
//! missing `--config`), 2 for unknown flags or subcommands.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::save_network;
use crate::elbo::{minibatch_estimator_table, GaussianMeanField, IsotropicPrior, LinearGaussianModel};
use crate::error::{Error, Result};
use crate::experiments::{
    grid_search_batch_size_saving, run_asymptotics_study_saving, run_batch_size_sweep_saving,
    run_mc_dropout_control_saving, seed_averaged, AsymptoticsConfig, SweepConfig, SweepOutput,
};
use crate::matrix::Matrix;
use crate::network::build_mlp;
use crate::report;
use crate::rng::{derive_seed, Rng};
use crate::train::train;
use crate::uncertainty::clamped_nonnegative;

#[derive(Debug, Parser)]
#[command(
    name = "mcbn",
    version,
    about = "Monte Carlo batch-normalisation / MC dropout uncertainty experiments",
    long_about = None
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON experiment config
    #[arg(long)]
    config: Option<PathBuf>,
    /// Results CSV path
    #[arg(long)]
    out: Option<PathBuf>,
    /// SVG plot path
    #[arg(long)]
    svg: Option<PathBuf>,
    /// Override the config's master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores); results do not depend on this
    #[arg(long)]
    threads: Option<usize>,
    /// Directory for per-cell model checkpoints
    #[arg(long)]
    save_models: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model (first batch size and seed of the config) and write
    /// its checkpoint
    Train {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Batch-size sweep with MCBN uncertainty
    Sweep {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Batch-size sweep with MC-dropout uncertainty
    DropoutControl {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Pick the batch size maximising held-out predictive log-likelihood
    Gridsearch {
        #[command(flatten)]
        args: RunArgs,
    },
    /// MCBN uncertainty across dataset sizes under fixed/scaled batch
    /// policies
    Asymptotics {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Mini-batch ELBO estimator diagnostics on a linear-Gaussian model
    ElboCheck {
        /// Seed for the generated model and estimator batches
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Results CSV path
        #[arg(long)]
        out: Option<PathBuf>,
        /// Monte Carlo batches per batch size
        #[arg(long, default_value_t = 200)]
        trials: usize,
    },
}

pub fn cli_main(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { args } => with_threads(args.threads, || cmd_train(&args)),
        Command::Sweep { args } => with_threads(args.threads, || cmd_sweep(&args)),
        Command::DropoutControl { args } => {
            with_threads(args.threads, || cmd_dropout_control(&args))
        }
        Command::Gridsearch { args } => with_threads(args.threads, || cmd_gridsearch(&args)),
        Command::Asymptotics { args } => with_threads(args.threads, || cmd_asymptotics(&args)),
        Command::ElboCheck { seed, out, trials } => cmd_elbo_check(seed, out.as_deref(), trials),
    }
}

fn with_threads(threads: Option<usize>, f: impl FnOnce() -> Result<()> + Send) -> Result<()> {
    match threads {
        None => f(),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k.max(1))
                .build()
                .map_err(|e| Error::Config(format!("cannot build a {k}-thread pool: {e}")))?;
            pool.install(f)
        }
    }
}

fn require_config<'a>(args: &'a RunArgs, subcommand: &str) -> Result<&'a Path> {
    args.config
        .as_deref()
        .ok_or_else(|| Error::Config(format!("--config <path> is required for `{subcommand}`")))
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    // serde_json errors carry line/column context in their message
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn load_sweep_config(args: &RunArgs, subcommand: &str) -> Result<SweepConfig> {
    let path = require_config(args, subcommand)?;
    let mut cfg: SweepConfig = load_json(path)?;
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    Ok(cfg)
}

fn report_skips(output: &SweepOutput) {
    for skip in &output.skipped {
        eprintln!(
            "warning: skipped (batch_size={}, seed={}): {}",
            skip.batch_size, skip.seed, skip.reason
        );
    }
}

fn write_outputs(output: &SweepOutput, args: &RunArgs, default_out: &str) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(default_out));
    report::emit_csv(&output.records, &out)?;
    println!("wrote {}", out.display());
    if let Some(svg) = &args.svg {
        report::emit_svg_plot(&output.records, svg)?;
        println!("wrote {}", svg.display());
    }
    Ok(())
}

fn print_summary(output: &SweepOutput) {
    println!(
        "{:>10}  {:>9}  {:>12}  {:>12}  {:>12}",
        "batch_size", "accuracy", "mi_in", "mi_ood", "val_loglik"
    );
    let acc = seed_averaged(&output.records, |r| r.test_accuracy);
    let mi_in = seed_averaged(&output.records, |r| r.mean_mi_in);
    let mi_ood = seed_averaged(&output.records, |r| r.mean_mi_ood);
    let ll = seed_averaged(&output.records, |r| r.val_loglik);
    for (((&(b, a), &(_, mi)), &(_, mo)), &(_, l)) in
        acc.iter().zip(&mi_in).zip(&mi_ood).zip(&ll)
    {
        println!(
            "{b:>10}  {a:>9.4}  {:>12.6}  {:>12.6}  {l:>12.4}",
            clamped_nonnegative(mi),
            clamped_nonnegative(mo)
        );
    }
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let cfg = load_sweep_config(args, "train")?;
    cfg.validate()?;
    let data = cfg.train.build_labeled()?;
    let batch_size = cfg.batch_sizes[0];
    let seed = cfg.seeds[0];
    // identical stream derivation to the sweep, so this checkpoint matches
    // the sweep's cell (batch_sizes[0], seeds[0])
    let cell_seed = derive_seed(derive_seed(cfg.master_seed, batch_size as u64), seed);
    let mut init_rng = Rng::new(cell_seed).split(1);
    let net0 = build_mlp(
        data.features.cols(),
        &cfg.architecture.hidden,
        data.class_count,
        cfg.architecture.batch_norm,
        cfg.architecture.dropout_p,
        &mut init_rng,
    )?;
    let train_cfg = cfg.train_template.to_config(batch_size, derive_seed(cell_seed, 2));
    let (trained, history) = train(&net0, &data, &train_cfg)?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("model.json"));
    save_network(&trained, &out)?;
    if let (Some(&loss), Some(&acc)) = (history.loss.last(), history.accuracy.last()) {
        println!("final epoch: loss {loss:.6}, accuracy {acc:.4}");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_sweep(args: &RunArgs) -> Result<()> {
    let cfg = load_sweep_config(args, "sweep")?;
    let output = run_batch_size_sweep_saving(&cfg, args.save_models.as_deref())?;
    report_skips(&output);
    print_summary(&output);
    write_outputs(&output, args, "sweep.csv")
}

fn cmd_dropout_control(args: &RunArgs) -> Result<()> {
    let cfg = load_sweep_config(args, "dropout-control")?;
    let output = run_mc_dropout_control_saving(&cfg, args.save_models.as_deref())?;
    report_skips(&output);
    print_summary(&output);
    write_outputs(&output, args, "dropout_control.csv")
}

fn cmd_gridsearch(args: &RunArgs) -> Result<()> {
    let cfg = load_sweep_config(args, "gridsearch")?;
    let (best, output) = grid_search_batch_size_saving(&cfg, args.save_models.as_deref())?;
    report_skips(&output);
    print_summary(&output);
    println!("best batch size by held-out predictive log-likelihood: {best}");
    write_outputs(&output, args, "gridsearch.csv")
}

fn cmd_asymptotics(args: &RunArgs) -> Result<()> {
    let path = require_config(args, "asymptotics")?;
    let mut cfg: AsymptoticsConfig = load_json(path)?;
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    let records = run_asymptotics_study_saving(&cfg, args.save_models.as_deref())?;
    println!(
        "{:>12}  {:>10}  {:>10}  {:>6}  {:>12}",
        "dataset_size", "policy", "batch_size", "seed", "mi_ood"
    );
    for r in &records {
        println!(
            "{:>12}  {:>10}  {:>10}  {:>6}  {:>12.6}",
            r.dataset_size,
            r.policy,
            r.batch_size,
            r.seed,
            clamped_nonnegative(r.mean_mi_ood)
        );
    }
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("asymptotics.csv"));
    report::emit_asymptotics_csv(&records, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_elbo_check(seed: u64, out: Option<&Path>, trials: usize) -> Result<()> {
    let (q, prior, model) = elbo_check_problem(seed);
    let n = model.len();
    let batch_sizes: Vec<usize> = [1usize, 2, 4, n].into_iter().filter(|&b| b <= n).collect();
    let rows = minibatch_estimator_table(&q, &prior, &model, &batch_sizes, trials, &Rng::new(
        derive_seed(seed, 100),
    ))?;
    print!("{}", report::elbo_check_table(&rows));
    if let Some(path) = out {
        report::emit_elbo_check_csv(&rows, path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// A fixed-size random linear-Gaussian problem for estimator diagnostics.
pub fn elbo_check_problem(seed: u64) -> (GaussianMeanField, IsotropicPrior, LinearGaussianModel) {
    let mut rng = Rng::new(derive_seed(seed, 1));
    let (n, d) = (8, 3);
    let mut design = Matrix::zeros(n, d);
    for v in design.data_mut() {
        *v = rng.normal();
    }
    let true_theta: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let noise = 0.5;
    let targets: Vec<f64> = (0..n)
        .map(|i| {
            let mean: f64 =
                design.row(i).iter().zip(&true_theta).map(|(&x, &t)| x * t).sum();
            mean + noise * rng.normal()
        })
        .collect();
    let model = LinearGaussianModel::new(design, targets, noise).expect("valid model");
    let q = GaussianMeanField::new(
        (0..d).map(|_| 0.3 * rng.normal()).collect(),
        (0..d).map(|_| -0.5 + 0.3 * rng.normal()).collect(),
    )
    .expect("valid mean field");
    let prior = IsotropicPrior::new(1.0).expect("valid prior");
    (q, prior, model)
}
