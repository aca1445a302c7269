//! Deterministic CSV and SVG emission for experiment records.
//!
//! All floating-point fields are written with 17 significant digits so the
//! files are value-exact and byte-identical across runs.

use std::fs;
use std::path::Path;

use crate::elbo::ElboCheckRow;
use crate::error::{Error, Result};
use crate::experiments::{AsymptoticsRecord, SweepRecord};

/// 17-significant-digit scientific notation; round-trips any finite f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub const SWEEP_CSV_HEADER: &str = "batch_size,seed,test_accuracy,mean_mi_in,mean_mi_ood,mean_pred_entropy_in,mean_pred_entropy_ood,val_loglik";

pub fn sweep_csv_string(records: &[SweepRecord]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.batch_size,
            r.seed,
            fmt_f64(r.test_accuracy),
            fmt_f64(r.mean_mi_in),
            fmt_f64(r.mean_mi_ood),
            fmt_f64(r.mean_pred_entropy_in),
            fmt_f64(r.mean_pred_entropy_ood),
            fmt_f64(r.val_loglik),
        ));
    }
    out
}

pub fn emit_csv(records: &[SweepRecord], path: impl AsRef<Path>) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Contract("no records to write".into()));
    }
    let path = path.as_ref();
    fs::write(path, sweep_csv_string(records)).map_err(|e| Error::io(path, e))
}

pub const ASYMPTOTICS_CSV_HEADER: &str = "dataset_size,policy,batch_size,seed,mean_mi_ood";

pub fn asymptotics_csv_string(records: &[AsymptoticsRecord]) -> String {
    let mut out = String::from(ASYMPTOTICS_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.dataset_size,
            r.policy,
            r.batch_size,
            r.seed,
            fmt_f64(r.mean_mi_ood),
        ));
    }
    out
}

pub fn emit_asymptotics_csv(records: &[AsymptoticsRecord], path: impl AsRef<Path>) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Contract("no records to write".into()));
    }
    let path = path.as_ref();
    fs::write(path, asymptotics_csv_string(records)).map_err(|e| Error::io(path, e))
}

pub const ELBO_CHECK_CSV_HEADER: &str =
    "batch_size,estimator_mean,exhaustive_mean,full_elbo,bias,std_error";

pub fn elbo_check_csv_string(rows: &[ElboCheckRow]) -> String {
    let mut out = String::from(ELBO_CHECK_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.batch_size,
            fmt_f64(r.estimator_mean),
            fmt_f64(r.exhaustive_mean),
            fmt_f64(r.full_elbo),
            fmt_f64(r.bias),
            fmt_f64(r.std_error),
        ));
    }
    out
}

pub fn emit_elbo_check_csv(rows: &[ElboCheckRow], path: impl AsRef<Path>) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Contract("no rows to write".into()));
    }
    let path = path.as_ref();
    fs::write(path, elbo_check_csv_string(rows)).map_err(|e| Error::io(path, e))
}

/// Human-readable table for the `elbo-check` subcommand.
pub fn elbo_check_table(rows: &[ElboCheckRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:>5}  {:>14}  {:>14}  {:>14}  {:>12}  {:>12}\n",
        "b", "estimator", "exhaustive", "full_elbo", "bias", "std_err"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:>5}  {:>14.8}  {:>14.8}  {:>14.8}  {:>12.3e}  {:>12.3e}\n",
            r.batch_size, r.estimator_mean, r.exhaustive_mean, r.full_elbo, r.bias, r.std_error
        ));
    }
    out
}

/// Renders seed-averaged mean mutual information against batch size
/// (log-scaled x axis) as one polyline per test set, in a single
/// self-contained SVG document.
pub fn svg_plot_string(records: &[SweepRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Contract("no records to plot".into()));
    }
    // seed-mean per batch size, preserving numeric order
    let mut sizes: Vec<usize> = records.iter().map(|r| r.batch_size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mean_for = |b: usize, f: &dyn Fn(&SweepRecord) -> f64| -> f64 {
        let vals: Vec<f64> = records.iter().filter(|r| r.batch_size == b).map(f).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let in_series: Vec<(usize, f64)> =
        sizes.iter().map(|&b| (b, mean_for(b, &|r| r.mean_mi_in))).collect();
    let ood_series: Vec<(usize, f64)> =
        sizes.iter().map(|&b| (b, mean_for(b, &|r| r.mean_mi_ood))).collect();

    let (width, height) = (640.0, 440.0);
    let (left, right, top, bottom) = (70.0, 20.0, 30.0, 60.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;

    let x_min = (sizes[0] as f64).log10();
    let x_max = (*sizes.last().unwrap() as f64).log10().max(x_min + 1e-9);
    let y_max = in_series
        .iter()
        .chain(&ood_series)
        .map(|&(_, y)| y)
        .fold(0.0_f64, f64::max)
        .max(1e-9)
        * 1.1;

    let x_px = |b: usize| left + ((b as f64).log10() - x_min) / (x_max - x_min) * plot_w;
    let y_px = |y: f64| top + plot_h - (y.max(0.0) / y_max) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str("<rect x=\"0\" y=\"0\" width=\"640\" height=\"440\" fill=\"white\"/>\n");
    // axes
    svg.push_str(&format!(
        "<line x1=\"{left:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        top + plot_h,
        left + plot_w,
        top + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{left:.2}\" y1=\"{top:.2}\" x2=\"{left:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        top + plot_h
    ));
    // x ticks at each batch size
    for &b in &sizes {
        let x = x_px(b);
        svg.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            top + plot_h,
            top + plot_h + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{b}</text>\n",
            top + plot_h + 20.0
        ));
    }
    // y ticks
    for k in 0..=4 {
        let y_val = y_max * k as f64 / 4.0;
        let y = y_px(y_val);
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{left:.2}\" y2=\"{y:.2}\" stroke=\"black\"/>\n",
            left - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{y_val:.4}</text>\n",
            left - 9.0,
            y + 4.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">mini-batch size (log scale)</text>\n",
        left + plot_w / 2.0,
        height - 15.0
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.2})\">mean mutual information (nats)</text>\n",
        top + plot_h / 2.0,
        top + plot_h / 2.0
    ));

    for (series, color, label, ly) in [
        (&in_series, "#1f77b4", "in-distribution", top + 14.0),
        (&ood_series, "#d62728", "out-of-distribution", top + 32.0),
    ] {
        let points: Vec<String> =
            series.iter().map(|&(b, y)| format!("{:.2},{:.2}", x_px(b), y_px(y))).collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            points.join(" ")
        ));
        for &(b, y) in series.iter() {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                x_px(b),
                y_px(y)
            ));
        }
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            left + plot_w - 150.0,
            ly - 4.0,
            left + plot_w - 125.0,
            ly - 4.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{ly:.2}\">{label}</text>\n",
            left + plot_w - 118.0
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn emit_svg_plot(records: &[SweepRecord], path: impl AsRef<Path>) -> Result<()> {
    let svg = svg_plot_string(records)?;
    let path = path.as_ref();
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}
