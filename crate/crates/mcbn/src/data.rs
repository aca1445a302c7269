//! Synthetic dataset generators and CSV ingestion.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;
use crate::train::Dataset;

/// Where a dataset comes from: generated clusters, a generated OOD annulus,
/// or a CSV file with columns `f1..fd,label`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Clusters {
        class_count: usize,
        n_per_class: usize,
        radius: f64,
        std: f64,
        seed: u64,
    },
    OodRing {
        n: usize,
        inner_radius: f64,
        outer_radius: f64,
        seed: u64,
    },
    CsvFile {
        path: String,
    },
}

impl DatasetSpec {
    /// Realises a labeled dataset. The OOD ring carries no labels and is
    /// rejected here; use [`DatasetSpec::build_features`] for it.
    pub fn build_labeled(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Clusters { class_count, n_per_class, radius, std, seed } => {
                gen_clusters(*class_count, *n_per_class, *radius, *std, *seed)
            }
            DatasetSpec::OodRing { .. } => Err(Error::Contract(
                "the OOD ring has no labels; it can only be used as a feature set".into(),
            )),
            DatasetSpec::CsvFile { path } => load_csv_dataset(path),
        }
    }

    /// Realises the feature matrix only.
    pub fn build_features(&self) -> Result<Matrix> {
        match self {
            DatasetSpec::OodRing { n, inner_radius, outer_radius, seed } => {
                gen_ood_ring(*n, *inner_radius, *outer_radius, *seed)
            }
            _ => Ok(self.build_labeled()?.features),
        }
    }
}

/// 2-D Gaussian clusters with class means equally spaced on a circle.
/// Points are laid out class-major, `n_per_class` each, deterministic per
/// seed.
pub fn gen_clusters(
    class_count: usize,
    n_per_class: usize,
    radius: f64,
    std: f64,
    seed: u64,
) -> Result<Dataset> {
    if class_count < 2 {
        return Err(Error::Contract(format!(
            "cluster generation needs at least 2 classes, got {class_count}"
        )));
    }
    if n_per_class == 0 {
        return Err(Error::Contract("n_per_class must be >= 1".into()));
    }
    let mut rng = Rng::new(seed);
    let n = class_count * n_per_class;
    let mut features = Matrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    for c in 0..class_count {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / class_count as f64;
        let (cx, cy) = (radius * angle.cos(), radius * angle.sin());
        for i in 0..n_per_class {
            let row = c * n_per_class + i;
            features[(row, 0)] = cx + std * rng.normal();
            features[(row, 1)] = cy + std * rng.normal();
            labels.push(c);
        }
    }
    Dataset::new(features, labels, class_count)
}

/// Points uniform over the annulus `inner_radius <= |x| <= outer_radius`
/// (uniform in area, so radii are drawn with density proportional to r).
pub fn gen_ood_ring(n: usize, inner_radius: f64, outer_radius: f64, seed: u64) -> Result<Matrix> {
    if !(0.0 < inner_radius && inner_radius < outer_radius) {
        return Err(Error::Contract(format!(
            "ring radii must satisfy 0 < inner < outer, got ({inner_radius}, {outer_radius})"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut features = Matrix::zeros(n, 2);
    let (r0sq, r1sq) = (inner_radius * inner_radius, outer_radius * outer_radius);
    for i in 0..n {
        let r = (r0sq + rng.uniform() * (r1sq - r0sq)).sqrt();
        let angle = 2.0 * std::f64::consts::PI * rng.uniform();
        features[(i, 0)] = r * angle.cos();
        features[(i, 1)] = r * angle.sin();
    }
    Ok(features)
}

/// Loads `f1..fd,label` rows. The header is required; labels are 0-based
/// class indices.
pub fn load_csv_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        .clone();
    if headers.len() < 2 || headers.iter().next_back() != Some("label") {
        return Err(Error::Config(format!(
            "{}: expected header f1..fd,label, got {:?}",
            path.display(),
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let d = headers.len() - 1;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if record.len() != d + 1 {
            return Err(Error::Config(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                line + 2,
                record.len(),
                d + 1
            )));
        }
        let mut row = Vec::with_capacity(d);
        for j in 0..d {
            row.push(record[j].trim().parse::<f64>().map_err(|e| {
                Error::Config(format!(
                    "{}: row {} field {}: {e}",
                    path.display(),
                    line + 2,
                    j + 1
                ))
            })?);
        }
        labels.push(record[d].trim().parse::<usize>().map_err(|e| {
            Error::Config(format!("{}: row {} label: {e}", path.display(), line + 2))
        })?);
        rows.push(row);
    }
    let class_count = labels.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(Matrix::from_rows(&rows)?, labels, class_count.max(2))
}
