//! Dataset ingestion, 15:3:2 splits, standardization and synthetic
//! generators.
//!
//! CSV coordinates in errors are 1-based: line 1 is the header row and
//! column 1 is the first field.

use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::Batch;

/// Columns whose sample standard deviation falls below this are dropped.
pub const MIN_COLUMN_STD: f64 = 1e-10;

/// Train, test and validation parts of every split.
pub const SPLIT_RATIOS: [usize; 3] = [15, 3, 2];

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub feature_names: Vec<String>,
    pub target_names: Vec<String>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>, feature_names: Vec<String>, target_names: Vec<String>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::DimensionMismatch {
                context: "dataset rows",
                expected: x.nrows(),
                got: y.nrows(),
            });
        }
        if x.ncols() != feature_names.len() || y.ncols() != target_names.len() {
            return Err(Error::DimensionMismatch {
                context: "dataset column names",
                expected: x.ncols() + y.ncols(),
                got: feature_names.len() + target_names.len(),
            });
        }
        if x.nrows() == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            x,
            y,
            feature_names,
            target_names,
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.y.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(rows),
            y: self.y.select_rows(rows),
            feature_names: self.feature_names.clone(),
            target_names: self.target_names.clone(),
        }
    }

    pub fn batch(&self) -> Result<Batch> {
        Batch::new(self.x.clone(), self.y.clone())
    }

    /// Writes the dataset as CSV with features first, then targets.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv_to(file)
    }

    pub fn write_csv_to<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<&str> = self.feature_names.iter().chain(&self.target_names).map(String::as_str).collect();
        w.write_record(&header).map_err(csv_io)?;
        for i in 0..self.len() {
            let row: Vec<String> = self.x.row(i).iter().chain(self.y.row(i).iter()).map(|v| v.to_string()).collect();
            w.write_record(&row).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn sample_std(col: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = col.clone().count();
    if n < 2 {
        return 0.0;
    }
    let mean = col.clone().sum::<f64>() / n as f64;
    (col.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

fn keep_varying(m: &DMatrix<f64>) -> Vec<usize> {
    (0..m.ncols()).filter(|&j| sample_std(m.column(j).iter().copied()) >= MIN_COLUMN_STD).collect()
}

/// Parses CSV text with a header row. Every column not named in
/// `target_columns` is a feature. Near-constant columns are dropped.
pub fn parse_csv<R: Read>(reader: R, target_columns: &[&str]) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let parse_err = |e: csv::Error| {
        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
        Error::Parse {
            line,
            column: 0,
            message: e.to_string(),
        }
    };
    let header: Vec<String> = rdr.headers().map_err(parse_err)?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::EmptyDataset);
    }
    let mut target_idx = Vec::with_capacity(target_columns.len());
    for &t in target_columns {
        let j = header.iter().position(|h| h == t).ok_or_else(|| Error::UnknownColumn(t.to_string()))?;
        if target_idx.contains(&j) {
            return Err(Error::InvalidConfig(format!("target column `{t}` listed twice")));
        }
        target_idx.push(j);
    }
    if target_idx.is_empty() {
        return Err(Error::InvalidConfig("at least one target column is required".into()));
    }
    let feature_idx: Vec<usize> = (0..header.len()).filter(|j| !target_idx.contains(j)).collect();

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(parse_err)?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(rows.len() + 2);
        let mut row = Vec::with_capacity(header.len());
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                column: j + 1,
                message: format!("`{}` is not a number", cell.trim()),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteValue { line, column: j + 1 });
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, feature_idx.len(), |i, j| rows[i][feature_idx[j]]);
    let y = DMatrix::from_fn(n, target_idx.len(), |i, j| rows[i][target_idx[j]]);
    let names = |idx: &[usize]| idx.iter().map(|&j| header[j].clone()).collect::<Vec<_>>();
    let ds = Dataset {
        x,
        y,
        feature_names: names(&feature_idx),
        target_names: names(&target_idx),
    };
    drop_constant_columns(ds, &keep_all(n))
}

fn keep_all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Drops features and targets that are constant on `rows`. Fails when no
/// target survives.
fn drop_constant_columns(ds: Dataset, rows: &[usize]) -> Result<Dataset> {
    let fit = ds.select(rows);
    let kx = keep_varying(&fit.x);
    let ky = keep_varying(&fit.y);
    if ky.is_empty() {
        return Err(Error::InvalidConfig("every target column is constant".into()));
    }
    Ok(Dataset {
        x: ds.x.select_columns(&kx),
        y: ds.y.select_columns(&ky),
        feature_names: kx.iter().map(|&j| ds.feature_names[j].clone()).collect(),
        target_names: ky.iter().map(|&j| ds.target_names[j].clone()).collect(),
    })
}

pub fn ingest_csv(path: &Path, target_columns: &[&str]) -> Result<Dataset> {
    parse_csv(std::fs::File::open(path)?, target_columns)
}

/// Per-column affine maps `(v - mean) / scale` fitted on the training part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_scale: Vec<f64>,
}

fn column_stats(m: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = m.nrows() as f64;
    let mean: Vec<f64> = m.column_iter().map(|c| c.sum() / n).collect();
    let scale = m
        .column_iter()
        .zip(&mean)
        .map(|(c, mu)| {
            let s = (c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
            if s >= MIN_COLUMN_STD { s } else { 1.0 }
        })
        .collect();
    (mean, scale)
}

impl Standardizer {
    /// Population mean and standard deviation of every column.
    pub fn fit(ds: &Dataset) -> Self {
        let (x_mean, x_scale) = column_stats(&ds.x);
        let (y_mean, y_scale) = column_stats(&ds.y);
        Self {
            x_mean,
            x_scale,
            y_mean,
            y_scale,
        }
    }

    fn apply_cols(m: &DMatrix<f64>, mean: &[f64], scale: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| (m[(i, j)] - mean[j]) / scale[j])
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.input_dim() != self.x_mean.len() || ds.output_dim() != self.y_mean.len() {
            return Err(Error::DimensionMismatch {
                context: "standardizer columns",
                expected: self.x_mean.len() + self.y_mean.len(),
                got: ds.input_dim() + ds.output_dim(),
            });
        }
        Ok(Dataset {
            x: Self::apply_cols(&ds.x, &self.x_mean, &self.x_scale),
            y: Self::apply_cols(&ds.y, &self.y_mean, &self.y_scale),
            feature_names: ds.feature_names.clone(),
            target_names: ds.target_names.clone(),
        })
    }

    /// Maps standardized targets back to the original scale.
    pub fn unstandardize_y(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| y[(i, j)] * self.y_scale[j] + self.y_mean[j])
    }
}

/// Row indices of one seeded partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub val: Vec<usize>,
}

/// Shuffles `0..n` with stream `split` of `seed` and cuts it 15:3:2.
/// Train and test take the floor of their share; validation gets the rest.
pub fn split_indices(n: usize, seed: u64, split: u64) -> Result<SplitIndices> {
    let total: usize = SPLIT_RATIOS.iter().sum();
    let n_train = n * SPLIT_RATIOS[0] / total;
    let n_test = n * SPLIT_RATIOS[1] / total;
    if n_train == 0 || n_test == 0 {
        return Err(Error::TooFewPoints {
            requested: total,
            available: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Ok(SplitIndices {
        train: order[..n_train].to_vec(),
        test: order[n_train..n_train + n_test].to_vec(),
        val: order[n_train + n_test..].to_vec(),
    })
}

/// Standardized train, test and validation parts of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub val: Dataset,
    pub standardizer: Standardizer,
    pub indices: SplitIndices,
}

/// Seeded 15:3:2 split. Columns constant on the training rows are
/// dropped and the standardizer is fitted on the training rows only.
pub fn split(ds: &Dataset, seed: u64, split: u64) -> Result<Splits> {
    let indices = split_indices(ds.len(), seed, split)?;
    let ds = drop_constant_columns(ds.clone(), &indices.train)?;
    let standardizer = Standardizer::fit(&ds.select(&indices.train));
    Ok(Splits {
        train: standardizer.apply(&ds.select(&indices.train))?,
        test: standardizer.apply(&ds.select(&indices.test))?,
        val: standardizer.apply(&ds.select(&indices.val))?,
        standardizer,
        indices,
    })
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|j| format!("{prefix}{j}")).collect()
}

/// Built-in synthetic datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Synthetic {
    /// 1-D `sin` with input-dependent noise.
    Sin,
    /// Two Gaussian blobs in the plane; the target is the blob label.
    TwoBlob,
    /// `y = x B + e` with `d = 4`, `D_Y = 3`.
    LinearGaussian,
}

impl std::str::FromStr for Synthetic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sin" => Ok(Self::Sin),
            "two-blob" => Ok(Self::TwoBlob),
            "linear-gaussian" => Ok(Self::LinearGaussian),
            _ => Err(Error::InvalidConfig(format!("unknown synthetic dataset `{s}`"))),
        }
    }
}

impl Synthetic {
    pub fn generate(self, n: usize, seed: u64) -> Result<Dataset> {
        match self {
            Self::Sin => synth_sin(n, seed),
            Self::TwoBlob => Ok(synth_two_blob(n, seed)?.0),
            Self::LinearGaussian => synth_linear_gaussian(n, 4, 3, seed),
        }
    }
}

/// Noise standard deviation of [`synth_sin`] at `x`.
pub fn sin_noise_std(x: f64) -> f64 {
    0.05 + 0.5 / (1.0 + (-2.0 * x).exp())
}

/// `x ~ U(-4, 4)`, `y = sin(1.5 x) + sigma(x) e` where `sigma` rises from
/// 0.05 on the left to 0.55 on the right.
pub fn synth_sin(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|&xi| {
            let e: f64 = rng.sample(StandardNormal);
            (1.5 * xi).sin() + sin_noise_std(xi) * e
        })
        .collect();
    Dataset::new(
        DMatrix::from_vec(n, 1, x),
        DMatrix::from_vec(n, 1, y),
        names("x", 1),
        names("y", 1),
    )
}

/// Blobs of unit spread centred at `(-5, -5)` and `(5, 5)`, alternating
/// by row. Returns the dataset and the two true centres as rows.
pub fn synth_two_blob(n: usize, seed: u64) -> Result<(Dataset, DMatrix<f64>)> {
    let centres = DMatrix::from_row_slice(2, 2, &[-5.0, -5.0, 5.0, 5.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(n, 2);
    let mut y = DMatrix::zeros(n, 1);
    for i in 0..n {
        let c = i % 2;
        for j in 0..2 {
            let e: f64 = rng.sample(StandardNormal);
            x[(i, j)] = centres[(c, j)] + 0.5 * e;
        }
        y[(i, 0)] = c as f64;
    }
    Ok((Dataset::new(x, y, names("x", 2), names("y", 1))?, centres))
}

/// `x ~ N(0, I_d)`, `y = x B + 0.1 e` with `B ~ N(0, 1)`.
pub fn synth_linear_gaussian(n: usize, d: usize, dy: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let b = DMatrix::from_fn(d, dy, |_, _| normal());
    let x = DMatrix::from_fn(n, d, |_, _| normal());
    let noise = DMatrix::from_fn(n, dy, |_, _| 0.1 * normal());
    let y = &x * b + noise;
    Dataset::new(x, y, names("x", d), names("y", dy))
}
