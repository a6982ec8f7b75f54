//! Evaluation metrics for Gaussian-mixture predictive distributions.
//!
//! Models work on standardized targets `y_std = (y - mean) / scale`. All
//! reported metrics are converted back to the original scale: the NLL
//! gains `sum_d ln scale_d`, RMSE and CRPS are multiplied by `scale_d`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::autodiff::logsumexp;
use crate::error::{Error, Result};
use crate::models::{predict, Model, PredictiveMixture};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Nats per test point and output dimension.
    pub nll: f64,
    pub rmse: f64,
    /// Mean of the per-dimension RMSEs.
    pub mrmse: f64,
    pub crps: f64,
    pub n_test: usize,
}

fn ln_normal(y: f64, m: f64, v: f64) -> f64 {
    -0.5 * (2.0 * PI * v).ln() - 0.5 * (y - m).powi(2) / v
}

/// Joint log density of `y` (one value per output dimension).
pub fn log_density(mix: &PredictiveMixture, y: &[f64]) -> f64 {
    assert_eq!(y.len(), mix.output_dim(), "target dimension mismatch");
    logsumexp((0..mix.num_components()).map(|k| {
        mix.weights[k].ln() + y.iter().enumerate().map(|(d, &yd)| ln_normal(yd, mix.means[(k, d)], mix.variances[(k, d)])).sum::<f64>()
    }))
}

/// Negative log density on the original scale, where `y` is standardized
/// and `y_scale` holds the per-dimension standardization scales.
pub fn nll(mix: &PredictiveMixture, y: &[f64], y_scale: &[f64]) -> f64 {
    -log_density(mix, y) + y_scale.iter().map(|s| s.ln()).sum::<f64>()
}

/// Mixture mean per output dimension.
pub fn point_prediction(mix: &PredictiveMixture) -> DVector<f64> {
    mix.means.tr_mul(&mix.weights)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// `E|X|` for `X ~ N(mu, v)`.
fn abs_moment(mu: f64, v: f64) -> f64 {
    if v <= 0.0 {
        return mu.abs();
    }
    let s = v.sqrt();
    let z = mu / s;
    mu * (2.0 * std_normal_cdf(z) - 1.0) + 2.0 * s * std_normal_pdf(z)
}

/// Closed-form CRPS of output dimension `d` of a mixture at `y`.
pub fn crps_mixture_dim(mix: &PredictiveMixture, d: usize, y: f64) -> f64 {
    let k = mix.num_components();
    let w = &mix.weights;
    let mu = mix.means.column(d);
    let v = mix.variances.column(d);
    let mut first = 0.0;
    let mut second = 0.0;
    for s in 0..k {
        first += w[s] * abs_moment(y - mu[s], v[s]);
        second += w[s] * w[s] * abs_moment(0.0, 2.0 * v[s]);
        for t in (s + 1)..k {
            second += 2.0 * w[s] * w[t] * abs_moment(mu[s] - mu[t], v[s] + v[t]);
        }
    }
    (first - 0.5 * second).max(0.0)
}

/// CRPS of a univariate mixture.
pub fn crps_mixture(mix: &PredictiveMixture, y: f64) -> f64 {
    crps_mixture_dim(mix, 0, y)
}

/// Aggregates metrics over predictions for standardized targets `y`.
pub fn evaluate_predictions(mixtures: &[PredictiveMixture], y: &DMatrix<f64>, y_scale: &[f64]) -> Result<EvalReport> {
    let n = mixtures.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let dy = y.ncols();
    if y.nrows() != n || y_scale.len() != dy {
        return Err(Error::DimensionMismatch {
            context: "evaluation targets",
            expected: n,
            got: y.nrows(),
        });
    }
    let mut nll_sum = 0.0;
    let mut crps_sum = 0.0;
    let mut sq = vec![0.0; dy];
    for (i, mix) in mixtures.iter().enumerate() {
        let yi: Vec<f64> = y.row(i).iter().copied().collect();
        nll_sum += nll(mix, &yi, y_scale);
        let pred = point_prediction(mix);
        for d in 0..dy {
            sq[d] += (y_scale[d] * (pred[d] - yi[d])).powi(2);
            crps_sum += y_scale[d] * crps_mixture_dim(mix, d, yi[d]);
        }
    }
    let nf = n as f64;
    let per_dim: Vec<f64> = sq.iter().map(|s| (s / nf).sqrt()).collect();
    let report = EvalReport {
        nll: nll_sum / (nf * dy as f64),
        rmse: (sq.iter().sum::<f64>() / (nf * dy as f64)).sqrt(),
        mrmse: per_dim.iter().sum::<f64>() / dy as f64,
        crps: crps_sum / (nf * dy as f64),
        n_test: n,
    };
    if ![report.nll, report.rmse, report.mrmse, report.crps].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteObjective);
    }
    Ok(report)
}

/// Predicts with `model` (sampled families draw `mc_samples_eval` samples
/// from `rng`) and aggregates metrics.
pub fn evaluate(model: &Model, x: &DMatrix<f64>, y: &DMatrix<f64>, y_scale: &[f64], rng: &mut impl Rng) -> Result<EvalReport> {
    if x.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let mix = predict(model, x, rng)?;
    evaluate_predictions(&mix, y, y_scale)
}

/// Mean joint log predictive density on standardized targets.
pub fn mean_log_density(model: &Model, x: &DMatrix<f64>, y: &DMatrix<f64>, rng: &mut impl Rng) -> Result<f64> {
    if x.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let mix = predict(model, x, rng)?;
    let total: f64 = mix
        .iter()
        .enumerate()
        .map(|(i, m)| log_density(m, y.row(i).iter().copied().collect::<Vec<_>>().as_slice()))
        .sum();
    Ok(total / x.nrows() as f64)
}
