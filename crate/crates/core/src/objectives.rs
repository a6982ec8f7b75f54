//! Training objectives, all maximized.
//!
//! Every objective has the form `total = (N / B) * data_term - beta * kl_term`
//! where `kl_term` sums the KL divergence of every GP in the model. Two data
//! terms are available:
//!
//! * ELBO: `sum_i E_q[log N(y_i | f_i, sigma_obs^2)]`, which for a Gaussian
//!   `q(f_i) = N(mu, s^2)` is `log N(y_i | mu, sigma_obs^2) - s^2 / (2 sigma_obs^2)`.
//!   Sampled hidden layers average this over their pathways.
//! * Predictive: `sum_i log sum_p w_p N(y_i | mu_p, s_p^2 + sigma_obs^2)`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Bound, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{assemble_blocks, robust_cholesky, KernelParams};
use crate::models::{forward_tape, Model, Sites};

/// Rows of inputs and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

impl Batch {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::DimensionMismatch {
                context: "batch rows",
                expected: x.nrows(),
                got: y.nrows(),
            });
        }
        if x.nrows() == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Batch {
        Batch {
            x: self.x.select_rows(rows),
            y: self.y.select_rows(rows),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ObjectiveValue {
    pub total: f64,
    pub data_term: f64,
    pub kl_term: f64,
    pub n_scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataTerm {
    Elbo,
    Predictive,
}

/// Fully specified objective: data term, sites and scaling.
#[derive(Clone, Debug)]
pub struct ObjectiveSpec {
    pub data: DataTerm,
    pub sites: Sites,
    pub n_total: usize,
    pub beta: f64,
}

/// Family-level options; sampled families draw their noise from `seed`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveOptions {
    pub n_total: usize,
    pub beta: f64,
    pub seed: u64,
    /// Overrides `mc_samples_train` for sampled families.
    pub mc_samples: Option<usize>,
}

impl ObjectiveOptions {
    pub fn new(n_total: usize, beta: f64, seed: u64) -> Self {
        Self {
            n_total,
            beta,
            seed,
            mc_samples: None,
        }
    }
}

impl ObjectiveSpec {
    /// The training objective of `model`'s family for a batch of `rows`.
    pub fn for_model(model: &Model, rows: usize, opts: &ObjectiveOptions) -> Self {
        let family = model.config.family;
        let data = if family.predictive_objective() {
            DataTerm::Predictive
        } else {
            DataTerm::Elbo
        };
        let sites = if family.sampled() && !model.hidden.is_empty() {
            let n = opts.mc_samples.unwrap_or(model.config.mc_samples_train);
            Sites::sampled(model, n, rows, &mut ChaCha8Rng::seed_from_u64(opts.seed))
        } else {
            Sites::Rules
        };
        Self {
            data,
            sites,
            n_total: opts.n_total,
            beta: opts.beta,
        }
    }
}

pub(crate) struct ObjectiveVars<'t> {
    pub total: Var<'t>,
    pub data: Var<'t>,
    pub kl: Var<'t>,
    pub n_scale: f64,
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub(crate) fn objective_tape<'t>(
    model: &Model,
    tape: &'t Tape,
    bound: &Bound<'t>,
    batch: &Batch,
    spec: &ObjectiveSpec,
) -> Result<ObjectiveVars<'t>> {
    if batch.y.ncols() != model.config.output_dim {
        return Err(Error::DimensionMismatch {
            context: "batch targets",
            expected: model.config.output_dim,
            got: batch.y.ncols(),
        });
    }
    let fw = forward_tape(model, tape, bound, &batch.x, &spec.sites)?;
    let (b, p) = fw.means[0].shape();
    let mut per_path: Option<Var<'t>> = None;
    for d in 0..fw.means.len() {
        let y = tape.constant(DMatrix::from_fn(b, p, |i, _| batch.y[(i, d)]));
        let r2 = (y - fw.means[d]).square();
        let obs = fw.obs_var[d].broadcast(b, p);
        let term = match spec.data {
            DataTerm::Predictive => {
                let v = fw.fvars[d] + obs;
                (v.ln().scale(0.5) + r2.div(v).scale(0.5)).add_scalar(HALF_LN_2PI).scale(-1.0)
            }
            DataTerm::Elbo => (obs.ln().scale(0.5) + (r2 + fw.fvars[d]).div(obs).scale(0.5))
                .add_scalar(HALF_LN_2PI)
                .scale(-1.0),
        };
        per_path = Some(per_path.map_or(term, |acc| acc + term));
    }
    let ll = per_path.expect("output dimension is positive");
    let data = match spec.data {
        DataTerm::Predictive => (ll + fw.log_w.t().broadcast(b, p)).logsumexp_rows().sum(),
        DataTerm::Elbo => ll.col_sums().matmul(fw.log_w.exp()),
    };
    let n_scale = spec.n_total as f64 / b as f64;
    let total = data.scale(n_scale) - fw.kl.scale(spec.beta);
    Ok(ObjectiveVars {
        total,
        data,
        kl: fw.kl,
        n_scale,
    })
}

/// Evaluates a fully specified objective.
pub fn evaluate_spec(model: &Model, batch: &Batch, spec: &ObjectiveSpec) -> Result<ObjectiveValue> {
    let tape = Tape::new();
    let blocks = model.blocks();
    let bound = Bound::new(&tape, &blocks, false);
    let v = objective_tape(model, &tape, &bound, batch, spec)?;
    let out = ObjectiveValue {
        total: v.total.item(),
        data_term: v.data.item(),
        kl_term: v.kl.item(),
        n_scale: v.n_scale,
    };
    if !out.total.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    Ok(out)
}

/// Training objective of `model`'s family.
pub fn objective(model: &Model, batch: &Batch, opts: &ObjectiveOptions) -> Result<ObjectiveValue> {
    evaluate_spec(model, batch, &ObjectiveSpec::for_model(model, batch.len(), opts))
}

fn require_single_layer(model: &Model) -> Result<()> {
    if model.hidden.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidConfig("objective needs a single-layer model".into()))
    }
}

/// Sparse variational ELBO (`beta = 1`).
pub fn elbo_svgp(model: &Model, batch: &Batch, n_total: usize) -> Result<ObjectiveValue> {
    require_single_layer(model)?;
    evaluate_spec(
        model,
        batch,
        &ObjectiveSpec {
            data: DataTerm::Elbo,
            sites: Sites::Rules,
            n_total,
            beta: 1.0,
        },
    )
}

/// Regularized predictive log-likelihood of a single-layer model.
pub fn objective_ppgpr(model: &Model, batch: &Batch, n_total: usize, beta: f64) -> Result<ObjectiveValue> {
    require_single_layer(model)?;
    evaluate_spec(
        model,
        batch,
        &ObjectiveSpec {
            data: DataTerm::Predictive,
            sites: Sites::Rules,
            n_total,
            beta,
        },
    )
}

/// Doubly stochastic ELBO with `n_samples` reparameterized hidden draws.
pub fn elbo_dsvi(model: &Model, batch: &Batch, n_total: usize, beta: f64, n_samples: usize, rng: &mut impl Rng) -> Result<ObjectiveValue> {
    evaluate_spec(
        model,
        batch,
        &ObjectiveSpec {
            data: DataTerm::Elbo,
            sites: Sites::sampled(model, n_samples, batch.len(), rng),
            n_total,
            beta,
        },
    )
}

/// Regularized log-likelihood of the quadrature mixture.
pub fn objective_dspp(model: &Model, batch: &Batch, n_total: usize, beta: f64) -> Result<ObjectiveValue> {
    if model.hidden.iter().any(|l| l.rule.is_none()) {
        return Err(Error::InvalidConfig("objective_dspp needs a quadrature rule on every hidden layer".into()));
    }
    evaluate_spec(
        model,
        batch,
        &ObjectiveSpec {
            data: DataTerm::Predictive,
            sites: Sites::Rules,
            n_total,
            beta,
        },
    )
}

/// Predictive objective with Monte Carlo sites in place of quadrature.
pub fn objective_bpdgp(model: &Model, batch: &Batch, n_total: usize, beta: f64, n_samples: usize, rng: &mut impl Rng) -> Result<ObjectiveValue> {
    evaluate_spec(
        model,
        batch,
        &ObjectiveSpec {
            data: DataTerm::Predictive,
            sites: Sites::sampled(model, n_samples, batch.len(), rng),
            n_total,
            beta,
        },
    )
}

/// `log N(y | m, K_NN + sigma_obs^2 I)` of an exact GP with constant mean.
pub fn exact_log_marginal_likelihood(kernel: &KernelParams, mean: f64, sigma_obs: f64, x: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            context: "exact marginal likelihood targets",
            expected: n,
            got: y.len(),
        });
    }
    let k = assemble_blocks(kernel, x, x)?.k_mm + DMatrix::identity(n, n) * sigma_obs.powi(2);
    let l = robust_cholesky(&k)?.factor;
    let r = DMatrix::from_fn(n, 1, |i, _| y[i] - mean);
    let a = l.solve_lower_triangular(&r).expect("nonsingular factor");
    let logdet: f64 = l.diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    Ok(-0.5 * a.norm_squared() - 0.5 * logdet - n as f64 * 0.5 * (2.0 * PI).ln())
}
