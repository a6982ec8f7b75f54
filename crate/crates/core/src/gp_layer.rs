//! One sparse variational GP: inducing locations `Z`, variational
//! distribution `q(u) = N(m, S)` and a parametric mean function.
//!
//! The parameterization is unwhitened: with `k_i = k(x_i, Z)`
//!
//! ```text
//! mu(x_i)    = mean(x_i) + k_i^T K_MM^{-1} m
//! sigma²(x_i) = k(x_i, x_i) - k_i^T K_MM^{-1} k_i + k_i^T K_MM^{-1} S K_MM^{-1} k_i
//! ```
//!
//! All evaluation goes through the tape in [`crate::autodiff`], so the same
//! code serves prediction and gradient computation.

use nalgebra::{DMatrix, DVector};

use crate::autodiff::{BlockMap, Bound, ParamBlock, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{KernelParams, Smoothness};

/// Lower bound applied to every marginal variance.
pub const MIN_VARIANCE: f64 = 1e-10;

/// Initial diagonal of `S` for the mean-field parameterization.
pub const INIT_DIAG_VARIANCE: f64 = 1e-2;
/// Initial diagonal of the Cholesky factor of `S` for the full parameterization.
pub const INIT_CHOL_DIAG: f64 = 1e-1;

#[derive(Clone, Debug, PartialEq)]
pub enum MeanFunction {
    Constant(f64),
    Linear { weights: DVector<f64>, bias: f64 },
}

impl MeanFunction {
    /// Number of inputs the mean function reads (0 for a constant).
    pub fn input_dim(&self) -> usize {
        match self {
            MeanFunction::Constant(_) => 0,
            MeanFunction::Linear { weights, .. } => weights.len(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            MeanFunction::Constant(c) => *c,
            MeanFunction::Linear { weights, bias } => bias + weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovKind {
    Diag,
    Full,
}

/// Variational covariance `S`.
#[derive(Clone, Debug, PartialEq)]
pub enum VariationalCov {
    /// Log of the diagonal entries.
    Diag(DVector<f64>),
    /// Cholesky factor of `S`: strict lower part stored as-is, diagonal
    /// stored as logs. Entries above the diagonal are ignored.
    Full(DMatrix<f64>),
}

impl VariationalCov {
    pub fn init(kind: CovKind, m: usize) -> Self {
        match kind {
            CovKind::Diag => VariationalCov::Diag(DVector::from_element(m, INIT_DIAG_VARIANCE.ln())),
            CovKind::Full => VariationalCov::Full(DMatrix::from_diagonal_element(m, m, INIT_CHOL_DIAG.ln())),
        }
    }

    pub fn kind(&self) -> CovKind {
        match self {
            VariationalCov::Diag(_) => CovKind::Diag,
            VariationalCov::Full(_) => CovKind::Full,
        }
    }

    /// Dense `S`.
    pub fn dense(&self) -> DMatrix<f64> {
        match self {
            VariationalCov::Diag(logs) => DMatrix::from_diagonal(&logs.map(f64::exp)),
            VariationalCov::Full(raw) => {
                let l = chol_from_raw(raw);
                &l * l.transpose()
            }
        }
    }

    /// Sets `S` from a dense SPD matrix. The diagonal form keeps only `diag(S)`.
    pub fn set_dense(&mut self, s: &DMatrix<f64>) -> Result<()> {
        match self {
            VariationalCov::Diag(logs) => {
                if s.diagonal().iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::InvalidConfig("diagonal of S must be positive".into()));
                }
                *logs = s.diagonal().map(f64::ln);
            }
            VariationalCov::Full(raw) => {
                let l = nalgebra::Cholesky::new(s.clone())
                    .ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?
                    .unpack();
                let mut r = l.clone();
                for k in 0..r.nrows() {
                    r[(k, k)] = l[(k, k)].ln();
                }
                *raw = r;
            }
        }
        Ok(())
    }
}

fn chol_from_raw(raw: &DMatrix<f64>) -> DMatrix<f64> {
    let n = raw.nrows();
    DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => raw[(i, j)],
        std::cmp::Ordering::Equal => raw[(i, j)].exp(),
        std::cmp::Ordering::Less => 0.0,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpLayerState {
    /// `M x d` inducing locations.
    pub inducing: DMatrix<f64>,
    /// Variational mean `m`.
    pub var_mean: DVector<f64>,
    pub cov: VariationalCov,
    pub mean_fn: MeanFunction,
    pub kernel: KernelParams,
}

/// Per-point Gaussian marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalGaussian {
    pub mu: DVector<f64>,
    pub var: DVector<f64>,
}

impl GpLayerState {
    /// Fresh state with `m = 0` and the default `S` for `cov`.
    pub fn new(inducing: DMatrix<f64>, kernel: KernelParams, mean_fn: MeanFunction, cov: CovKind) -> Result<Self> {
        let m = inducing.nrows();
        if m == 0 {
            return Err(Error::InvalidConfig("at least one inducing point is required".into()));
        }
        if inducing.ncols() != kernel.dim() {
            return Err(Error::DimensionMismatch {
                context: "inducing locations vs kernel",
                expected: kernel.dim(),
                got: inducing.ncols(),
            });
        }
        Ok(Self {
            inducing,
            var_mean: DVector::zeros(m),
            cov: VariationalCov::init(cov, m),
            mean_fn,
            kernel,
        })
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.kernel.dim()
    }

    pub fn blocks(&self, prefix: &str) -> Vec<ParamBlock> {
        let mut out = vec![
            ParamBlock::dense(format!("{prefix}.inducing"), self.inducing.clone()),
            ParamBlock::dense(format!("{prefix}.var_mean"), col(&self.var_mean)),
        ];
        match &self.cov {
            VariationalCov::Diag(logs) => out.push(ParamBlock::dense(format!("{prefix}.s_log_diag"), col(logs))),
            VariationalCov::Full(raw) => {
                let mut r = raw.clone();
                r.fill_upper_triangle(0.0, 1);
                out.push(ParamBlock::lower(format!("{prefix}.s_chol"), r));
            }
        }
        match &self.mean_fn {
            MeanFunction::Constant(c) => out.push(ParamBlock::dense(format!("{prefix}.mean_const"), DMatrix::from_element(1, 1, *c))),
            MeanFunction::Linear { weights, bias } => {
                out.push(ParamBlock::dense(format!("{prefix}.mean_weights"), col(weights)));
                out.push(ParamBlock::dense(format!("{prefix}.mean_bias"), DMatrix::from_element(1, 1, *bias)));
            }
        }
        out.push(ParamBlock::dense(format!("{prefix}.log_lengthscale"), col(&self.kernel.log_lengthscales)));
        out.push(ParamBlock::dense(
            format!("{prefix}.log_outputscale"),
            DMatrix::from_element(1, 1, self.kernel.log_outputscale),
        ));
        out
    }

    /// Overwrites parameters from `map`; structure (shapes, variants) is kept.
    pub fn load_blocks(&mut self, prefix: &str, map: &mut BlockMap) -> Result<()> {
        let m = self.num_inducing();
        let d = self.input_dim();
        self.inducing = map.take(&format!("{prefix}.inducing"), (m, d))?;
        self.var_mean = map.take(&format!("{prefix}.var_mean"), (m, 1))?.column(0).into_owned();
        match &mut self.cov {
            VariationalCov::Diag(logs) => *logs = map.take(&format!("{prefix}.s_log_diag"), (m, 1))?.column(0).into_owned(),
            VariationalCov::Full(raw) => {
                let mut r = map.take(&format!("{prefix}.s_chol"), (m, m))?;
                r.fill_upper_triangle(0.0, 1);
                *raw = r;
            }
        }
        match &mut self.mean_fn {
            MeanFunction::Constant(c) => *c = map.take_scalar(&format!("{prefix}.mean_const"))?,
            MeanFunction::Linear { weights, bias } => {
                let k = weights.len();
                *weights = map.take(&format!("{prefix}.mean_weights"), (k, 1))?.column(0).into_owned();
                *bias = map.take_scalar(&format!("{prefix}.mean_bias"))?;
            }
        }
        self.kernel.log_lengthscales = map.take(&format!("{prefix}.log_lengthscale"), (d, 1))?.column(0).into_owned();
        self.kernel.log_outputscale = map.take_scalar(&format!("{prefix}.log_outputscale"))?;
        Ok(())
    }

    pub fn bind<'t>(&self, prefix: &str, bound: &Bound<'t>) -> GpVars<'t> {
        let get = |s: &str| bound.get(&format!("{prefix}.{s}"));
        GpVars {
            inducing: get("inducing"),
            var_mean: get("var_mean"),
            cov: match self.cov {
                VariationalCov::Diag(_) => CovVars::Diag(get("s_log_diag")),
                VariationalCov::Full(_) => CovVars::Full(get("s_chol")),
            },
            mean: match self.mean_fn {
                MeanFunction::Constant(_) => MeanVars::Constant(get("mean_const")),
                MeanFunction::Linear { .. } => MeanVars::Linear(get("mean_weights"), get("mean_bias")),
            },
            log_ls: get("log_lengthscale"),
            log_os: get("log_outputscale"),
            smoothness: self.kernel.smoothness,
        }
    }

    fn check_inputs(&self, xb: &DMatrix<f64>) -> Result<()> {
        if xb.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "predict_marginal inputs",
                expected: self.input_dim(),
                got: xb.ncols(),
            });
        }
        let md = self.mean_fn.input_dim();
        if md != 0 && md != xb.ncols() {
            return Err(Error::DimensionMismatch {
                context: "mean function inputs",
                expected: md,
                got: xb.ncols(),
            });
        }
        Ok(())
    }

    fn with_vars<R>(&self, f: impl for<'t> FnOnce(&'t Tape, GpVars<'t>) -> Result<R>) -> Result<R> {
        let tape = Tape::new();
        let bound = Bound::new(&tape, &self.blocks("gp"), false);
        let vars = self.bind("gp", &bound);
        f(&tape, vars)
    }
}

fn col(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

/// Predictive marginals `N(mu_i, var_i)` at the rows of `xb`; the mean
/// function is evaluated on the same rows.
pub fn predict_marginal(state: &GpLayerState, xb: &DMatrix<f64>) -> Result<MarginalGaussian> {
    state.check_inputs(xb)?;
    state.with_vars(|tape, gp| {
        let prior = gp.prior()?;
        let x = tape.constant(xb.clone());
        let (mu, var) = gp.marginal(&prior, x, Some(x));
        let mu = mu.value().column(0).into_owned();
        let var = var.value().column(0).into_owned();
        Ok(MarginalGaussian { mu, var })
    })
}

/// `KL(N(m, S) || N(0, K_MM))`, clamped at zero.
pub fn kl_to_prior(state: &GpLayerState) -> Result<f64> {
    state.with_vars(|_, gp| {
        let prior = gp.prior()?;
        Ok(gp.kl(&prior).item())
    })
}

/// `sum_i (k(x_i, x_i) - k_i^T K_MM^{-1} k_i)` over the batch, clamped at zero.
pub fn trace_penalty(state: &GpLayerState, xb: &DMatrix<f64>) -> Result<f64> {
    if xb.ncols() != state.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "trace_penalty inputs",
            expected: state.input_dim(),
            got: xb.ncols(),
        });
    }
    state.with_vars(|tape, gp| {
        let prior = gp.prior()?;
        Ok(gp.trace_term(&prior, tape.constant(xb.clone())).item())
    })
}

pub(crate) enum CovVars<'t> {
    Diag(Var<'t>),
    Full(Var<'t>),
}

pub(crate) enum MeanVars<'t> {
    Constant(Var<'t>),
    Linear(Var<'t>, Var<'t>),
}

/// Tape view of a [`GpLayerState`].
pub struct GpVars<'t> {
    pub(crate) inducing: Var<'t>,
    pub(crate) var_mean: Var<'t>,
    pub(crate) cov: CovVars<'t>,
    pub(crate) mean: MeanVars<'t>,
    pub(crate) log_ls: Var<'t>,
    pub(crate) log_os: Var<'t>,
    pub(crate) smoothness: Smoothness,
}

/// Cholesky factor of `K_MM`, computed once per pass.
pub struct Prior<'t> {
    pub chol: Var<'t>,
}

impl<'t> GpVars<'t> {
    pub fn prior(&self) -> Result<Prior<'t>> {
        let kzz = self.inducing.matern(self.inducing, self.log_ls, self.log_os, self.smoothness);
        Ok(Prior { chol: kzz.cholesky()? })
    }

    /// Mean-function values for `n` rows; `xm` is required for linear means.
    pub fn mean_values(&self, xm: Option<Var<'t>>, n: usize) -> Var<'t> {
        match self.mean {
            MeanVars::Constant(c) => c.broadcast(n, 1),
            MeanVars::Linear(w, b) => {
                let xm = xm.expect("linear mean function needs inputs");
                xm.matmul(w) + b.broadcast(n, 1)
            }
        }
    }

    /// Marginal mean and variance (both `n x 1`) at kernel inputs `xk`.
    pub fn marginal(&self, prior: &Prior<'t>, xk: Var<'t>, xm: Option<Var<'t>>) -> (Var<'t>, Var<'t>) {
        let n = xk.nrows();
        let l = prior.chol;
        let kzx = self.inducing.matern(xk, self.log_ls, self.log_os, self.smoothness);
        let a = l.solve_lower(kzx);
        let mu = a.t().matmul(l.solve_lower(self.var_mean)) + self.mean_values(xm, n);
        let kdiag = self.log_os.exp().broadcast(n, 1);
        let ktilde = kdiag - a.square().col_sums().t();
        let b = l.solve_lower_t(a);
        let s_term = match self.cov {
            CovVars::Diag(logs) => logs.exp().t().matmul(b.square()).t(),
            CovVars::Full(raw) => raw.chol_param().t().matmul(b).square().col_sums().t(),
        };
        (mu, (ktilde + s_term).clamp_min(MIN_VARIANCE))
    }

    pub fn kl(&self, prior: &Prior<'t>) -> Var<'t> {
        let l = prior.chol;
        let tape = l.tape();
        let m = l.nrows();
        let mkm = l.solve_lower(self.var_mean).square().sum();
        let logdet_k = l.diag().ln().sum().scale(2.0);
        let (trace, logdet_s) = match self.cov {
            CovVars::Diag(logs) => {
                let linv = l.solve_lower(tape.constant(DMatrix::identity(m, m)));
                let tr = linv.square().col_sums().matmul(logs.exp());
                (tr, logs.sum())
            }
            CovVars::Full(raw) => {
                let r = l.solve_lower(raw.chol_param());
                (r.square().sum(), raw.diag().sum().scale(2.0))
            }
        };
        (trace + mkm + logdet_k - logdet_s).add_scalar(-(m as f64)).scale(0.5).clamp_min(0.0)
    }

    pub fn trace_term(&self, prior: &Prior<'t>, xk: Var<'t>) -> Var<'t> {
        let n = xk.nrows();
        let kzx = self.inducing.matern(xk, self.log_ls, self.log_os, self.smoothness);
        let a = prior.chol.solve_lower(kzx);
        let kdiag = self.log_os.exp().broadcast(n, 1);
        (kdiag - a.square().col_sums().t()).clamp_min(0.0).sum()
    }
}
