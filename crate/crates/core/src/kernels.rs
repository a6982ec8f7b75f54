//! Matérn kernels with one lengthscale per input dimension.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Matérn smoothness parameter nu.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Smoothness {
    #[serde(rename = "1/2")]
    Half,
    #[serde(rename = "3/2")]
    ThreeHalves,
    #[default]
    #[serde(rename = "5/2")]
    FiveHalves,
}

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SQRT5: f64 = 2.236_067_977_499_79;

impl Smoothness {
    /// Correlation at scaled distance `r`.
    #[inline]
    pub fn correlation(self, r: f64) -> f64 {
        match self {
            Smoothness::Half => (-r).exp(),
            Smoothness::ThreeHalves => (1.0 + SQRT3 * r) * (-SQRT3 * r).exp(),
            Smoothness::FiveHalves => (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * (-SQRT5 * r).exp(),
        }
    }

    /// `c'(r) / r`, finite at `r = 0` for nu > 1/2. For nu = 1/2 the
    /// zero-distance value is reported as 0; every caller multiplies it by a
    /// coordinate difference that is itself zero there.
    #[inline]
    fn dcorr_over_r(self, r: f64) -> f64 {
        match self {
            Smoothness::Half => {
                if r > 0.0 {
                    -(-r).exp() / r
                } else {
                    0.0
                }
            }
            Smoothness::ThreeHalves => -3.0 * (-SQRT3 * r).exp(),
            Smoothness::FiveHalves => -5.0 / 3.0 * (1.0 + SQRT5 * r) * (-SQRT5 * r).exp(),
        }
    }
}

/// Kernel hyperparameters, stored as logs so positivity holds by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelParams {
    pub log_lengthscales: DVector<f64>,
    pub log_outputscale: f64,
    pub smoothness: Smoothness,
}

impl KernelParams {
    pub fn new(lengthscales: &[f64], outputscale: f64, smoothness: Smoothness) -> Result<Self> {
        if lengthscales.is_empty() || lengthscales.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidConfig("lengthscales must be positive and finite".into()));
        }
        if !(outputscale > 0.0) || !outputscale.is_finite() {
            return Err(Error::InvalidConfig("outputscale must be positive and finite".into()));
        }
        Ok(Self {
            log_lengthscales: DVector::from_iterator(lengthscales.len(), lengthscales.iter().map(|l| l.ln())),
            log_outputscale: outputscale.ln(),
            smoothness,
        })
    }

    /// Unit lengthscales and outputscale.
    pub fn unit(dim: usize, smoothness: Smoothness) -> Self {
        Self {
            log_lengthscales: DVector::zeros(dim),
            log_outputscale: 0.0,
            smoothness,
        }
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn lengthscales(&self) -> DVector<f64> {
        self.log_lengthscales.map(f64::exp)
    }

    pub fn outputscale(&self) -> f64 {
        self.log_outputscale.exp()
    }
}

/// `k(x, x')` for a single pair of points.
pub fn kernel_eval(params: &KernelParams, x: &[f64], xp: &[f64]) -> Result<f64> {
    let d = params.dim();
    for len in [x.len(), xp.len()] {
        if len != d {
            return Err(Error::DimensionMismatch {
                context: "kernel_eval",
                expected: d,
                got: len,
            });
        }
    }
    let r2: f64 = x
        .iter()
        .zip(xp)
        .zip(params.log_lengthscales.iter())
        .map(|((a, b), ll)| {
            let z = (a - b) / ll.exp();
            z * z
        })
        .sum();
    Ok(params.outputscale() * params.smoothness.correlation(r2.sqrt()))
}

/// Cross-covariance between the rows of `x1` (n1 x d) and `x2` (n2 x d).
pub fn matern_cross(
    x1: &DMatrix<f64>,
    x2: &DMatrix<f64>,
    log_ls: &[f64],
    log_os: f64,
    smoothness: Smoothness,
) -> DMatrix<f64> {
    let d = log_ls.len();
    assert_eq!(x1.ncols(), d, "kernel input dimension");
    assert_eq!(x2.ncols(), d, "kernel input dimension");
    let inv_ls: Vec<f64> = log_ls.iter().map(|l| (-l).exp()).collect();
    let os = log_os.exp();
    let s1 = scaled(x1, &inv_ls);
    let s2 = scaled(x2, &inv_ls);
    let (n1, n2) = (x1.nrows(), x2.nrows());
    let mut k = DMatrix::zeros(n1, n2);
    for j in 0..n2 {
        let b = &s2[j * d..(j + 1) * d];
        for i in 0..n1 {
            let a = &s1[i * d..(i + 1) * d];
            let r2: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
            k[(i, j)] = os * smoothness.correlation(r2.sqrt());
        }
    }
    k
}

/// Row-major copy of `x` with each column divided by its lengthscale.
fn scaled(x: &DMatrix<f64>, inv_ls: &[f64]) -> Vec<f64> {
    let d = inv_ls.len();
    let mut out = vec![0.0; x.nrows() * d];
    for i in 0..x.nrows() {
        for k in 0..d {
            out[i * d + k] = x[(i, k)] * inv_ls[k];
        }
    }
    out
}

pub(crate) struct KernelAdjoint {
    pub x1: Option<DMatrix<f64>>,
    pub x2: Option<DMatrix<f64>>,
    pub log_lengthscales: Vec<f64>,
    pub log_outputscale: f64,
}

/// Pulls the adjoint `gbar` of a cross-covariance block back onto its inputs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matern_cross_adjoint(
    x1: &DMatrix<f64>,
    x2: &DMatrix<f64>,
    log_ls: &[f64],
    log_os: f64,
    smoothness: Smoothness,
    k: &DMatrix<f64>,
    gbar: &DMatrix<f64>,
    want_x1: bool,
    want_x2: bool,
) -> KernelAdjoint {
    let d = log_ls.len();
    let inv_ls: Vec<f64> = log_ls.iter().map(|l| (-l).exp()).collect();
    let inv_ls2: Vec<f64> = inv_ls.iter().map(|v| v * v).collect();
    let os = log_os.exp();
    let (n1, n2) = (x1.nrows(), x2.nrows());
    let s1 = scaled(x1, &inv_ls);
    let s2 = scaled(x2, &inv_ls);
    let r1 = row_major(x1);
    let r2m = row_major(x2);
    let mut dx1 = vec![0.0; if want_x1 { n1 * d } else { 0 }];
    let mut dx2 = vec![0.0; if want_x2 { n2 * d } else { 0 }];
    let mut dls = vec![0.0; d];
    let mut dos = 0.0;
    for j in 0..n2 {
        let b = &s2[j * d..(j + 1) * d];
        let xb = &r2m[j * d..(j + 1) * d];
        for i in 0..n1 {
            let g = gbar[(i, j)];
            if g == 0.0 {
                continue;
            }
            dos += g * k[(i, j)];
            let a = &s1[i * d..(i + 1) * d];
            let r2: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
            let coeff = g * os * smoothness.dcorr_over_r(r2.sqrt());
            if coeff == 0.0 {
                continue;
            }
            let xa = &r1[i * d..(i + 1) * d];
            for kdim in 0..d {
                let delta = xa[kdim] - xb[kdim];
                let t = coeff * delta * inv_ls2[kdim];
                if want_x1 {
                    dx1[i * d + kdim] += t;
                }
                if want_x2 {
                    dx2[j * d + kdim] -= t;
                }
                dls[kdim] -= t * delta;
            }
        }
    }
    let to_mat = |v: Vec<f64>, n: usize| DMatrix::from_row_slice(n, d, &v);
    KernelAdjoint {
        x1: want_x1.then(|| to_mat(dx1, n1)),
        x2: want_x2.then(|| to_mat(dx2, n2)),
        log_lengthscales: dls,
        log_outputscale: dos,
    }
}

fn row_major(x: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.nrows() {
        out.extend(x.row(i).iter());
    }
    out
}

/// Covariance blocks between data `X` and inducing locations `Z`.
#[derive(Clone, Debug)]
pub struct KernelBlocks {
    pub k_mm: DMatrix<f64>,
    pub k_nm: DMatrix<f64>,
    pub k_diag: DVector<f64>,
}

pub fn assemble_blocks(params: &KernelParams, x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<KernelBlocks> {
    let d = params.dim();
    for (cols, context) in [(x.ncols(), "assemble_blocks: X"), (z.ncols(), "assemble_blocks: Z")] {
        if cols != d {
            return Err(Error::DimensionMismatch {
                context,
                expected: d,
                got: cols,
            });
        }
    }
    let ls = params.log_lengthscales.as_slice();
    let mut k_mm = matern_cross(z, z, ls, params.log_outputscale, params.smoothness);
    k_mm = (&k_mm + k_mm.transpose()) * 0.5;
    let k_nm = matern_cross(x, z, ls, params.log_outputscale, params.smoothness);
    let k_diag = DVector::from_element(x.nrows(), params.outputscale());
    Ok(KernelBlocks { k_mm, k_nm, k_diag })
}

/// A lower Cholesky factor together with the diagonal jitter it needed.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    pub factor: DMatrix<f64>,
    pub jitter: f64,
}

/// Cholesky factor of `A + jitter * I`. The first attempt uses no jitter;
/// after that the jitter starts at `1e-8 * mean(diag A)` and grows tenfold up
/// to `1e-4 * mean(diag A)`.
pub fn robust_cholesky(a: &DMatrix<f64>) -> Result<CholeskyFactor> {
    assert!(a.is_square(), "robust_cholesky expects a square matrix");
    let n = a.nrows();
    let mean_diag = if n == 0 { 0.0 } else { a.diagonal().mean().abs() };
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut jitter = 0.0;
    let mut next = 1e-8 * scale;
    loop {
        if a.iter().all(|v| v.is_finite()) {
            let mut shifted = a.clone();
            for k in 0..n {
                shifted[(k, k)] += jitter;
            }
            if let Some(ch) = nalgebra::Cholesky::new(shifted) {
                let factor = ch.unpack();
                if factor.diagonal().iter().all(|&v| v > 0.0 && v.is_finite()) {
                    return Ok(CholeskyFactor { factor, jitter });
                }
            }
        }
        if next > 1e-4 * scale * (1.0 + 1e-9) {
            return Err(Error::NotPositiveDefinite { jitter });
        }
        jitter = next;
        next *= 10.0;
    }
}
