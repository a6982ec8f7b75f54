//! Quadrature rules that turn per-dimension Gaussian marginals into a
//! finite weighted set of sigma points.
//!
//! Four rule kinds share one representation: a node table (`S x W`, one
//! column per hidden GP) and a vector of weight logits, one per mixture
//! component. Weights are always `softmax(logits)`.
//!
//! | kind | stored nodes | logits | components |
//! |------|--------------|--------|------------|
//! | `GaussHermite` | fixed `S x 1` | fixed `S^W` | `S^W` |
//! | `Qr1` | `S x W` | `S^W` | `S^W` |
//! | `Qr2` | `ceil(S/2) x W`, reflected | `S^W` | `S^W` |
//! | `Qr3` | `S x W` | `S` | `S` |
//!
//! Grid components are enumerated with the multi-index digit of `w = 0`
//! most significant.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BlockMap, Bound, ParamBlock, Var};
use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 30;

/// Standard deviation of the node jitter applied when initializing QR3.
pub const QR3_INIT_JITTER: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum RuleKind {
    #[serde(rename = "gh")]
    GaussHermite,
    #[serde(rename = "qr1")]
    Qr1,
    #[serde(rename = "qr2")]
    Qr2,
    #[serde(rename = "qr3")]
    Qr3,
}

impl RuleKind {
    pub fn is_grid(self) -> bool {
        self != RuleKind::Qr3
    }

    pub fn is_learnable(self) -> bool {
        self != RuleKind::GaussHermite
    }
}

impl std::str::FromStr for RuleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gh" | "gauss-hermite" | "gausshermite" => Ok(RuleKind::GaussHermite),
            "qr1" => Ok(RuleKind::Qr1),
            "qr2" => Ok(RuleKind::Qr2),
            "qr3" => Ok(RuleKind::Qr3),
            other => Err(Error::InvalidConfig(format!("unknown quadrature rule `{other}`"))),
        }
    }
}

/// Probabilists' Gauss-Hermite rule for `N(0, 1)`: nodes ascending,
/// weights summing to one, symmetric about zero.
pub fn gauss_hermite_nodes(s: usize) -> Result<(DVector<f64>, DVector<f64>)> {
    if !(1..=MAX_ORDER).contains(&s) {
        return Err(Error::QuadratureOrder(s));
    }
    // Eigenvalues of the Jacobi matrix give starting points for Newton.
    let jacobi = DMatrix::from_fn(s, s, |i, j| if i.abs_diff(j) == 1 { (i.max(j) as f64).sqrt() } else { 0.0 });
    let mut x: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    x.sort_by(|a, b| a.total_cmp(b));

    let mut w = vec![0.0; s];
    for (xi, wi) in x.iter_mut().zip(w.iter_mut()) {
        for _ in 0..100 {
            let (p, dp, _) = orthonormal_hermite(s, *xi);
            let step = p / dp;
            *xi -= step;
            if step.abs() <= 1e-15 * (1.0 + xi.abs()) {
                break;
            }
        }
        *wi = 1.0 / orthonormal_hermite(s, *xi).2;
    }

    for i in 0..s / 2 {
        let j = s - 1 - i;
        let a = 0.5 * (x[j] - x[i]);
        x[i] = -a;
        x[j] = a;
        let m = 0.5 * (w[i] + w[j]);
        w[i] = m;
        w[j] = m;
    }
    if s % 2 == 1 {
        x[s / 2] = 0.0;
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok((DVector::from_vec(x), DVector::from_vec(w)))
}

/// `(p_n(x), p_n'(x), sum_{k<n} p_k(x)^2)` for the orthonormal probabilists'
/// Hermite polynomials, `p_{k+1} = (x p_k - sqrt(k) p_{k-1}) / sqrt(k+1)`.
fn orthonormal_hermite(n: usize, x: f64) -> (f64, f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    let mut sumsq = 0.0;
    for k in 0..n {
        sumsq += cur * cur;
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    // p_n' = sqrt(n) p_{n-1}
    (cur, (n as f64).sqrt() * prev, sumsq)
}

/// Expands `ceil(S/2) x W` free nodes into the full `S x W` antisymmetric
/// table. For odd `S` the middle row is structurally zero and the last free
/// row is unused.
pub fn reflect_qr2(free: &DMatrix<f64>, s: usize) -> DMatrix<f64> {
    assert_eq!(free.nrows(), s.div_ceil(2), "QR2 needs ceil(S/2) free rows");
    DMatrix::from_fn(s, free.ncols(), |i, w| match reflect_source(i, s) {
        Some((r, sign)) => sign * free[(r, w)],
        None => 0.0,
    })
}

/// Free row feeding table row `i`, with its sign; `None` for a pinned zero.
fn reflect_source(i: usize, s: usize) -> Option<(usize, f64)> {
    let mirror = s - 1 - i;
    match i.cmp(&mirror) {
        std::cmp::Ordering::Less => Some((i, 1.0)),
        std::cmp::Ordering::Greater => Some((mirror, -1.0)),
        std::cmp::Ordering::Equal => None,
    }
}

/// Multi-index of grid component `c`, digit of `w = 0` most significant.
pub fn grid_index(mut c: usize, s: usize, width: usize) -> Vec<usize> {
    let mut idx = vec![0; width];
    for w in (0..width).rev() {
        idx[w] = c % s;
        c /= s;
    }
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureRule {
    pub kind: RuleKind,
    /// Sites per dimension (grid rules) or in total (QR3).
    pub sites: usize,
    pub width: usize,
    /// Stored node parameters; shape depends on `kind`.
    pub nodes: DMatrix<f64>,
    pub logits: DVector<f64>,
}

impl QuadratureRule {
    /// Rule initialized from Gauss-Hermite nodes and log-weights. QR3 nodes
    /// get independent `N(0, QR3_INIT_JITTER^2)` jitter per entry.
    pub fn new(kind: RuleKind, sites: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        if width == 0 {
            return Err(Error::InvalidConfig("quadrature width must be positive".into()));
        }
        let (gh_x, gh_w) = gauss_hermite_nodes(sites)?;
        let log_w = gh_w.map(f64::ln);
        let components = match kind {
            RuleKind::Qr3 => sites,
            _ => sites
                .checked_pow(width as u32)
                .filter(|&c| c <= 1 << 20)
                .ok_or_else(|| Error::InvalidConfig(format!("{sites}^{width} quadrature components is too many")))?,
        };
        let grid_logits = || {
            DVector::from_fn(components, |c, _| {
                grid_index(c, sites, width).iter().map(|&s| log_w[s]).sum()
            })
        };
        let (nodes, logits) = match kind {
            RuleKind::GaussHermite => (DMatrix::from_column_slice(sites, 1, gh_x.as_slice()), grid_logits()),
            RuleKind::Qr1 => (DMatrix::from_fn(sites, width, |s, _| gh_x[s]), grid_logits()),
            RuleKind::Qr2 => (DMatrix::from_fn(sites.div_ceil(2), width, |s, _| gh_x[s]), grid_logits()),
            RuleKind::Qr3 => {
                let jitter = Normal::new(0.0, QR3_INIT_JITTER).expect("valid normal");
                let nodes = DMatrix::from_fn(sites, width, |s, _| gh_x[s] + jitter.sample(rng));
                (nodes, log_w)
            }
        };
        Ok(Self {
            kind,
            sites,
            width,
            nodes,
            logits,
        })
    }

    pub fn num_components(&self) -> usize {
        self.logits.len()
    }

    /// Full `S x W` node table.
    pub fn node_table(&self) -> DMatrix<f64> {
        match self.kind {
            RuleKind::GaussHermite => DMatrix::from_fn(self.sites, self.width, |s, _| self.nodes[(s, 0)]),
            RuleKind::Qr1 | RuleKind::Qr3 => self.nodes.clone(),
            RuleKind::Qr2 => reflect_qr2(&self.nodes, self.sites),
        }
    }

    /// Normalized component weights.
    pub fn weights(&self) -> DVector<f64> {
        let lse = crate::autodiff::logsumexp(self.logits.iter().copied());
        self.logits.map(|l| (l - lse).exp())
    }

    /// Node table row used by component `c` for each dimension.
    pub fn component_sites(&self, c: usize) -> Vec<usize> {
        if self.kind.is_grid() {
            grid_index(c, self.sites, self.width)
        } else {
            vec![c; self.width]
        }
    }

    /// Weighted points `mu + xi ⊙ sigma`, one per component.
    pub fn sigma_points(&self, mu: &DVector<f64>, sigma: &DVector<f64>) -> Result<Vec<(f64, DVector<f64>)>> {
        for len in [mu.len(), sigma.len()] {
            if len != self.width {
                return Err(Error::DimensionMismatch {
                    context: "sigma_points width",
                    expected: self.width,
                    got: len,
                });
            }
        }
        let table = self.node_table();
        let weights = self.weights();
        Ok((0..self.num_components())
            .map(|c| {
                let sites = self.component_sites(c);
                let point = DVector::from_fn(self.width, |w, _| mu[w] + table[(sites[w], w)] * sigma[w]);
                (weights[c], point)
            })
            .collect())
    }

    /// Trainable blocks; empty for Gauss-Hermite.
    pub fn blocks(&self, prefix: &str) -> Vec<ParamBlock> {
        if !self.kind.is_learnable() {
            return Vec::new();
        }
        vec![
            ParamBlock::dense(format!("{prefix}.nodes"), self.nodes.clone()),
            ParamBlock::dense(
                format!("{prefix}.logits"),
                DMatrix::from_column_slice(self.logits.len(), 1, self.logits.as_slice()),
            ),
        ]
    }

    pub fn load_blocks(&mut self, prefix: &str, map: &mut BlockMap) -> Result<()> {
        if !self.kind.is_learnable() {
            return Ok(());
        }
        self.nodes = map.take(&format!("{prefix}.nodes"), self.nodes.shape())?;
        self.logits = map
            .take(&format!("{prefix}.logits"), (self.logits.len(), 1))?
            .column(0)
            .into_owned();
        Ok(())
    }

    pub(crate) fn bind<'t>(&self, prefix: &str, bound: &Bound<'t>, tape: &'t crate::autodiff::Tape) -> RuleVars<'t> {
        let (nodes, logits) = if self.kind.is_learnable() {
            (bound.get(&format!("{prefix}.nodes")), bound.get(&format!("{prefix}.logits")))
        } else {
            let l = DMatrix::from_column_slice(self.logits.len(), 1, self.logits.as_slice());
            (tape.constant(self.nodes.clone()), tape.constant(l))
        };
        let table = match self.kind {
            RuleKind::GaussHermite => nodes.broadcast(self.sites, self.width),
            RuleKind::Qr1 | RuleKind::Qr3 => nodes,
            RuleKind::Qr2 => {
                let (s, half) = (self.sites, self.sites.div_ceil(2));
                let mut idx = Vec::with_capacity(s * self.width);
                let mut coef = Vec::with_capacity(s * self.width);
                for w in 0..self.width {
                    for i in 0..s {
                        let (r, c) = reflect_source(i, s).unwrap_or((0, 0.0));
                        idx.push(w * half + r);
                        coef.push(c);
                    }
                }
                nodes.gather(s, self.width, idx, coef)
            }
        };
        let k = self.num_components();
        let lse = logits.t().logsumexp_rows().broadcast(k, 1);
        RuleVars {
            table,
            log_weights: logits - lse,
        }
    }
}

/// Tape view of a rule: full node table and normalized log-weights (`K x 1`).
pub(crate) struct RuleVars<'t> {
    pub table: Var<'t>,
    pub log_weights: Var<'t>,
}
