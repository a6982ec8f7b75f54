#![allow(dead_code)]

use dspp::gp_layer::{CovKind, GpLayerState, VariationalCov};
use dspp::models::{Family, Model, ModelConfig};
use dspp::quadrature::RuleKind;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random SPD matrix `L L^T` with `L` lower, diagonal in `[0.2, 0.6]`.
pub fn random_spd(m: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let l = DMatrix::from_fn(m, m, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => 0.2 * normal(rng),
        std::cmp::Ordering::Equal => rng.random_range(0.2..0.6),
        std::cmp::Ordering::Less => 0.0,
    });
    &l * l.transpose()
}

/// Moves `m`, `S`, lengthscales and outputscale away from their defaults.
pub fn perturb_gp(gp: &mut GpLayerState, rng: &mut impl Rng) {
    let m = gp.num_inducing();
    gp.var_mean = DVector::from_fn(m, |_, _| 0.7 * normal(rng));
    let s = random_spd(m, rng);
    gp.cov.set_dense(&s).unwrap();
    for l in gp.kernel.log_lengthscales.iter_mut() {
        *l += 0.3 * normal(rng);
    }
    gp.kernel.log_outputscale += 0.3 * normal(rng);
}

pub fn perturb_model(model: &mut Model, rng: &mut impl Rng) {
    for layer in &mut model.hidden {
        for gp in &mut layer.gps {
            perturb_gp(gp, rng);
        }
        if let Some(rule) = &mut layer.rule {
            if rule.kind.is_learnable() {
                rule.nodes.iter_mut().for_each(|v| *v += 0.1 * normal(rng));
                rule.logits.iter_mut().for_each(|v| *v += 0.5 * normal(rng));
            }
        }
    }
    for gp in &mut model.output {
        perturb_gp(gp, rng);
    }
    model.log_sigma_obs.iter_mut().for_each(|v| *v += 0.2 * normal(rng));
}

pub fn data(n: usize, d: usize, dy: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
    let y = DMatrix::from_fn(n, dy, |i, j| (x.row(i).sum() + j as f64).sin() + 0.1 * normal(&mut rng));
    (x, y)
}

pub struct Small {
    pub family: Family,
    pub layers: usize,
    pub width: usize,
    pub inducing: usize,
    pub kind: RuleKind,
    pub sites: usize,
    pub cov: CovKind,
}

impl Small {
    pub fn new(family: Family, layers: usize) -> Self {
        Self {
            family,
            layers,
            width: 2,
            inducing: 5,
            kind: RuleKind::Qr3,
            sites: 3,
            cov: CovKind::Full,
        }
    }

    pub fn build(&self, x: &DMatrix<f64>, y: &DMatrix<f64>, seed: u64) -> Model {
        let mut c = ModelConfig::new(self.family, x.ncols(), y.ncols());
        c.layers = self.layers;
        c.hidden_width = self.width;
        c.inducing = self.inducing;
        c.quadrature = self.kind;
        c.sites = self.sites;
        c.covariance = self.cov;
        c.mc_samples_train = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Model::new(c, x, y, &mut rng).unwrap();
        perturb_model(&mut m, &mut rng);
        m
    }
}

pub fn diag_of(cov: &VariationalCov) -> DVector<f64> {
    cov.dense().diagonal()
}
