//! Optimization protocol: Adam on the negated objective, step decay of the
//! learning rate, minibatching and best-of-N restarts.
//!
//! A run with `restarts = R` initializes R models from independent RNG
//! streams of `seed`, trains each for `warmup_epochs`, keeps the one with
//! the best mean training log predictive density and continues it to
//! `epochs`. A restart that hits a non-finite objective or gradient is
//! dropped; the run fails only when every restart does.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::grad::gradient;
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::objectives::{Batch, ObjectiveOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// KL weight; the family default when absent.
    pub beta_reg: Option<f64>,
    pub restarts: usize,
    /// Epochs before restart selection; 10% of `epochs` when absent.
    pub warmup_epochs: Option<usize>,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Fractions of `epochs` after which the learning rate is multiplied by `decay`.
    pub milestones: Vec<f64>,
    pub decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            epochs: 400,
            batch_size: 1000,
            beta_reg: None,
            restarts: 3,
            warmup_epochs: None,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            milestones: vec![0.5, 0.75],
            decay: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.lr0 > 0.0) {
            return bad("lr0 must be positive");
        }
        if self.batch_size == 0 || self.batch_size > n {
            return Err(Error::InvalidConfig(format!("batch_size must be in 1..={n}, got {}", self.batch_size)));
        }
        if self.restarts == 0 {
            return bad("restarts must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("invalid Adam hyperparameters");
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("milestones are fractions of the epoch budget");
        }
        if let Some(b) = self.beta_reg {
            if !(b >= 0.0) {
                return bad("beta_reg must be nonnegative");
            }
        }
        Ok(())
    }

    pub fn warmup(&self) -> usize {
        self.warmup_epochs.unwrap_or((self.epochs / 10).max(1)).min(self.epochs)
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&f| epoch >= (f * self.epochs as f64).floor() as usize)
            .count();
        self.lr0 * self.decay.powi(passed as i32)
    }
}

/// First and second moment estimates of Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam step descending along `grads`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, beta1: f64, beta2: f64, eps: f64) {
    assert_eq!(params.len(), grads.len());
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for k in 0..params.len() {
        let g = grads[k];
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g;
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g;
        let mh = state.m[k] / c1;
        let vh = state.v[k] / c2;
        params[k] -= lr * mh / (vh.sqrt() + eps);
    }
}

/// K-means++ seeding followed by 10 Lloyd iterations on a random
/// subsample of `min(N, 10 * M * d, 20000)` rows.
pub fn kmeans_init(x: &DMatrix<f64>, m: usize, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
    let (n, d) = x.shape();
    if m == 0 {
        return Err(Error::InvalidConfig("k-means needs at least one cluster".into()));
    }
    if m > n {
        return Err(Error::TooFewPoints { requested: m, available: n });
    }
    let cap = n.min((10 * m * d.max(1)).min(20_000)).max(m);
    let pts: DMatrix<f64> = if cap < n {
        let mut rows = index::sample(rng, n, cap).into_vec();
        rows.sort_unstable();
        x.select_rows(&rows)
    } else {
        x.clone()
    };
    let np = pts.nrows();
    let dist2 = |i: usize, c: &DMatrix<f64>, j: usize| -> f64 {
        (0..d).map(|k| (pts[(i, k)] - c[(j, k)]).powi(2)).sum()
    };

    let mut centers = DMatrix::zeros(m, d);
    let mut chosen = vec![false; np];
    let first = rng.random_range(0..np);
    centers.row_mut(0).copy_from(&pts.row(first));
    chosen[first] = true;
    let mut best: Vec<f64> = (0..np).map(|i| dist2(i, &centers, 0)).collect();
    for c in 1..m {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &b) in best.iter().enumerate() {
                if b > 0.0 {
                    pick = Some(i);
                    if u < b {
                        break;
                    }
                    u -= b;
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            let free: Vec<usize> = (0..np).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centers.row_mut(c).copy_from(&pts.row(pick));
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(dist2(i, &centers, c));
        }
    }

    let mut assign = vec![0usize; np];
    for _ in 0..10 {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = (0..m)
                .map(|j| (j, dist2(i, &centers, j)))
                .min_by(|p, q| p.1.total_cmp(&q.1))
                .expect("m >= 1")
                .0;
        }
        let mut sums = DMatrix::zeros(m, d);
        let mut counts = vec![0usize; m];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            let mut row = sums.row_mut(a);
            row += pts.row(i);
        }
        for j in 0..m {
            if counts[j] > 0 {
                let row = sums.row(j) / counts[j] as f64;
                centers.row_mut(j).copy_from(&row);
            }
        }
    }
    Ok(centers)
}

/// Seeded convenience wrapper around [`kmeans_init`].
pub fn kmeans_init_seeded(x: &DMatrix<f64>, m: usize, seed: u64) -> Result<DMatrix<f64>> {
    kmeans_init(x, m, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub restart: usize,
    pub epoch: usize,
    /// Mean minibatch objective.
    pub objective: f64,
    /// Mean minibatch data term scaled to the full dataset.
    pub data_term: f64,
    pub kl_term: f64,
    pub lr: f64,
    /// Seconds since the start of the run.
    pub wall_time: f64,
}

/// Hooks called during training; all methods default to no-ops.
pub trait TrainObserver {
    fn on_epoch(&mut self, _record: &EpochRecord, _model: &Model) -> Result<()> {
        Ok(())
    }
    fn on_restart_failed(&mut self, _restart: usize, _error: &Error) {}
}

/// Observer that ignores every event.
pub struct NoObserver;
impl TrainObserver for NoObserver {}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub selected_restart: usize,
    /// `(restart, message)` for every abandoned restart.
    pub failed_restarts: Vec<(usize, String)>,
}

/// RNG stream for restart `r` of a run seeded with `seed`.
pub fn restart_rng(seed: u64, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    rng
}

/// Trains `config` on `data` with k-means initialization.
pub fn train(config: &ModelConfig, data: &Batch, tc: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<TrainResult> {
    train_with_init(config, data, tc, observer, |_, rng| Model::new(config.clone(), &data.x, &data.y, rng))
}

struct Run {
    restart: usize,
    model: Model,
    adam: AdamState,
    rng: ChaCha8Rng,
}

/// Like [`train`] with a caller-supplied initializer per restart.
pub fn train_with_init(
    config: &ModelConfig,
    data: &Batch,
    tc: &TrainConfig,
    observer: &mut dyn TrainObserver,
    mut init: impl FnMut(usize, &mut ChaCha8Rng) -> Result<Model>,
) -> Result<TrainResult> {
    config.validate()?;
    tc.validate(data.len())?;
    let start = Instant::now();
    let beta = tc.beta_reg.unwrap_or(config.family.default_beta());
    let mut history = Vec::new();
    let mut failed = Vec::new();

    if tc.epochs == 0 {
        let mut rng = restart_rng(tc.seed, 0);
        return Ok(TrainResult {
            model: init(0, &mut rng)?,
            history,
            selected_restart: 0,
            failed_restarts: failed,
        });
    }

    let warmup = tc.warmup();
    let mut candidates: Vec<(f64, Run)> = Vec::new();
    for r in 0..tc.restarts {
        let mut rng = restart_rng(tc.seed, r);
        let attempt = (|| -> Result<(f64, Run)> {
            let model = init(r, &mut rng)?;
            let adam = AdamState::new(model.params().len());
            let mut run = Run { restart: r, model, adam, rng: rng.clone() };
            for epoch in 0..warmup {
                let rec = run_epoch(&mut run, data, tc, beta, epoch, &start)?;
                observer.on_epoch(&rec, &run.model)?;
                history.push(rec);
            }
            let mut eval_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed);
            let score = crate::metrics::mean_log_density(&run.model, &data.x, &data.y, &mut eval_rng)?;
            if !score.is_finite() {
                return Err(Error::NonFiniteObjective);
            }
            Ok((score, run))
        })();
        match attempt {
            Ok(c) => candidates.push(c),
            Err(e) => {
                observer.on_restart_failed(r, &e);
                failed.push((r, e.to_string()));
            }
        }
    }
    // Stable sort keeps the lowest restart index among ties.
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0));

    for (_, mut run) in candidates {
        let mut continued = Vec::new();
        let outcome = (|| -> Result<()> {
            for epoch in warmup..tc.epochs {
                let rec = run_epoch(&mut run, data, tc, beta, epoch, &start)?;
                observer.on_epoch(&rec, &run.model)?;
                continued.push(rec);
            }
            Ok(())
        })();
        match outcome {
            Ok(()) => {
                history.extend(continued);
                return Ok(TrainResult {
                    model: run.model,
                    history,
                    selected_restart: run.restart,
                    failed_restarts: failed,
                });
            }
            Err(e) => {
                observer.on_restart_failed(run.restart, &e);
                failed.push((run.restart, e.to_string()));
            }
        }
    }
    Err(Error::AllRestartsFailed(tc.restarts))
}

fn run_epoch(run: &mut Run, data: &Batch, tc: &TrainConfig, beta: f64, epoch: usize, start: &Instant) -> Result<EpochRecord> {
    let n = data.len();
    let lr = tc.learning_rate(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut run.rng);
    let (mut obj, mut dat, mut kl) = (0.0, 0.0, 0.0);
    let mut steps = 0usize;
    for chunk in order.chunks(tc.batch_size) {
        let batch = data.select(chunk);
        let opts = ObjectiveOptions::new(n, beta, run.rng.next_u64());
        let (value, grad) = gradient(&run.model, &batch, &opts)?;
        let mut params = run.model.params();
        let neg: Vec<f64> = grad.values.iter().map(|g| -g).collect();
        adam_step(&mut params.values, &neg, &mut run.adam, lr, tc.adam_beta1, tc.adam_beta2, tc.adam_eps);
        if let Some(k) = params.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { param: params.names[k].clone() });
        }
        run.model.set_params(&params)?;
        obj += value.total;
        dat += value.data_term * value.n_scale;
        kl += value.kl_term;
        steps += 1;
    }
    let s = steps as f64;
    Ok(EpochRecord {
        restart: run.restart,
        epoch,
        objective: obj / s,
        data_term: dat / s,
        kl_term: kl / s,
        lr,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Family;

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut p = vec![1.0, 2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[1.0, 0.0], &mut s, 0.01, 0.9, 0.999, 1e-8);
        assert!((p[0] - (1.0 - 0.01 / (1.0 + 1e-8))).abs() < 1e-12);
        assert_eq!(p[1], 2.0);
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p[0];
            adam_step(&mut p, &[3.7], &mut s, 0.01, 0.9, 0.999, 1e-8);
            last = before - p[0];
        }
        assert!((last - 0.01).abs() < 1e-6, "{last}");
    }

    #[test]
    fn schedule_milestones() {
        let tc = TrainConfig {
            epochs: 100,
            ..TrainConfig::default()
        };
        assert_eq!(tc.learning_rate(0), 0.01);
        assert_eq!(tc.learning_rate(49), 0.01);
        assert!((tc.learning_rate(50) - 0.001).abs() < 1e-18);
        assert!((tc.learning_rate(74) - 0.001).abs() < 1e-18);
        assert!((tc.learning_rate(75) - 0.0001).abs() < 1e-18);
        assert_eq!(tc.warmup(), 10);
    }

    #[test]
    fn kmeans_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(7, 2, |i, j| (i * 3 + j) as f64 * 0.37);
        let z = kmeans_init(&x, 7, &mut rng).unwrap();
        let mut a: Vec<Vec<u64>> = (0..7).map(|i| z.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        let mut b: Vec<Vec<u64>> = (0..7).map(|i| x.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);

        let x = DMatrix::from_fn(200, 2, |i, _| if i < 100 { -5.0 } else { 5.0 } + rng.random_range(-0.5..0.5));
        let z = kmeans_init(&x, 2, &mut rng).unwrap();
        let mut c: Vec<f64> = (0..2).map(|j| z[(j, 0)]).collect();
        c.sort_by(f64::total_cmp);
        let m0 = x.rows(0, 100).column(0).mean();
        let m1 = x.rows(100, 100).column(0).mean();
        assert!((c[0] - m0).abs() < 0.1 && (c[1] - m1).abs() < 0.1);

        assert_eq!(kmeans_init_seeded(&x, 5, 3).unwrap(), kmeans_init_seeded(&x, 5, 3).unwrap());
        assert!(matches!(kmeans_init_seeded(&x, 201, 3), Err(Error::TooFewPoints { .. })));
    }

    fn sin_data(n: usize) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: DMatrix<f64> = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-3.0..3.0));
        let y = DMatrix::from_fn(n, 1, |i, _| x[(i, 0)].sin() + 0.1 * rng.random_range(-1.0..1.0));
        Batch::new(x, y).unwrap()
    }

    fn small_config(family: Family) -> ModelConfig {
        let mut c = ModelConfig::new(family, 1, 1);
        c.inducing = 8;
        c.hidden_width = 2;
        c.sites = 3;
        c.mc_samples_train = 2;
        c.mc_samples_eval = 4;
        c
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let data = sin_data(40);
        let tc = TrainConfig {
            epochs: 0,
            batch_size: 10,
            ..TrainConfig::default()
        };
        let cfg = small_config(Family::Svgp);
        let r = train(&cfg, &data, &tc, &mut NoObserver).unwrap();
        let init = Model::new(cfg, &data.x, &data.y, &mut restart_rng(0, 0)).unwrap();
        assert!(r.history.is_empty());
        assert_eq!(r.model, init);
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let data = sin_data(60);
        let tc = TrainConfig {
            epochs: 12,
            batch_size: 20,
            restarts: 2,
            lr0: 0.05,
            ..TrainConfig::default()
        };
        for family in [Family::Svgp, Family::Dspp, Family::Dgp] {
            let cfg = small_config(family);
            let a = train(&cfg, &data, &tc, &mut NoObserver).unwrap();
            let b = train(&cfg, &data, &tc, &mut NoObserver).unwrap();
            assert_eq!(a.model, b.model);
            assert_eq!(a.history.len(), 2 * tc.warmup() + tc.epochs - tc.warmup());
            let sel: Vec<_> = a.history.iter().filter(|h| h.restart == a.selected_restart).collect();
            assert!(sel.last().unwrap().objective > sel[0].objective, "{family}");
        }
    }

    #[test]
    fn poisoned_restart_is_skipped() {
        let data = sin_data(40);
        let cfg = small_config(Family::Ppgpr);
        let tc = TrainConfig {
            epochs: 4,
            batch_size: 20,
            restarts: 3,
            warmup_epochs: Some(2),
            ..TrainConfig::default()
        };
        let r = train_with_init(&cfg, &data, &tc, &mut NoObserver, |r, rng| {
            let mut m = Model::new(cfg.clone(), &data.x, &data.y, rng)?;
            if r == 0 {
                m.log_sigma_obs.fill(f64::NAN);
            }
            Ok(m)
        })
        .unwrap();
        assert_ne!(r.selected_restart, 0);
        assert_eq!(r.failed_restarts.len(), 1);
        assert_eq!(r.failed_restarts[0].0, 0);

        let all_bad = train_with_init(&cfg, &data, &tc, &mut NoObserver, |_, rng| {
            let mut m = Model::new(cfg.clone(), &data.x, &data.y, rng)?;
            m.log_sigma_obs.fill(f64::NAN);
            Ok(m)
        });
        assert!(matches!(all_bad, Err(Error::AllRestartsFailed(3))));
    }

    #[test]
    fn config_validation() {
        let tc = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(tc.validate(10).is_err());
        let tc = TrainConfig {
            lr0: -1.0,
            batch_size: 5,
            ..TrainConfig::default()
        };
        assert!(tc.validate(10).is_err());
    }
}
