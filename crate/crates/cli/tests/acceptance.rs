//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line is printed even when an
//! earlier criterion fails or panics. Set `ACCEPTANCE_ONLY=1,5,9` to run a
//! subset. The process exits non-zero if any selected criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use dspp::autodiff::fd_check;
use dspp::config::RunConfig;
use dspp::data::Synthetic;
use dspp::gp_layer::{kl_to_prior, predict_marginal, CovKind, GpLayerState, MeanFunction};
use dspp::kernels::{KernelParams, Smoothness};
use dspp::metrics::{crps_mixture, log_density, nll};
use dspp::models::{forward_dspp, forward_with_sites, predict, Family, Model, ModelConfig, PredictiveMixture, Sites};
use dspp::objectives::{elbo_svgp, evaluate_spec, exact_log_marginal_likelihood, objective_dspp, objective_ppgpr, Batch, DataTerm, ObjectiveOptions, ObjectiveSpec};
use dspp::quadrature::{gauss_hermite_nodes, RuleKind};
use dspp_cli::{cmd_bench, cmd_eval, cmd_train, BenchArgs, EvalArgs, Part, TrainArgs};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Criterion 1: relative error bound and wall-clock budget.
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
/// Criterion 2: moment error bound, relative to `max(1, |exact moment|)`.
const GH_MOMENT_TOL: f64 = 1e-10;
/// Criterion 2: GH(3) nodes and weights, in units of machine epsilon.
const GH3_ULPS: f64 = 4.0;
/// Criterion 3.
const ELBO_SLACK: f64 = 1e-8;
const ELBO_STATES: usize = 50;
/// Criterion 4.
const REDUCTION_TOL: f64 = 1e-10;
const TRANSCRIPTION_TOL: f64 = 1e-12;
/// Criterion 5.
const CRPS_ORACLE_TOL: f64 = 1e-6;
const CRPS_STD_NORMAL: f64 = 0.23370;
const CRPS_STD_NORMAL_TOL: f64 = 1e-4;
/// Criteria 6 and 7.
const BENCH_SEEDS: [u64; 3] = [0, 1, 2];
const ORDERING_BUDGET: Duration = Duration::from_secs(15 * 60);
/// Criterion 8.
const M_DOUBLING_MAX_RATIO: f64 = 10.0;
const S_AFFINE_MAX_RESIDUAL: f64 = 0.2;
/// Criterion 10.
const LMC_TOL: f64 = 1e-8;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_spd(m: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let l = DMatrix::from_fn(m, m, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => 0.2 * normal(rng),
        std::cmp::Ordering::Equal => rng.random_range(0.2..0.6),
        std::cmp::Ordering::Less => 0.0,
    });
    &l * l.transpose()
}

fn perturb_gp(gp: &mut GpLayerState, rng: &mut impl Rng) {
    let m = gp.num_inducing();
    gp.var_mean = DVector::from_fn(m, |_, _| 0.7 * normal(rng));
    gp.cov.set_dense(&random_spd(m, rng)).unwrap();
    gp.kernel.log_lengthscales.iter_mut().for_each(|l| *l += 0.3 * normal(rng));
    gp.kernel.log_outputscale += 0.3 * normal(rng);
}

/// Moves every parameter away from its initialization so that no gradient
/// entry is structurally zero.
fn perturb_model(model: &mut Model, rng: &mut impl Rng) {
    for layer in &mut model.hidden {
        layer.gps.iter_mut().for_each(|gp| perturb_gp(gp, rng));
        if let Some(rule) = &mut layer.rule {
            if rule.kind.is_learnable() {
                rule.nodes.iter_mut().for_each(|v| *v += 0.1 * normal(rng));
                rule.logits.iter_mut().for_each(|v| *v += 0.5 * normal(rng));
            }
        }
    }
    model.output.iter_mut().for_each(|gp| perturb_gp(gp, rng));
    model.log_sigma_obs.iter_mut().for_each(|v| *v += 0.2 * normal(rng));
    if let Some(a) = &mut model.mixing {
        a.iter_mut().for_each(|v| *v += 0.3 * normal(rng));
    }
}

fn toy(n: usize, d: usize, dy: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
    let y = DMatrix::from_fn(n, dy, |i, j| (x.row(i).sum() + j as f64).sin() + 0.1 * normal(&mut rng));
    (x, y)
}

struct GradCase {
    family: Family,
    layers: usize,
    rule: RuleKind,
    cov: CovKind,
    topology: u8,
    lmc: bool,
}

fn grad_cases() -> Vec<GradCase> {
    let mut cases = Vec::new();
    let covs = [CovKind::Diag, CovKind::Full];
    let rules = [RuleKind::GaussHermite, RuleKind::Qr1, RuleKind::Qr2, RuleKind::Qr3];
    for cov in covs {
        for family in [Family::Svgp, Family::Ppgpr] {
            cases.push(GradCase { family, layers: 1, rule: RuleKind::Qr3, cov, topology: 1, lmc: false });
        }
        for family in [Family::Dgp, Family::Bpdgp] {
            cases.push(GradCase { family, layers: 2, rule: RuleKind::Qr3, cov, topology: 1, lmc: false });
            for topology in 1..=4 {
                cases.push(GradCase { family, layers: 3, rule: RuleKind::Qr3, cov, topology, lmc: false });
            }
        }
        cases.push(GradCase { family: Family::Dspp, layers: 1, rule: RuleKind::Qr3, cov, topology: 1, lmc: false });
        for (k, rule) in rules.into_iter().enumerate() {
            cases.push(GradCase { family: Family::Dspp, layers: 2, rule, cov, topology: 1, lmc: false });
            cases.push(GradCase { family: Family::Dspp, layers: 3, rule, cov, topology: k as u8 + 1, lmc: false });
        }
        cases.push(GradCase { family: Family::Dspp, layers: 2, rule: RuleKind::Qr3, cov, topology: 1, lmc: true });
        cases.push(GradCase { family: Family::Dgp, layers: 2, rule: RuleKind::Qr3, cov, topology: 1, lmc: true });
    }
    cases
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let cases = grad_cases();
    let mut worst = (0.0f64, String::new());
    let mut failures = Vec::new();
    for (k, c) in cases.iter().enumerate() {
        let d = 2 + k % 3;
        let dy = if c.lmc { 2 } else { 1 };
        let (x, y) = toy(16, d, dy, 100 + k as u64);
        let mut cfg = ModelConfig::new(c.family, d, dy);
        cfg.layers = c.layers;
        cfg.hidden_width = if c.layers == 3 { 2 } else { 3 };
        cfg.inducing = 6;
        cfg.covariance = c.cov;
        cfg.quadrature = c.rule;
        cfg.sites = 3;
        cfg.topology = c.topology;
        cfg.lmc = c.lmc;
        cfg.mc_samples_train = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let label = format!(
            "{}/L{}/{:?}/{:?}/t{}{}",
            c.family,
            c.layers,
            c.rule,
            c.cov,
            c.topology,
            if c.lmc { "/lmc" } else { "" }
        );
        let result = Model::new(cfg, &x, &y, &mut rng).and_then(|mut m| {
            perturb_model(&mut m, &mut rng);
            let rows: Vec<usize> = (0..6).collect();
            let batch = Batch::new(x.clone(), y.clone())?.select(&rows);
            fd_check(&m, &batch, &ObjectiveOptions::new(16, m.config.family.default_beta(), k as u64), None)
        });
        match result {
            Ok(r) => {
                if r.max_rel_err > worst.0 {
                    worst = (r.max_rel_err, format!("{label} at {}", r.worst_param));
                }
                if !(r.max_rel_err < GRAD_REL_TOL) {
                    failures.push(format!("{label}: {:.2e} at {}", r.max_rel_err, r.worst_param));
                }
            }
            Err(e) => failures.push(format!("{label}: {e}")),
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed <= GRAD_BUDGET;
    outcome(
        pass,
        format!(
            "{} configurations, worst rel err {:.2e} ({}), {:.1}s{}",
            cases.len(),
            worst.0,
            worst.1,
            elapsed.as_secs_f64(),
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(", ")) }
        ),
    )
}

/// Neumaier-compensated sum.
fn compensated_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

fn double_factorial(k: i64) -> f64 {
    (1..=k).rev().step_by(2).map(|v| v as f64).product()
}

fn criterion_2() -> Outcome {
    let mut worst_rel = 0.0f64;
    let mut worst_abs = 0.0f64;
    let mut at = (0, 0);
    for s in 1..=10usize {
        let (x, w) = gauss_hermite_nodes(s).unwrap();
        for k in 0..2 * s {
            let got = compensated_sum((0..s).map(|i| w[i] * x[i].powi(k as i32)));
            let exact = if k % 2 == 1 { 0.0 } else { double_factorial(k as i64 - 1) };
            let abs = (got - exact).abs();
            let rel = abs / exact.abs().max(1.0);
            worst_abs = worst_abs.max(abs);
            if rel > worst_rel {
                worst_rel = rel;
                at = (s, k);
            }
        }
    }
    let (x3, w3) = gauss_hermite_nodes(3).unwrap();
    let r3 = 3f64.sqrt();
    let ulps = |got: f64, want: f64| (got - want).abs() / (f64::EPSILON * want.abs().max(1.0));
    let gh3 = [ulps(x3[0], -r3), ulps(x3[1], 0.0), ulps(x3[2], r3), ulps(w3[0], 1.0 / 6.0), ulps(w3[1], 2.0 / 3.0), ulps(w3[2], 1.0 / 6.0)]
        .into_iter()
        .fold(0.0f64, f64::max);
    outcome(
        worst_rel <= GH_MOMENT_TOL && gh3 <= GH3_ULPS,
        format!(
            "S=1..10, degree<=2S-1: worst error {worst_rel:.2e} relative to max(1,|moment|) at S={} k={} (worst absolute {worst_abs:.2e}); GH(3) within {gh3:.1} ulp",
            at.0, at.1
        ),
    )
}

fn criterion_3() -> Outcome {
    let n = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: DMatrix<f64> = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-3.0..3.0));
    let y = DMatrix::from_fn(n, 1, |i, _| x[(i, 0)].sin() + 0.3 * normal(&mut rng));
    let batch = Batch::new(x.clone(), y.clone()).unwrap();
    let mut max_gap = f64::NEG_INFINITY;
    let mut violations = 0;
    for state in 0..ELBO_STATES {
        let m = 3 + state % 10;
        let nu = [Smoothness::Half, Smoothness::ThreeHalves, Smoothness::FiveHalves][state % 3];
        let mut cfg = ModelConfig::new(Family::Svgp, 1, 1);
        cfg.inducing = m;
        cfg.smoothness = nu;
        cfg.covariance = if state % 2 == 0 { CovKind::Full } else { CovKind::Diag };
        let mut model = Model::skeleton(cfg).unwrap();
        let sigma: f64 = rng.random_range(0.1..1.0);
        let mean = 0.5 * normal(&mut rng);
        let kernel = KernelParams::new(&[rng.random_range(0.3..2.0)], rng.random_range(0.3..2.0), nu).unwrap();
        model.log_sigma_obs[0] = sigma.ln();
        let gp = &mut model.output[0];
        gp.inducing = DMatrix::from_fn(m, 1, |_, _| rng.random_range(-3.0..3.0));
        gp.kernel = kernel.clone();
        gp.mean_fn = MeanFunction::Constant(mean);
        gp.var_mean = DVector::from_fn(m, |_, _| normal(&mut rng));
        gp.cov.set_dense(&random_spd(m, &mut rng)).unwrap();
        let elbo = elbo_svgp(&model, &batch, n).unwrap().total;
        let exact = exact_log_marginal_likelihood(&kernel, mean, sigma, &x, y.as_slice()).unwrap();
        let gap = elbo - exact;
        max_gap = max_gap.max(gap);
        if gap > ELBO_SLACK {
            violations += 1;
        }
    }
    outcome(
        violations == 0,
        format!("{ELBO_STATES} random states, max(ELBO - log p(y)) = {max_gap:.3e}, {violations} above +{ELBO_SLACK:e}"),
    )
}

fn hidden_means(model: &Model, x: &DMatrix<f64>) -> DMatrix<f64> {
    let w = model.config.hidden_width;
    DMatrix::from_fn(x.nrows(), w, |i, k| predict_marginal(&model.hidden[0].gps[k], &x.rows(i, 1).into_owned()).unwrap().mu[0])
}

fn literal_qr1_error(model: &Model, x: &DMatrix<f64>) -> f64 {
    let rule = model.hidden[0].rule.as_ref().unwrap();
    let lse = rule.logits.iter().map(|l| l.exp()).sum::<f64>().ln();
    let obs = model.log_sigma_obs[0].exp().powi(2);
    let mixes = forward_dspp(model, x).unwrap();
    let mut err = 0.0f64;
    for (i, mix) in mixes.iter().enumerate() {
        if mix.num_components() != 9 {
            return f64::INFINITY;
        }
        let xi = x.rows(i, 1).into_owned();
        let h: Vec<_> = (0..2).map(|w| predict_marginal(&model.hidden[0].gps[w], &xi).unwrap()).collect();
        for s1 in 0..3 {
            for s2 in 0..3 {
                let c = 3 * s1 + s2;
                let f1 = h[0].mu[0] + rule.nodes[(s1, 0)] * h[0].var[0].sqrt();
                let f2 = h[1].mu[0] + rule.nodes[(s2, 1)] * h[1].var[0].sqrt();
                let out = predict_marginal(&model.output[0], &DMatrix::from_row_slice(1, 2, &[f1, f2])).unwrap();
                err = err
                    .max((mix.weights[c] - (rule.logits[c] - lse).exp()).abs())
                    .max((mix.means[(c, 0)] - out.mu[0]).abs())
                    .max((mix.variances[(c, 0)] - out.var[0] - obs).abs());
            }
        }
    }
    err
}

fn criterion_4() -> Outcome {
    let (x, y) = toy(12, 2, 1, 4);
    let batch = Batch::new(x.clone(), y.clone()).unwrap();
    let beta = 0.2;

    let mut cfg = ModelConfig::new(Family::Dspp, 2, 1);
    cfg.hidden_width = 2;
    cfg.inducing = 5;
    cfg.sites = 1;
    cfg.quadrature = RuleKind::Qr3;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut dspp = Model::new(cfg, &x, &y, &mut rng).unwrap();
    perturb_model(&mut dspp, &mut rng);
    dspp.hidden[0].rule.as_mut().unwrap().nodes.fill(0.0);

    let mut pcfg = ModelConfig::new(Family::Ppgpr, 2, 1);
    pcfg.inducing = 5;
    pcfg.covariance = dspp.config.covariance;
    let mut ppgpr = Model::skeleton(pcfg).unwrap();
    ppgpr.output[0] = dspp.output[0].clone();
    ppgpr.log_sigma_obs = dspp.log_sigma_obs.clone();
    let composed = Batch::new(hidden_means(&dspp, &x), y.clone()).unwrap();
    let hidden_kl: f64 = dspp.hidden[0].gps.iter().map(|g| kl_to_prior(g).unwrap()).sum();
    let reduced = objective_ppgpr(&ppgpr, &composed, 12, beta).unwrap().total - beta * hidden_kl;
    let a = (objective_dspp(&dspp, &batch, 12, beta).unwrap().total - reduced).abs();

    let mut dgp = dspp.clone();
    dgp.config.family = Family::Dgp;
    dgp.hidden[0].rule = None;
    let spec = ObjectiveSpec {
        data: DataTerm::Predictive,
        sites: Sites::zero_noise(&dgp, 4, 12),
        n_total: 12,
        beta,
    };
    let b_obj = (evaluate_spec(&dgp, &batch, &spec).unwrap().total - reduced).abs();
    let dgp_mix = forward_with_sites(&dgp, &x, &Sites::zero_noise(&dgp, 4, 12)).unwrap();
    let ppgpr_mix = forward_with_sites(&ppgpr, &composed.x, &Sites::Rules).unwrap();
    let b_mix = (0..12)
        .map(|i| (log_density(&dgp_mix[i], &[y[(i, 0)]]) - log_density(&ppgpr_mix[i], &[y[(i, 0)]])).abs())
        .fold(0.0f64, f64::max);
    let b = b_obj.max(b_mix);

    let mut qcfg = ModelConfig::new(Family::Dspp, 2, 1);
    qcfg.hidden_width = 2;
    qcfg.inducing = 5;
    qcfg.sites = 3;
    qcfg.quadrature = RuleKind::Qr1;
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut qr1 = Model::new(qcfg, &x, &y, &mut rng).unwrap();
    perturb_model(&mut qr1, &mut rng);
    let c = literal_qr1_error(&qr1, &x);

    outcome(
        a <= REDUCTION_TOL && b <= REDUCTION_TOL && c <= TRANSCRIPTION_TOL,
        format!("(a) DSPP S=1 vs composed PPGPR {a:.1e}; (b) zero-noise DGP {b:.1e}; (c) QR1 W=2 S=3 vs literal 9-term mixture {c:.1e}"),
    )
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// `int (F(z) - 1{z >= y})^2 dz` by composite Simpson on either side of `y`.
fn crps_by_integration(m: &PredictiveMixture, y: f64) -> f64 {
    let cdf = |z: f64| -> f64 {
        (0..m.num_components())
            .map(|k| m.weights[k] * std_normal_cdf((z - m.means[(k, 0)]) / m.variances[(k, 0)].sqrt()))
            .sum()
    };
    let spread = m.variances.iter().fold(0.0f64, |a, v| a.max(v.sqrt()));
    let lo = m.means.min().min(y) - 12.0 * spread;
    let hi = m.means.max().max(y) + 12.0 * spread;
    let simpson = |a: f64, b: f64, f: &dyn Fn(f64) -> f64| {
        let n = 40_000;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
        }
        s * h / 3.0
    };
    simpson(lo, y, &|z| cdf(z).powi(2)) + simpson(y, hi, &|z| (1.0 - cdf(z)).powi(2))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(1..=5);
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mix = PredictiveMixture {
            weights: DVector::from_iterator(k, raw.iter().map(|w| w / total)),
            means: DMatrix::from_fn(k, 1, |_, _| 2.0 * normal(&mut rng)),
            variances: DMatrix::from_fn(k, 1, |_, _| rng.random_range(0.1f64..2.0).powi(2)),
        };
        let y = 3.0 * normal(&mut rng);
        worst = worst.max((crps_mixture(&mix, y) - crps_by_integration(&mix, y)).abs());
    }
    let unit = PredictiveMixture {
        weights: DVector::from_element(1, 1.0),
        means: DMatrix::zeros(1, 1),
        variances: DMatrix::from_element(1, 1, 1.0),
    };
    let c0 = crps_mixture(&unit, 0.0);
    outcome(
        worst <= CRPS_ORACLE_TOL && (c0 - CRPS_STD_NORMAL).abs() <= CRPS_STD_NORMAL_TOL,
        format!("100 random mixtures, max |closed form - integral| = {worst:.2e}; CRPS(N(0,1), 0) = {c0:.6}"),
    )
}

/// Desk-scale benchmark shared by criteria 6 and 7: heteroscedastic 1-D
/// sine, N = 2000, 15:3:2 split, M = 32, W = 3.
fn bench_config(family: Family, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::new(family);
    cfg.model.inducing = Some(32);
    cfg.model.hidden_width = Some(3);
    cfg.train.epochs = 150;
    cfg.train.batch_size = 250;
    cfg.train.seed = seed;
    cfg.data.synthetic = Some(Synthetic::Sin);
    cfg.data.n = Some(2000);
    cfg.data.split_seed = seed;
    cfg
}

fn mean_test_nll(family: Family, root: &Path) -> Vec<f64> {
    BENCH_SEEDS
        .iter()
        .map(|&seed| {
            let out = root.join(format!("{family}-{seed}"));
            let run = cmd_train(TrainArgs {
                config: bench_config(family, seed),
                out_dir: out,
                checkpoint_every: None,
            })
            .unwrap();
            cmd_eval(&EvalArgs {
                checkpoint: run.checkpoint,
                part: Part::Test,
                results: Some(root.join("results.csv")),
                seed: None,
            })
            .unwrap()
            .nll
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_nlls(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

struct Ordering {
    dspp: Vec<f64>,
    dgp: Vec<f64>,
    svgp: Vec<f64>,
    elapsed: Duration,
}

fn run_ordering(root: &Path) -> Ordering {
    let start = Instant::now();
    let dspp = mean_test_nll(Family::Dspp, root);
    let dgp = mean_test_nll(Family::Dgp, root);
    let svgp = mean_test_nll(Family::Svgp, root);
    Ordering {
        dspp,
        dgp,
        svgp,
        elapsed: start.elapsed(),
    }
}

fn criterion_6(o: &Ordering) -> Outcome {
    let (a, b, c) = (mean(&o.dspp), mean(&o.dgp), mean(&o.svgp));
    outcome(
        a <= b && a <= c && o.elapsed <= ORDERING_BUDGET,
        format!(
            "mean test NLL over seeds {BENCH_SEEDS:?}: DSPP {a:.4} ({}), DGP {b:.4} ({}), SVGP {c:.4} ({}); {:.0}s",
            fmt_nlls(&o.dspp),
            fmt_nlls(&o.dgp),
            fmt_nlls(&o.svgp),
            o.elapsed.as_secs_f64()
        ),
    )
}

fn criterion_7(dspp: &[f64], root: &Path) -> Outcome {
    let bpdgp = mean_test_nll(Family::Bpdgp, root);
    let (a, b) = (mean(dspp), mean(&bpdgp));
    outcome(
        a <= b,
        format!("mean test NLL: DSPP (QR3, S=10) {a:.4} ({}), BPDGP (32 samples) {b:.4} ({})", fmt_nlls(dspp), fmt_nlls(&bpdgp)),
    )
}

fn criterion_8() -> Outcome {
    let base = BenchArgs {
        inducing: vec![128, 256],
        sites: vec![8],
        batch: vec![256],
        width: 3,
        reps: 5,
        seed: 8,
    };
    let m = cmd_bench(&base).unwrap();
    let ratio = m[1].seconds / m[0].seconds;
    let s_grid = [1usize, 4, 8, 16];
    let s = cmd_bench(&BenchArgs {
        inducing: vec![128],
        sites: s_grid.to_vec(),
        ..base
    })
    .unwrap();
    let xs: Vec<f64> = s_grid.iter().map(|&v| v as f64).collect();
    let ts: Vec<f64> = s.iter().map(|r| r.seconds).collect();
    let (mx, mt) = (mean(&xs), mean(&ts));
    let slope = xs.iter().zip(&ts).map(|(x, t)| (x - mx) * (t - mt)).sum::<f64>() / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let intercept = mt - slope * mx;
    let resid = xs.iter().zip(&ts).map(|(x, t)| ((t - intercept - slope * x) / t).abs()).fold(0.0f64, f64::max);
    outcome(
        ratio <= M_DOUBLING_MAX_RATIO && resid <= S_AFFINE_MAX_RESIDUAL,
        format!(
            "t(M=256)/t(M=128) = {ratio:.2} (W=3, S=8, B=256); S in {s_grid:?} at M=128: t = {intercept:.4}s + {slope:.5}s*S, max residual {:.1}%",
            100.0 * resid
        ),
    )
}

fn criterion_9(root: &Path) -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for family in [Family::Dspp, Family::Dgp] {
        let mut cfg = RunConfig::new(family);
        cfg.model.inducing = Some(12);
        cfg.model.hidden_width = Some(2);
        cfg.train.epochs = 6;
        cfg.train.batch_size = 32;
        cfg.train.restarts = 2;
        cfg.train.seed = 9;
        cfg.data.synthetic = Some(Synthetic::Sin);
        cfg.data.n = Some(200);
        let bytes: Vec<Vec<u8>> = ["a", "b"]
            .iter()
            .map(|tag| {
                let out = root.join(format!("det-{family}-{tag}"));
                let run = cmd_train(TrainArgs {
                    config: cfg.clone(),
                    out_dir: out,
                    checkpoint_every: None,
                })
                .unwrap();
                std::fs::read(run.checkpoint).unwrap()
            })
            .collect();
        let same = bytes[0] == bytes[1];
        pass &= same;
        details.push(format!("{family}: {} bytes {}", bytes[0].len(), if same { "identical" } else { "DIFFER" }));
    }
    outcome(pass, details.join("; "))
}

/// Univariate model built from output head `d` of an LMC model.
fn head(model: &Model, d: usize) -> Model {
    let mut m = model.clone();
    m.config.output_dim = 1;
    m.config.lmc = false;
    m.mixing = None;
    m.output = vec![model.output[d].clone()];
    m.log_sigma_obs = DVector::from_element(1, model.log_sigma_obs[d]);
    m
}

fn criterion_10() -> Outcome {
    let (x, y) = toy(10, 2, 2, 10);
    let mut worst = 0.0f64;
    let mut labels = Vec::new();
    for (family, layers) in [(Family::Svgp, 1), (Family::Dspp, 2)] {
        let mut cfg = ModelConfig::new(family, 2, 2);
        cfg.layers = layers;
        cfg.hidden_width = 2;
        cfg.inducing = 4;
        cfg.sites = 3;
        cfg.lmc = true;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut model = Model::new(cfg, &x, &y, &mut rng).unwrap();
        perturb_model(&mut model, &mut rng);
        model.mixing = Some(DMatrix::identity(2, 2));
        let joint = predict(&model, &x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for d in 0..2 {
            let single = predict(&head(&model, d), &x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            for i in 0..x.nrows() {
                let a = nll(&joint[i].marginal(d), &[y[(i, d)]], &[1.0]);
                let b = nll(&single[i], &[y[(i, d)]], &[1.0]);
                worst = worst.max((a - b).abs());
            }
        }
        labels.push(format!("{family} L{layers}"));
    }
    outcome(
        worst <= LMC_TOL,
        format!("A = I, diagonal noise ({}): max per-dimension NLL difference {worst:.2e}", labels.join(", ")),
    )
}

fn selected() -> Option<Vec<usize>> {
    std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect())
}

fn report(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        outcome(false, format!("panicked: {msg}"))
    });
    println!(
        "criterion {id:>2} [{}] {name}: {} ({:.1}s)",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        start.elapsed().as_secs_f64()
    );
    o.pass
}

fn main() {
    // Swallow the default panic message; `report` prints its own line.
    std::panic::set_hook(Box::new(|_| {}));
    let only = selected();
    let want = |id: usize| only.as_ref().is_none_or(|v| v.contains(&id));
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut failed = Vec::new();
    let mut run = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if want(id) && !report(id, name, f) {
            failed.push(id);
        }
    };
    run(1, "gradient correctness", &mut criterion_1);
    run(2, "quadrature exactness", &mut criterion_2);
    run(3, "ELBO bound", &mut criterion_3);
    run(4, "reductions", &mut criterion_4);
    run(5, "CRPS", &mut criterion_5);

    let ordering = if want(6) || want(7) {
        catch_unwind(AssertUnwindSafe(|| run_ordering(tmp.path()))).ok()
    } else {
        None
    };
    run(6, "qualitative ordering", &mut || match &ordering {
        Some(o) => criterion_6(o),
        None => outcome(false, "training runs panicked"),
    });
    run(7, "BPDGP ablation direction", &mut || match &ordering {
        Some(o) => criterion_7(&o.dspp, tmp.path()),
        None => outcome(false, "training runs panicked"),
    });
    run(8, "complexity scaling", &mut criterion_8);
    run(9, "determinism", &mut || criterion_9(tmp.path()));
    run(10, "LMC sanity", &mut criterion_10);

    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
