//! Model families built from GP layers and quadrature rules.
//!
//! Every family shares one forward pass. Hidden layers turn each input row
//! into a set of weighted *pathways*: the per-dimension Gaussian marginals of
//! the layer are expanded either with a quadrature rule (DSPP) or with
//! reparameterized noise (DGP, BPDGP). The output layer is then evaluated
//! on every pathway, giving a finite Gaussian mixture per input.
//!
//! Pathway features are stored as `(P * B) x W` matrices whose row
//! `p * B + i` holds pathway `p` of batch row `i`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BlockMap, Bound, ParamBlock, ParamVector, Tape, Var};
use crate::error::{Error, Result};
use crate::gp_layer::{CovKind, GpLayerState, MeanFunction};
use crate::kernels::{KernelParams, Smoothness};
use crate::quadrature::{QuadratureRule, RuleKind};

/// Initial observation noise standard deviation on standardized targets.
pub const INIT_SIGMA_OBS: f64 = 0.5;

/// Rows evaluated per tape when predicting on large inputs.
const PREDICT_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Svgp,
    Ppgpr,
    Dgp,
    Dspp,
    Bpdgp,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Svgp, Family::Ppgpr, Family::Dgp, Family::Dspp, Family::Bpdgp];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Svgp => "svgp",
            Family::Ppgpr => "ppgpr",
            Family::Dgp => "dgp",
            Family::Dspp => "dspp",
            Family::Bpdgp => "bpdgp",
        }
    }

    /// Families restricted to a single GP layer.
    pub fn single_layer(self) -> bool {
        matches!(self, Family::Svgp | Family::Ppgpr)
    }

    /// Hidden layers are expanded with Monte Carlo noise rather than a rule.
    pub fn sampled(self) -> bool {
        matches!(self, Family::Dgp | Family::Bpdgp)
    }

    /// Trained on the log of the predictive mixture rather than an ELBO.
    pub fn predictive_objective(self) -> bool {
        matches!(self, Family::Ppgpr | Family::Dspp | Family::Bpdgp)
    }

    pub fn default_covariance(self) -> CovKind {
        match self {
            Family::Svgp | Family::Dgp => CovKind::Full,
            Family::Ppgpr | Family::Dspp | Family::Bpdgp => CovKind::Diag,
        }
    }

    pub fn default_beta(self) -> f64 {
        match self {
            Family::Svgp | Family::Dgp => 1.0,
            Family::Ppgpr | Family::Dspp | Family::Bpdgp => 0.2,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown model family `{s}`")))
    }
}

/// Which signals feed the second hidden layer of a 3-layer model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wire {
    /// Outputs of the first hidden layer.
    Features,
    /// The raw inputs `x`.
    Inputs,
    /// `concat(features, x)`.
    Both,
}

/// `(mean-function wire, kernel wire)` of a topology id in `1..=4`.
pub fn topology_wires(topology: u8) -> Result<(Wire, Wire)> {
    match topology {
        1 => Ok((Wire::Features, Wire::Features)),
        2 => Ok((Wire::Inputs, Wire::Features)),
        3 => Ok((Wire::Both, Wire::Features)),
        4 => Ok((Wire::Both, Wire::Both)),
        t => Err(Error::InvalidConfig(format!("topology must be in 1..=4, got {t}"))),
    }
}

fn wire_dim(w: Wire, features: usize, inputs: usize) -> usize {
    match w {
        Wire::Features => features,
        Wire::Inputs => inputs,
        Wire::Both => features + inputs,
    }
}

fn wire_value(w: Wire, features: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    match w {
        Wire::Features => features.clone(),
        Wire::Inputs => x.clone(),
        Wire::Both => {
            let mut out = DMatrix::zeros(x.nrows(), features.ncols() + x.ncols());
            out.columns_mut(0, features.ncols()).copy_from(features);
            out.columns_mut(features.ncols(), x.ncols()).copy_from(x);
            out
        }
    }
}

fn wire_var<'t>(w: Wire, features: Var<'t>, x: Var<'t>) -> Var<'t> {
    match w {
        Wire::Features => features,
        Wire::Inputs => x,
        Wire::Both => features.hconcat(x),
    }
}

/// Inputs of the second hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerInputs {
    pub mean: DMatrix<f64>,
    pub kernel: DMatrix<f64>,
}

/// Routes first-layer outputs and raw inputs to the second hidden layer.
pub fn wire_topology(topology: u8, layer1_out: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<LayerInputs> {
    if layer1_out.nrows() != x.nrows() {
        return Err(Error::DimensionMismatch {
            context: "wire_topology rows",
            expected: x.nrows(),
            got: layer1_out.nrows(),
        });
    }
    let (m, k) = topology_wires(topology)?;
    Ok(LayerInputs {
        mean: wire_value(m, layer1_out, x),
        kernel: wire_value(k, layer1_out, x),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    /// Total GP layers including the output layer.
    pub layers: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Width `W` of every hidden layer.
    pub hidden_width: usize,
    /// Inducing points per GP.
    pub inducing: usize,
    pub smoothness: Smoothness,
    pub covariance: CovKind,
    pub quadrature: RuleKind,
    /// Sites per dimension (grid rules) or in total (QR3).
    pub sites: usize,
    pub mc_samples_train: usize,
    pub mc_samples_eval: usize,
    /// Second-layer wiring for 3-layer models.
    pub topology: u8,
    /// Mix the output GPs with a learned `W' x D_Y` matrix.
    pub lmc: bool,
}

impl ModelConfig {
    /// Defaults: 2 layers for deep families, `W = 3`, `M = 300`, QR3 with
    /// `S = 10`, 32 evaluation samples, and 10 training samples for DGP or
    /// 32 for BPDGP.
    pub fn new(family: Family, input_dim: usize, output_dim: usize) -> Self {
        Self {
            family,
            layers: if family.single_layer() { 1 } else { 2 },
            input_dim,
            output_dim,
            hidden_width: 3,
            inducing: 300,
            smoothness: Smoothness::FiveHalves,
            covariance: family.default_covariance(),
            quadrature: RuleKind::Qr3,
            sites: 10,
            mc_samples_train: if family == Family::Bpdgp { 32 } else { 10 },
            mc_samples_eval: 32,
            topology: 1,
            lmc: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.family.single_layer() && self.layers != 1 {
            return bad(format!("{} models have exactly one layer", self.family));
        }
        if !(1..=3).contains(&self.layers) {
            return bad(format!("layers must be in 1..=3, got {}", self.layers));
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return bad("input and output dimensions must be positive".into());
        }
        if self.hidden_width == 0 || self.inducing == 0 {
            return bad("hidden width and inducing count must be positive".into());
        }
        if self.sites == 0 || self.mc_samples_train == 0 || self.mc_samples_eval == 0 {
            return bad("sites and sample counts must be positive".into());
        }
        if self.layers == 3 {
            topology_wires(self.topology)?;
        } else if self.topology != 1 {
            return bad("topology applies only to 3-layer models".into());
        }
        if self.family == Family::Dspp && self.layers > 1 {
            if self.sites > crate::quadrature::MAX_ORDER {
                return Err(Error::QuadratureOrder(self.sites));
            }
            if self.layers == 3 && self.quadrature.is_grid() && self.sites.pow(2 * self.hidden_width as u32) > 1 << 16 {
                return bad("grid quadrature over two hidden layers is too large".into());
            }
        }
        Ok(())
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers - 1
    }

    /// `(mean input dim, kernel input dim)` of hidden layer `l` (0-based).
    fn hidden_dims(&self, l: usize) -> (usize, usize) {
        if l == 0 {
            return (self.input_dim, self.input_dim);
        }
        let (m, k) = topology_wires(self.topology).unwrap_or((Wire::Features, Wire::Features));
        (
            wire_dim(m, self.hidden_width, self.input_dim),
            wire_dim(k, self.hidden_width, self.input_dim),
        )
    }

    fn output_input_dim(&self) -> usize {
        if self.layers == 1 {
            self.input_dim
        } else {
            self.hidden_width
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenLayer {
    pub gps: Vec<GpLayerState>,
    /// Present for DSPP only.
    pub rule: Option<QuadratureRule>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub hidden: Vec<HiddenLayer>,
    /// One GP per output head (`W' = D_Y`).
    pub output: Vec<GpLayerState>,
    pub log_sigma_obs: DVector<f64>,
    /// `W' x D_Y` coefficients when `config.lmc`.
    pub mixing: Option<DMatrix<f64>>,
}

/// Finite Gaussian mixture predicted for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveMixture {
    pub weights: DVector<f64>,
    /// `K x D_Y` component means.
    pub means: DMatrix<f64>,
    /// `K x D_Y` component variances, observation noise included.
    pub variances: DMatrix<f64>,
}

impl PredictiveMixture {
    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn output_dim(&self) -> usize {
        self.means.ncols()
    }

    /// Univariate marginal for output dimension `d`.
    pub fn marginal(&self, d: usize) -> PredictiveMixture {
        PredictiveMixture {
            weights: self.weights.clone(),
            means: self.means.columns(d, 1).into_owned(),
            variances: self.variances.columns(d, 1).into_owned(),
        }
    }
}

fn layer_name(l: usize) -> String {
    format!("layer{}", l + 1)
}

fn gp_name(l: usize, w: usize) -> String {
    format!("layer{}.gp{}", l + 1, w + 1)
}

const SIGMA_OBS_NAME: &str = "likelihood.log_sigma_obs";
const MIXING_NAME: &str = "lmc.mixing";

impl Model {
    /// Initialized model. Inducing points come from k-means on the inputs
    /// of each layer, evaluated at the mean pass of the layers below.
    /// Output-layer constant means start at the per-column mean of `y`.
    pub fn new(config: ModelConfig, x: &DMatrix<f64>, y: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        if x.ncols() != config.input_dim {
            return Err(Error::DimensionMismatch {
                context: "model inputs",
                expected: config.input_dim,
                got: x.ncols(),
            });
        }
        if y.ncols() != config.output_dim || y.nrows() != x.nrows() {
            return Err(Error::DimensionMismatch {
                context: "model targets",
                expected: config.output_dim,
                got: y.ncols(),
            });
        }
        let cov = config.covariance;
        let mut hidden = Vec::with_capacity(config.hidden_layers());
        let mut features: Option<DMatrix<f64>> = None;
        for l in 0..config.hidden_layers() {
            let (mean_in, kernel_in) = match &features {
                None => (x.clone(), x.clone()),
                Some(f) => {
                    let w = wire_topology(if config.layers == 3 { config.topology } else { 1 }, f, x)?;
                    (w.mean, w.kernel)
                }
            };
            let z = crate::training::kmeans_init(&kernel_in, config.inducing, rng)?;
            let (md, kd) = config.hidden_dims(l);
            let scale = 1.0 / (md as f64).sqrt();
            let normal = Normal::new(0.0, scale).expect("valid normal");
            let mut gps = Vec::with_capacity(config.hidden_width);
            for _ in 0..config.hidden_width {
                let mean_fn = MeanFunction::Linear {
                    weights: DVector::from_fn(md, |_, _| normal.sample(rng)),
                    bias: 0.0,
                };
                gps.push(GpLayerState::new(z.clone(), KernelParams::unit(kd, config.smoothness), mean_fn, cov)?);
            }
            let rule = if config.family == Family::Dspp {
                Some(QuadratureRule::new(config.quadrature, config.sites, config.hidden_width, rng)?)
            } else {
                None
            };
            // With m = 0 the layer mean is exactly its mean function.
            let out = DMatrix::from_fn(x.nrows(), config.hidden_width, |i, w| {
                let row: Vec<f64> = mean_in.row(i).iter().copied().collect();
                gps[w].mean_fn.eval(&row)
            });
            features = Some(out);
            hidden.push(HiddenLayer { gps, rule });
        }
        let out_in = features.unwrap_or_else(|| x.clone());
        let z = crate::training::kmeans_init(&out_in, config.inducing, rng)?;
        let output = (0..config.output_dim)
            .map(|d| {
                let c = y.column(d).mean();
                GpLayerState::new(
                    z.clone(),
                    KernelParams::unit(config.output_input_dim(), config.smoothness),
                    MeanFunction::Constant(c),
                    cov,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            log_sigma_obs: DVector::from_element(config.output_dim, INIT_SIGMA_OBS.ln()),
            mixing: config.lmc.then(|| DMatrix::identity(config.output_dim, config.output_dim)),
            config,
            hidden,
            output,
        })
    }

    /// Model with the shapes implied by `config` and placeholder values,
    /// ready for [`Model::load_blocks`].
    pub fn skeleton(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = config.inducing;
        let cov = config.covariance;
        let mut hidden = Vec::new();
        for l in 0..config.hidden_layers() {
            let (md, kd) = config.hidden_dims(l);
            let gps = (0..config.hidden_width)
                .map(|_| {
                    GpLayerState::new(
                        DMatrix::zeros(m, kd),
                        KernelParams::unit(kd, config.smoothness),
                        MeanFunction::Linear {
                            weights: DVector::zeros(md),
                            bias: 0.0,
                        },
                        cov,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let rule = if config.family == Family::Dspp {
                Some(QuadratureRule::new(config.quadrature, config.sites, config.hidden_width, &mut rng)?)
            } else {
                None
            };
            hidden.push(HiddenLayer { gps, rule });
        }
        let od = config.output_input_dim();
        let output = (0..config.output_dim)
            .map(|_| GpLayerState::new(DMatrix::zeros(m, od), KernelParams::unit(od, config.smoothness), MeanFunction::Constant(0.0), cov))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            log_sigma_obs: DVector::from_element(config.output_dim, INIT_SIGMA_OBS.ln()),
            mixing: config.lmc.then(|| DMatrix::identity(config.output_dim, config.output_dim)),
            config,
            hidden,
            output,
        })
    }

    /// Every trainable block in a fixed order.
    pub fn blocks(&self) -> Vec<ParamBlock> {
        let mut out = Vec::new();
        for (l, layer) in self.hidden.iter().enumerate() {
            for (w, gp) in layer.gps.iter().enumerate() {
                out.extend(gp.blocks(&gp_name(l, w)));
            }
            if let Some(rule) = &layer.rule {
                out.extend(rule.blocks(&format!("{}.quad", layer_name(l))));
            }
        }
        let top = self.hidden.len();
        for (w, gp) in self.output.iter().enumerate() {
            out.extend(gp.blocks(&gp_name(top, w)));
        }
        out.push(ParamBlock::dense(
            SIGMA_OBS_NAME,
            DMatrix::from_column_slice(self.log_sigma_obs.len(), 1, self.log_sigma_obs.as_slice()),
        ));
        if let Some(a) = &self.mixing {
            out.push(ParamBlock::dense(MIXING_NAME, a.clone()));
        }
        out
    }

    /// Replaces every parameter; names and shapes must match exactly.
    pub fn load_blocks(&mut self, blocks: Vec<ParamBlock>) -> Result<()> {
        let mut map = BlockMap::new(blocks);
        for (l, layer) in self.hidden.iter_mut().enumerate() {
            for (w, gp) in layer.gps.iter_mut().enumerate() {
                gp.load_blocks(&gp_name(l, w), &mut map)?;
            }
            if let Some(rule) = &mut layer.rule {
                rule.load_blocks(&format!("{}.quad", layer_name(l)), &mut map)?;
            }
        }
        let top = self.hidden.len();
        for (w, gp) in self.output.iter_mut().enumerate() {
            gp.load_blocks(&gp_name(top, w), &mut map)?;
        }
        let d = self.log_sigma_obs.len();
        self.log_sigma_obs = map.take(SIGMA_OBS_NAME, (d, 1))?.column(0).into_owned();
        if let Some(a) = &mut self.mixing {
            *a = map.take(MIXING_NAME, a.shape())?;
        }
        map.finish()
    }

    pub fn params(&self) -> ParamVector {
        ParamVector::flatten(&self.blocks())
    }

    pub fn set_params(&mut self, params: &ParamVector) -> Result<()> {
        self.load_blocks(params.unflatten())
    }

    /// Copy of `self` with parameters replaced by `params`.
    pub fn with_params(&self, params: &ParamVector) -> Result<Self> {
        let mut m = self.clone();
        m.set_params(params)?;
        Ok(m)
    }

    pub fn sigma_obs(&self) -> DVector<f64> {
        self.log_sigma_obs.map(f64::exp)
    }

    /// Every GP in layer order.
    pub fn gps(&self) -> impl Iterator<Item = &GpLayerState> {
        self.hidden.iter().flat_map(|l| l.gps.iter()).chain(self.output.iter())
    }

    fn check_inputs(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                context: "model inputs",
                expected: self.config.input_dim,
                got: x.ncols(),
            });
        }
        Ok(())
    }
}

/// How hidden-layer marginals are expanded into pathways.
#[derive(Clone, Debug)]
pub enum Sites {
    /// Each hidden layer's quadrature rule.
    Rules,
    /// `n` pathways with fixed standard-normal draws, one `(n * B) x W`
    /// matrix per hidden layer. Pathway weights are `1 / n`.
    Noise { samples: usize, eps: Vec<DMatrix<f64>> },
}

impl Sites {
    pub fn sampled(model: &Model, samples: usize, batch: usize, rng: &mut impl Rng) -> Self {
        let w = model.config.hidden_width;
        let eps = (0..model.hidden.len())
            .map(|_| DMatrix::from_fn(samples * batch, w, |_, _| rng.sample(StandardNormal)))
            .collect();
        Sites::Noise { samples, eps }
    }

    /// Noise fixed at zero: every pathway is the mean pass.
    pub fn zero_noise(model: &Model, samples: usize, batch: usize) -> Self {
        let w = model.config.hidden_width;
        let eps = (0..model.hidden.len()).map(|_| DMatrix::zeros(samples * batch, w)).collect();
        Sites::Noise { samples, eps }
    }
}

/// Forward pass recorded on a tape.
pub(crate) struct TapeForward<'t> {
    /// `P x 1` normalized log pathway weights.
    pub log_w: Var<'t>,
    /// Per output dimension, `B x P` latent means.
    pub means: Vec<Var<'t>>,
    /// Per output dimension, `B x P` latent variances (noise excluded).
    pub fvars: Vec<Var<'t>>,
    /// Per output dimension, `1 x 1` observation noise variance.
    pub obs_var: Vec<Var<'t>>,
    /// Sum of every GP's KL divergence.
    pub kl: Var<'t>,
}

/// Row `p * B + i` of the expanded features reads row `parent[p] * B + i`.
fn expand_rows(parent: &[usize], b: usize) -> Vec<usize> {
    parent.iter().flat_map(|&p| (0..b).map(move |i| p * b + i)).collect()
}

pub(crate) fn forward_tape<'t>(
    model: &Model,
    tape: &'t Tape,
    bound: &Bound<'t>,
    x: &DMatrix<f64>,
    sites: &Sites,
) -> Result<TapeForward<'t>> {
    model.check_inputs(x)?;
    let b = x.nrows();
    let w_h = model.config.hidden_width;
    let xc = tape.constant(x.clone());
    let mut kls = Vec::new();
    let mut paths = 1usize;
    let mut score = tape.scalar(0.0);
    let mut feats: Option<Var<'t>> = None;

    for (l, layer) in model.hidden.iter().enumerate() {
        let (kin, min) = match feats {
            None => (xc, xc),
            Some(f) => {
                let xrep = xc.select_rows(&expand_rows(&vec![0; paths], b));
                let (mw, kw) = if model.config.layers == 3 {
                    topology_wires(model.config.topology)?
                } else {
                    (Wire::Features, Wire::Features)
                };
                (wire_var(kw, f, xrep), wire_var(mw, f, xrep))
            }
        };
        let mut mus = Vec::with_capacity(w_h);
        let mut sds = Vec::with_capacity(w_h);
        for (w, gp) in layer.gps.iter().enumerate() {
            let gv = gp.bind(&gp_name(l, w), bound);
            let prior = gv.prior()?;
            kls.push(gv.kl(&prior));
            let (mu, var) = gv.marginal(&prior, kin, Some(min));
            mus.push(mu);
            sds.push(var.sqrt());
        }
        let mu = mus.into_iter().reduce(|a, c| a.hconcat(c)).expect("hidden width is positive");
        let sd = sds.into_iter().reduce(|a, c| a.hconcat(c)).expect("hidden width is positive");

        let (parent, xi, step_score): (Vec<usize>, Var<'t>, Option<Var<'t>>) = match sites {
            Sites::Rules => {
                let rule = layer
                    .rule
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfig("quadrature expansion needs a rule on every hidden layer".into()))?;
                let rv = rule.bind(&format!("{}.quad", layer_name(l)), bound, tape);
                let k = rule.num_components();
                let (parent, comp): (Vec<usize>, Vec<usize>) = if rule.kind.is_grid() {
                    (0..paths * k).map(|q| (q / k, q % k)).unzip()
                } else if paths == 1 {
                    (0..k).map(|q| (0, q)).unzip()
                } else if paths == k {
                    (0..k).map(|q| (q, q)).unzip()
                } else {
                    return Err(Error::InvalidConfig("paired quadrature needs equal site counts".into()));
                };
                let np = parent.len();
                let s = rule.sites;
                let mut idx = Vec::with_capacity(np * b * w_h);
                for w in 0..w_h {
                    for &c in &comp {
                        let site = rule.component_sites(c)[w];
                        idx.extend(std::iter::repeat_n(w * s + site, b));
                    }
                }
                let xi = rv.table.select(np * b, w_h, idx);
                let lw = rv.log_weights.select(np, 1, comp);
                (parent, xi, Some(lw))
            }
            Sites::Noise { samples, eps } => {
                let n = *samples;
                let parent: Vec<usize> = if paths == 1 { vec![0; n] } else { (0..n).collect() };
                if paths != 1 && paths != n {
                    return Err(Error::InvalidConfig("noise sample count changed between layers".into()));
                }
                let e = &eps[l];
                if e.shape() != (n * b, w_h) {
                    return Err(Error::DimensionMismatch {
                        context: "noise matrix rows",
                        expected: n * b,
                        got: e.nrows(),
                    });
                }
                (parent, tape.constant(e.clone()), None)
            }
        };
        let np = parent.len();
        let rows = expand_rows(&parent, b);
        let g = mu.select_rows(&rows) + xi.mul(sd.select_rows(&rows));
        score = score.select(np, 1, parent);
        if let Some(lw) = step_score {
            score = score + lw;
        }
        feats = Some(g);
        paths = np;
    }

    let kin = feats.unwrap_or(xc);
    let top = model.hidden.len();
    let mut heads_mu = Vec::with_capacity(model.output.len());
    let mut heads_var = Vec::with_capacity(model.output.len());
    for (w, gp) in model.output.iter().enumerate() {
        let gv = gp.bind(&gp_name(top, w), bound);
        let prior = gv.prior()?;
        kls.push(gv.kl(&prior));
        let (mu, var) = gv.marginal(&prior, kin, None);
        heads_mu.push(mu.reshape(b, paths));
        heads_var.push(var.reshape(b, paths));
    }

    let d_y = model.config.output_dim;
    let (means, fvars) = match &model.mixing {
        None => (heads_mu, heads_var),
        Some(a) => {
            let av = bound.get(MIXING_NAME);
            let wp = a.nrows();
            let mut means = Vec::with_capacity(d_y);
            let mut fvars = Vec::with_capacity(d_y);
            for d in 0..d_y {
                let mut m_acc: Option<Var<'t>> = None;
                let mut v_acc: Option<Var<'t>> = None;
                for w in 0..wp {
                    let coef = av.select(1, 1, vec![d * wp + w]).broadcast(b, paths);
                    let m = coef.mul(heads_mu[w]);
                    let v = coef.square().mul(heads_var[w]);
                    m_acc = Some(m_acc.map_or(m, |acc| acc + m));
                    v_acc = Some(v_acc.map_or(v, |acc| acc + v));
                }
                means.push(m_acc.expect("output width is positive"));
                fvars.push(v_acc.expect("output width is positive"));
            }
            (means, fvars)
        }
    };
    let lso = bound.get(SIGMA_OBS_NAME);
    let obs_var = (0..d_y).map(|d| lso.select(1, 1, vec![d]).scale(2.0).exp()).collect();
    let lse = score.t().logsumexp_rows().broadcast(paths, 1);
    let kl = kls.into_iter().reduce(|a, c| a + c).expect("at least one GP");
    Ok(TapeForward {
        log_w: score - lse,
        means,
        fvars,
        obs_var,
        kl,
    })
}

fn collect_mixtures(fw: &TapeForward<'_>, out: &mut Vec<PredictiveMixture>) {
    let weights = fw.log_w.value().column(0).map(f64::exp);
    let (b, p) = fw.means[0].shape();
    let d_y = fw.means.len();
    let means: Vec<_> = fw.means.iter().map(|v| v.value().clone()).collect();
    let vars: Vec<_> = fw
        .fvars
        .iter()
        .zip(&fw.obs_var)
        .map(|(v, o)| v.value().add_scalar(o.item()))
        .collect();
    for i in 0..b {
        out.push(PredictiveMixture {
            weights: weights.clone(),
            means: DMatrix::from_fn(p, d_y, |k, d| means[d][(i, k)]),
            variances: DMatrix::from_fn(p, d_y, |k, d| vars[d][(i, k)]),
        });
    }
}

/// Predictive mixtures at the rows of `x`, given fixed sites.
pub fn forward_with_sites(model: &Model, x: &DMatrix<f64>, sites: &Sites) -> Result<Vec<PredictiveMixture>> {
    let tape = Tape::new();
    let blocks = model.blocks();
    let bound = Bound::new(&tape, &blocks, false);
    let fw = forward_tape(model, &tape, &bound, x, sites)?;
    let mut out = Vec::with_capacity(x.nrows());
    collect_mixtures(&fw, &mut out);
    Ok(out)
}

fn chunked(
    x: &DMatrix<f64>,
    mut f: impl FnMut(&DMatrix<f64>) -> Result<Vec<PredictiveMixture>>,
) -> Result<Vec<PredictiveMixture>> {
    let mut out = Vec::with_capacity(x.nrows());
    let mut start = 0;
    while start < x.nrows() {
        let len = PREDICT_CHUNK.min(x.nrows() - start);
        out.extend(f(&x.rows(start, len).into_owned())?);
        start += len;
    }
    Ok(out)
}

/// Deterministic quadrature mixture of a DSPP.
pub fn forward_dspp(model: &Model, x: &DMatrix<f64>) -> Result<Vec<PredictiveMixture>> {
    if model.hidden.iter().any(|l| l.rule.is_none()) {
        return Err(Error::InvalidConfig("forward_dspp needs a quadrature rule on every hidden layer".into()));
    }
    chunked(x, |c| forward_with_sites(model, c, &Sites::Rules))
}

/// Single-component predictive of a one-layer model.
pub fn forward_svgp(model: &Model, x: &DMatrix<f64>) -> Result<Vec<PredictiveMixture>> {
    if !model.hidden.is_empty() {
        return Err(Error::InvalidConfig("forward_svgp needs a single-layer model".into()));
    }
    chunked(x, |c| forward_with_sites(model, c, &Sites::Rules))
}

/// Equally weighted mixture over `n_samples` reparameterized draws.
pub fn forward_dgp_sampled(model: &Model, x: &DMatrix<f64>, n_samples: usize, rng: &mut impl Rng) -> Result<Vec<PredictiveMixture>> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig("n_samples must be positive".into()));
    }
    chunked(x, |c| {
        let sites = Sites::sampled(model, n_samples, c.nrows(), rng);
        forward_with_sites(model, c, &sites)
    })
}

/// Per-dimension predictive mixtures of a model with mixed output heads.
pub fn forward_lmc(model: &Model, x: &DMatrix<f64>) -> Result<Vec<PredictiveMixture>> {
    if model.mixing.is_none() {
        return Err(Error::InvalidConfig("forward_lmc needs a mixing matrix".into()));
    }
    predict(model, x, &mut ChaCha8Rng::seed_from_u64(0))
}

/// Family-appropriate predictive: quadrature for DSPP, `mc_samples_eval`
/// draws for DGP/BPDGP, a single Gaussian otherwise.
pub fn predict(model: &Model, x: &DMatrix<f64>, rng: &mut impl Rng) -> Result<Vec<PredictiveMixture>> {
    match model.config.family {
        Family::Dgp | Family::Bpdgp if !model.hidden.is_empty() => {
            forward_dgp_sampled(model, x, model.config.mc_samples_eval, rng)
        }
        _ => chunked(x, |c| forward_with_sites(model, c, &Sites::Rules)),
    }
}
