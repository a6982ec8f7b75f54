//! Commands behind the `dspp` binary, callable in-process.
//!
//! Every command reads its inputs from files or arguments, writes data to
//! files or to the returned value, and reports failures as errors. The
//! binary prints diagnostics to stderr only.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use dspp::autodiff::{fd_check, gradient, FdReport};
use dspp::checkpoint;
use dspp::config::{DataSection, RunConfig};
use dspp::data::{self, Dataset, Splits, Standardizer, Synthetic};
use dspp::metrics::{self, EvalReport};
use dspp::models::{Family, Model, ModelConfig};
use dspp::objectives::{Batch, ObjectiveOptions};
use dspp::quadrature::RuleKind;
use dspp::training::{self, EpochRecord, TrainConfig, TrainObserver, TrainResult};

// The tape allocates and frees multi-megabyte buffers on every step. The
// system allocator returns them to the OS and page-faults them back in, which
// makes step time grow faster than the work. mimalloc keeps them mapped.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Synthetic rows generated when the config does not set `data.n`.
pub const DEFAULT_SYNTHETIC_N: usize = 2000;

/// File names inside a training output directory.
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

/// Header of the results CSV.
pub const RESULTS_HEADER: [&str; 8] = ["dataset", "family", "split", "seed", "nll", "rmse", "mrmse", "crps"];

/// RNG used for predictive sampling at evaluation time.
pub fn eval_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

/// Label used to key result rows.
pub fn dataset_name(data: &DataSection) -> String {
    if let Some(n) = &data.name {
        return n.clone();
    }
    match (&data.synthetic, &data.path) {
        (Some(s), _) => serde_json::to_value(s)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_else(|| "synthetic".into()),
        (None, Some(p)) => p.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned()),
        (None, None) => "data".into(),
    }
}

/// Loads the raw dataset described by a `[data]` section.
pub fn load_dataset(data: &DataSection) -> Result<Dataset> {
    match (&data.synthetic, &data.path) {
        (Some(_), Some(_)) => bail!("data.synthetic and data.path are mutually exclusive"),
        (Some(kind), None) => Ok(kind.generate(data.n.unwrap_or(DEFAULT_SYNTHETIC_N), data.split_seed)?),
        (None, Some(path)) => {
            if data.targets.is_empty() {
                bail!("data.targets must name at least one column of {}", path.display());
            }
            let targets: Vec<&str> = data.targets.iter().map(String::as_str).collect();
            data::ingest_csv(path, &targets).with_context(|| format!("reading {}", path.display()))
        }
        (None, None) => bail!("the config needs data.synthetic or data.path"),
    }
}

/// Standardized 15:3:2 split of the configured dataset.
pub fn load_splits(data: &DataSection) -> Result<Splits> {
    let ds = load_dataset(data)?;
    Ok(data::split(&ds, data.split_seed, data.split)?)
}

/// Metadata stored next to the parameters of a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub dataset: String,
    pub data: DataSection,
    pub train: TrainConfig,
    pub standardizer: Standardizer,
    pub selected_restart: usize,
    pub failed_restarts: Vec<(usize, String)>,
}

pub struct TrainArgs {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    /// Also write `checkpoint-epoch{N}.ckpt` every this many epochs.
    pub checkpoint_every: Option<usize>,
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub result: TrainResult,
    pub splits: Splits,
    pub meta: RunMeta,
}

struct FileObserver<'a> {
    log: BufWriter<File>,
    out_dir: &'a Path,
    every: Option<usize>,
}

impl TrainObserver for FileObserver<'_> {
    fn on_epoch(&mut self, record: &EpochRecord, model: &Model) -> dspp::Result<()> {
        let line = serde_json::to_string(record).map_err(|e| dspp::Error::Io(std::io::Error::other(e)))?;
        writeln!(self.log, "{line}")?;
        if let Some(k) = self.every.filter(|&k| k > 0) {
            if (record.epoch + 1) % k == 0 {
                let path = self.out_dir.join(format!("checkpoint-r{}-epoch{}.ckpt", record.restart, record.epoch + 1));
                checkpoint::save(&path, model, &serde_json::Value::Null)?;
            }
        }
        Ok(())
    }

    fn on_restart_failed(&mut self, restart: usize, error: &dspp::Error) {
        eprintln!("restart {restart} abandoned: {error}");
    }
}

/// Trains the configured model and writes the checkpoint, the epoch log
/// and the resolved config into `out_dir`.
pub fn cmd_train(args: TrainArgs) -> Result<TrainOutcome> {
    let cfg = &args.config;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let splits = load_splits(&cfg.data)?;
    let model_cfg = cfg.model.resolve(splits.train.input_dim(), splits.train.output_dim())?;
    let batch = splits.train.batch()?;
    let mut tc = cfg.train.clone();
    tc.batch_size = tc.batch_size.min(batch.len());

    let log = BufWriter::new(File::create(args.out_dir.join(LOG_FILE))?);
    let mut observer = FileObserver {
        log,
        out_dir: &args.out_dir,
        every: args.checkpoint_every,
    };
    let result = training::train(&model_cfg, &batch, &tc, &mut observer)?;
    observer.log.flush()?;

    let meta = RunMeta {
        dataset: dataset_name(&cfg.data),
        data: cfg.data.clone(),
        train: tc,
        standardizer: splits.standardizer.clone(),
        selected_restart: result.selected_restart,
        failed_restarts: result.failed_restarts.clone(),
    };
    let path = args.out_dir.join(CHECKPOINT_FILE);
    checkpoint::save(&path, &result.model, &serde_json::to_value(&meta)?)?;
    fs::write(args.out_dir.join(CONFIG_FILE), cfg.to_toml_string()?)?;
    Ok(TrainOutcome {
        checkpoint: path,
        result,
        splits,
        meta,
    })
}

/// Which part of the split to evaluate on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Part {
    Train,
    Test,
    Val,
}

impl Part {
    pub fn as_str(self) -> &'static str {
        match self {
            Part::Train => "train",
            Part::Test => "test",
            Part::Val => "val",
        }
    }

    pub fn of(self, s: &Splits) -> &Dataset {
        match self {
            Part::Train => &s.train,
            Part::Test => &s.test,
            Part::Val => &s.val,
        }
    }
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub part: Part,
    /// Results CSV to append one row to.
    pub results: Option<PathBuf>,
    /// Seed of predictive sampling; the training seed when absent.
    pub seed: Option<u64>,
}

pub fn load_run(path: &Path) -> Result<(Model, RunMeta)> {
    let ck = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let meta: RunMeta = serde_json::from_value(ck.extra).context("checkpoint metadata is not a training run")?;
    Ok((ck.model, meta))
}

/// Evaluates a model on one part of its split with the training-time
/// standardizer.
pub fn evaluate_on(model: &Model, splits: &Splits, part: Part, seed: u64) -> Result<EvalReport> {
    let ds = part.of(splits);
    Ok(metrics::evaluate(model, &ds.x, &ds.y, &splits.standardizer.y_scale, &mut eval_rng(seed))?)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let (model, meta) = load_run(&args.checkpoint)?;
    let splits = load_splits(&meta.data)?;
    if splits.standardizer != meta.standardizer {
        bail!("the dataset no longer matches the one the checkpoint was trained on");
    }
    let report = evaluate_on(&model, &splits, args.part, args.seed.unwrap_or(meta.train.seed))?;
    if let Some(path) = &args.results {
        let row = ResultRow {
            dataset: meta.dataset.clone(),
            family: model.config.family.to_string(),
            split: meta.data.split,
            seed: meta.train.seed,
            report,
        };
        append_result(path, &row)?;
    }
    Ok(report)
}

pub struct ResultRow {
    pub dataset: String,
    pub family: String,
    pub split: u64,
    pub seed: u64,
    pub report: EvalReport,
}

/// Appends a row to the results CSV, creating it with a header when
/// missing. A row whose `(dataset, family, split, seed)` key is already
/// present is rejected.
pub fn append_result(path: &Path, row: &ResultRow) -> Result<()> {
    let key = (row.dataset.clone(), row.family.clone(), row.split.to_string(), row.seed.to_string());
    let exists = path.exists() && fs::metadata(path)?.len() > 0;
    if exists {
        let mut rdr = csv::Reader::from_path(path)?;
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header != RESULTS_HEADER {
            bail!("{} does not look like a results file", path.display());
        }
        let mut seen = HashSet::new();
        for rec in rdr.records() {
            let rec = rec?;
            seen.insert((rec[0].to_string(), rec[1].to_string(), rec[2].to_string(), rec[3].to_string()));
        }
        if seen.contains(&key) {
            bail!(
                "results for dataset={} family={} split={} seed={} already recorded in {}",
                key.0,
                key.1,
                key.2,
                key.3,
                path.display()
            );
        }
    }
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if !exists {
        w.write_record(RESULTS_HEADER)?;
    }
    let r = &row.report;
    w.write_record([
        key.0,
        key.1,
        key.2,
        key.3,
        r.nll.to_string(),
        r.rmse.to_string(),
        r.mrmse.to_string(),
        r.crps.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

pub struct GradCheckArgs {
    pub config: RunConfig,
    /// Rows of the standardized training split used as the batch.
    pub batch: usize,
    /// Number of parameters checked, evenly spaced; all when absent.
    pub max_params: Option<usize>,
}

/// Compares reverse-mode and central-difference gradients of the
/// configured objective at the k-means initialization.
pub fn cmd_grad_check(args: &GradCheckArgs) -> Result<FdReport> {
    let cfg = &args.config;
    let splits = load_splits(&cfg.data)?;
    let model_cfg = cfg.model.resolve(splits.train.input_dim(), splits.train.output_dim())?;
    let train = splits.train.batch()?;
    let mut rng = training::restart_rng(cfg.train.seed, 0);
    let model = Model::new(model_cfg, &train.x, &train.y, &mut rng)?;
    let rows: Vec<usize> = (0..args.batch.min(train.len())).collect();
    let batch = train.select(&rows);
    let beta = cfg.train.beta_reg.unwrap_or(model.config.family.default_beta());
    let opts = ObjectiveOptions::new(train.len(), beta, cfg.train.seed);
    let n = model.params().len();
    let subset: Option<Vec<usize>> = args.max_params.filter(|&k| k < n).map(|k| (0..k).map(|i| i * n / k).collect());
    Ok(fd_check(&model, &batch, &opts, subset.as_deref())?)
}

/// Writes `layer,component,w,site,node,weight` rows for every hidden
/// layer's quadrature rule.
pub fn dump_quadrature<W: Write>(model: &Model, out: W) -> Result<usize> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "component", "w", "site", "node", "weight"])?;
    let mut rows = 0;
    for (l, layer) in model.hidden.iter().enumerate() {
        let Some(rule) = &layer.rule else { continue };
        let table = rule.node_table();
        let weights = rule.weights();
        for c in 0..rule.num_components() {
            for (dim, &s) in rule.component_sites(c).iter().enumerate() {
                w.write_record([
                    (l + 1).to_string(),
                    c.to_string(),
                    dim.to_string(),
                    s.to_string(),
                    table[(s, dim)].to_string(),
                    weights[c].to_string(),
                ])?;
                rows += 1;
            }
        }
    }
    w.flush()?;
    Ok(rows)
}

/// Model behind a quadrature dump: a trained checkpoint, or a fresh
/// initialization of a config.
pub enum QuadratureSource {
    Checkpoint(PathBuf),
    Config(Box<RunConfig>),
}

pub fn cmd_dump_quadrature<W: Write>(source: &QuadratureSource, out: W) -> Result<usize> {
    let model = match source {
        QuadratureSource::Checkpoint(p) => checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?.model,
        QuadratureSource::Config(cfg) => {
            let splits = load_splits(&cfg.data)?;
            let mc = cfg.model.resolve(splits.train.input_dim(), splits.train.output_dim())?;
            let train = splits.train.batch()?;
            Model::new(mc, &train.x, &train.y, &mut training::restart_rng(cfg.train.seed, 0))?
        }
    };
    if model.hidden.iter().all(|l| l.rule.is_none()) {
        bail!("{} models have no quadrature rule", model.config.family);
    }
    dump_quadrature(&model, out)
}

#[derive(Clone, Debug)]
pub struct BenchArgs {
    pub inducing: Vec<usize>,
    pub sites: Vec<usize>,
    pub batch: Vec<usize>,
    pub width: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchArgs {
    fn default() -> Self {
        Self {
            inducing: vec![32, 64, 128],
            sites: vec![8],
            batch: vec![256],
            width: 3,
            reps: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BenchRecord {
    pub m: usize,
    pub s: usize,
    pub b: usize,
    /// Fastest wall-clock seconds of one objective-plus-gradient evaluation.
    pub seconds: f64,
}

/// Times objective-plus-gradient evaluations of a 2-layer QR3 DSPP on
/// synthetic 1-D data for every `(M, S, B)` in the grid. One untimed
/// evaluation precedes each timed block.
pub fn cmd_bench(args: &BenchArgs) -> Result<Vec<BenchRecord>> {
    if args.reps == 0 {
        bail!("reps must be positive");
    }
    let mut out = Vec::new();
    for &m in &args.inducing {
        for &s in &args.sites {
            for &b in &args.batch {
                let n = (2 * m).max(b);
                let ds = data::synth_sin(n, args.seed)?;
                let train = Batch::new(ds.x.clone(), ds.y.clone())?;
                let mut cfg = ModelConfig::new(Family::Dspp, 1, 1);
                cfg.hidden_width = args.width;
                cfg.inducing = m;
                cfg.quadrature = RuleKind::Qr3;
                cfg.sites = s;
                let model = Model::new(cfg, &train.x, &train.y, &mut ChaCha8Rng::seed_from_u64(args.seed))?;
                let rows: Vec<usize> = (0..b).collect();
                let batch = train.select(&rows);
                let opts = ObjectiveOptions::new(n, Family::Dspp.default_beta(), args.seed);
                gradient(&model, &batch, &opts)?;
                // Timing noise only ever adds time, so the fastest rep is the estimate.
                let mut best = f64::INFINITY;
                for _ in 0..args.reps {
                    let start = Instant::now();
                    std::hint::black_box(gradient(&model, &batch, &opts)?);
                    best = best.min(start.elapsed().as_secs_f64());
                }
                out.push(BenchRecord { m, s, b, seconds: best });
            }
        }
    }
    Ok(out)
}

pub fn write_bench_csv<W: Write>(records: &[BenchRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a synthetic dataset as CSV.
pub fn cmd_synth<W: Write>(kind: Synthetic, n: usize, seed: u64, out: W) -> Result<Dataset> {
    let ds = kind.generate(n, seed)?;
    ds.write_csv_to(out)?;
    Ok(ds)
}

/// Loads a config file or starts from the defaults of `family`, then
/// applies `section.key=value` overrides in order.
pub fn resolve_config(path: Option<&Path>, family: Option<Family>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::new(family.ok_or_else(|| anyhow!("pass --config or --family"))?),
    };
    if let (Some(_), Some(f)) = (path, family) {
        cfg.model.family = f;
    }
    for o in overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}
