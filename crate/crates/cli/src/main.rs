use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dspp::data::Synthetic;
use dspp::models::Family;
use dspp_cli::{
    cmd_bench, cmd_dump_quadrature, cmd_eval, cmd_grad_check, cmd_synth, cmd_train, resolve_config, write_bench_csv, BenchArgs,
    EvalArgs, GradCheckArgs, Part, QuadratureSource, TrainArgs,
};

#[derive(Parser)]
#[command(name = "dspp", version, about = "Train and evaluate deep sigma point processes and GP baselines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model family; required without --config, overrides it otherwise.
    #[arg(long)]
    family: Option<Family>,
    /// CSV dataset; overrides data.path.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Target column names; override data.targets.
    #[arg(long, value_delimiter = ',')]
    targets: Vec<String>,
    /// Training seed; overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// `section.key=value` override, applied after the flags above.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<dspp::config::RunConfig> {
        let mut cfg = resolve_config(self.config.as_deref(), self.family, &[])?;
        if let Some(p) = &self.data {
            cfg.data.path = Some(p.clone());
            cfg.data.synthetic = None;
        }
        if !self.targets.is_empty() {
            cfg.data.targets = self.targets.clone();
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.ckpt, train_log.jsonl and config.toml.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
        /// Write an extra checkpoint every N epochs.
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Evaluate a checkpoint; prints an EvalReport as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        part: Part,
        /// Results CSV to append a row to.
        #[arg(long)]
        results: Option<PathBuf>,
        /// Seed of predictive sampling; defaults to the training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic and finite-difference gradients; exits 1 above --tol.
    GradCheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long)]
        max_params: Option<usize>,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Write quadrature nodes and weights as CSV.
    DumpQuadrature {
        #[arg(long, conflicts_with = "config")]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time objective-plus-gradient evaluations over a grid of (M, S, B).
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
        inducing: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "8")]
        sites: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "256")]
        batch: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        width: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset as CSV.
    Synth {
        #[arg(long, default_value = "sin")]
        kind: Synthetic,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out_dir,
            checkpoint_every,
        } => {
            let outcome = cmd_train(TrainArgs {
                config: config.resolve()?,
                out_dir,
                checkpoint_every,
            })?;
            eprintln!(
                "trained {} epochs (restart {} selected); checkpoint at {}",
                outcome.meta.train.epochs,
                outcome.result.selected_restart,
                outcome.checkpoint.display()
            );
        }
        Command::Eval {
            checkpoint,
            part,
            results,
            seed,
        } => {
            let report = cmd_eval(&EvalArgs {
                checkpoint,
                part,
                results,
                seed,
            })?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::GradCheck {
            config,
            batch,
            max_params,
            tol,
        } => {
            let report = cmd_grad_check(&GradCheckArgs {
                config: config.resolve()?,
                batch,
                max_params,
            })?;
            println!("{}", serde_json::to_string(&report)?);
            if !(report.max_rel_err < tol) {
                bail!("max relative error {:.3e} at {} exceeds {tol:e}", report.max_rel_err, report.worst_param);
            }
        }
        Command::DumpQuadrature { checkpoint, config, out } => {
            let source = match checkpoint {
                Some(p) => QuadratureSource::Checkpoint(p),
                None => QuadratureSource::Config(Box::new(config.resolve()?)),
            };
            let rows = cmd_dump_quadrature(&source, output(&out)?)?;
            eprintln!("wrote {rows} quadrature rows");
        }
        Command::Bench {
            inducing,
            sites,
            batch,
            width,
            reps,
            seed,
            out,
        } => {
            let records = cmd_bench(&BenchArgs {
                inducing,
                sites,
                batch,
                width,
                reps,
                seed,
            })?;
            write_bench_csv(&records, output(&out)?)?;
        }
        Command::Synth { kind, n, seed, out } => {
            let ds = cmd_synth(kind, n, seed, output(&out)?)?;
            eprintln!("wrote {} rows", ds.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
