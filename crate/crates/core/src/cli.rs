//! Argument parsing for the `subzero` binary.
//!
//! `optimize` flags use the same key names as its config file; a flag given
//! on the command line wins over the file. Anything without a dedicated flag
//! can be passed as `--set key=value`.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::harness::{
    self, Config, GenHessianArgs, HarnessError, MeasureAlignmentArgs, OptimizeArgs, Panel, ReproduceOptions,
};
use crate::perturbation::Ensemble;

#[derive(Debug, Parser)]
#[command(name = "subzero", version, about = "Zeroth-order optimization testbed")]
struct Cli {
    /// Worker threads (defaults to SUBZERO_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a block-diagonal low-rank Hessian file.
    GenHessian(GenHessianCli),
    /// Sample the alignment ρ of perturbation ensembles against a Hessian.
    MeasureAlignment(MeasureCli),
    /// Run an optimizer sweep and write per-run CSV logs.
    Optimize(Box<OptimizeCli>),
    /// Regenerate one panel's CSV bundle and check it.
    Reproduce(ReproduceCli),
    /// Re-hash the files listed in a directory's manifest.
    VerifyManifest {
        dir: PathBuf,
    },
}

#[derive(Debug, Args)]
struct GenHessianCli {
    #[arg(long, default_value_t = 256)]
    dim: usize,
    #[arg(long, default_value_t = 64)]
    rank: usize,
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    /// Top eigenvalue per block (one value applies to all blocks).
    #[arg(long, value_delimiter = ',', default_value = "10")]
    max_eig: Vec<f64>,
    /// Reference levels for heterogeneous blocks, e.g. 10,40,70,100.
    #[arg(long, value_delimiter = ',')]
    hetero: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "hessian.bin")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MeasureCli {
    #[arg(long)]
    hessian: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "low-rank,sparse,block-sparse")]
    ensembles: Vec<Ensemble>,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128,256")]
    sranks: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "alignment.csv")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct OptimizeCli {
    /// INI-style config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Quadratic objective from a Hessian file (otherwise synthetic logistic).
    #[arg(long)]
    hessian: Option<String>,
    /// zo-sgd, mezo-bcd, adaptive or mezo-bcd-adam.
    #[arg(long)]
    method: Option<String>,
    /// identity, controlled, low-rank, sparse, sparse-bernoulli or block-sparse.
    #[arg(long)]
    ensemble: Option<String>,
    /// Comma-separated stable ranks.
    #[arg(long)]
    srank: Option<String>,
    /// Comma-separated γ values (controlled ensemble).
    #[arg(long)]
    gamma: Option<String>,
    /// Comma-separated master seeds.
    #[arg(long, alias = "seed")]
    seeds: Option<String>,
    #[arg(long)]
    blocks: Option<String>,
    /// gaussian or zeros.
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    /// constant or inverse-time.
    #[arg(long)]
    lr_schedule: Option<String>,
    #[arg(long)]
    mu: Option<String>,
    /// ascending, descending, flipflop, cyclic-random or adaptive.
    #[arg(long)]
    order: Option<String>,
    /// ambient or subspace.
    #[arg(long)]
    direction: Option<String>,
    #[arg(long)]
    rho_every: Option<String>,
    #[arg(long)]
    stop_at_loss: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Extra `key=value` settings, e.g. adam.interval=20.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    extra: Vec<String>,
}

impl OptimizeCli {
    fn resolve(&self) -> Result<OptimizeArgs, HarnessError> {
        let mut args = OptimizeArgs::default();
        if let Some(path) = &self.config {
            args.apply_config(&Config::load(path)?)?;
        }
        let flags = [
            ("hessian", &self.hessian),
            ("method", &self.method),
            ("ensemble", &self.ensemble),
            ("srank", &self.srank),
            ("gamma", &self.gamma),
            ("seeds", &self.seeds),
            ("blocks", &self.blocks),
            ("init", &self.init),
            ("steps", &self.steps),
            ("lr_schedule", &self.lr_schedule),
            ("lr", &self.lr),
            ("mu", &self.mu),
            ("order", &self.order),
            ("direction", &self.direction),
            ("rho_every", &self.rho_every),
            ("stop_at_loss", &self.stop_at_loss),
            ("out", &self.out),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                args.set(key, v)?;
            }
        }
        for kv in &self.extra {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| HarnessError::Input(format!("--set expects key=value, got '{kv}'")))?;
            args.set(k.trim(), v.trim())?;
        }
        Ok(args)
    }
}

#[derive(Debug, Args)]
struct ReproduceCli {
    /// fig1-left, fig1-middle, fig1-right, memory-table or traffic.
    panel: Panel,
    #[arg(long, default_value = "bundle")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seeds averaged per sweep point.
    #[arg(long, default_value_t = 5)]
    seeds_per_point: usize,
}

fn dispatch(cli: Cli) -> Result<(), HarnessError> {
    let threads = cli.threads;
    match cli.command {
        Command::GenHessian(a) => {
            let args = GenHessianArgs {
                dim: a.dim,
                rank: a.rank,
                blocks: a.blocks,
                max_eig: a.max_eig,
                hetero: a.hetero,
                seed: a.seed,
                out: a.out,
            };
            let s = harness::cmd_gen_hessian(&args)?;
            println!(
                "wrote {}: lambda_max={} trace={} intdim={:.4} nonzero={}",
                args.out.display(),
                s.lambda_max,
                s.trace,
                s.intdim,
                s.nonzero
            );
        }
        Command::MeasureAlignment(a) => {
            let args = MeasureAlignmentArgs {
                hessian: a.hessian,
                ensembles: a.ensembles,
                sranks: a.sranks,
                trials: a.trials,
                seed: a.seed,
                out: a.out,
            };
            let t = harness::cmd_measure_alignment(&args, threads)?;
            for (g, e) in t.groups.iter().zip(&t.expected) {
                println!(
                    "{:<16} s={:<5} mean={:.4} var={:.4} expected={:.4}",
                    g.ensemble, g.srank, g.summary.mean, g.summary.variance, e
                );
            }
        }
        Command::Optimize(a) => {
            let args = a.resolve()?;
            let runs = harness::cmd_optimize(&args, threads)?;
            for r in &runs {
                println!(
                    "seed={} srank={} gamma={} steps={} final_loss={:.6e} {}",
                    r.seed,
                    r.srank,
                    r.gamma,
                    r.log.len(),
                    r.log.final_loss().unwrap_or(f64::NAN),
                    r.log.termination
                );
            }
        }
        Command::Reproduce(a) => {
            let opts = ReproduceOptions {
                out_dir: a.out,
                seed: a.seed,
                seeds_per_point: a.seeds_per_point,
                threads,
            };
            let report = harness::cmd_reproduce(a.panel, &opts)?;
            for v in &report.verdicts {
                let status = if v.passed { "PASS" } else { "FAIL" };
                println!("{status} {}: {} {}", report.panel, v.name, v.detail);
            }
            report.into_result()?;
        }
        Command::VerifyManifest { dir } => {
            let bad = harness::verify_manifest(&dir)?;
            if !bad.is_empty() {
                return Err(HarnessError::Acceptance(format!("hash mismatch: {}", bad.join(", "))));
            }
            println!("all files match");
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
