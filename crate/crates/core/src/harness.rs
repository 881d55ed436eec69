//! Experiment orchestration behind the `subzero` command line.
//!
//! Each command is a plain function taking an argument struct, so the same
//! pipelines run from the binary, from examples and from tests. Outputs are
//! written in sweep order once every run has finished, which keeps files
//! byte-identical at any worker-pool size.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{self, iterations_to_target, min_loss, LayerShape, Method, Summary};
use crate::optim::{
    self, fmt_f64, DirectionMode, EmaInput, LrSchedule, OptimConfig, ParamVector,
    RunLog, Sampler, WarmupOrder,
};
use crate::perturbation::{
    expected_rho, rho_distribution, AlignmentSample, BlockPartition, ControlledSampler, Ensemble,
};
use crate::rng::{mix64, GaussianStream};
use crate::testbed::{
    generate_hessian, heterogeneous_block_hessian, Hessian, HessianSpec, LogisticSpec, Objective,
    QuadraticObjective, StochasticObjective,
};

/// Environment variable bounding the worker pool.
pub const THREADS_ENV: &str = "SUBZERO_THREADS";
/// Name of the manifest written next to every multi-file output.
pub const MANIFEST_NAME: &str = "manifest.sha256";

const INIT_TAG: u64 = 0x1417;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("input error: {0}")]
    Input(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("acceptance failure: {0}")]
    Acceptance(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl HarnessError {
    /// Process exit code: 2 input, 3 numerical, 4 acceptance.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Input(_) | HarnessError::Io { .. } => 2,
            HarnessError::Numerical(_) => 3,
            HarnessError::Acceptance(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn input(e: impl fmt::Display) -> HarnessError {
    HarnessError::Input(e.to_string())
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    body(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

/// Flat `key = value` configuration. `[section]` headers prefix later keys
/// with `section.`; `#` and `;` start comments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| input(format!("config line {}: expected key = value", n + 1)))?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            values.insert(key, v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| input(format!("bad value '{value}' for {key}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    let items: Vec<T> = value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_value(key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(input(format!("{key} must list at least one value")));
    }
    Ok(items)
}

/// Runs `f` on a rayon pool sized by `threads`, else by `SUBZERO_THREADS`,
/// else by rayon's default.
pub fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let threads = match threads {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(parse_value::<usize>(THREADS_ENV, &v)?),
            Err(_) => None,
        },
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(input(format!("{THREADS_ENV} must be at least 1")));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| input(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// `sha256  name` lines for every file, in the given order.
pub fn write_manifest(dir: &Path, files: &[PathBuf]) -> Result<PathBuf> {
    let mut lines = Vec::with_capacity(files.len());
    for f in files {
        let bytes = fs::read(f).map_err(io_err(f))?;
        let name = f.strip_prefix(dir).unwrap_or(f);
        lines.push(format!("{:x}  {}", Sha256::digest(&bytes), name.display()));
    }
    let path = dir.join(MANIFEST_NAME);
    write_file(&path, |w| lines.iter().try_for_each(|l| writeln!(w, "{l}")))?;
    Ok(path)
}

/// Re-hashes every file in a manifest; returns the names that no longer match.
pub fn verify_manifest(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut mismatched = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (hash, name) = line
            .split_once("  ")
            .ok_or_else(|| input(format!("malformed manifest line '{line}'")))?;
        let ok = fs::read(dir.join(name))
            .map(|b| format!("{:x}", Sha256::digest(&b)) == hash)
            .unwrap_or(false);
        if !ok {
            mismatched.push(name.to_string());
        }
    }
    Ok(mismatched)
}

// ---------------------------------------------------------------- gen-hessian

#[derive(Debug, Clone, PartialEq)]
pub struct GenHessianArgs {
    pub dim: usize,
    pub rank: usize,
    pub blocks: usize,
    /// Per-block top eigenvalues; one value is repeated for every block.
    pub max_eig: Vec<f64>,
    /// Reference levels for the heterogeneous generator (overrides `max_eig`).
    pub hetero: Option<Vec<f64>>,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for GenHessianArgs {
    fn default() -> Self {
        Self {
            dim: 256,
            rank: 64,
            blocks: 1,
            max_eig: vec![10.0],
            hetero: None,
            seed: 0,
            out: PathBuf::from("hessian.bin"),
        }
    }
}

/// Eigenvalue summary written next to a generated Hessian.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSummary {
    pub lambda_max: f64,
    pub lambda_min_nonzero: f64,
    pub trace: f64,
    pub intdim: f64,
    pub nonzero: usize,
}

impl EigenSummary {
    pub fn of(h: &Hessian) -> Result<Self> {
        let nz = h.nonzero_pairs();
        Ok(Self {
            lambda_max: h.lambda_max(),
            lambda_min_nonzero: nz.iter().map(|p| p.value).fold(f64::INFINITY, f64::min),
            trace: h.trace(),
            intdim: h.intdim().map_err(|e| HarnessError::Numerical(e.to_string()))?,
            nonzero: nz.len(),
        })
    }
}

pub fn build_hessian(args: &GenHessianArgs) -> Result<Hessian> {
    match &args.hetero {
        Some(levels) => heterogeneous_block_hessian(args.dim, args.blocks, args.rank, levels, args.seed),
        None => {
            let max_eigenvals = match args.max_eig.as_slice() {
                [one] => vec![*one; args.blocks],
                many => many.to_vec(),
            };
            generate_hessian(&HessianSpec {
                dim: args.dim,
                rank: args.rank,
                num_blocks: args.blocks,
                max_eigenvals,
                seed: args.seed,
            })
        }
    }
    .map_err(input)
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes the Hessian and a `.meta` sidecar; returns the eigenvalue summary.
pub fn cmd_gen_hessian(args: &GenHessianArgs) -> Result<EigenSummary> {
    let h = build_hessian(args)?;
    let summary = EigenSummary::of(&h)?;
    write_file(&args.out, |w| h.write_to(w).map_err(io::Error::other))?;
    let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    write_file(&sidecar(&args.out, ".meta"), |w| {
        writeln!(w, "dim={}", args.dim)?;
        writeln!(w, "rank={}", args.rank)?;
        writeln!(w, "blocks={}", args.blocks)?;
        match &args.hetero {
            Some(levels) => writeln!(w, "hetero={}", list(levels))?,
            None => writeln!(w, "max_eig={}", list(&args.max_eig))?,
        }
        writeln!(w, "seed={}", args.seed)?;
        writeln!(w, "lambda_max={}", fmt_f64(summary.lambda_max))?;
        writeln!(w, "lambda_min_nonzero={}", fmt_f64(summary.lambda_min_nonzero))?;
        writeln!(w, "trace={}", fmt_f64(summary.trace))?;
        writeln!(w, "intdim={}", fmt_f64(summary.intdim))?;
        writeln!(w, "nonzero_eigenvalues={}", summary.nonzero)
    })?;
    Ok(summary)
}

// ---------------------------------------------------------- measure-alignment

#[derive(Debug, Clone, PartialEq)]
pub struct MeasureAlignmentArgs {
    pub hessian: PathBuf,
    pub ensembles: Vec<Ensemble>,
    pub sranks: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// Samples plus one summary per (ensemble, srank) group.
#[derive(Debug, Clone)]
pub struct AlignmentTable {
    pub samples: Vec<AlignmentSample>,
    pub groups: Vec<analysis::RhoGroup>,
    /// `s·Tr(H)/(d·λ_max)` per group, in group order.
    pub expected: Vec<f64>,
}

/// Header of alignment CSVs. Sample rows leave the summary columns empty and
/// summary rows leave `trial` and `rho` empty.
pub const ALIGNMENT_COLUMNS: &str = "row,ensemble,srank,trial,rho,mean,variance,min,max,expected";

pub fn alignment_table(
    h: &Hessian,
    ensembles: &[Ensemble],
    sranks: &[f64],
    trials: usize,
    seed: u64,
) -> Result<AlignmentTable> {
    if ensembles.is_empty() || sranks.is_empty() || trials == 0 {
        return Err(input("need at least one ensemble, one srank and one trial"));
    }
    let mut samples = Vec::with_capacity(ensembles.len() * sranks.len() * trials);
    let mut expected = Vec::new();
    for &e in ensembles {
        for &s in sranks {
            samples.extend(rho_distribution(e, h, s, trials, seed).map_err(input)?);
            expected.push(expected_rho(h, s).map_err(input)?);
        }
    }
    Ok(AlignmentTable {
        groups: analysis::summarize_rho(&samples),
        samples,
        expected,
    })
}

pub fn write_alignment_csv(t: &AlignmentTable, mut w: impl Write) -> io::Result<()> {
    writeln!(w, "{ALIGNMENT_COLUMNS}")?;
    for s in &t.samples {
        writeln!(w, "sample,{},{},{},{},,,,,", s.ensemble, s.srank, s.trial, fmt_f64(s.rho))?;
    }
    for (g, e) in t.groups.iter().zip(&t.expected) {
        let m = &g.summary;
        writeln!(
            w,
            "summary,{},{},,,{},{},{},{},{}",
            g.ensemble,
            g.srank,
            fmt_f64(m.mean),
            fmt_f64(m.variance),
            fmt_f64(m.min),
            fmt_f64(m.max),
            fmt_f64(*e)
        )?;
    }
    Ok(())
}

pub fn cmd_measure_alignment(args: &MeasureAlignmentArgs, threads: Option<usize>) -> Result<AlignmentTable> {
    let h = Hessian::load(&args.hessian).map_err(input)?;
    let table = with_pool(threads, || {
        alignment_table(&h, &args.ensembles, &args.sranks, args.trials, args.seed)
    })??;
    write_file(&args.out, |w| write_alignment_csv(&table, w))?;
    Ok(table)
}

// ------------------------------------------------------------------- optimize

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptMethod {
    ZoSgd,
    MezoBcd,
    Adaptive,
    MezoBcdAdam,
}

impl FromStr for OptMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "zo-sgd" | "mezo" => Ok(OptMethod::ZoSgd),
            "mezo-bcd" => Ok(OptMethod::MezoBcd),
            "adaptive" | "mezo-bcd-adaptive" => Ok(OptMethod::Adaptive),
            "mezo-bcd-adam" | "adam" => Ok(OptMethod::MezoBcdAdam),
            other => Err(format!("unknown method '{other}'")),
        }
    }
}

/// Perturbation family used by `zo-sgd`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleSpec {
    Identity,
    Controlled,
    Plain(Ensemble),
}

impl FromStr for EnsembleSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "identity" | "full" => Ok(EnsembleSpec::Identity),
            "controlled" => Ok(EnsembleSpec::Controlled),
            other => other.parse().map(EnsembleSpec::Plain),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitSpec {
    Gaussian,
    Zeros,
}

impl FromStr for InitSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gaussian" => Ok(InitSpec::Gaussian),
            "zeros" => Ok(InitSpec::Zeros),
            other => Err(format!("unknown init '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveSpec {
    Hessian(PathBuf),
    Logistic(LogisticSpec),
}

/// Everything `optimize` needs; see [`OptimizeArgs::set`] for the key names.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeArgs {
    pub objective: ObjectiveSpec,
    pub method: OptMethod,
    pub ensemble: EnsembleSpec,
    pub sranks: Vec<usize>,
    pub gammas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub blocks: usize,
    pub init: Option<InitSpec>,
    pub config: OptimConfig,
    pub out_dir: PathBuf,
}

impl Default for OptimizeArgs {
    fn default() -> Self {
        Self {
            objective: ObjectiveSpec::Logistic(LogisticSpec::default()),
            method: OptMethod::ZoSgd,
            ensemble: EnsembleSpec::Identity,
            sranks: vec![64],
            gammas: vec![0.0],
            seeds: vec![0],
            blocks: 1,
            init: None,
            config: OptimConfig::default(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl OptimizeArgs {
    /// Applies one `key = value` setting (config-file keys and CLI flags share names).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let cfg = &mut self.config;
        match key {
            "hessian" => self.objective = ObjectiveSpec::Hessian(PathBuf::from(value)),
            "objective" => match value {
                "logistic" => self.objective = ObjectiveSpec::Logistic(self.logistic().cloned().unwrap_or_default()),
                "quadratic" => {}
                other => return Err(input(format!("unknown objective '{other}'"))),
            },
            "samples" | "dim" | "separation" | "batch" | "data_seed" => {
                let mut spec = self.logistic().cloned().unwrap_or_default();
                match key {
                    "samples" => spec.samples = parse_value(key, value)?,
                    "dim" => spec.dim = parse_value(key, value)?,
                    "separation" => spec.separation = parse_value(key, value)?,
                    "batch" => spec.batch_size = parse_value(key, value)?,
                    _ => spec.seed = parse_value(key, value)?,
                }
                self.objective = ObjectiveSpec::Logistic(spec);
            }
            "method" => self.method = parse_value(key, value)?,
            "ensemble" => self.ensemble = parse_value(key, value)?,
            "srank" => self.sranks = parse_list(key, value)?,
            "gamma" => self.gammas = parse_list(key, value)?,
            "seeds" | "seed" => self.seeds = parse_list(key, value)?,
            "blocks" => self.blocks = parse_value(key, value)?,
            "init" => self.init = Some(parse_value(key, value)?),
            "out" => self.out_dir = PathBuf::from(value),
            "steps" => cfg.steps = parse_value(key, value)?,
            "mu" => cfg.mu = parse_value(key, value)?,
            "lr" => {
                let eta = parse_value(key, value)?;
                cfg.lr = match cfg.lr {
                    LrSchedule::Constant(_) => LrSchedule::Constant(eta),
                    LrSchedule::InverseTime(_) => LrSchedule::InverseTime(eta),
                };
            }
            "lr_schedule" => {
                let eta = match cfg.lr {
                    LrSchedule::Constant(v) | LrSchedule::InverseTime(v) => v,
                };
                cfg.lr = match value {
                    "constant" => LrSchedule::Constant(eta),
                    "inverse-time" => LrSchedule::InverseTime(eta),
                    other => return Err(input(format!("unknown lr schedule '{other}'"))),
                };
            }
            "order" => cfg.block_order = parse_value(key, value)?,
            "direction" => {
                cfg.direction = match value {
                    "ambient" => DirectionMode::Ambient,
                    "subspace" => DirectionMode::Subspace,
                    other => return Err(input(format!("unknown direction '{other}'"))),
                }
            }
            "rho_every" => cfg.rho_every = parse_value(key, value)?,
            "stop_at_loss" => cfg.stop_at_loss = Some(parse_value(key, value)?),
            "divergence_factor" => cfg.divergence_factor = parse_value(key, value)?,
            "adaptive.alpha" => cfg.adaptive.alpha = parse_value(key, value)?,
            "adaptive.tau" => cfg.adaptive.tau = parse_value(key, value)?,
            "adaptive.warmup" => cfg.adaptive.warmup = Some(parse_value(key, value)?),
            "adaptive.warmup_order" => {
                cfg.adaptive.warmup_order = match value {
                    "random-cycle" => WarmupOrder::RandomCycle,
                    "ascending" => WarmupOrder::Ascending,
                    other => return Err(input(format!("unknown warmup order '{other}'"))),
                }
            }
            "adaptive.ema" => {
                cfg.adaptive.ema_input = match value {
                    "magnitude" | "abs" => EmaInput::Magnitude,
                    "signed" => EmaInput::Signed,
                    other => return Err(input(format!("unknown ema input '{other}'"))),
                }
            }
            "adam.beta1" => cfg.adam.beta1 = parse_value(key, value)?,
            "adam.beta2" => cfg.adam.beta2 = parse_value(key, value)?,
            "adam.eps" => cfg.adam.eps = parse_value(key, value)?,
            "adam.interval" => cfg.adam.interval = parse_value(key, value)?,
            other => return Err(input(format!("unknown setting '{other}'"))),
        }
        Ok(())
    }

    pub fn apply_config(&mut self, config: &Config) -> Result<()> {
        config.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    fn logistic(&self) -> Option<&LogisticSpec> {
        match &self.objective {
            ObjectiveSpec::Logistic(s) => Some(s),
            ObjectiveSpec::Hessian(_) => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate().map_err(input)?;
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() || seeds.is_empty() {
            return Err(input("seeds must be a nonempty list of distinct values"));
        }
        if self.sranks.is_empty() || self.gammas.is_empty() {
            return Err(input("sweep axes must be nonempty"));
        }
        if let ObjectiveSpec::Hessian(p) = &self.objective {
            if !p.is_file() {
                return Err(input(format!("hessian file {} does not exist", p.display())));
            }
        }
        if self.method != OptMethod::ZoSgd && self.ensemble != EnsembleSpec::Identity {
            return Err(input("ensembles apply to zo-sgd only"));
        }
        Ok(())
    }
}

/// One finished run of a sweep.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub srank: usize,
    pub gamma: f64,
    pub seed: u64,
    pub initial_params: Vec<f64>,
    pub log: RunLog,
    pub files: Vec<PathBuf>,
}

/// Seeded initial point: `N(0, I)` or zeros.
pub fn initial_params(d: usize, init: InitSpec, seed: u64) -> Vec<f64> {
    match init {
        InitSpec::Gaussian => GaussianStream::new(mix64(&[seed, INIT_TAG])).vector(d),
        InitSpec::Zeros => vec![0.0; d],
    }
}

enum LoadedObjective {
    Quadratic(QuadraticObjective),
    Logistic(StochasticObjective),
}

impl LoadedObjective {
    fn as_dyn(&self) -> &dyn Objective {
        match self {
            LoadedObjective::Quadratic(q) => q,
            LoadedObjective::Logistic(l) => l,
        }
    }
}

fn run_one(
    args: &OptimizeArgs,
    obj: &LoadedObjective,
    srank: usize,
    gamma: f64,
    seed: u64,
) -> Result<(Vec<f64>, RunLog)> {
    let o = obj.as_dyn();
    let d = o.dim();
    let default_init = match obj {
        LoadedObjective::Quadratic(_) => InitSpec::Gaussian,
        LoadedObjective::Logistic(_) => InitSpec::Zeros,
    };
    let theta0 = initial_params(d, args.init.unwrap_or(default_init), seed);
    let cfg = OptimConfig {
        seed,
        ..args.config.clone()
    };
    let partition = || {
        BlockPartition::equal(d, args.blocks)
            .map(Arc::new)
            .map_err(input)
    };
    let params = || ParamVector::new(theta0.clone(), partition()?).map_err(input);
    let mut log = match args.method {
        OptMethod::ZoSgd => {
            let sampler = match args.ensemble {
                EnsembleSpec::Identity => Sampler::Identity,
                EnsembleSpec::Plain(Ensemble::LowRank) => Sampler::LowRank { s: srank },
                EnsembleSpec::Plain(Ensemble::Sparse(mode)) => Sampler::Sparse {
                    s: srank as f64,
                    mode,
                },
                EnsembleSpec::Plain(Ensemble::BlockSparse) => Sampler::BlockSparse(
                    BlockPartition::with_block_size(d, srank)
                        .map(Arc::new)
                        .map_err(input)?,
                ),
                EnsembleSpec::Controlled => {
                    let h = o.hessian().ok_or_else(|| input("controlled ensemble needs a Hessian objective"))?;
                    Sampler::Controlled(Arc::new(ControlledSampler::new(h, srank, gamma).map_err(input)?))
                }
            };
            optim::zo_sgd_run(o, &theta0, &cfg, sampler)
        }
        OptMethod::MezoBcd => optim::mezo_bcd_run(o, &params()?, &cfg),
        OptMethod::Adaptive => optim::adaptive_run(o, &params()?, &cfg),
        OptMethod::MezoBcdAdam => optim::mezo_bcd_adam_run(o, &params()?, &cfg),
    }
    .map_err(input)?;
    if let EnsembleSpec::Controlled = args.ensemble {
        log.metadata.push(("gamma".into(), gamma.to_string()));
    }
    if args.method == OptMethod::ZoSgd && args.ensemble != EnsembleSpec::Identity {
        log.metadata.push(("srank".into(), srank.to_string()));
    }
    if let LoadedObjective::Logistic(l) = obj {
        log.metadata
            .push(("final_accuracy".into(), fmt_f64(l.accuracy(&log.final_params))));
    }
    Ok((theta0, log))
}

fn run_stem(args: &OptimizeArgs, srank: usize, gamma: f64, seed: u64) -> String {
    let mut stem = String::from("run");
    if args.method == OptMethod::ZoSgd && args.ensemble != EnsembleSpec::Identity {
        stem.push_str(&format!("_s{srank}"));
    }
    if args.ensemble == EnsembleSpec::Controlled {
        stem.push_str(&format!("_g{gamma}"));
    }
    stem.push_str(&format!("_seed{seed}"));
    stem
}

fn write_params(values: &[f64], mut w: impl Write) -> io::Result<()> {
    writeln!(w, "index,value")?;
    values.iter().enumerate().try_for_each(|(i, v)| writeln!(w, "{i},{}", fmt_f64(*v)))
}

/// Runs the sweep `srank × gamma × seed`, writing per run `<stem>.csv`,
/// `<stem>.meta`, `<stem>.params.csv` and (when measured) `<stem>.rho.csv`,
/// then the manifest. A diverged run is written before the error is returned.
pub fn cmd_optimize(args: &OptimizeArgs, threads: Option<usize>) -> Result<Vec<SweepRun>> {
    args.validate()?;
    let obj = match &args.objective {
        ObjectiveSpec::Hessian(p) => {
            LoadedObjective::Quadratic(QuadraticObjective::new(Arc::new(Hessian::load(p).map_err(input)?)))
        }
        ObjectiveSpec::Logistic(spec) => LoadedObjective::Logistic(StochasticObjective::synthetic(spec).map_err(input)?),
    };
    let points: Vec<(usize, f64, u64)> = args
        .sranks
        .iter()
        .flat_map(|&s| args.gammas.iter().flat_map(move |&g| args.seeds.iter().map(move |&seed| (s, g, seed))))
        .collect();
    let results: Vec<Result<(Vec<f64>, RunLog)>> = with_pool(threads, || {
        points
            .par_iter()
            .map(|&(s, g, seed)| run_one(args, &obj, s, g, seed))
            .collect()
    })?;
    let mut runs = Vec::with_capacity(points.len());
    let mut manifest = Vec::new();
    let mut failures = Vec::new();
    for (&(srank, gamma, seed), res) in points.iter().zip(results) {
        let (initial_params, log) = res?;
        let stem = run_stem(args, srank, gamma, seed);
        let csv = args.out_dir.join(format!("{stem}.csv"));
        let meta = args.out_dir.join(format!("{stem}.meta"));
        let params = args.out_dir.join(format!("{stem}.params.csv"));
        write_file(&csv, |w| log.write_csv(w))?;
        write_file(&meta, |w| log.write_metadata(w))?;
        write_file(&params, |w| write_params(&log.final_params, w))?;
        let mut files = vec![csv, meta, params];
        if log.records.iter().any(|r| r.rho.is_some()) {
            let rho = args.out_dir.join(format!("{stem}.rho.csv"));
            write_file(&rho, |w| log.write_rho_csv(w))?;
            files.push(rho);
        }
        if log.termination.is_failure() {
            failures.push(format!("{stem}: {}", log.termination));
        }
        eprintln!("{stem}: {} in {:.2?}", log.termination, log.wall_time);
        manifest.extend(files.iter().cloned());
        runs.push(SweepRun {
            srank,
            gamma,
            seed,
            initial_params,
            log,
            files,
        });
    }
    write_manifest(&args.out_dir, &manifest)?;
    if !failures.is_empty() {
        return Err(HarnessError::Numerical(failures.join("; ")));
    }
    Ok(runs)
}

// ------------------------------------------------------------------ reproduce

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Panel {
    Fig1Left,
    Fig1Middle,
    Fig1Right,
    MemoryTable,
    Traffic,
}

impl Panel {
    pub const ALL: [Panel; 5] = [
        Panel::Fig1Left,
        Panel::Fig1Middle,
        Panel::Fig1Right,
        Panel::MemoryTable,
        Panel::Traffic,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Panel::Fig1Left => "fig1-left",
            Panel::Fig1Middle => "fig1-middle",
            Panel::Fig1Right => "fig1-right",
            Panel::MemoryTable => "memory-table",
            Panel::Traffic => "traffic",
        }
    }
}

impl fmt::Display for Panel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Panel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Panel::ALL
            .into_iter()
            .find(|p| p.tag() == s)
            .ok_or_else(|| format!("unknown panel '{s}'"))
    }
}

/// γ values of the five-curve panel.
pub const FIG1_LEFT_GAMMAS: [f64; 5] = [0.0, 0.2, 0.4, 0.7, 1.0];
/// γ grid of the iterations-to-target panel.
pub const FIG1_MIDDLE_GAMMAS: [f64; 12] = [0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
/// Relative band for `iterations × ρ̄` over `γ ≥ FIG1_MIDDLE_MIN_GAMMA`, frozen from pilot runs.
pub const FIG1_MIDDLE_BAND: f64 = 0.25;
pub const FIG1_MIDDLE_MIN_GAMMA: f64 = 0.2;
pub const FIG1_RIGHT_SRANKS: [f64; 5] = [16.0, 32.0, 64.0, 128.0, 256.0];
/// Minimum block-sparse / low-rank ρ variance ratio at `s = 64`.
pub const FIG1_RIGHT_VARIANCE_RATIO: f64 = 2.0;
/// Mean-agreement tolerance in standard errors.
pub const MEAN_SE_TOLERANCE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ReproduceOptions {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub seeds_per_point: usize,
    pub threads: Option<usize>,
}

impl Default for ReproduceOptions {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("bundle"),
            seed: 0,
            seeds_per_point: 5,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Files and pass/fail verdicts of one panel.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelReport {
    pub panel: Panel,
    pub files: Vec<PathBuf>,
    pub verdicts: Vec<Verdict>,
}

impl PanelReport {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }

    /// `Err(Acceptance)` naming every failed check.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let failed: Vec<String> = self
            .verdicts
            .iter()
            .filter(|v| !v.passed)
            .map(|v| format!("{} ({})", v.name, v.detail))
            .collect();
        Err(HarnessError::Acceptance(format!("{}: {}", self.panel, failed.join("; "))))
    }
}

fn verdict(name: &str, passed: bool, detail: String) -> Verdict {
    Verdict {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// The dense rank-64 Hessian of the γ panels.
pub fn fig1_controlled_hessian(seed: u64) -> Result<Hessian> {
    build_hessian(&GenHessianArgs {
        dim: 256,
        rank: 64,
        blocks: 1,
        max_eig: vec![10.0],
        hetero: None,
        seed,
        out: PathBuf::new(),
    })
}

/// The heterogeneous block-diagonal Hessian of the distribution panel.
pub fn fig1_heterogeneous_hessian(seed: u64) -> Result<Hessian> {
    build_hessian(&GenHessianArgs {
        dim: 1024,
        rank: 16,
        blocks: 16,
        max_eig: vec![],
        hetero: Some(vec![10.0, 40.0, 70.0, 100.0]),
        seed,
        out: PathBuf::new(),
    })
}

/// Base optimizer settings of the γ panels.
pub fn fig1_config(steps: usize) -> OptimConfig {
    OptimConfig {
        mu: 1e-4,
        lr: LrSchedule::Constant(1e-3),
        steps,
        rho_every: 10,
        ..OptimConfig::default()
    }
}

fn controlled_runs(
    h: &Arc<Hessian>,
    gammas: &[f64],
    seeds: &[u64],
    cfg: &OptimConfig,
    targets: Option<&[f64]>,
) -> Result<Vec<RunLog>> {
    let obj = QuadraticObjective::new(Arc::clone(h));
    let samplers: Vec<Arc<ControlledSampler>> = gammas
        .iter()
        .map(|&g| ControlledSampler::new(h, 64, g).map(Arc::new).map_err(input))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..gammas.len()).flat_map(|g| (0..seeds.len()).map(move |s| (g, s))).collect();
    jobs.par_iter()
        .map(|&(g, s)| {
            let seed = seeds[s];
            let theta0 = initial_params(h.dim(), InitSpec::Gaussian, seed);
            let cfg = OptimConfig {
                seed,
                stop_at_loss: targets.map(|t| t[s]),
                ..cfg.clone()
            };
            let log = optim::zo_sgd_run(&obj, &theta0, &cfg, Sampler::Controlled(Arc::clone(&samplers[g])))
                .map_err(input)?;
            if log.termination.is_failure() {
                return Err(HarnessError::Numerical(format!("γ={} seed={seed}: {}", gammas[g], log.termination)));
            }
            Ok(log)
        })
        .collect()
}

fn panel_seeds(opts: &ReproduceOptions) -> Vec<u64> {
    (0..opts.seeds_per_point as u64).map(|i| mix64(&[opts.seed, 0x5EED, i])).collect()
}

fn fig1_left(opts: &ReproduceOptions) -> Result<PanelReport> {
    let h = Arc::new(fig1_controlled_hessian(opts.seed)?);
    let seeds = panel_seeds(opts);
    let logs = controlled_runs(&h, &FIG1_LEFT_GAMMAS, &seeds, &fig1_config(1000), None)?;
    let k = seeds.len();
    let curves = opts.out_dir.join("fig1_left_curves.csv");
    write_file(&curves, |w| {
        writeln!(w, "gamma,seed,step,loss")?;
        for (i, log) in logs.iter().enumerate() {
            let (g, seed) = (FIG1_LEFT_GAMMAS[i / k], seeds[i % k]);
            for r in &log.records {
                writeln!(w, "{g},{seed},{},{}", r.step, fmt_f64(r.loss()))?;
            }
        }
        Ok(())
    })?;
    let mut finals = Vec::new();
    let mut rhos = Vec::new();
    for chunk in logs.chunks(k) {
        finals.push(chunk.iter().map(|l| l.final_loss().unwrap_or(f64::NAN)).sum::<f64>() / k as f64);
        rhos.push(chunk.iter().filter_map(RunLog::mean_rho).sum::<f64>() / k as f64);
    }
    let summary = opts.out_dir.join("fig1_left_summary.csv");
    write_file(&summary, |w| {
        writeln!(w, "gamma,final_loss_mean,rho_bar")?;
        for (i, g) in FIG1_LEFT_GAMMAS.iter().enumerate() {
            writeln!(w, "{g},{},{}", fmt_f64(finals[i]), fmt_f64(rhos[i]))?;
        }
        Ok(())
    })?;
    let decreasing = finals.windows(2).all(|p| p[1] < p[0]);
    let detail = finals.iter().map(|f| format!("{f:.4}")).collect::<Vec<_>>().join(" > ");
    Ok(PanelReport {
        panel: Panel::Fig1Left,
        files: vec![curves, summary],
        verdicts: vec![verdict("final loss strictly decreasing in γ", decreasing, detail)],
    })
}

/// Per-γ outcome of the iterations-to-target panel.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPoint {
    pub gamma: f64,
    pub iterations: f64,
    pub rho_bar: f64,
    pub reached: usize,
}

impl TargetPoint {
    pub fn product(&self) -> f64 {
        self.iterations * self.rho_bar
    }
}

fn fig1_middle(opts: &ReproduceOptions) -> Result<PanelReport> {
    let h = Arc::new(fig1_controlled_hessian(opts.seed)?);
    let seeds = panel_seeds(opts);
    let k = seeds.len();
    let cfg = OptimConfig {
        rho_every: 25,
        ..fig1_config(10_000)
    };
    let baseline = controlled_runs(&h, &FIG1_MIDDLE_GAMMAS[..1], &seeds, &cfg, None)?;
    let targets: Vec<f64> = baseline.iter().map(min_loss).collect::<std::result::Result<_, _>>().map_err(input)?;
    let rest = controlled_runs(&h, &FIG1_MIDDLE_GAMMAS[1..], &seeds, &cfg, Some(&targets))?;
    let logs: Vec<RunLog> = baseline.into_iter().chain(rest).collect();

    let mut rows = Vec::new();
    let mut points = Vec::new();
    for (gi, chunk) in logs.chunks(k).enumerate() {
        let gamma = FIG1_MIDDLE_GAMMAS[gi];
        let mut iters = Vec::new();
        let mut rhos = Vec::new();
        for (si, log) in chunk.iter().enumerate() {
            let it = iterations_to_target(log, targets[si]).map_err(input)?;
            let rho = log.mean_rho().unwrap_or(f64::NAN);
            rows.push((gamma, seeds[si], it, rho));
            if let Some(it) = it {
                iters.push(it as f64);
            }
            rhos.push(rho);
        }
        points.push(TargetPoint {
            gamma,
            iterations: Summary::of(&iters).map(|s| s.mean).unwrap_or(f64::NAN),
            rho_bar: rhos.iter().sum::<f64>() / rhos.len() as f64,
            reached: iters.len(),
        });
    }
    let runs_csv = opts.out_dir.join("fig1_middle_runs.csv");
    write_file(&runs_csv, |w| {
        writeln!(w, "gamma,seed,target,iterations,rho_bar")?;
        for (i, (g, seed, it, rho)) in rows.iter().enumerate() {
            let it = it.map_or(String::from("not-reached"), |v| v.to_string());
            writeln!(w, "{g},{seed},{},{it},{}", fmt_f64(targets[i % k]), fmt_f64(*rho))?;
        }
        Ok(())
    })?;
    let summary_csv = opts.out_dir.join("fig1_middle_summary.csv");
    write_file(&summary_csv, |w| {
        writeln!(w, "gamma,iterations_mean,rho_bar,inverse_rho_bar,product,reached")?;
        for p in &points {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                p.gamma,
                fmt_f64(p.iterations),
                fmt_f64(p.rho_bar),
                fmt_f64(1.0 / p.rho_bar),
                fmt_f64(p.product()),
                p.reached
            )?;
        }
        Ok(())
    })?;
    let (ok, detail) = product_band(&points);
    Ok(PanelReport {
        panel: Panel::Fig1Middle,
        files: vec![runs_csv, summary_csv],
        verdicts: vec![verdict("iterations × ρ̄ constant within band", ok, detail)],
    })
}

/// Checks `iterations × ρ̄` stays within [`FIG1_MIDDLE_BAND`] of its mean.
pub fn product_band(points: &[TargetPoint]) -> (bool, String) {
    let products: Vec<f64> = points
        .iter()
        .filter(|p| p.gamma >= FIG1_MIDDLE_MIN_GAMMA - 1e-12)
        .map(TargetPoint::product)
        .collect();
    let all_reached = points.iter().all(|p| p.reached > 0);
    let mean = products.iter().sum::<f64>() / products.len().max(1) as f64;
    let worst = products.iter().map(|p| (p / mean - 1.0).abs()).fold(0.0, f64::max);
    let ok = all_reached && !products.is_empty() && worst <= FIG1_MIDDLE_BAND;
    (ok, format!("mean {mean:.0}, worst deviation {:.1}%", 100.0 * worst))
}

fn fig1_right(opts: &ReproduceOptions) -> Result<PanelReport> {
    let h = fig1_heterogeneous_hessian(opts.seed)?;
    let table = with_pool(opts.threads, || {
        alignment_table(&h, &Ensemble::ALL, &FIG1_RIGHT_SRANKS, 1000, opts.seed)
    })??;
    let path = opts.out_dir.join("fig1_right_rho.csv");
    write_file(&path, |w| write_alignment_csv(&table, w))?;
    let (means_ok, means_detail) = means_match(&table);
    let var = |e: Ensemble| {
        table
            .groups
            .iter()
            .find(|g| g.ensemble == e && g.srank == 64.0)
            .map(|g| g.summary.variance)
            .unwrap_or(f64::NAN)
    };
    let ratio = var(Ensemble::BlockSparse) / var(Ensemble::LowRank);
    Ok(PanelReport {
        panel: Panel::Fig1Right,
        files: vec![path],
        verdicts: vec![
            verdict("ensemble means match s·Tr(H)/(d·λmax)", means_ok, means_detail),
            verdict(
                "block-sparse variance exceeds low-rank at s=64",
                ratio >= FIG1_RIGHT_VARIANCE_RATIO,
                format!("ratio {ratio:.1} (threshold {FIG1_RIGHT_VARIANCE_RATIO})"),
            ),
        ],
    })
}

/// Every group mean within [`MEAN_SE_TOLERANCE`] standard errors of its expectation.
pub fn means_match(t: &AlignmentTable) -> (bool, String) {
    let mut worst = 0.0f64;
    for (g, e) in t.groups.iter().zip(&t.expected) {
        let se = g.summary.std_err();
        let z = if se > 0.0 {
            (g.summary.mean - e).abs() / se
        } else if (g.summary.mean - e).abs() <= 1e-9 * e.abs() {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(z);
    }
    (worst <= MEAN_SE_TOLERANCE, format!("largest deviation {worst:.2} SE"))
}

/// Layer set of the memory panel: the two-layer worked example plus a small
/// transformer-like stack (4 layers of attention and MLP weights).
pub fn memory_layers() -> Vec<(String, Vec<LayerShape>, Vec<usize>)> {
    let toy = vec![LayerShape::new(4, 4), LayerShape::new(2, 2)];
    let mut stack = Vec::new();
    let mut assignment = Vec::new();
    for layer in 0..4 {
        for _ in 0..4 {
            stack.push(LayerShape::new(512, 512));
            assignment.push(layer);
        }
        stack.push(LayerShape::new(512, 2048));
        stack.push(LayerShape::new(2048, 512));
        assignment.extend([layer, layer]);
    }
    stack.push(LayerShape::new(32000, 512));
    assignment.push(4);
    vec![("worked-example".into(), toy, vec![0, 1]), ("toy-transformer".into(), stack, assignment)]
}

/// LoZO rank used by the memory panel.
pub const MEMORY_LOZO_RANK: u64 = 1;

fn memory_table(opts: &ReproduceOptions) -> Result<PanelReport> {
    let path = opts.out_dir.join("memory_table.csv");
    let mut rows = Vec::new();
    for (name, layers, assignment) in memory_layers() {
        for m in Method::ALL {
            let r = analysis::peak_memory_params(m, &layers, Some(MEMORY_LOZO_RANK), Some(&assignment))
                .map_err(input)?;
            rows.push((name.clone(), r));
        }
    }
    write_file(&path, |w| {
        writeln!(w, "layer_set,method,total,auxiliary,peak")?;
        for (name, r) in &rows {
            writeln!(w, "{name},{},{},{},{}", r.method, r.total_weights, r.auxiliary, r.peak)?;
        }
        Ok(())
    })?;
    let peak = |set: &str, m: Method| {
        rows.iter()
            .find(|(n, r)| n == set && r.method == m)
            .map(|(_, r)| r.peak)
            .unwrap_or(0)
    };
    let worked = [
        peak("worked-example", Method::Mezo),
        peak("worked-example", Method::SparseMezo),
        peak("worked-example", Method::Lozo),
    ];
    let same_peak = memory_layers()
        .iter()
        .all(|(n, _, _)| peak(n, Method::MezoBcd) == peak(n, Method::Mezo));
    Ok(PanelReport {
        panel: Panel::MemoryTable,
        files: vec![path],
        verdicts: vec![
            verdict("worked example 36/52/30", worked == [36, 52, 30], format!("{worked:?}")),
            verdict("mezo-bcd peak equals mezo peak", same_peak, String::new()),
        ],
    })
}

/// Block counts of the traffic panel at `d = 100`.
pub const TRAFFIC_BLOCKS: [u64; 7] = [1, 2, 4, 5, 10, 20, 100];

fn traffic(opts: &ReproduceOptions) -> Result<PanelReport> {
    let d = 100;
    let mut rows = Vec::new();
    for &n in &TRAFFIC_BLOCKS {
        for m in [Method::Mezo, Method::MezoBcd] {
            rows.push((m, d, n, analysis::traffic_per_step(m, d, n).map_err(input)?));
        }
    }
    let path = opts.out_dir.join("traffic.csv");
    write_file(&path, |w| analysis::write_traffic_csv(&rows, w))?;
    let at = |m: Method, n: u64| rows.iter().find(|r| r.0 == m && r.2 == n).map(|r| r.3).unwrap_or(f64::NAN);
    let below = TRAFFIC_BLOCKS
        .iter()
        .filter(|&&n| n >= 2)
        .all(|&n| at(Method::MezoBcd, n) < at(Method::Mezo, n));
    Ok(PanelReport {
        panel: Panel::Traffic,
        files: vec![path],
        verdicts: vec![
            verdict(
                "traffic(d=100, N=4) = 275 vs 500",
                at(Method::MezoBcd, 4) == 275.0 && at(Method::Mezo, 4) == 500.0,
                format!("{} vs {}", at(Method::MezoBcd, 4), at(Method::Mezo, 4)),
            ),
            verdict("mezo-bcd below mezo for N >= 2", below, String::new()),
        ],
    })
}

/// Runs one panel, writes its CSV bundle and manifest, and returns the
/// verdicts. Acceptance failures are reported, not raised; see
/// [`PanelReport::into_result`].
pub fn cmd_reproduce(panel: Panel, opts: &ReproduceOptions) -> Result<PanelReport> {
    if opts.seeds_per_point == 0 {
        return Err(input("seeds_per_point must be at least 1"));
    }
    let mut report = with_pool(opts.threads, || match panel {
        Panel::Fig1Left => fig1_left(opts),
        Panel::Fig1Middle => fig1_middle(opts),
        Panel::Fig1Right => fig1_right(opts),
        Panel::MemoryTable => memory_table(opts),
        Panel::Traffic => traffic(opts),
    })??;
    let manifest = write_manifest(&opts.out_dir, &report.files)?;
    report.files.push(manifest);
    Ok(report)
}
