//! Two-point zeroth-order optimizers with the seed-reuse perturbation trick.
//!
//! Every run is a deterministic function of its [`OptimConfig`] (master seed
//! included). Step `t` (1-based) perturbs along a Gaussian direction
//! regenerated from [`step_seed`]`(seed, t)` and evaluates both losses on the
//! minibatch of [`batch_seed`]`(seed, t)`.
//!
//! * [`zo_sgd_run`]: full-space SPSA or subspace SPSA with a fresh `M` per step.
//! * [`mezo_bcd_run`]: perturb and update one block per step.
//! * [`adaptive_run`]: block drawn from a softmax over EMA'd projected gradients.
//! * [`mezo_bcd_adam_run`]: block-local Adam, switching blocks every `ν` steps.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::perturbation::{
    alignment_rho, sample_block_sparse, sample_low_rank, sample_sparse, BlockPartition, ControlledSampler,
    Perturbation, PerturbationError, SparseMode,
};
use crate::rng::{batch_seed, mix64, seeded, step_seed, GaussianStream, ADAPTIVE_TAG, PERMUTATION_TAG, SAMPLER_TAG};
use crate::testbed::{Hessian, Objective};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: objective has {expected} parameters, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite initial parameter at index {0}")]
    NonFiniteParameter(usize),
    #[error("measuring ρ needs an objective with a known Hessian")]
    NoHessian,
    #[error(transparent)]
    Perturbation(#[from] PerturbationError),
}

pub type Result<T> = std::result::Result<T, OptimError>;

/// Parameters `θ ∈ ℝᵈ` with their block partition.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    partition: Arc<BlockPartition>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, partition: Arc<BlockPartition>) -> Result<Self> {
        if partition.dim() != values.len() {
            return Err(OptimError::DimensionMismatch {
                expected: partition.dim(),
                found: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteParameter(i));
        }
        Ok(Self { values, partition })
    }

    /// One block covering everything.
    pub fn single_block(values: Vec<f64>) -> Result<Self> {
        let partition = BlockPartition::from_sizes(&[values.len()])?;
        Self::new(values, Arc::new(partition))
    }

    /// `N` equal blocks.
    pub fn with_equal_blocks(values: Vec<f64>, n: usize) -> Result<Self> {
        let partition = BlockPartition::equal(values.len(), n)?;
        Self::new(values, Arc::new(partition))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn partition(&self) -> &Arc<BlockPartition> {
        &self.partition
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn block(&self, j: usize) -> &[f64] {
        &self.values[self.partition.block(j)]
    }

    pub fn block_mut(&mut self, j: usize) -> &mut [f64] {
        let r = self.partition.block(j);
        &mut self.values[r]
    }
}

/// Learning-rate schedule `η_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// `η_t = C / t`.
    InverseTime(f64),
}

impl LrSchedule {
    pub fn rate(&self, t: usize) -> f64 {
        match *self {
            LrSchedule::Constant(eta) => eta,
            LrSchedule::InverseTime(c) => c / t as f64,
        }
    }

    fn scale(&self) -> f64 {
        match *self {
            LrSchedule::Constant(v) | LrSchedule::InverseTime(v) => v,
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LrSchedule::Constant(eta) => write!(f, "constant({eta:e})"),
            LrSchedule::InverseTime(c) => write!(f, "inverse-time({c:e})"),
        }
    }
}

/// How the active block is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockOrder {
    Ascending,
    Descending,
    FlipFlop,
    CyclicRandom,
    Adaptive,
}

impl BlockOrder {
    pub fn tag(&self) -> &'static str {
        match self {
            BlockOrder::Ascending => "ascending",
            BlockOrder::Descending => "descending",
            BlockOrder::FlipFlop => "flipflop",
            BlockOrder::CyclicRandom => "cyclic-random",
            BlockOrder::Adaptive => "adaptive",
        }
    }
}

impl fmt::Display for BlockOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for BlockOrder {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ascending" => Ok(BlockOrder::Ascending),
            "descending" => Ok(BlockOrder::Descending),
            "flipflop" | "flip-flop" => Ok(BlockOrder::FlipFlop),
            "cyclic-random" | "random" => Ok(BlockOrder::CyclicRandom),
            "adaptive" => Ok(BlockOrder::Adaptive),
            other => Err(format!("unknown block order '{other}'")),
        }
    }
}

/// Warmup schedule of adaptive selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarmupOrder {
    RandomCycle,
    Ascending,
}

/// What feeds the adaptive EMA.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmaInput {
    /// `|projected_grad|`.
    Magnitude,
    /// Raw signed `projected_grad`.
    Signed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveConfig {
    pub alpha: f64,
    pub tau: f64,
    /// Warmup steps; `None` means `10·N`.
    pub warmup: Option<usize>,
    pub warmup_order: WarmupOrder,
    pub ema_input: EmaInput,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            tau: 1.0,
            warmup: None,
            warmup_order: WarmupOrder::RandomCycle,
            ema_input: EmaInput::Magnitude,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps spent on a block before switching (`ν`).
    pub interval: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            interval: 50,
        }
    }
}

/// Where the Gaussian direction of subspace SPSA lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionMode {
    /// `u ∈ ℝᵈ`, direction `M u`.
    Ambient,
    /// `w ∈ ℝˢ`, direction `U w` (low-rank `M` only; masks fall back to ambient).
    Subspace,
}

impl DirectionMode {
    pub fn tag(&self) -> &'static str {
        match self {
            DirectionMode::Ambient => "ambient",
            DirectionMode::Subspace => "subspace",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    /// Smoothing `μ`.
    pub mu: f64,
    pub lr: LrSchedule,
    /// Step budget `T`.
    pub steps: usize,
    pub block_order: BlockOrder,
    /// Master seed for step, batch, sampler and permutation streams.
    pub seed: u64,
    pub adaptive: AdaptiveConfig,
    pub adam: AdamConfig,
    pub direction: DirectionMode,
    /// Measure `ρ` every this many steps (0 disables).
    pub rho_every: usize,
    /// Abort once the loss proxy exceeds this multiple of the first step's.
    pub divergence_factor: f64,
    /// Stop early once the loss proxy reaches this value.
    pub stop_at_loss: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            mu: 1e-4,
            lr: LrSchedule::Constant(1e-3),
            steps: 1000,
            block_order: BlockOrder::CyclicRandom,
            seed: 0,
            adaptive: AdaptiveConfig::default(),
            adam: AdamConfig::default(),
            direction: DirectionMode::Ambient,
            rho_every: 0,
            divergence_factor: 1e6,
            stop_at_loss: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(OptimError::InvalidConfig(m.to_string()));
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return bad("mu must be positive");
        }
        let eta = self.lr.scale();
        if !(eta >= 0.0 && eta.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        let a = &self.adaptive;
        if !(a.alpha > 0.0 && a.alpha <= 1.0) {
            return bad("adaptive alpha must lie in (0, 1]");
        }
        if a.tau.is_nan() || a.tau <= 0.0 {
            return bad("adaptive tau must be positive");
        }
        let m = &self.adam;
        if m.interval == 0 {
            return bad("adam interval must be at least 1");
        }
        if !((0.0..1.0).contains(&m.beta1) && (0.0..1.0).contains(&m.beta2)) {
            return bad("adam betas must lie in [0, 1)");
        }
        if m.eps.is_nan() || m.eps < 0.0 {
            return bad("adam eps must be non-negative");
        }
        if self.divergence_factor.is_nan() || self.divergence_factor <= 1.0 {
            return bad("divergence factor must exceed 1");
        }
        Ok(())
    }
}

/// One optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss_plus: f64,
    pub loss_minus: f64,
    pub projected_grad: f64,
    /// 0-based active block (written 1-based in CSV, `-1` when absent).
    pub active_block: Option<usize>,
    pub step_seed: u64,
    pub rho: Option<f64>,
}

impl StepRecord {
    /// Loss proxy `(ℓ₊ + ℓ₋)/2`; the unperturbed loss is never evaluated.
    pub fn loss(&self) -> f64 {
        0.5 * (self.loss_plus + self.loss_minus)
    }
}

/// Why a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Completed,
    TargetReached { step: usize },
    Diverged { step: usize },
    NonFinite { step: usize },
}

impl Termination {
    pub fn is_failure(&self) -> bool {
        matches!(self, Termination::Diverged { .. } | Termination::NonFinite { .. })
    }
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Termination::Completed => f.write_str("completed"),
            Termination::TargetReached { step } => write!(f, "target-reached@{step}"),
            Termination::Diverged { step } => write!(f, "diverged@{step}"),
            Termination::NonFinite { step } => write!(f, "non-finite@{step}"),
        }
    }
}

/// Per-step records plus run metadata.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
    pub metadata: Vec<(String, String)>,
    pub termination: Termination,
    pub final_params: Vec<f64>,
    pub wall_time: Duration,
}

/// CSV header of [`RunLog::write_csv`].
pub const RUNLOG_COLUMNS: [&str; 6] = [
    "step",
    "loss_plus",
    "loss_minus",
    "projected_grad",
    "active_block",
    "step_seed",
];

/// Float formatting shared by every CSV: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

impl RunLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().map(StepRecord::loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(StepRecord::loss)
    }

    /// Mean of the measured `ρ` values.
    pub fn mean_rho(&self) -> Option<f64> {
        let (sum, n) = self
            .records
            .iter()
            .filter_map(|r| r.rho)
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "{}", RUNLOG_COLUMNS.join(","))?;
        for r in &self.records {
            let block = r.active_block.map_or(-1, |j| j as i64 + 1);
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.step,
                fmt_f64(r.loss_plus),
                fmt_f64(r.loss_minus),
                fmt_f64(r.projected_grad),
                block,
                r.step_seed
            )?;
        }
        Ok(())
    }

    /// `key=value` lines. Wall time is left out so the file is reproducible.
    pub fn write_metadata(&self, mut w: impl Write) -> io::Result<()> {
        for (k, v) in &self.metadata {
            writeln!(w, "{k}={v}")?;
        }
        writeln!(w, "termination={}", self.termination)?;
        writeln!(w, "records={}", self.records.len())
    }

    /// `(step, rho)` rows for the steps where `ρ` was measured.
    pub fn write_rho_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "step,rho")?;
        for r in &self.records {
            if let Some(rho) = r.rho {
                writeln!(w, "{},{}", r.step, fmt_f64(rho))?;
            }
        }
        Ok(())
    }
}

/// `θ_i += μ·u_i` with `u` regenerated from `seed`.
pub fn perturb_parameters(theta: &mut [f64], mu: f64, seed: u64) {
    let mut u = GaussianStream::new(seed);
    for x in theta {
        *x += mu * u.sample();
    }
}

fn shift(theta: &mut [f64], scale: f64, v: &[f64]) {
    for (x, &d) in theta.iter_mut().zip(v) {
        *x += scale * d;
    }
}

/// Both losses of one two-point probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpsaProbe {
    pub loss_plus: f64,
    pub loss_minus: f64,
    pub projected_grad: f64,
}

/// Two-point probe along an explicit direction `v = M u`; `θ` is restored.
pub fn spsa_probe(obj: &dyn Objective, theta: &mut [f64], direction: &[f64], mu: f64, batch_seed: u64) -> SpsaProbe {
    shift(theta, mu, direction);
    let loss_plus = obj.loss(theta, batch_seed);
    shift(theta, -2.0 * mu, direction);
    let loss_minus = obj.loss(theta, batch_seed);
    shift(theta, mu, direction);
    SpsaProbe {
        loss_plus,
        loss_minus,
        projected_grad: (loss_plus - loss_minus) / (2.0 * mu),
    }
}

/// `(ℓ₊ − ℓ₋)/(2μ)` along `M u` with `u ~ N(0, I_d)` from `step_seed`.
///
/// The implied gradient estimate is `projected_grad · M u`, reconstructible
/// from `(step_seed, M)`.
pub fn spsa_gradient(
    obj: &dyn Objective,
    theta: &mut [f64],
    m: &Perturbation,
    mu: f64,
    step_seed: u64,
    batch_seed: u64,
) -> Result<f64> {
    if mu.is_nan() || mu <= 0.0 {
        return Err(OptimError::InvalidConfig("mu must be positive".into()));
    }
    check_dim(obj, theta.len())?;
    let u = GaussianStream::new(step_seed).vector(theta.len());
    let v = m.apply(&u)?;
    Ok(spsa_probe(obj, theta, &v, mu, batch_seed).projected_grad)
}

fn check_dim(obj: &dyn Objective, n: usize) -> Result<()> {
    if obj.dim() != n {
        return Err(OptimError::DimensionMismatch {
            expected: obj.dim(),
            found: n,
        });
    }
    Ok(())
}

/// 1-based block index of step `t` (1-based) under a cyclic order.
///
/// `seed` only matters for [`BlockOrder::CyclicRandom`], whose window
/// `w = (t−1)/N` uses its own permutation derived from `(seed, w)`.
pub fn update_block_idx(order: BlockOrder, t: usize, n: usize, seed: u64) -> Result<usize> {
    if n == 0 || t == 0 {
        return Err(OptimError::InvalidConfig("t and N must be at least 1".into()));
    }
    Ok(match order {
        BlockOrder::Ascending => (t - 1) % n + 1,
        BlockOrder::Descending => n - (t - 1) % n,
        BlockOrder::FlipFlop => {
            if n == 1 {
                1
            } else {
                let period = 2 * n - 2;
                n - ((t - 1) % period).abs_diff(n - 1)
            }
        }
        BlockOrder::CyclicRandom => window_permutation(seed, (t - 1) / n, n)[(t - 1) % n],
        BlockOrder::Adaptive => {
            return Err(OptimError::InvalidConfig(
                "adaptive order is stateful; use AdaptiveSelector".into(),
            ))
        }
    })
}

fn window_permutation(seed: u64, window: usize, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (1..=n).collect();
    perm.shuffle(&mut seeded(mix64(&[seed, PERMUTATION_TAG, window as u64])));
    perm
}

/// [`update_block_idx`] with the current cyclic-random window cached.
#[derive(Debug, Clone)]
pub struct BlockSchedule {
    order: BlockOrder,
    n: usize,
    seed: u64,
    cached: Option<(usize, Vec<usize>)>,
}

impl BlockSchedule {
    pub fn new(order: BlockOrder, n: usize, seed: u64) -> Result<Self> {
        if order == BlockOrder::Adaptive {
            return Err(OptimError::InvalidConfig("adaptive order has no fixed schedule".into()));
        }
        if n == 0 {
            return Err(OptimError::InvalidConfig("need at least one block".into()));
        }
        Ok(Self {
            order,
            n,
            seed,
            cached: None,
        })
    }

    /// 1-based block of step `t`.
    pub fn block(&mut self, t: usize) -> usize {
        if self.order != BlockOrder::CyclicRandom {
            return update_block_idx(self.order, t, self.n, self.seed).expect("validated schedule");
        }
        let w = (t - 1) / self.n;
        if self.cached.as_ref().map(|c| c.0) != Some(w) {
            self.cached = Some((w, window_permutation(self.seed, w, self.n)));
        }
        self.cached.as_ref().expect("filled above").1[(t - 1) % self.n]
    }
}

/// Numerically stable `softmax(z / τ)`.
pub fn softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - max) / tau).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// EMA-driven block sampler.
#[derive(Debug, Clone)]
pub struct AdaptiveSelector {
    cfg: AdaptiveConfig,
    warmup: usize,
    ema: Vec<f64>,
    warm_schedule: BlockSchedule,
    seed: u64,
}

impl AdaptiveSelector {
    pub fn new(cfg: &AdaptiveConfig, n: usize, seed: u64) -> Result<Self> {
        let order = match cfg.warmup_order {
            WarmupOrder::RandomCycle => BlockOrder::CyclicRandom,
            WarmupOrder::Ascending => BlockOrder::Ascending,
        };
        Ok(Self {
            cfg: cfg.clone(),
            warmup: cfg.warmup.unwrap_or(10 * n),
            ema: vec![0.0; n],
            warm_schedule: BlockSchedule::new(order, n, mix64(&[seed, ADAPTIVE_TAG]))?,
            seed,
        })
    }

    pub fn warmup(&self) -> usize {
        self.warmup
    }

    pub fn ema(&self) -> &[f64] {
        &self.ema
    }

    /// Current sampling distribution `softmax(z̄ / τ)`.
    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.ema, self.cfg.tau)
    }

    /// 0-based block for step `t`.
    pub fn choose(&mut self, t: usize) -> usize {
        if t <= self.warmup {
            return self.warm_schedule.block(t) - 1;
        }
        let p = self.probabilities();
        let x: f64 = seeded(mix64(&[self.seed, t as u64, ADAPTIVE_TAG])).gen();
        let mut acc = 0.0;
        for (j, pj) in p.iter().enumerate() {
            acc += pj;
            if x < acc {
                return j;
            }
        }
        p.len() - 1
    }

    /// EMA update of the active block only.
    pub fn observe(&mut self, block: usize, projected_grad: f64) {
        let z = match self.cfg.ema_input {
            EmaInput::Magnitude => projected_grad.abs(),
            EmaInput::Signed => projected_grad,
        };
        let a = self.cfg.alpha;
        self.ema[block] = a * z + (1.0 - a) * self.ema[block];
    }
}

/// Block-local Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    local_step: usize,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            local_step: 0,
        }
    }

    pub fn m(&self) -> &[f64] {
        &self.m
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn local_step(&self) -> usize {
        self.local_step
    }

    pub fn is_reset(&self) -> bool {
        self.local_step == 0 && self.m.iter().chain(&self.v).all(|&x| x == 0.0)
    }

    /// Bias-corrected moments `(m̂, v̂)` after absorbing `g`.
    pub fn update(&mut self, g: &[f64], cfg: &AdamConfig) -> (Vec<f64>, Vec<f64>) {
        self.local_step += 1;
        let t = self.local_step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let mut m_hat = Vec::with_capacity(g.len());
        let mut v_hat = Vec::with_capacity(g.len());
        for ((m, v), &gi) in self.m.iter_mut().zip(&mut self.v).zip(g) {
            *m = b1 * *m + (1.0 - b1) * gi;
            *v = b2 * *v + (1.0 - b2) * gi * gi;
            m_hat.push(*m / c1);
            v_hat.push(*v / c2);
        }
        (m_hat, v_hat)
    }
}

/// Per-step perturbation family for [`zo_sgd_run`].
#[derive(Debug, Clone)]
pub enum Sampler {
    Identity,
    LowRank { s: usize },
    Sparse { s: f64, mode: SparseMode },
    BlockSparse(Arc<BlockPartition>),
    Controlled(Arc<ControlledSampler>),
}

impl Sampler {
    pub fn describe(&self) -> String {
        match self {
            Sampler::Identity => "identity".into(),
            Sampler::LowRank { s } => format!("low-rank(s={s})"),
            Sampler::Sparse { s, mode } => format!("sparse(s={s}, mode={mode:?})"),
            Sampler::BlockSparse(p) => format!("block-sparse(N={})", p.len()),
            Sampler::Controlled(c) => {
                format!("controlled(s={}, eigenvectors={})", c.srank(), c.eigenvector_count())
            }
        }
    }
}

enum Draw {
    Plain(Perturbation),
    Controlled(crate::perturbation::ControlledSubspace),
}

/// Shared state of every optimizer: objective, iterate, step counter.
struct Engine<'a> {
    obj: &'a dyn Objective,
    theta: Vec<f64>,
    cfg: OptimConfig,
    t: usize,
}

impl<'a> Engine<'a> {
    fn new(obj: &'a dyn Objective, theta: Vec<f64>, cfg: &OptimConfig) -> Result<Self> {
        cfg.validate()?;
        check_dim(obj, theta.len())?;
        if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteParameter(i));
        }
        if cfg.rho_every > 0 && obj.hessian().is_none() {
            return Err(OptimError::NoHessian);
        }
        Ok(Self {
            obj,
            theta,
            cfg: cfg.clone(),
            t: 0,
        })
    }

    fn measure_rho(&self, t: usize) -> bool {
        self.cfg.rho_every > 0 && t.is_multiple_of(self.cfg.rho_every)
    }

    fn hessian(&self) -> &Hessian {
        self.obj.hessian().expect("checked at construction")
    }
}

/// A stepwise optimizer; one call to `step` is one iteration.
pub trait ZerothOrderOptimizer {
    fn step(&mut self) -> StepRecord;
    fn params(&self) -> &[f64];
    fn steps_taken(&self) -> usize;
    fn config(&self) -> &OptimConfig;
    fn describe(&self) -> Vec<(String, String)>;
}

/// SPSA / subspace SPSA.
pub struct ZoSgd<'a> {
    eng: Engine<'a>,
    sampler: Sampler,
}

impl<'a> ZoSgd<'a> {
    pub fn new(obj: &'a dyn Objective, theta0: &[f64], cfg: &OptimConfig, sampler: Sampler) -> Result<Self> {
        let eng = Engine::new(obj, theta0.to_vec(), cfg)?;
        let d = theta0.len();
        let bad_dim = match &sampler {
            Sampler::LowRank { s } => *s == 0 || *s > d,
            Sampler::Sparse { s, .. } => !(*s > 0.0 && *s <= d as f64),
            Sampler::BlockSparse(p) => p.dim() != d,
            Sampler::Controlled(c) => c.dim() != d,
            Sampler::Identity => false,
        };
        if bad_dim {
            return Err(OptimError::InvalidConfig(format!(
                "sampler {} does not fit dimension {d}",
                sampler.describe()
            )));
        }
        Ok(Self { eng, sampler })
    }

    fn draw(&self, seed: u64) -> Draw {
        let d = self.eng.theta.len();
        let m = match &self.sampler {
            Sampler::Identity => Ok(Perturbation::Identity(d)),
            Sampler::LowRank { s } => sample_low_rank(d, *s, seed),
            Sampler::Sparse { s, mode } => sample_sparse(d, *s, *mode, seed),
            Sampler::BlockSparse(p) => sample_block_sparse(p, seed),
            Sampler::Controlled(c) => {
                return Draw::Controlled(c.sample(seed).expect("Gaussian draw is full rank"));
            }
        };
        Draw::Plain(m.expect("sampler parameters validated at construction"))
    }

    fn direction(&self, draw: &Draw, step_seed: u64) -> Vec<f64> {
        let d = self.eng.theta.len();
        let mut g = GaussianStream::new(step_seed);
        match (draw, self.eng.cfg.direction) {
            (Draw::Plain(m @ Perturbation::LowRank(u)), DirectionMode::Subspace) => {
                m.embed(&g.vector(u.cols())).expect("sized")
            }
            (Draw::Controlled(c), DirectionMode::Subspace) => {
                let m = c.to_perturbation().expect("full-rank draw");
                m.embed(&g.vector(c.srank())).expect("sized")
            }
            (Draw::Plain(m), _) => m.apply(&g.vector(d)).expect("sized"),
            (Draw::Controlled(c), DirectionMode::Ambient) => c.apply(&g.vector(d)).expect("sized"),
        }
    }
}

impl ZerothOrderOptimizer for ZoSgd<'_> {
    fn step(&mut self) -> StepRecord {
        let eng = &mut self.eng;
        eng.t += 1;
        let t = eng.t;
        let s = step_seed(eng.cfg.seed, t as u64);
        let b = batch_seed(eng.cfg.seed, t as u64);
        let mu = eng.cfg.mu;
        let eta = eng.cfg.lr.rate(t);
        if let Sampler::Identity = self.sampler {
            // Seed-reuse form: the direction is regenerated, never stored.
            let theta = &mut eng.theta;
            perturb_parameters(theta, mu, s);
            let loss_plus = eng.obj.loss(theta, b);
            perturb_parameters(theta, -2.0 * mu, s);
            let loss_minus = eng.obj.loss(theta, b);
            perturb_parameters(theta, mu, s);
            let pg = (loss_plus - loss_minus) / (2.0 * mu);
            perturb_parameters(theta, -eta * pg, s);
            let rho = eng.measure_rho(t).then(|| {
                let h = eng.hessian();
                h.trace() / h.lambda_max()
            });
            return StepRecord {
                step: t,
                loss_plus,
                loss_minus,
                projected_grad: pg,
                active_block: None,
                step_seed: s,
                rho,
            };
        }
        let draw = self.draw(mix64(&[s, SAMPLER_TAG]));
        let v = self.direction(&draw, s);
        let eng = &mut self.eng;
        let probe = spsa_probe(eng.obj, &mut eng.theta, &v, mu, b);
        shift(&mut eng.theta, -eta * probe.projected_grad, &v);
        let rho = eng.measure_rho(t).then(|| match (&draw, &self.sampler) {
            (Draw::Controlled(c), Sampler::Controlled(sampler)) => sampler.alignment(c),
            (Draw::Plain(m), _) => alignment_rho(m, eng.hessian()).expect("λ_max > 0 for measured runs"),
            _ => unreachable!("draw kind follows the sampler"),
        });
        let active_block = match &draw {
            Draw::Plain(m) => m.active_block(),
            Draw::Controlled(_) => None,
        };
        StepRecord {
            step: t,
            loss_plus: probe.loss_plus,
            loss_minus: probe.loss_minus,
            projected_grad: probe.projected_grad,
            active_block,
            step_seed: s,
            rho,
        }
    }

    fn params(&self) -> &[f64] {
        &self.eng.theta
    }

    fn steps_taken(&self) -> usize {
        self.eng.t
    }

    fn config(&self) -> &OptimConfig {
        &self.eng.cfg
    }

    fn describe(&self) -> Vec<(String, String)> {
        vec![
            ("method".into(), "zo-sgd".into()),
            ("sampler".into(), self.sampler.describe()),
            ("direction".into(), self.eng.cfg.direction.tag().into()),
        ]
    }
}

enum Selection {
    Schedule(BlockSchedule),
    Adaptive(AdaptiveSelector),
}

/// MeZO-BCD and its adaptive and Adam variants.
pub struct MezoBcd<'a> {
    eng: Engine<'a>,
    partition: Arc<BlockPartition>,
    selection: Selection,
    adam: Option<AdamState>,
    active: Option<usize>,
    variant: &'static str,
}

impl<'a> MezoBcd<'a> {
    /// Plain MeZO-BCD; `Adaptive` order selects the adaptive variant.
    pub fn new(obj: &'a dyn Objective, theta0: &ParamVector, cfg: &OptimConfig) -> Result<Self> {
        Self::build(obj, theta0, cfg, false)
    }

    /// Block-local Adam with block switches every `cfg.adam.interval` steps.
    pub fn with_adam(obj: &'a dyn Objective, theta0: &ParamVector, cfg: &OptimConfig) -> Result<Self> {
        Self::build(obj, theta0, cfg, true)
    }

    fn build(obj: &'a dyn Objective, theta0: &ParamVector, cfg: &OptimConfig, adam: bool) -> Result<Self> {
        let eng = Engine::new(obj, theta0.values().to_vec(), cfg)?;
        let partition = Arc::clone(theta0.partition());
        let n = partition.len();
        let selection = if cfg.block_order == BlockOrder::Adaptive {
            if adam {
                return Err(OptimError::InvalidConfig(
                    "adam intervals need a cyclic block order".into(),
                ));
            }
            let sel = AdaptiveSelector::new(&cfg.adaptive, n, cfg.seed)?;
            if sel.warmup() > cfg.steps {
                return Err(OptimError::InvalidConfig(format!(
                    "warmup {} exceeds step budget {}",
                    sel.warmup(),
                    cfg.steps
                )));
            }
            Selection::Adaptive(sel)
        } else {
            Selection::Schedule(BlockSchedule::new(cfg.block_order, n, cfg.seed)?)
        };
        let variant = match (&selection, adam) {
            (_, true) => "mezo-bcd-adam",
            (Selection::Adaptive(_), _) => "mezo-bcd-adaptive",
            _ => "mezo-bcd",
        };
        Ok(Self {
            eng,
            partition,
            selection,
            adam: adam.then(|| AdamState::new(0)),
            active: None,
            variant,
        })
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    /// 0-based block of the most recent step.
    pub fn active_block(&self) -> Option<usize> {
        self.active
    }

    pub fn adam_state(&self) -> Option<&AdamState> {
        self.adam.as_ref()
    }

    pub fn adaptive_selector(&self) -> Option<&AdaptiveSelector> {
        match &self.selection {
            Selection::Adaptive(a) => Some(a),
            Selection::Schedule(_) => None,
        }
    }

    fn choose(&mut self, t: usize) -> usize {
        match &mut self.selection {
            Selection::Adaptive(a) => a.choose(t),
            Selection::Schedule(s) => match self.adam {
                Some(_) => s.block((t - 1) / self.eng.cfg.adam.interval + 1) - 1,
                None => s.block(t) - 1,
            },
        }
    }
}

impl ZerothOrderOptimizer for MezoBcd<'_> {
    fn step(&mut self) -> StepRecord {
        let t = self.eng.t + 1;
        let j = self.choose(t);
        let cfg = &self.eng.cfg;
        if let Some(state) = &mut self.adam {
            if (t - 1).is_multiple_of(cfg.adam.interval) {
                *state = AdamState::new(self.partition.block(j).len());
            }
        }
        self.eng.t = t;
        self.active = Some(j);
        let s = step_seed(cfg.seed, t as u64);
        let b = batch_seed(cfg.seed, t as u64);
        let (mu, eta) = (cfg.mu, cfg.lr.rate(t));
        let range = self.partition.block(j);
        let obj = self.eng.obj;
        let theta = &mut self.eng.theta;

        perturb_parameters(&mut theta[range.clone()], mu, s);
        let loss_plus = obj.loss(theta, b);
        perturb_parameters(&mut theta[range.clone()], -2.0 * mu, s);
        let loss_minus = obj.loss(theta, b);
        perturb_parameters(&mut theta[range.clone()], mu, s);
        let pg = (loss_plus - loss_minus) / (2.0 * mu);

        if let Selection::Adaptive(a) = &mut self.selection {
            a.observe(j, pg);
        }
        match &mut self.adam {
            None => perturb_parameters(&mut theta[range.clone()], -eta * pg, s),
            Some(state) => {
                let g: Vec<f64> = GaussianStream::new(s).vector(range.len()).into_iter().map(|u| pg * u).collect();
                let (m_hat, v_hat) = state.update(&g, &cfg.adam);
                for ((x, m), v) in theta[range.clone()].iter_mut().zip(m_hat).zip(v_hat) {
                    *x -= eta * m / (v.sqrt() + cfg.adam.eps);
                }
            }
        }
        let rho = self.eng.measure_rho(t).then(|| {
            let h = self.eng.hessian();
            h.block_diagonal_sums(std::slice::from_ref(&range))[0] / h.lambda_max()
        });
        StepRecord {
            step: t,
            loss_plus,
            loss_minus,
            projected_grad: pg,
            active_block: Some(j),
            step_seed: s,
            rho,
        }
    }

    fn params(&self) -> &[f64] {
        &self.eng.theta
    }

    fn steps_taken(&self) -> usize {
        self.eng.t
    }

    fn config(&self) -> &OptimConfig {
        &self.eng.cfg
    }

    fn describe(&self) -> Vec<(String, String)> {
        let cfg = &self.eng.cfg;
        let mut out = vec![
            ("method".into(), self.variant.into()),
            ("blocks".into(), self.partition.len().to_string()),
            ("block_order".into(), cfg.block_order.tag().into()),
        ];
        if let Selection::Adaptive(a) = &self.selection {
            let c = &cfg.adaptive;
            out.push(("adaptive_alpha".into(), c.alpha.to_string()));
            out.push(("adaptive_tau".into(), c.tau.to_string()));
            out.push(("adaptive_warmup".into(), a.warmup().to_string()));
            out.push(("adaptive_warmup_order".into(), format!("{:?}", c.warmup_order)));
            out.push(("adaptive_ema_input".into(), format!("{:?}", c.ema_input)));
        }
        if self.adam.is_some() {
            let c = &cfg.adam;
            out.push(("adam_beta1".into(), c.beta1.to_string()));
            out.push(("adam_beta2".into(), c.beta2.to_string()));
            out.push(("adam_eps".into(), c.eps.to_string()));
            out.push(("adam_interval".into(), c.interval.to_string()));
        }
        out
    }
}

/// Runs `opt` to completion, applying the divergence guard, the non-finite
/// check and the optional loss target.
pub fn run_to_end(opt: &mut dyn ZerothOrderOptimizer, objective_id: &str) -> RunLog {
    let start = Instant::now();
    let cfg = opt.config().clone();
    let mut records = Vec::with_capacity(cfg.steps);
    let mut termination = Termination::Completed;
    let mut initial = None;
    while opt.steps_taken() < cfg.steps {
        let r = opt.step();
        records.push(r);
        let loss = r.loss();
        if !(r.loss_plus.is_finite() && r.loss_minus.is_finite()) {
            termination = Termination::NonFinite { step: r.step };
            break;
        }
        let init = *initial.get_or_insert(loss);
        if init > 0.0 && loss > cfg.divergence_factor * init {
            termination = Termination::Diverged { step: r.step };
            break;
        }
        if cfg.stop_at_loss.is_some_and(|target| loss <= target) {
            termination = Termination::TargetReached { step: r.step };
            break;
        }
    }
    let mut metadata = opt.describe();
    metadata.extend([
        ("objective".to_string(), objective_id.to_string()),
        ("mu".to_string(), cfg.mu.to_string()),
        ("lr".to_string(), cfg.lr.to_string()),
        ("steps".to_string(), cfg.steps.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("rho_every".to_string(), cfg.rho_every.to_string()),
        ("divergence_factor".to_string(), cfg.divergence_factor.to_string()),
        ("loss_proxy".to_string(), "(loss_plus+loss_minus)/2".to_string()),
    ]);
    if let Some(target) = cfg.stop_at_loss {
        metadata.push(("stop_at_loss".into(), fmt_f64(target)));
    }
    RunLog {
        records,
        metadata,
        termination,
        final_params: opt.params().to_vec(),
        wall_time: start.elapsed(),
    }
}

/// ZO-SGD; `Sampler::Identity` is plain SPSA, any other sampler draws a fresh `M` each step.
pub fn zo_sgd_run(obj: &dyn Objective, theta0: &[f64], cfg: &OptimConfig, sampler: Sampler) -> Result<RunLog> {
    let mut opt = ZoSgd::new(obj, theta0, cfg, sampler)?;
    Ok(run_to_end(&mut opt, &obj.id()))
}

/// MeZO-BCD with the configured block order.
pub fn mezo_bcd_run(obj: &dyn Objective, theta0: &ParamVector, cfg: &OptimConfig) -> Result<RunLog> {
    let mut opt = MezoBcd::new(obj, theta0, cfg)?;
    Ok(run_to_end(&mut opt, &obj.id()))
}

/// MeZO-BCD with adaptive block selection (the configured order is ignored).
pub fn adaptive_run(obj: &dyn Objective, theta0: &ParamVector, cfg: &OptimConfig) -> Result<RunLog> {
    let cfg = OptimConfig {
        block_order: BlockOrder::Adaptive,
        ..cfg.clone()
    };
    mezo_bcd_run(obj, theta0, &cfg)
}

/// MeZO-BCD with block-local Adam.
pub fn mezo_bcd_adam_run(obj: &dyn Objective, theta0: &ParamVector, cfg: &OptimConfig) -> Result<RunLog> {
    let mut opt = MezoBcd::with_adam(obj, theta0, cfg)?;
    Ok(run_to_end(&mut opt, &obj.id()))
}
