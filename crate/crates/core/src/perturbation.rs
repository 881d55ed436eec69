//! Subspace perturbation matrices `M` and the alignment statistics built on them.
//!
//! Every `M` here is an orthogonal projection: the identity, `UUᵀ` for an
//! orthonormal `U`, or `diag(m)` for a 0/1 mask. Projections are kept in
//! factored form and never materialized as `d×d` unless asked via
//! [`Perturbation::to_dense`].
//!
//! The alignment of `M` with a PSD Hessian `H` is
//! `ρ = Tr(MᵀHM) / λ_max(H)`; over any ensemble with `E[M] = (s/d)·I` its
//! mean is `s·Tr(H) / (d·λ_max(H))`.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution};
use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{self, dot, eig_sym, gemm, orthonormalize, LinalgError, Matrix, SymMatrix};
use crate::rng::{mix64, seeded, GaussianStream};
use crate::testbed::Hessian;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerturbationError {
    #[error("subspace size {s} out of range for dimension {dim}")]
    SrankOutOfRange { s: f64, dim: usize },
    #[error("invalid block partition: {0}")]
    InvalidPartition(String),
    #[error("block size {s} does not divide dimension {dim}")]
    IndivisibleBlocks { s: usize, dim: usize },
    #[error("alignment undefined: λ_max(H) = {0:e} is not positive")]
    UndefinedAlignment(f64),
    #[error("need {needed} eigenvectors with nonzero eigenvalue, Hessian has {available}")]
    InsufficientEigenvalues { needed: usize, available: usize },
    #[error("gamma {0} outside [0, 1]")]
    GammaOutOfRange(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{0} is only defined for low-rank perturbations")]
    NotLowRank(&'static str),
    #[error("sampled basis is numerically singular")]
    SingularBasis,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, PerturbationError>;

/// Disjoint contiguous blocks covering `0..dim` in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    dim: usize,
    blocks: Vec<Range<usize>>,
}

impl BlockPartition {
    /// `n` blocks of size `dim / n`.
    pub fn equal(dim: usize, n: usize) -> Result<Self> {
        if n == 0 || dim == 0 {
            return Err(PerturbationError::InvalidPartition("need at least one block".into()));
        }
        if !dim.is_multiple_of(n) {
            return Err(PerturbationError::IndivisibleBlocks { s: dim / n.max(1), dim });
        }
        let b = dim / n;
        Self::from_sizes(&vec![b; n])
    }

    /// Blocks of exactly `size` coordinates.
    pub fn with_block_size(dim: usize, size: usize) -> Result<Self> {
        if size == 0 || !dim.is_multiple_of(size) {
            return Err(PerturbationError::IndivisibleBlocks { s: size, dim });
        }
        Self::equal(dim, dim / size)
    }

    /// Consecutive blocks with the given sizes (e.g. one per layer).
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() {
            return Err(PerturbationError::InvalidPartition("empty partition".into()));
        }
        if sizes.contains(&0) {
            return Err(PerturbationError::InvalidPartition("empty block".into()));
        }
        let mut start = 0;
        let blocks = sizes
            .iter()
            .map(|&n| {
                let r = start..start + n;
                start += n;
                r
            })
            .collect();
        Ok(Self { dim: start, blocks })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn block(&self, j: usize) -> Range<usize> {
        self.blocks[j].clone()
    }

    pub fn is_equal_size(&self) -> bool {
        self.blocks.windows(2).all(|w| w[0].len() == w[1].len())
    }

    pub fn largest_block(&self) -> usize {
        self.blocks.iter().map(|r| r.len()).max().unwrap_or(0)
    }
}

/// How sparse masks are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SparseMode {
    /// Each coordinate independently kept with probability `s/d`.
    Bernoulli,
    /// Exactly `round(s)` coordinates kept, uniformly at random.
    Fixed,
}

/// The three random projection families plus their parameters' tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ensemble {
    LowRank,
    Sparse(SparseMode),
    BlockSparse,
}

impl Ensemble {
    pub const ALL: [Ensemble; 3] = [
        Ensemble::LowRank,
        Ensemble::Sparse(SparseMode::Fixed),
        Ensemble::BlockSparse,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Ensemble::LowRank => "low-rank",
            Ensemble::Sparse(SparseMode::Fixed) => "sparse",
            Ensemble::Sparse(SparseMode::Bernoulli) => "sparse-bernoulli",
            Ensemble::BlockSparse => "block-sparse",
        }
    }

    fn stream_tag(&self) -> u64 {
        match self {
            Ensemble::LowRank => 1,
            Ensemble::Sparse(SparseMode::Fixed) => 2,
            Ensemble::Sparse(SparseMode::Bernoulli) => 3,
            Ensemble::BlockSparse => 4,
        }
    }
}

impl fmt::Display for Ensemble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Ensemble {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "low-rank" | "lowrank" => Ok(Ensemble::LowRank),
            "sparse" | "sparse-fixed" => Ok(Ensemble::Sparse(SparseMode::Fixed)),
            "sparse-bernoulli" => Ok(Ensemble::Sparse(SparseMode::Bernoulli)),
            "block-sparse" | "blocksparse" => Ok(Ensemble::BlockSparse),
            other => Err(format!("unknown ensemble '{other}'")),
        }
    }
}

/// A projection matrix `M` in factored form.
#[derive(Debug, Clone, PartialEq)]
pub enum Perturbation {
    Identity(usize),
    /// `M = UUᵀ` with orthonormal columns.
    LowRank(Matrix),
    /// `M = diag(mask)`.
    SparseMask { mask: Vec<bool>, cardinality: usize },
    /// `M = diag(1_{B_j})`.
    BlockSparse { partition: Arc<BlockPartition>, block: usize },
}

impl Perturbation {
    pub fn dim(&self) -> usize {
        match self {
            Perturbation::Identity(d) => *d,
            Perturbation::LowRank(u) => u.rows(),
            Perturbation::SparseMask { mask, .. } => mask.len(),
            Perturbation::BlockSparse { partition, .. } => partition.dim(),
        }
    }

    /// Stable rank of `M`, read off the factored form (`M` is a projection,
    /// so it equals the rank).
    pub fn srank(&self) -> usize {
        match self {
            Perturbation::Identity(d) => *d,
            Perturbation::LowRank(u) => u.cols(),
            Perturbation::SparseMask { cardinality, .. } => *cardinality,
            Perturbation::BlockSparse { partition, block } => partition.block(*block).len(),
        }
    }

    /// Active block of a block-sparse perturbation.
    pub fn active_block(&self) -> Option<usize> {
        match self {
            Perturbation::BlockSparse { block, .. } => Some(*block),
            _ => None,
        }
    }

    /// `M u` for `u ∈ ℝᵈ`.
    pub fn apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if u.len() != d {
            return Err(PerturbationError::DimensionMismatch {
                expected: d,
                found: u.len(),
            });
        }
        Ok(match self {
            Perturbation::Identity(_) => u.to_vec(),
            Perturbation::LowRank(basis) => basis.matvec(&basis.tr_matvec(u)),
            Perturbation::SparseMask { mask, .. } => u
                .iter()
                .zip(mask)
                .map(|(&x, &m)| if m { x } else { 0.0 })
                .collect(),
            Perturbation::BlockSparse { partition, block } => {
                let r = partition.block(*block);
                let mut out = vec![0.0; d];
                out[r.clone()].copy_from_slice(&u[r]);
                out
            }
        })
    }

    /// `U w` for `w ∈ ℝˢ` (low-rank only).
    pub fn embed(&self, w: &[f64]) -> Result<Vec<f64>> {
        match self {
            Perturbation::LowRank(basis) => {
                if w.len() != basis.cols() {
                    return Err(PerturbationError::DimensionMismatch {
                        expected: basis.cols(),
                        found: w.len(),
                    });
                }
                Ok(basis.matvec(w))
            }
            _ => Err(PerturbationError::NotLowRank("embed")),
        }
    }

    /// Dense `d×d` form of `M`.
    pub fn to_dense(&self) -> SymMatrix {
        let d = self.dim();
        match self {
            Perturbation::Identity(_) => SymMatrix::identity(d),
            Perturbation::LowRank(basis) => basis.outer_gram(),
            Perturbation::SparseMask { mask, .. } => {
                SymMatrix::from_diag(&mask.iter().map(|&m| f64::from(u8::from(m))).collect::<Vec<_>>())
            }
            Perturbation::BlockSparse { partition, block } => {
                let r = partition.block(*block);
                SymMatrix::from_diag(&(0..d).map(|i| f64::from(u8::from(r.contains(&i)))).collect::<Vec<_>>())
            }
        }
    }
}

/// Free-function form of [`Perturbation::apply`].
pub fn apply_m(m: &Perturbation, u: &[f64]) -> Result<Vec<f64>> {
    m.apply(u)
}

fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut g = GaussianStream::new(seed);
    let data = g.vector(rows * cols);
    Matrix::from_col_major(rows, cols, data).expect("sized buffer")
}

/// `UUᵀ` with `U` the orthonormalized `d×s` standard Gaussian matrix drawn from `seed`.
pub fn sample_low_rank(d: usize, s: usize, seed: u64) -> Result<Perturbation> {
    if s == 0 || s > d {
        return Err(PerturbationError::SrankOutOfRange { s: s as f64, dim: d });
    }
    let g = gaussian_matrix(d, s, seed);
    Ok(Perturbation::LowRank(orthonormalize(&g)?))
}

pub fn sample_sparse(d: usize, s: f64, mode: SparseMode, seed: u64) -> Result<Perturbation> {
    if !(s > 0.0 && s <= d as f64) {
        return Err(PerturbationError::SrankOutOfRange { s, dim: d });
    }
    let mut rng = seeded(seed);
    let mask = match mode {
        SparseMode::Bernoulli => {
            let p = s / d as f64;
            (0..d).map(|_| rng.gen::<f64>() < p).collect::<Vec<_>>()
        }
        SparseMode::Fixed => {
            let k = s.round() as usize;
            let mut mask = vec![false; d];
            for i in index::sample(&mut rng, d, k) {
                mask[i] = true;
            }
            mask
        }
    };
    let cardinality = mask.iter().filter(|&&m| m).count();
    Ok(Perturbation::SparseMask { mask, cardinality })
}

pub fn sample_block_sparse(partition: &Arc<BlockPartition>, seed: u64) -> Result<Perturbation> {
    if partition.is_empty() {
        return Err(PerturbationError::InvalidPartition("empty partition".into()));
    }
    let block = seeded(seed).gen_range(0..partition.len());
    Ok(Perturbation::BlockSparse {
        partition: Arc::clone(partition),
        block,
    })
}

/// Number of Hessian eigenvectors placed in a controlled projection: `⌈sγ⌉`.
pub fn eigenvector_count(s: usize, gamma: f64) -> usize {
    // Tolerate products like 20·0.35 = 7.000000000000001.
    ((s as f64) * gamma - 1e-9).ceil().max(0.0) as usize
}

/// Draws controlled-alignment projections for one Hessian.
///
/// The first `⌈sγ⌉` directions are randomly chosen eigenvectors of `H` with
/// nonzero eigenvalue (`M₁`). The rest span `R' = R − M₁M₁ᵀR` for a Gaussian
/// `R`. Each draw keeps `R'` and the Cholesky factor of `R'ᵀR'` instead of an
/// orthonormal basis, so `M u` costs one small Gram product.
#[derive(Debug, Clone)]
pub struct ControlledSampler {
    basis: Matrix,
    eigenvalues: Vec<f64>,
    lambda_max: f64,
    s: usize,
    k: usize,
}

impl ControlledSampler {
    pub fn new(h: &Hessian, s: usize, gamma: f64) -> Result<Self> {
        let d = h.dim();
        if s == 0 || s > d {
            return Err(PerturbationError::SrankOutOfRange { s: s as f64, dim: d });
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(PerturbationError::GammaOutOfRange(gamma));
        }
        let k = eigenvector_count(s, gamma);
        let pairs = h.nonzero_pairs();
        if k > pairs.len() {
            return Err(PerturbationError::InsufficientEigenvalues {
                needed: k,
                available: pairs.len(),
            });
        }
        let columns: Vec<Vec<f64>> = (0..pairs.len()).map(|i| h.eigenvector(i)).collect();
        Ok(Self {
            basis: Matrix::from_columns(d, &columns)?,
            eigenvalues: pairs.iter().map(|p| p.value).collect(),
            lambda_max: check_lambda(h)?,
            s,
            k,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn srank(&self) -> usize {
        self.s
    }

    pub fn eigenvector_count(&self) -> usize {
        self.k
    }

    pub fn sample(&self, seed: u64) -> Result<ControlledSubspace> {
        let d = self.dim();
        let (k, n) = (self.k, self.s - self.k);
        let mut rng = seeded(mix64(&[seed, 0xC0]));
        let chosen = index::sample(&mut rng, self.eigenvalues.len(), k).into_vec();
        let mut fixed = Vec::with_capacity(d * k);
        for &i in &chosen {
            fixed.extend_from_slice(self.basis.col(i));
        }
        let fixed = Matrix::from_col_major(d, k, fixed)?;
        let fixed_values = chosen.iter().map(|&i| self.eigenvalues[i]).collect();
        let mut free = gaussian_matrix(d, n, mix64(&[seed, 0xC1]));
        if k > 0 && n > 0 {
            let mut t = vec![0.0; k * n];
            gemm(k, d, n, 1.0, fixed.as_slice(), d, true, free.as_slice(), d, 0.0, &mut t, k);
            let mut r = free.as_slice().to_vec();
            gemm(d, k, n, -1.0, fixed.as_slice(), d, false, &t, k, 1.0, &mut r, d);
            free = Matrix::from_col_major(d, n, r)?;
        }
        let chol = if n > 0 {
            linalg::cholesky(&linalg::gram_gemm(&free), n).ok_or(PerturbationError::SingularBasis)?
        } else {
            Vec::new()
        };
        Ok(ControlledSubspace {
            fixed,
            fixed_values,
            free,
            chol,
        })
    }

    /// `ρ(M, H)` of a draw from this sampler.
    pub fn alignment(&self, m: &ControlledSubspace) -> f64 {
        let r = self.eigenvalues.len();
        let n = m.free.cols();
        let fixed: f64 = m.fixed_values.iter().sum();
        if n == 0 {
            return fixed / self.lambda_max;
        }
        let d = self.dim();
        let mut y = vec![0.0; r * n];
        gemm(r, d, n, 1.0, self.basis.as_slice(), d, true, m.free.as_slice(), d, 0.0, &mut y, r);
        let weights: Vec<f64> = self.eigenvalues.iter().map(|v| v.sqrt()).collect();
        (fixed + weighted_solve_norm(&weights, y, r, &m.chol, n)) / self.lambda_max
    }
}

/// One controlled projection `M = M₁M₁ᵀ + P_{span R'}`.
#[derive(Debug, Clone)]
pub struct ControlledSubspace {
    fixed: Matrix,
    fixed_values: Vec<f64>,
    free: Matrix,
    chol: Vec<f64>,
}

impl ControlledSubspace {
    pub fn dim(&self) -> usize {
        self.fixed.rows()
    }

    pub fn srank(&self) -> usize {
        self.fixed.cols() + self.free.cols()
    }

    /// `M u`.
    pub fn apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.dim() {
            return Err(PerturbationError::DimensionMismatch {
                expected: self.dim(),
                found: u.len(),
            });
        }
        let mut out = self.fixed.matvec(&self.fixed.tr_matvec(u));
        let n = self.free.cols();
        if n > 0 {
            let mut z = self.free.tr_matvec(u);
            let l = &self.chol;
            for i in 0..n {
                z[i] = (z[i] - dot(&l[i * n..i * n + i], &z[..i])) / l[i * n + i];
            }
            for i in (0..n).rev() {
                let mut v = z[i];
                for j in i + 1..n {
                    v -= l[j * n + i] * z[j];
                }
                z[i] = v / l[i * n + i];
            }
            for (o, p) in out.iter_mut().zip(self.free.matvec(&z)) {
                *o += p;
            }
        }
        Ok(out)
    }

    /// Orthonormal `[M₁, M₂]` form with `M₂ = orth(R')`.
    pub fn to_perturbation(&self) -> Result<Perturbation> {
        let d = self.dim();
        let mut data = self.fixed.as_slice().to_vec();
        if self.free.cols() > 0 {
            data.extend_from_slice(orthonormalize(&self.free)?.as_slice());
        }
        Ok(Perturbation::LowRank(Matrix::from_col_major(d, self.srank(), data)?))
    }
}

/// Low-rank projection whose first `⌈sγ⌉` columns are randomly chosen
/// eigenvectors of `H` (nonzero eigenvalue) and whose remaining columns
/// orthonormalize a Gaussian matrix against them.
pub fn controlled_projection(h: &Hessian, s: usize, gamma: f64, seed: u64) -> Result<Perturbation> {
    ControlledSampler::new(h, s, gamma)?.sample(seed)?.to_perturbation()
}

fn check_lambda(h: &Hessian) -> Result<f64> {
    let l = h.lambda_max();
    if l > 0.0 {
        Ok(l)
    } else {
        Err(PerturbationError::UndefinedAlignment(l))
    }
}

/// `ρ = Tr(MᵀHM) / λ_max(H)` from the factored form of `M`: diagonal sums
/// for masks, `Σⱼ uⱼᵀHuⱼ` for low rank.
pub fn alignment_rho(m: &Perturbation, h: &Hessian) -> Result<f64> {
    let lambda = check_lambda(h)?;
    if m.dim() != h.dim() {
        return Err(PerturbationError::DimensionMismatch {
            expected: h.dim(),
            found: m.dim(),
        });
    }
    let hm = h.matrix();
    let trace = match m {
        Perturbation::Identity(_) => h.trace(),
        Perturbation::LowRank(u) => (0..u.cols()).map(|j| h.quad_form(u.col(j))).sum(),
        Perturbation::SparseMask { mask, .. } => mask
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .map(|(i, _)| hm.get(i, i))
            .sum(),
        Perturbation::BlockSparse { partition, block } => partition.block(*block).map(|i| hm.get(i, i)).sum(),
    };
    Ok(trace / lambda)
}

/// Dense reference for [`alignment_rho`]: forms `M`, `MᵀHM` and `λ_max` by eigensolve.
pub fn alignment_rho_dense(m: &Perturbation, h: &SymMatrix) -> Result<f64> {
    let lambda = eig_sym(h)?.lambda_max();
    if lambda <= 0.0 {
        return Err(PerturbationError::UndefinedAlignment(lambda));
    }
    let md = m.to_dense();
    let d = h.dim();
    // Tr(MᵀHM) = Σᵢⱼ (HM)ᵢⱼ Mᵢⱼ for symmetric M.
    let mut trace = 0.0;
    for i in 0..d {
        for j in 0..d {
            let hm_ij: f64 = (0..d).map(|k| h.get(i, k) * md.get(k, j)).sum();
            trace += hm_ij * md.get(i, j);
        }
    }
    Ok(trace / lambda)
}

/// `E[ρ] = s·Tr(H) / (d·λ_max(H))`.
pub fn expected_rho(h: &Hessian, s: f64) -> Result<f64> {
    let lambda = check_lambda(h)?;
    let d = h.dim() as f64;
    if !(s > 0.0 && s <= d) {
        return Err(PerturbationError::SrankOutOfRange { s, dim: h.dim() });
    }
    Ok(s * h.trace() / (d * lambda))
}

/// Exact `P(ρ ≥ threshold)` for a uniformly drawn block, as `good / total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TailProbability {
    pub good: usize,
    pub total: usize,
}

impl TailProbability {
    pub fn value(&self) -> f64 {
        self.good as f64 / self.total as f64
    }
}

/// Counts blocks whose diagonal mass reaches `λ_max · threshold` (ties count).
pub fn block_tail_probability(h: &Hessian, partition: &BlockPartition, threshold: f64) -> Result<TailProbability> {
    let lambda = check_lambda(h)?;
    if partition.dim() != h.dim() {
        return Err(PerturbationError::DimensionMismatch {
            expected: h.dim(),
            found: partition.dim(),
        });
    }
    let cut = lambda * threshold;
    let good = h
        .block_diagonal_sums(partition.blocks())
        .into_iter()
        .filter(|&sum| sum >= cut)
        .count();
    Ok(TailProbability {
        good,
        total: partition.len(),
    })
}

/// One ρ draw.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentSample {
    pub ensemble: Ensemble,
    pub srank: f64,
    pub trial: usize,
    pub rho: f64,
}

/// Seed of trial `trial` in [`rho_distribution`].
pub fn trial_seed(seed: u64, ensemble: Ensemble, s: f64, trial: usize) -> u64 {
    mix64(&[seed, ensemble.stream_tag(), s.to_bits(), trial as u64])
}

/// Draws `M` from an ensemble `n_trials` times and records `ρ(M, H)`.
///
/// Low-rank draws are sampled through the range of `H` (see
/// [`RangeSampler`]) rather than by orthonormalizing a `d×s` matrix; the two
/// have the same distribution.
pub fn rho_distribution(
    ensemble: Ensemble,
    h: &Hessian,
    s: f64,
    n_trials: usize,
    seed: u64,
) -> Result<Vec<AlignmentSample>> {
    let d = h.dim();
    check_lambda(h)?;
    if !(s > 0.0 && s <= d as f64) {
        return Err(PerturbationError::SrankOutOfRange { s, dim: d });
    }
    let sample = |trial: usize, rho: f64| AlignmentSample {
        ensemble,
        srank: s,
        trial,
        rho,
    };
    match ensemble {
        Ensemble::LowRank => {
            if s.fract() != 0.0 {
                return Err(PerturbationError::SrankOutOfRange { s, dim: d });
            }
            let sampler = RangeSampler::new(h);
            (0..n_trials)
                .into_par_iter()
                .map(|t| Ok(sample(t, sampler.sample(h, s as usize, trial_seed(seed, ensemble, s, t))?)))
                .collect()
        }
        Ensemble::Sparse(mode) => (0..n_trials)
            .into_par_iter()
            .map(|t| {
                let m = sample_sparse(d, s, mode, trial_seed(seed, ensemble, s, t))?;
                Ok(sample(t, alignment_rho(&m, h)?))
            })
            .collect(),
        Ensemble::BlockSparse => {
            if s.fract() != 0.0 || !d.is_multiple_of(s as usize) {
                return Err(PerturbationError::IndivisibleBlocks { s: s as usize, dim: d });
            }
            let partition = Arc::new(BlockPartition::with_block_size(d, s as usize)?);
            let lambda = h.lambda_max();
            let sums = h.block_diagonal_sums(partition.blocks());
            (0..n_trials)
                .map(|t| {
                    let m = sample_block_sparse(&partition, trial_seed(seed, ensemble, s, t))?;
                    let j = m.active_block().expect("block-sparse");
                    Ok(sample(t, sums[j] / lambda))
                })
                .collect()
        }
    }
}

/// Low-rank ρ sampler working in the range of `H`.
///
/// Write `G = Q [G_R; G_⊥]` with `Q = [V, V⊥]` and `V` the `R` eigenvectors
/// with nonzero eigenvalue. Then `Tr(P_G H) = ‖Λ^{1/2} G_R L⁻ᵀ‖²_F` where
/// `LLᵀ = G_RᵀG_R + G_⊥ᵀG_⊥`. Rotation invariance makes `G_R` an `R×s`
/// standard Gaussian and `G_⊥ᵀG_⊥` a Wishart matrix, which is drawn through
/// its Bartlett factor. Exact in distribution; falls back to the orthonormal
/// route when the complement has fewer than `s` dimensions.
struct RangeSampler {
    weights: Vec<f64>,
    complement: usize,
    lambda_max: f64,
}

impl RangeSampler {
    fn new(h: &Hessian) -> Self {
        let weights: Vec<f64> = h.nonzero_pairs().iter().map(|p| p.value.sqrt()).collect();
        Self {
            complement: h.dim() - weights.len(),
            weights,
            lambda_max: h.lambda_max(),
        }
    }

    fn sample(&self, h: &Hessian, s: usize, seed: u64) -> Result<f64> {
        let r = self.weights.len();
        if self.complement < s || r == 0 {
            return alignment_rho(&sample_low_rank(h.dim(), s, seed)?, h);
        }
        let mut stream = GaussianStream::new(seed);
        let gr = Matrix::from_col_major(r, s, stream.vector(r * s)).expect("sized buffer");
        let a = bartlett_factor(s, self.complement, &mut stream, mix64(&[seed, 0xB4]));
        Ok(range_alignment(&self.weights, &gr, &a)? / self.lambda_max)
    }
}

/// Row-major lower `A` with `AAᵀ ~ Wishart_s(n, I)`.
fn bartlett_factor(s: usize, n: usize, stream: &mut GaussianStream, chi_seed: u64) -> Vec<f64> {
    let mut rng = seeded(chi_seed);
    let mut a = vec![0.0; s * s];
    for i in 0..s {
        for j in 0..i {
            a[i * s + j] = stream.sample();
        }
        let chi = ChiSquared::new((n - i) as f64).expect("positive degrees of freedom");
        a[i * s + i] = chi.sample(&mut rng).sqrt();
    }
    a
}

/// `‖diag(w) G_R L⁻ᵀ‖²_F` with `LLᵀ = G_RᵀG_R + AAᵀ` (`A` row-major lower).
fn range_alignment(weights: &[f64], gr: &Matrix, a: &[f64]) -> Result<f64> {
    let (r, s) = (gr.rows(), gr.cols());
    let mut c = linalg::gram_gemm(gr);
    for i in 0..s {
        for j in 0..=i {
            let w = dot(&a[i * s..i * s + j + 1], &a[j * s..j * s + j + 1]);
            c[j * s + i] += w;
            if i != j {
                c[i * s + j] += w;
            }
        }
    }
    let l = linalg::cholesky(&c, s).ok_or(PerturbationError::SingularBasis)?;
    Ok(weighted_solve_norm(weights, gr.as_slice().to_vec(), r, &l, s))
}

/// `‖diag(w) Y L⁻ᵀ‖²_F` for column-major `Y` (`r×s`) and row-major lower `L`.
fn weighted_solve_norm(weights: &[f64], mut x: Vec<f64>, r: usize, l: &[f64], s: usize) -> f64 {
    // Blocked forward substitution for X Lᵀ = Y.
    const NB: usize = 32;
    for j0 in (0..s).step_by(NB) {
        let j1 = (j0 + NB).min(s);
        let (solved, rest) = x.split_at_mut(j0 * r);
        if j0 > 0 {
            gemm(r, j0, j1 - j0, -1.0, solved, r, false, &l[j0 * s..], s, 1.0, rest, r);
        }
        for j in j0..j1 {
            let (done, tail) = rest.split_at_mut((j - j0) * r);
            let col = &mut tail[..r];
            for k in j0..j {
                let ljk = l[j * s + k];
                if ljk != 0.0 {
                    linalg::axpy(-ljk, &done[(k - j0) * r..(k - j0 + 1) * r], col);
                }
            }
            let inv = 1.0 / l[j * s + j];
            col.iter_mut().for_each(|e| *e *= inv);
        }
    }
    x.chunks_exact(r)
        .map(|col| col.iter().zip(weights).map(|(v, w)| (v * w).powi(2)).sum::<f64>())
        .sum()
}
