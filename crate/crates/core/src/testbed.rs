//! Objectives for optimization runs: the randomized quadratic `½θᵀHθ` with
//! its block-diagonal Hessian generators, and a small logistic-regression
//! objective whose minibatches are drawn from a seed.

use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::linalg::{self, dot, eig_sym, orthonormalize, LinalgError, Matrix, SymMatrix};
use crate::rng::{mix64, seeded, GaussianStream};

/// Eigenvalues above `EIG_RANK_TOL · λ_max` count as nonzero.
pub const EIG_RANK_TOL: f64 = 1e-9;
/// Reference levels used by the heterogeneous block generator.
pub const DEFAULT_REFERENCE_LEVELS: [f64; 4] = [10.0, 40.0, 70.0, 100.0];
/// Class-mean offset giving 95% Bayes accuracy for unit-variance clusters
/// (`Φ(1.6448536) = 0.95`).
pub const SEPARATION_95: f64 = 1.644_853_626_951_472_2;

const HESSIAN_MAGIC: &[u8; 8] = b"SZHESS01";

#[derive(Debug, Error)]
pub enum TestbedError {
    #[error("invalid Hessian spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: objective has {expected} parameters, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("matrix is not block diagonal: entry ({row}, {col}) = {value:e} lies outside the blocks")]
    NotBlockDiagonal { row: usize, col: usize, value: f64 },
    #[error("malformed Hessian file: {0}")]
    Format(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TestbedError>;

/// `n` evenly spaced values from `start` to `end`; a single step yields `[start]`.
pub fn linspace(start: f64, end: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![start],
        _ => {
            let h = (end - start) / (steps - 1) as f64;
            (0..steps)
                .map(|k| if k == steps - 1 { end } else { start + h * k as f64 })
                .collect()
        }
    }
}

/// Parameters of the block-diagonal low-rank Hessian generator.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianSpec {
    pub dim: usize,
    pub rank: usize,
    pub num_blocks: usize,
    pub max_eigenvals: Vec<f64>,
    pub seed: u64,
}

impl HessianSpec {
    pub fn validate(&self) -> Result<()> {
        check_blocks(self.dim, self.num_blocks, self.rank)?;
        if self.max_eigenvals.len() != self.num_blocks {
            return Err(TestbedError::InvalidSpec(format!(
                "{} max eigenvalues for {} blocks",
                self.max_eigenvals.len(),
                self.num_blocks
            )));
        }
        if let Some(v) = self.max_eigenvals.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(TestbedError::InvalidSpec(format!("max eigenvalue {v} is not positive")));
        }
        Ok(())
    }

    pub fn block_size(&self) -> usize {
        self.dim / self.num_blocks
    }
}

fn check_blocks(dim: usize, num_blocks: usize, rank: usize) -> Result<()> {
    if dim == 0 || num_blocks == 0 {
        return Err(TestbedError::InvalidSpec("dim and num_blocks must be positive".into()));
    }
    if !dim.is_multiple_of(num_blocks) {
        return Err(TestbedError::InvalidSpec(format!(
            "dim {dim} is not divisible by {num_blocks} blocks"
        )));
    }
    if rank == 0 || rank > dim / num_blocks {
        return Err(TestbedError::InvalidSpec(format!(
            "rank {rank} must lie in 1..={}",
            dim / num_blocks
        )));
    }
    Ok(())
}

fn equal_blocks(dim: usize, num_blocks: usize) -> Vec<Range<usize>> {
    let b = dim / num_blocks;
    (0..num_blocks).map(|i| i * b..(i + 1) * b).collect()
}

/// Random `n×n` orthogonal matrix from orthonormalizing a Gaussian matrix.
fn random_orthogonal(n: usize, seed: u64) -> Result<Matrix> {
    let mut g = GaussianStream::new(seed);
    let r = Matrix::from_fn(n, n, |_, _| g.sample());
    Ok(orthonormalize(&r)?)
}

fn assemble(dim: usize, blocks: &[Range<usize>], spectra: &[Vec<f64>], seed: u64) -> Result<SymMatrix> {
    let mut h = SymMatrix::zeros(dim);
    for (i, (range, eigenvalues)) in blocks.iter().zip(spectra).enumerate() {
        let n = range.len();
        let q = random_orthogonal(n, mix64(&[seed, i as u64]))?;
        let nonzero = eigenvalues.len();
        let block = SymMatrix::from_fn(n, |a, b| {
            (0..nonzero)
                .map(|k| eigenvalues[k] * q.get(a, k) * q.get(b, k))
                .sum()
        });
        h.set_block(range.start, &block);
    }
    Ok(h)
}

/// Block-diagonal `H = diag(Q₁Λ₁Q₁ᵀ, …)` with `Λᵢ = diag(linspace(λᵢ, 0.1λᵢ, r), 0, …)`.
pub fn generate_hessian(spec: &HessianSpec) -> Result<Hessian> {
    spec.validate()?;
    let blocks = equal_blocks(spec.dim, spec.num_blocks);
    let spectra: Vec<Vec<f64>> = spec
        .max_eigenvals
        .iter()
        .map(|&l| linspace(l, 0.1 * l, spec.rank))
        .collect();
    let matrix = assemble(spec.dim, &blocks, &spectra, spec.seed)?;
    Hessian::block_diagonal(matrix, blocks, spec.rank)
}

/// Block-diagonal Hessian whose blocks draw a reference level from
/// `reference_levels` and integer eigenvalues within ±2 of it.
pub fn heterogeneous_block_hessian(
    dim: usize,
    num_blocks: usize,
    rank: usize,
    reference_levels: &[f64],
    seed: u64,
) -> Result<Hessian> {
    check_blocks(dim, num_blocks, rank)?;
    if reference_levels.is_empty() {
        return Err(TestbedError::InvalidSpec("empty reference set".into()));
    }
    if let Some(v) = reference_levels.iter().find(|v| !(**v > 2.0 && v.is_finite())) {
        return Err(TestbedError::InvalidSpec(format!(
            "reference level {v} must exceed 2 so every eigenvalue stays positive"
        )));
    }
    let blocks = equal_blocks(dim, num_blocks);
    let mut rng = seeded(mix64(&[seed, 0xE16]));
    let spectra: Vec<Vec<f64>> = blocks
        .iter()
        .map(|_| {
            let reference = reference_levels[rng.gen_range(0..reference_levels.len())].round();
            let mut eig: Vec<f64> = (0..rank)
                .map(|_| reference + rng.gen_range(-2i64..=2) as f64)
                .collect();
            eig.sort_by(|a, b| b.total_cmp(a));
            eig
        })
        .collect();
    let matrix = assemble(dim, &blocks, &spectra, seed)?;
    Hessian::block_diagonal(matrix, blocks, rank)
}

/// One eigenpair of a block-diagonal matrix; the vector lives on `block` only.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub value: f64,
    pub block: usize,
    pub vector: Vec<f64>,
}

/// A PSD matrix together with its block layout and eigenpairs.
#[derive(Debug, Clone)]
pub struct Hessian {
    matrix: SymMatrix,
    blocks: Vec<Range<usize>>,
    rank_per_block: usize,
    /// All eigenpairs, sorted by descending eigenvalue.
    pairs: Vec<EigenPair>,
    lambda_max: f64,
    trace: f64,
}

impl Hessian {
    /// Treats the whole matrix as one block.
    pub fn from_matrix(matrix: SymMatrix) -> Result<Self> {
        let dim = matrix.dim();
        Self::block_diagonal(matrix, std::iter::once(0..dim).collect(), 0)
    }

    /// Wraps a block-diagonal matrix; entries outside the blocks must be exactly zero.
    pub fn block_diagonal(matrix: SymMatrix, blocks: Vec<Range<usize>>, rank_per_block: usize) -> Result<Self> {
        matrix.check_finite()?;
        let dim = matrix.dim();
        let mut owner = vec![usize::MAX; dim];
        for (b, r) in blocks.iter().enumerate() {
            for i in r.clone() {
                owner[i] = b;
            }
        }
        if let Some(i) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(TestbedError::InvalidSpec(format!("index {i} is not covered by any block")));
        }
        for i in 0..dim {
            for (j, &v) in matrix.row(i).iter().enumerate() {
                if v != 0.0 && owner[i] != owner[j] {
                    return Err(TestbedError::NotBlockDiagonal { row: i, col: j, value: v });
                }
            }
        }
        let mut pairs = Vec::with_capacity(dim);
        for (b, r) in blocks.iter().enumerate() {
            let eig = eig_sym(&matrix.submatrix(r.clone()))?;
            for (k, &value) in eig.eigenvalues.iter().enumerate() {
                pairs.push(EigenPair {
                    value,
                    block: b,
                    vector: eig.eigenvectors.col(k).to_vec(),
                });
            }
        }
        pairs.sort_by(|a, b| b.value.total_cmp(&a.value));
        let lambda_max = pairs.first().map_or(0.0, |p| p.value);
        let trace = matrix.trace();
        Ok(Self {
            matrix,
            blocks,
            rank_per_block,
            pairs,
            lambda_max,
            trace,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn matrix(&self) -> &SymMatrix {
        &self.matrix
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn rank_per_block(&self) -> usize {
        self.rank_per_block
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn trace(&self) -> f64 {
        self.trace
    }

    pub fn eigenpairs(&self) -> &[EigenPair] {
        &self.pairs
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.value).collect()
    }

    /// Eigenpairs with value above `EIG_RANK_TOL · λ_max`.
    pub fn nonzero_pairs(&self) -> &[EigenPair] {
        let cut = EIG_RANK_TOL * self.lambda_max;
        let n = self.pairs.iter().take_while(|p| p.value > cut).count();
        &self.pairs[..n]
    }

    /// Embeds eigenpair `k`'s vector into ℝᵈ.
    pub fn eigenvector(&self, k: usize) -> Vec<f64> {
        let p = &self.pairs[k];
        let mut v = vec![0.0; self.dim()];
        v[self.blocks[p.block].clone()].copy_from_slice(&p.vector);
        v
    }

    pub fn intdim(&self) -> std::result::Result<f64, LinalgError> {
        if self.lambda_max <= 0.0 {
            return Err(LinalgError::ZeroMatrix);
        }
        Ok(self.trace / self.lambda_max)
    }

    /// Per-block sums of diagonal entries.
    pub fn block_diagonal_sums(&self, blocks: &[Range<usize>]) -> Vec<f64> {
        blocks
            .iter()
            .map(|r| r.clone().map(|i| self.matrix.get(i, i)).sum())
            .collect()
    }

    /// `xᵀ H x`, touching only the diagonal blocks.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut total = 0.0;
        for r in &self.blocks {
            let xs = &x[r.clone()];
            for i in r.clone() {
                let row = &self.matrix.as_slice()[i * d + r.start..i * d + r.end];
                total += x[i] * dot(row, xs);
            }
        }
        total
    }

    /// `H x`, touching only the diagonal blocks.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d];
        for r in &self.blocks {
            let xs = &x[r.clone()];
            for i in r.clone() {
                out[i] = dot(&self.matrix.as_slice()[i * d + r.start..i * d + r.end], xs);
            }
        }
        out
    }

    /// Writes the binary Hessian format: magic `SZHESS01`, then `dim`,
    /// `num_blocks` and `rank` as little-endian `u64`, then the `dim²`
    /// entries row-major as little-endian `f64`. Blocks are equal-sized.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(HESSIAN_MAGIC)?;
        for v in [self.dim(), self.blocks.len(), self.rank_per_block] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.dim() * self.dim() * 8);
        for v in self.matrix.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != HESSIAN_MAGIC {
            return Err(TestbedError::Format("bad magic".into()));
        }
        let mut header = [0u64; 3];
        for h in &mut header {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *h = u64::from_le_bytes(b);
        }
        let [dim, num_blocks, rank] = header.map(|v| v as usize);
        if dim == 0 || num_blocks == 0 || dim % num_blocks != 0 {
            return Err(TestbedError::Format(format!("bad header dim={dim} blocks={num_blocks}")));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != dim * dim * 8 {
            return Err(TestbedError::Format(format!(
                "expected {} payload bytes, found {}",
                dim * dim * 8,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let matrix = SymMatrix::from_row_major(dim, data)?;
        Self::block_diagonal(matrix, equal_blocks(dim, num_blocks), rank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// A loss over a flat parameter vector. Deterministic objectives ignore the batch seed.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;
    fn loss(&self, theta: &[f64], batch_seed: u64) -> f64;
    fn id(&self) -> String;

    /// The exact Hessian, when the objective is quadratic.
    fn hessian(&self) -> Option<&Hessian> {
        None
    }
}

/// `L(θ) = ½θᵀHθ`.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    hessian: Arc<Hessian>,
}

impl QuadraticObjective {
    pub fn new(hessian: Arc<Hessian>) -> Self {
        Self { hessian }
    }

    pub fn hessian(&self) -> &Hessian {
        &self.hessian
    }

    pub fn shared_hessian(&self) -> Arc<Hessian> {
        Arc::clone(&self.hessian)
    }

    pub fn lambda_max(&self) -> f64 {
        self.hessian.lambda_max()
    }

    pub fn trace(&self) -> f64 {
        self.hessian.trace()
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        self.hessian.matvec(theta)
    }
}

impl Objective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.hessian.dim()
    }

    fn loss(&self, theta: &[f64], _batch_seed: u64) -> f64 {
        0.5 * self.hessian.quad_form(theta)
    }

    fn id(&self) -> String {
        format!(
            "quadratic(d={}, blocks={}, rank={})",
            self.hessian.dim(),
            self.hessian.blocks().len(),
            self.hessian.rank_per_block()
        )
    }

    fn hessian(&self) -> Option<&Hessian> {
        Some(&self.hessian)
    }
}

pub fn quadratic_loss(obj: &QuadraticObjective, theta: &[f64]) -> Result<f64> {
    if theta.len() != obj.dim() {
        return Err(TestbedError::DimensionMismatch {
            expected: obj.dim(),
            found: theta.len(),
        });
    }
    Ok(obj.loss(theta, 0))
}

/// Two Gaussian clusters at `±separation·w` (unit `w`, unit noise).
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticSpec {
    pub samples: usize,
    pub dim: usize,
    pub separation: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LogisticSpec {
    fn default() -> Self {
        Self {
            samples: 2000,
            dim: 200,
            separation: SEPARATION_95,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Mean logistic loss over a seeded minibatch of a fixed dataset.
#[derive(Clone)]
pub struct StochasticObjective {
    features: Vec<f64>,
    labels: Vec<f64>,
    dim: usize,
    batch_size: usize,
    direction: Vec<f64>,
}

impl fmt::Debug for StochasticObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StochasticObjective")
            .field("samples", &self.labels.len())
            .field("dim", &self.dim)
            .field("batch_size", &self.batch_size)
            .finish()
    }
}

impl StochasticObjective {
    /// `features` is `n×d` row-major; labels are `±1`.
    pub fn new(features: Vec<f64>, labels: Vec<f64>, dim: usize, batch_size: usize) -> Result<Self> {
        if labels.is_empty() || dim == 0 {
            return Err(TestbedError::EmptyDataset);
        }
        if features.len() != labels.len() * dim {
            return Err(TestbedError::DimensionMismatch {
                expected: labels.len() * dim,
                found: features.len(),
            });
        }
        let batch_size = batch_size.clamp(1, labels.len());
        Ok(Self {
            features,
            labels,
            dim,
            batch_size,
            direction: Vec::new(),
        })
    }

    pub fn synthetic(spec: &LogisticSpec) -> Result<Self> {
        if spec.samples == 0 || spec.dim == 0 {
            return Err(TestbedError::EmptyDataset);
        }
        let mut g = GaussianStream::new(mix64(&[spec.seed, 0xD1]));
        let mut w = g.vector(spec.dim);
        let wn = linalg::norm(&w);
        w.iter_mut().for_each(|v| *v /= wn);
        let mut rng = seeded(mix64(&[spec.seed, 0x1AB]));
        let mut features = Vec::with_capacity(spec.samples * spec.dim);
        let mut labels = Vec::with_capacity(spec.samples);
        for _ in 0..spec.samples {
            let y = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            labels.push(y);
            features.extend(w.iter().map(|wi| y * spec.separation * wi + g.sample()));
        }
        let mut obj = Self::new(features, labels, spec.dim, spec.batch_size)?;
        obj.direction = w;
        Ok(obj)
    }

    pub fn samples(&self) -> usize {
        self.labels.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Unit class-mean direction of a synthetic dataset (empty otherwise).
    pub fn mean_direction(&self) -> &[f64] {
        &self.direction
    }

    fn example(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    fn example_loss(&self, theta: &[f64], i: usize) -> f64 {
        softplus(-self.labels[i] * dot(self.example(i), theta))
    }

    /// Indices of the minibatch for `batch_seed`, without replacement.
    pub fn batch(&self, batch_seed: u64) -> Vec<usize> {
        let mut rng = seeded(batch_seed);
        index::sample(&mut rng, self.labels.len(), self.batch_size).into_vec()
    }

    pub fn full_loss(&self, theta: &[f64]) -> f64 {
        (0..self.samples()).map(|i| self.example_loss(theta, i)).sum::<f64>() / self.samples() as f64
    }

    /// Fraction of examples with `sign(xᵀθ) = y`.
    pub fn accuracy(&self, theta: &[f64]) -> f64 {
        let correct = (0..self.samples())
            .filter(|&i| self.labels[i] * dot(self.example(i), theta) > 0.0)
            .count();
        correct as f64 / self.samples() as f64
    }
}

/// `ln(1 + eˣ)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Objective for StochasticObjective {
    fn dim(&self) -> usize {
        self.dim
    }

    fn loss(&self, theta: &[f64], batch_seed: u64) -> f64 {
        let batch = self.batch(batch_seed);
        batch.iter().map(|&i| self.example_loss(theta, i)).sum::<f64>() / batch.len() as f64
    }

    fn id(&self) -> String {
        format!(
            "logistic(n={}, d={}, batch={})",
            self.samples(),
            self.dim,
            self.batch_size
        )
    }
}

pub fn stochastic_loss(obj: &StochasticObjective, theta: &[f64], batch_seed: u64) -> Result<f64> {
    if theta.len() != obj.dim() {
        return Err(TestbedError::DimensionMismatch {
            expected: obj.dim(),
            found: theta.len(),
        });
    }
    Ok(obj.loss(theta, batch_seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(dim: usize, rank: usize, blocks: usize, max: Vec<f64>) -> HessianSpec {
        HessianSpec {
            dim,
            rank,
            num_blocks: blocks,
            max_eigenvals: max,
            seed: 3,
        }
    }

    #[test]
    fn linspace_edge_cases() {
        assert_eq!(linspace(10.0, 1.0, 1), vec![10.0]);
        assert_eq!(linspace(10.0, 1.0, 4), vec![10.0, 7.0, 4.0, 1.0]);
        assert!(linspace(1.0, 2.0, 0).is_empty());
    }

    #[test]
    fn rank_one_generator() {
        let h = generate_hessian(&spec(4, 1, 1, vec![10.0])).unwrap();
        let ev = h.eigenvalues();
        assert!((ev[0] - 10.0).abs() < 1e-10);
        assert!(ev[1..].iter().all(|v| v.abs() < 1e-10));
        assert!((h.intdim().unwrap() - 1.0).abs() < 1e-9);
        assert!((linalg::intdim(h.matrix()).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn generator_spectrum_matches_linspaces() {
        let s = spec(24, 3, 3, vec![5.0, 2.0, 9.0]);
        let h = generate_hessian(&s).unwrap();
        // Spectral oracle: a dense eigensolve of the assembled matrix.
        let dense = eig_sym(h.matrix()).unwrap();
        let mut expected: Vec<f64> = s
            .max_eigenvals
            .iter()
            .flat_map(|&l| {
                let mut v = linspace(l, 0.1 * l, 3);
                v.extend(std::iter::repeat_n(0.0, 5));
                v
            })
            .collect();
        expected.sort_by(|a, b| b.total_cmp(a));
        for (got, want) in dense.eigenvalues.iter().zip(&expected) {
            assert!((got - want).abs() < 1e-9 * 9.0, "{got} vs {want}");
        }
        let closed_form: f64 = s.max_eigenvals.iter().map(|l| 3.0 * (l + 0.1 * l) / 2.0).sum();
        assert!((h.trace() - closed_form).abs() <= 1e-9 * closed_form);
        for (b, r) in h.blocks().iter().enumerate() {
            let sub = eig_sym(&h.matrix().submatrix(r.clone())).unwrap();
            assert!((sub.lambda_max() - s.max_eigenvals[b]).abs() <= 1e-8 * s.max_eigenvals[b]);
            assert_eq!(sub.numerical_rank(EIG_RANK_TOL), 3);
        }
    }

    #[test]
    fn entries_outside_blocks_are_exactly_zero() {
        let h = generate_hessian(&spec(12, 2, 3, vec![1.0, 2.0, 3.0])).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                if i / 4 != j / 4 {
                    assert_eq!(h.matrix().get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate_hessian(&spec(10, 1, 3, vec![1.0; 3])).is_err());
        assert!(generate_hessian(&spec(8, 5, 2, vec![1.0; 2])).is_err());
        assert!(generate_hessian(&spec(8, 1, 2, vec![1.0])).is_err());
        assert!(generate_hessian(&spec(8, 1, 2, vec![1.0, -1.0])).is_err());
    }

    #[test]
    fn heterogeneous_blocks_have_integer_eigenvalues_near_a_reference() {
        let refs = DEFAULT_REFERENCE_LEVELS;
        let h = heterogeneous_block_hessian(64, 4, 4, &refs, 11).unwrap();
        let h2 = heterogeneous_block_hessian(64, 4, 4, &refs, 11).unwrap();
        assert_eq!(h.matrix(), h2.matrix());
        for b in 0..4 {
            let vals: Vec<f64> = h
                .nonzero_pairs()
                .iter()
                .filter(|p| p.block == b)
                .map(|p| p.value)
                .collect();
            assert_eq!(vals.len(), 4);
            let rounded: Vec<f64> = vals.iter().map(|v| v.round()).collect();
            for (v, r) in vals.iter().zip(&rounded) {
                assert!((v - r).abs() < 1e-8);
            }
            assert!(refs.iter().any(|&c| rounded.iter().all(|&v| (v - c).abs() <= 2.0)));
            assert!(vals.iter().all(|&v| v <= 102.0 + 1e-8));
        }
    }

    #[test]
    fn quadratic_examples() {
        let obj = |d: &[f64]| QuadraticObjective::new(Arc::new(Hessian::from_matrix(SymMatrix::from_diag(d)).unwrap()));
        assert_eq!(quadratic_loss(&obj(&[1.0, 1.0]), &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(quadratic_loss(&obj(&[1.0, 1.0]), &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(quadratic_loss(&obj(&[2.0, 4.0]), &[1.0, 1.0]).unwrap(), 3.0);
        assert!(matches!(
            quadratic_loss(&obj(&[2.0, 4.0]), &[1.0]),
            Err(TestbedError::DimensionMismatch { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn quadratic_central_difference_is_exact() {
        let h = Arc::new(generate_hessian(&spec(16, 4, 2, vec![3.0, 7.0])).unwrap());
        let obj = QuadraticObjective::new(h.clone());
        let mut g = GaussianStream::new(5);
        let theta = g.vector(16);
        let u = g.vector(16);
        let exact = dot(&theta, &h.matvec(&u));
        for mu in [1e-6, 1e-3, 1e-1] {
            let plus: Vec<f64> = theta.iter().zip(&u).map(|(t, v)| t + mu * v).collect();
            let minus: Vec<f64> = theta.iter().zip(&u).map(|(t, v)| t - mu * v).collect();
            let diff = obj.loss(&plus, 0) - obj.loss(&minus, 0);
            assert!((diff - 2.0 * mu * exact).abs() <= 1e-9 * (2.0 * mu * exact).abs().max(1e-300) + 1e-15);
        }
    }

    #[test]
    fn binary_roundtrip() {
        let h = generate_hessian(&spec(8, 2, 2, vec![1.0, 2.0])).unwrap();
        let mut buf = Vec::new();
        h.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 24 + 64 * 8);
        let back = Hessian::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.matrix(), h.matrix());
        assert_eq!(back.blocks(), h.blocks());
        assert_eq!(back.rank_per_block(), 2);
        assert!(Hessian::read_from(&buf[..40]).is_err());
    }

    #[test]
    fn logistic_at_zero_is_ln2() {
        let obj = StochasticObjective::synthetic(&LogisticSpec {
            samples: 100,
            dim: 5,
            ..Default::default()
        })
        .unwrap();
        for seed in 0..5 {
            assert!((obj.loss(&[0.0; 5], seed) - std::f64::consts::LN_2).abs() < 1e-15);
        }
        let theta = [0.3, -0.1, 0.2, 0.0, 1.0];
        assert_eq!(obj.loss(&theta, 9).to_bits(), obj.loss(&theta, 9).to_bits());
    }

    #[test]
    fn separable_large_margin_has_tiny_loss() {
        // Points at ±(2, 0) plus small jitter in the second coordinate.
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let y = if i % 2 == 0 { 1.0 } else { -1.0 };
            features.extend([2.0 * y, 0.1 * ((i % 7) as f64 - 3.0)]);
            labels.push(y);
        }
        let obj = StochasticObjective::new(features, labels, 2, 10).unwrap();
        let theta = [100.0, 0.0];
        for seed in 0..3 {
            assert!(stochastic_loss(&obj, &theta, seed).unwrap() < 1e-3);
        }
        assert_eq!(obj.accuracy(&theta), 1.0);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(matches!(
            StochasticObjective::new(vec![], vec![], 3, 4),
            Err(TestbedError::EmptyDataset)
        ));
    }
}
