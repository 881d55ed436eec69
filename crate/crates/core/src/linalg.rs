//! Dense real linear algebra: symmetric matrices, cyclic Jacobi
//! eigendecomposition, Householder orthonormalization, stable rank and
//! intrinsic dimension.
//!
//! Sizes in this crate stay at or below a few thousand. Storage is plain
//! `Vec<f64>`; only the Householder trailing updates go through a GEMM kernel.

use thiserror::Error;

/// Off-diagonal Frobenius norm at which Jacobi sweeps stop, relative to `‖A‖_F`.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
/// Maximum number of cyclic Jacobi sweeps.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Relative column norm below which a column counts as linearly dependent.
pub const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("Jacobi iteration did not converge after {sweeps} sweeps (off-diagonal residual {off_diagonal:e})")]
    NoConvergence { sweeps: usize, off_diagonal: f64 },
    #[error("column {column} is linearly dependent on the previous ones (residual norm {norm:e})")]
    RankDeficient { column: usize, norm: f64 },
    #[error("matrix is zero")]
    ZeroMatrix,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty matrix")]
    Empty,
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense symmetric `d×d` matrix stored row-major.
///
/// Constructors mirror the upper triangle onto the lower one, so
/// `get(i, j) == get(j, i)` holds bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_diag(&vec![1.0; dim])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m.data[i * m.dim + i] = v;
        }
        m
    }

    /// Builds from a row-major buffer, keeping the upper triangle.
    pub fn from_row_major(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(LinalgError::DimensionMismatch {
                expected: dim * dim,
                found: data.len(),
            });
        }
        let mut m = Self { dim, data };
        m.mirror_upper();
        Ok(m)
    }

    /// Builds from `f(i, j)` evaluated on the upper triangle.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                m.data[i * dim + j] = v;
                m.data[j * dim + i] = v;
            }
        }
        m
    }

    fn mirror_upper(&mut self) {
        let n = self.dim;
        for i in 0..n {
            for j in (i + 1)..n {
                self.data[j * n + i] = self.data[i * n + j];
            }
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// Sets `(i, j)` and `(j, i)` together.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] = v;
        self.data[j * self.dim + i] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(k) => Err(LinalgError::NonFinite {
                row: k / self.dim,
                col: k % self.dim,
            }),
            None => Ok(()),
        }
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim).map(|i| dot(self.row(i), x)).collect()
    }

    /// `xᵀ A x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        (0..self.dim).map(|i| x[i] * dot(self.row(i), x)).sum()
    }

    /// Copies rows/cols `range` into a standalone matrix.
    pub fn submatrix(&self, range: std::ops::Range<usize>) -> SymMatrix {
        let n = range.len();
        let mut m = SymMatrix::zeros(n);
        for (a, i) in range.clone().enumerate() {
            m.data[a * n..(a + 1) * n].copy_from_slice(&self.row(i)[range.clone()]);
        }
        m
    }

    /// Writes `block` onto the diagonal starting at `offset`.
    pub fn set_block(&mut self, offset: usize, block: &SymMatrix) {
        let n = block.dim;
        for a in 0..n {
            let i = offset + a;
            self.data[i * self.dim + offset..i * self.dim + offset + n].copy_from_slice(block.row(a));
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        // Symmetric, so row-major and column-major layouts coincide.
        Matrix {
            rows: self.dim,
            cols: self.dim,
            data: self.data.clone(),
        }
    }
}

/// Dense `rows×cols` matrix stored column-major, used for bases such as `U`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * columns.len());
        for c in columns {
            if c.len() != rows {
                return Err(LinalgError::DimensionMismatch {
                    expected: rows,
                    found: c.len(),
                });
            }
            data.extend_from_slice(c);
        }
        Ok(Self {
            rows,
            cols: columns.len(),
            data,
        })
    }

    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                m.data[j * rows + i] = f(i, j);
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.rows + i]
    }

    #[inline]
    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    #[inline]
    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `Aᵀ x` (length `cols`).
    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.cols).map(|j| dot(self.col(j), x)).collect()
    }

    /// `A y` (length `rows`).
    pub fn matvec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        for (j, &c) in y.iter().enumerate() {
            axpy(c, self.col(j), &mut out);
        }
        out
    }

    /// `AᵀA` as a symmetric `cols×cols` matrix.
    pub fn gram(&self) -> SymMatrix {
        SymMatrix::from_fn(self.cols, |i, j| dot(self.col(i), self.col(j)))
    }

    /// `A Aᵀ` as a symmetric `rows×rows` matrix.
    pub fn outer_gram(&self) -> SymMatrix {
        let mut m = SymMatrix::zeros(self.rows);
        for j in 0..self.cols {
            let c = self.col(j);
            for a in 0..self.rows {
                if c[a] == 0.0 {
                    continue;
                }
                let row = &mut m.data[a * self.rows..(a + 1) * self.rows];
                axpy(c[a], c, row);
            }
        }
        m.mirror_upper();
        m
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Independent accumulators let the loop vectorize.
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Eigenvalues sorted descending with matching orthonormal eigenvector columns.
#[derive(Debug, Clone)]
pub struct EigenDecomp {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl EigenDecomp {
    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    /// `Q Λ Qᵀ`.
    pub fn reconstruct(&self) -> SymMatrix {
        let n = self.eigenvalues.len();
        let mut scaled = self.eigenvectors.clone();
        for (j, &l) in self.eigenvalues.iter().enumerate() {
            scaled.col_mut(j).iter_mut().for_each(|v| *v *= l);
        }
        SymMatrix::from_fn(n, |i, j| {
            (0..n).map(|k| scaled.get(i, k) * self.eigenvectors.get(j, k)).sum()
        })
    }

    /// Number of eigenvalues above `rel_tol · λ_max`.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let cut = rel_tol * self.lambda_max();
        self.eigenvalues.iter().filter(|&&l| l > cut).count()
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn eig_sym(a: &SymMatrix) -> Result<EigenDecomp> {
    a.check_finite()?;
    let n = a.dim();
    if n == 0 {
        return Err(LinalgError::Empty);
    }
    let mut w = a.data.clone();
    // Eigenvectors accumulated row-major: v[k * n + p] is component k of vector p.
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = a.frobenius_norm();
    let target = JACOBI_TOLERANCE * scale;

    let off = |w: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += 2.0 * w[i * n + j] * w[i * n + j];
            }
        }
        s.sqrt()
    };

    let mut residual = off(&w);
    let mut sweeps = 0;
    while residual > target {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(LinalgError::NoConvergence {
                sweeps,
                off_diagonal: residual,
            });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = w[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = w[p * n + p];
                let aqq = w[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = w[k * n + p];
                    let akq = w[k * n + q];
                    let nkp = c * akp - s * akq;
                    let nkq = s * akp + c * akq;
                    w[k * n + p] = nkp;
                    w[p * n + k] = nkp;
                    w[k * n + q] = nkq;
                    w[q * n + k] = nkq;
                }
                w[p * n + p] = app - t * apq;
                w[q * n + q] = aqq + t * apq;
                w[p * n + q] = 0.0;
                w[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        sweeps += 1;
        residual = off(&w);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| w[j * n + j].total_cmp(&w[i * n + i]));
    let eigenvalues = order.iter().map(|&i| w[i * n + i]).collect();
    let eigenvectors = Matrix::from_fn(n, n, |k, j| v[k * n + order[j]]);
    Ok(EigenDecomp {
        eigenvalues,
        eigenvectors,
    })
}

/// Column panel width of the blocked Householder factorization.
const QR_BLOCK: usize = 32;

/// `C (m×n) = beta·C + alpha·op(A)·B` on column-major slices with leading
/// dimensions; `a_trans` selects `Aᵀ`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    lda: usize,
    a_trans: bool,
    b: &[f64],
    ldb: usize,
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (lda as isize, 1) } else { (1, lda as isize) };
    assert!(c.len() >= (n - 1) * ldc + m);
    assert!(b.len() >= (n - 1) * ldb + k || k == 0);
    // SAFETY: bounds asserted above for B and C; A is indexed within
    // `max(m, k)` columns of stride `lda` by every caller.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            1,
            ldb as isize,
            beta,
            c.as_mut_ptr(),
            1,
            ldc as isize,
        );
    }
}

/// Compact-WY form `H₁⋯H_b = I − Y T Yᵀ` of one factored panel.
struct Panel {
    offset: usize,
    /// `(d − offset) × width`, column-major; column `j` is zero above row `j`.
    y: Vec<f64>,
    /// `width × width` upper triangular, column-major.
    t: Vec<f64>,
    width: usize,
}

impl Panel {
    /// `X ← (I − Y T' Yᵀ) X` on the trailing `rows × cols` block at `x`
    /// (`T' = Tᵀ` when `transpose`).
    fn apply(&self, x: &mut [f64], ld: usize, cols: usize, transpose: bool) {
        let rows = ld - self.offset;
        let w = self.width;
        let mut z = vec![0.0; w * cols];
        gemm(w, rows, cols, 1.0, &self.y, rows, true, &x[self.offset..], ld, 0.0, &mut z, w);
        // z ← T' z, column by column (T is tiny).
        let mut tz = vec![0.0; w];
        for c in 0..cols {
            let col = &mut z[c * w..(c + 1) * w];
            for (i, out) in tz.iter_mut().enumerate() {
                *out = if transpose {
                    (0..=i).map(|k| self.t[i * w + k] * col[k]).sum()
                } else {
                    (i..w).map(|k| self.t[k * w + i] * col[k]).sum()
                };
            }
            col.copy_from_slice(&tz);
        }
        gemm(rows, w, cols, -1.0, &self.y, rows, false, &z, w, 1.0, &mut x[self.offset..], ld);
    }
}

/// Orthonormal basis of `span(R)` via Householder QR, taking the thin `Q`.
///
/// Panels of [`QR_BLOCK`] columns are factored one reflector at a time and
/// applied to the trailing matrix in compact-WY form. Each output column is
/// flipped so its first entry of magnitude above `1e-12` is positive.
pub fn orthonormalize(r: &Matrix) -> Result<Matrix> {
    let (d, s) = (r.rows(), r.cols());
    if s > d {
        return Err(LinalgError::RankDeficient {
            column: d,
            norm: 0.0,
        });
    }
    if let Some(k) = r.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite {
            row: k % d,
            col: k / d,
        });
    }
    let mut a = r.clone();
    let mut panels = Vec::with_capacity(s.div_ceil(QR_BLOCK.max(1)));
    let mut k0 = 0;
    while k0 < s {
        let width = QR_BLOCK.min(s - k0);
        let rows = d - k0;
        let mut y = vec![0.0; rows * width];
        for j in 0..width {
            let k = k0 + j;
            let original = norm(r.col(k));
            let x = &a.col(k)[k..];
            let xnorm = norm(x);
            if xnorm == 0.0 || xnorm <= RANK_TOLERANCE * original {
                return Err(LinalgError::RankDeficient {
                    column: k,
                    norm: xnorm,
                });
            }
            let alpha = if x[0] >= 0.0 { -xnorm } else { xnorm };
            let v = &mut y[j * rows + j..(j + 1) * rows];
            v.copy_from_slice(x);
            v[0] -= alpha;
            let vnorm = norm(v);
            v.iter_mut().for_each(|e| *e /= vnorm);
            let v = &y[j * rows + j..(j + 1) * rows];
            for jj in (k + 1)..(k0 + width) {
                let col = &mut a.col_mut(jj)[k..];
                let w = dot(v, col);
                axpy(-2.0 * w, v, col);
            }
        }
        // T for H_j = I − 2 v_j v_jᵀ.
        let mut t = vec![0.0; width * width];
        for j in 0..width {
            let vj = &y[j * rows..(j + 1) * rows];
            let proj: Vec<f64> = (0..j).map(|i| dot(&y[i * rows..(i + 1) * rows], vj)).collect();
            for i in 0..j {
                let s: f64 = (i..j).map(|k| t[k * width + i] * proj[k]).sum();
                t[j * width + i] = -2.0 * s;
            }
            t[j * width + j] = 2.0;
        }
        let panel = Panel {
            offset: k0,
            y,
            t,
            width,
        };
        let next = k0 + width;
        if next < s {
            let trailing = &mut a.data[next * d..];
            panel.apply(trailing, d, s - next, true);
        }
        panels.push(panel);
        k0 = next;
    }

    let mut q = Matrix::zeros(d, s);
    for j in 0..s {
        q.col_mut(j)[j] = 1.0;
    }
    for panel in panels.iter().rev() {
        let c0 = panel.offset;
        panel.apply(&mut q.data[c0 * d..], d, s - c0, false);
    }
    for j in 0..s {
        let col = q.col_mut(j);
        if let Some(&lead) = col.iter().find(|v| v.abs() > 1e-12) {
            if lead < 0.0 {
                col.iter_mut().for_each(|v| *v = -*v);
            }
        }
    }
    Ok(q)
}

/// `AᵀA` through the GEMM kernel, as a column-major `cols×cols` buffer.
pub(crate) fn gram_gemm(a: &Matrix) -> Vec<f64> {
    let (d, s) = (a.rows(), a.cols());
    let mut c = vec![0.0; s * s];
    gemm(s, d, s, 1.0, a.as_slice(), d, true, a.as_slice(), d, 0.0, &mut c, s);
    c
}

/// Lower Cholesky factor of an SPD matrix given column-major; `None` when
/// a pivot is not positive.
pub(crate) fn cholesky(c: &[f64], n: usize) -> Option<Vec<f64>> {
    // Row-major lower triangle: l[i * n + k].
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s = c[j * n + i] - dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Stable rank `Σσᵢ² / σ_max²`.
pub fn srank(a: &Matrix) -> Result<f64> {
    let fro2 = a.frobenius_norm().powi(2);
    if fro2 == 0.0 {
        return Err(LinalgError::ZeroMatrix);
    }
    let gram = if a.rows() <= a.cols() {
        a.outer_gram()
    } else {
        a.gram()
    };
    let sigma_max2 = eig_sym(&gram)?.lambda_max();
    Ok(fro2 / sigma_max2)
}

/// Stable rank of a symmetric matrix (singular values are `|λᵢ|`).
pub fn srank_sym(a: &SymMatrix) -> Result<f64> {
    let eig = eig_sym(a)?;
    let sigma_max = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |m, l| m.max(l.abs()));
    if sigma_max == 0.0 {
        return Err(LinalgError::ZeroMatrix);
    }
    Ok(eig.eigenvalues.iter().map(|l| l * l).sum::<f64>() / (sigma_max * sigma_max))
}

/// Intrinsic dimension `Tr(A) / ‖A‖_op` of a PSD matrix.
pub fn intdim(a: &SymMatrix) -> Result<f64> {
    let lmax = eig_sym(a)?.lambda_max();
    if lmax <= 0.0 {
        return Err(LinalgError::ZeroMatrix);
    }
    Ok(a.trace() / lmax)
}
