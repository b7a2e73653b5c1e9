//! Dense matrix kernels: vectorization, duplication matrices, Kronecker
//! products, Moore-Penrose inverses of symmetric matrices and orthogonal
//! projectors.
//!
//! All vectorizations are column-major: `vec(A)[i + rows * j] = A[(i, j)]`.
//! `vech` stacks the lower triangle (diagonal included) column by column.
//!
//! Rank decisions use a cutoff relative to the largest eigenvalue magnitude,
//! floored at [`ABSOLUTE_FLOOR`]. Eigenvalues at or below the cutoff are
//! treated as exact zeros.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type DenseMatrix = DMatrix<f64>;

/// Default relative eigenvalue cutoff for pseudo-inverses and rank decisions.
pub const DEFAULT_REL_TOL: f64 = 1e-12;

/// Absolute floor on the eigenvalue cutoff.
pub const ABSOLUTE_FLOOR: f64 = 1e-300;

fn ensure_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} has non-finite entries")))
    }
}

fn ensure_square(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() == m.ncols() && m.nrows() > 0 {
        Ok(())
    } else {
        Err(Error::dimension(format!(
            "{what} must be square and nonempty, got {}x{}",
            m.nrows(),
            m.ncols()
        )))
    }
}

/// A finite, exactly symmetric square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Wraps `m`, rejecting non-square, non-finite or asymmetric input.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        ensure_square(&m, "symmetric matrix")?;
        ensure_finite(&m, "symmetric matrix")?;
        let n = m.nrows();
        for j in 0..n {
            for i in (j + 1)..n {
                if m[(i, j)] != m[(j, i)] {
                    return Err(Error::invalid(format!(
                        "matrix is not symmetric at ({i},{j}): {} vs {}",
                        m[(i, j)],
                        m[(j, i)]
                    )));
                }
            }
        }
        Ok(SymMatrix(m))
    }

    /// Replaces `m` by `(m + mᵀ)/2`, which is exactly symmetric in floating point.
    pub fn symmetrize(m: DMatrix<f64>) -> Result<Self> {
        ensure_square(&m, "symmetric matrix")?;
        ensure_finite(&m, "symmetric matrix")?;
        Ok(SymMatrix::symmetrize_unchecked(m))
    }

    pub(crate) fn symmetrize_unchecked(mut m: DMatrix<f64>) -> Self {
        let n = m.nrows();
        for j in 0..n {
            for i in (j + 1)..n {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        SymMatrix(m)
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix(DMatrix::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    /// Builds a symmetric matrix from row-major nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        SymMatrix::new(dense_from_rows(rows)?)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn eigen(&self) -> SymmetricEigen<f64, nalgebra::Dyn> {
        SymmetricEigen::new(self.0.clone())
    }

    /// Smallest and largest eigenvalue.
    pub fn eigen_range(&self) -> (f64, f64) {
        let ev = self.0.clone().symmetric_eigenvalues();
        let min = ev.iter().copied().fold(f64::INFINITY, f64::min);
        let max = ev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (min, max)
    }
}

impl Deref for SymMatrix {
    type Target = DMatrix<f64>;
    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Builds a dense matrix from row-major nested rows.
pub fn dense_from_rows(rows: &[Vec<f64>]) -> Result<DenseMatrix> {
    let r = rows.len();
    if r == 0 || rows[0].is_empty() {
        return Err(Error::dimension("matrix must have at least one row and column"));
    }
    let c = rows[0].len();
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::dimension("ragged matrix rows"));
    }
    let m = DMatrix::from_fn(r, c, |i, j| rows[i][j]);
    ensure_finite(&m, "matrix")?;
    Ok(m)
}

/// Row-major nested rows of `m`.
pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Column-stacking vectorization.
pub fn vec(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}

/// Inverse of [`vec`] for a `rows x cols` matrix.
pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> Result<DenseMatrix> {
    if v.len() != rows * cols {
        return Err(Error::dimension(format!(
            "cannot reshape length {} into {rows}x{cols}",
            v.len()
        )));
    }
    Ok(DMatrix::from_column_slice(rows, cols, v.as_slice()))
}

/// Position of the lower-triangle entry `(i, j)` (with `i >= j`) inside `vech`.
pub fn vech_index(k: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i >= j { (i, j) } else { (j, i) };
    // columns 0..j contribute k + (k-1) + ... + (k-j+1) entries
    j * k - j * j.saturating_sub(1) / 2 + (i - j)
}

/// Half-vectorization: lower triangle including the diagonal, stacked by column.
pub fn vech(a: &DMatrix<f64>) -> Result<DVector<f64>> {
    ensure_square(a, "vech input")?;
    let k = a.nrows();
    let mut out = Vec::with_capacity(k * (k + 1) / 2);
    for j in 0..k {
        for i in j..k {
            out.push(a[(i, j)]);
        }
    }
    Ok(DVector::from_vec(out))
}

/// Rebuilds the symmetric matrix whose [`vech`] is `v`.
pub fn unvech(v: &DVector<f64>) -> Result<SymMatrix> {
    let len = v.len();
    let k = (((8 * len + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
    if k == 0 || k * (k + 1) / 2 != len {
        return Err(Error::dimension(format!(
            "length {len} is not a triangular number"
        )));
    }
    let mut m = DMatrix::zeros(k, k);
    let mut pos = 0;
    for j in 0..k {
        for i in j..k {
            m[(i, j)] = v[pos];
            m[(j, i)] = v[pos];
            pos += 1;
        }
    }
    SymMatrix::new(m)
}

/// The 0/1 matrix `D_k` with `D_k vech(A) = vec(A)` for every symmetric `A`.
pub fn duplication_matrix(k: usize) -> Result<DenseMatrix> {
    if k == 0 {
        return Err(Error::invalid("duplication matrix needs k >= 1"));
    }
    let cols = k * (k + 1) / 2;
    let mut d = DMatrix::zeros(k * k, cols);
    let mut pos = 0;
    for j in 0..k {
        for i in j..k {
            d[(i + k * j, pos)] = 1.0;
            d[(j + k * i, pos)] = 1.0;
            pos += 1;
        }
    }
    Ok(d)
}

/// Kronecker product `A ⊗ B`; block `(i, j)` is `A[(i, j)] * B`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DenseMatrix {
    let (p, q) = b.shape();
    let mut out = DMatrix::zeros(a.nrows() * p, a.ncols() * q);
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            out.view_mut((i * p, j * q), (p, q)).copy_from(&(b * aij));
        }
    }
    out
}

/// Frobenius norm.
pub fn frobenius(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Squared Frobenius norm of `a - b`.
pub fn frobenius_dist_sq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of diagonal entries of a square matrix.
pub fn trace(a: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.nrows(), a.ncols());
    (0..a.nrows().min(a.ncols())).map(|i| a[(i, i)]).sum()
}

/// Largest eigenvalue magnitude of a symmetric matrix.
pub fn spectral_norm(a: &SymMatrix) -> f64 {
    a.0.clone()
        .symmetric_eigenvalues()
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

fn cutoff(eigenvalues: &DVector<f64>, rel_tol: f64) -> f64 {
    let largest = eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    (rel_tol * largest).max(ABSOLUTE_FLOOR)
}

fn check_rel_tol(rel_tol: f64) -> Result<()> {
    if rel_tol > 0.0 && rel_tol < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("rel_tol must lie in (0, 1), got {rel_tol}")))
    }
}

/// Number of eigenvalues above the relative cutoff.
pub fn numerical_rank(m: &SymMatrix, rel_tol: f64) -> usize {
    let ev = m.0.clone().symmetric_eigenvalues();
    let cut = cutoff(&ev, rel_tol);
    ev.iter().filter(|v| v.abs() > cut).count()
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix together with its rank.
pub fn generalized_inverse_with_rank(m: &SymMatrix, rel_tol: f64) -> Result<(SymMatrix, usize)> {
    check_rel_tol(rel_tol)?;
    let eig = m.eigen();
    let cut = cutoff(&eig.eigenvalues, rel_tol);
    let n = m.dim();
    let mut scaled = eig.eigenvectors.clone();
    let mut rank = 0;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        let w = if lambda.abs() > cut {
            rank += 1;
            1.0 / lambda
        } else {
            0.0
        };
        scaled.column_mut(k).scale_mut(w);
    }
    let inv = if rank == 0 {
        DMatrix::zeros(n, n)
    } else {
        &scaled * eig.eigenvectors.transpose()
    };
    Ok((SymMatrix::symmetrize_unchecked(inv), rank))
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix.
pub fn generalized_inverse(m: &SymMatrix, rel_tol: f64) -> Result<SymMatrix> {
    generalized_inverse_with_rank(m, rel_tol).map(|(inv, _)| inv)
}

/// Orthogonal projector onto the column space of a design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    matrix: SymMatrix,
    rank: usize,
}

impl Projector {
    pub(crate) fn from_parts(matrix: SymMatrix, rank: usize) -> Self {
        Projector { matrix, rank }
    }

    pub fn matrix(&self) -> &SymMatrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    /// Rank of the generating design, as decided by the eigenvalue cutoff.
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// `Tr(Π)`, the model dimension.
    pub fn trace(&self) -> f64 {
        trace(&self.matrix)
    }
}

/// `Π = G (GᵀG)⁻ Gᵀ` with the Moore-Penrose inverse of `GᵀG`.
pub fn projector(g: &DMatrix<f64>, rel_tol: f64) -> Result<Projector> {
    if g.nrows() == 0 || g.ncols() == 0 {
        return Err(Error::dimension("design matrix must be nonempty"));
    }
    ensure_finite(g, "design matrix")?;
    let gram = SymMatrix::symmetrize_unchecked(g.transpose() * g);
    let (inv, rank) = generalized_inverse_with_rank(&gram, rel_tol)?;
    if rank == 0 {
        return Err(Error::RankZeroDesign);
    }
    let pi = g * inv.as_matrix() * g.transpose();
    Ok(Projector {
        matrix: SymMatrix::symmetrize_unchecked(pi),
        rank,
    })
}

/// Symmetric square root of a d.n.n. matrix; negative eigenvalues are set to zero.
pub fn dnn_sqrt(m: &SymMatrix) -> DenseMatrix {
    let eig = m.eigen();
    let mut scaled = eig.eigenvectors.clone();
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        scaled.column_mut(k).scale_mut(lambda.max(0.0).sqrt());
    }
    &scaled * eig.eigenvectors.transpose()
}

/// Projection of `m` onto the d.n.n. cone: eigenvalues below zero are set to zero.
pub(crate) fn clip_negative_eigenvalues(m: &SymMatrix) -> SymMatrix {
    let eig = m.eigen();
    let mut scaled = eig.eigenvectors.clone();
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        scaled.column_mut(k).scale_mut(lambda.max(0.0));
    }
    SymMatrix::symmetrize_unchecked(&scaled * eig.eigenvectors.transpose())
}
