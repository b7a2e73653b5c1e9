//! Random instances and independent reference computations for the
//! integration tests. Nothing here calls the library's own solvers.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = gaussian(rng, n, n);
    (&a + a.transpose()) * 0.5
}

/// `rows×cols` matrix of rank `min(rank, rows, cols)`.
pub fn low_rank(rng: &mut ChaCha8Rng, rows: usize, cols: usize, rank: usize) -> DMatrix<f64> {
    gaussian(rng, rows, rank) * gaussian(rng, rank, cols)
}

// nalgebra's SVD is unreliable on exactly rank-deficient input (it can
// recompose to a different matrix), so rank and pseudo-inverse go through
// the symmetric eigendecomposition of `AᵀA`.

/// Eigenvalue cutoff relative to the largest, i.e. singular values of `A`
/// below `1e-6·σ_max` count as zero.
const EIG_REL: f64 = 1e-12;

/// Numerical rank from the spectrum of `AᵀA`.
pub fn pinv_rank(m: &DMatrix<f64>) -> usize {
    let eig = (m.transpose() * m).symmetric_eigenvalues();
    let max = eig.max();
    eig.iter().filter(|&&l| l > EIG_REL * max).count()
}

/// Moore-Penrose inverse of a symmetric matrix from its eigendecomposition.
pub fn sym_pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.abs().max();
    let mut inv = DMatrix::zeros(m.ncols(), m.ncols());
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l.abs() > EIG_REL * max {
            let v = eig.eigenvectors.column(k);
            inv += v * v.transpose() / l;
        }
    }
    inv
}

/// Moore-Penrose inverse `(AᵀA)⁺Aᵀ`.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_pinv(&(m.transpose() * m)) * m.transpose()
}

/// `vec` by column stacking, written out independently.
pub fn vec_of(a: &DMatrix<f64>) -> DVector<f64> {
    let mut v = Vec::with_capacity(a.len());
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            v.push(a[(i, j)]);
        }
    }
    DVector::from_vec(v)
}

/// `Kronecker product` written out entry by entry.
pub fn kron_of(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, q) = b.shape();
    DMatrix::from_fn(a.nrows() * p, a.ncols() * q, |i, j| a[(i / p, j / q)] * b[(i % p, j % q)])
}

/// Basis of symmetric `m×m` matrices: `E_ii` and `E_ij + E_ji`, as vec columns.
pub fn symmetric_basis(m: usize) -> DMatrix<f64> {
    let mut cols = Vec::new();
    for j in 0..m {
        for i in j..m {
            let mut e = DMatrix::zeros(m, m);
            e[(i, j)] = 1.0;
            e[(j, i)] = 1.0;
            cols.push(vec_of(&e));
        }
    }
    DMatrix::from_columns(&cols)
}

/// `Σ̂` by least squares of `vec(S)` on `(G⊗G)·B_sym` through the dense
/// normal equations, with a pseudo-inverse for rank deficiency.
pub fn least_squares_sigma(s: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    let m = g.ncols();
    let n = g.nrows();
    let x = kron_of(g, g) * symmetric_basis(m);
    let beta = sym_pinv(&(x.transpose() * &x)) * x.transpose() * vec_of(s);
    let fitted = x * beta;
    DMatrix::from_fn(n, n, |i, j| fitted[i + n * j])
}

/// `G (GᵀG + εI)⁻¹ Gᵀ S G (GᵀG + εI)⁻¹ Gᵀ` with `ε = 1e-10·λ_max(GᵀG)`.
/// The inverse is applied in the eigenbasis of `GᵀG` as `Σ (Gvᵢ)(Gvᵢ)ᵀ/(λᵢ+ε)`;
/// forming `(GᵀG + εI)⁻¹` by LU loses the range component to cancellation.
pub fn ridge_sigma(s: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = (g.transpose() * g).symmetric_eigen();
    let eps = 1e-10 * eig.eigenvalues.max();
    let gv = g * &eig.eigenvectors;
    let mut left = DMatrix::zeros(g.nrows(), g.nrows());
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        let c = gv.column(k);
        left += c * c.transpose() / (lambda + eps);
    }
    &left * s * &left
}

/// Empirical covariance of `vec(xᵢxᵢᵀ)` by explicit loops over samples.
pub fn brute_phi(data: &DMatrix<f64>) -> DMatrix<f64> {
    let (big_n, n) = data.shape();
    let ws: Vec<DVector<f64>> = (0..big_n)
        .map(|i| {
            let x = data.row(i).transpose();
            vec_of(&(&x * x.transpose()))
        })
        .collect();
    let mean = ws.iter().fold(DVector::zeros(n * n), |a, w| a + w) / big_n as f64;
    ws.iter()
        .map(|w| (w - &mean) * (w - &mean).transpose())
        .fold(DMatrix::zeros(n * n, n * n), |a, b| a + b)
        / big_n as f64
}

pub fn min_eig(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().min()
}

pub fn max_eig(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().max()
}

pub fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}
