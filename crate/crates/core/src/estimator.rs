//! Least-squares covariance estimation for a fixed design.
//!
//! For data `x_1..x_N ∈ ℝⁿ` and an `n×m` design `G`, the estimator minimizes
//! the empirical contrast `L_N(Ψ) = (1/N) Σ ‖x_i x_iᵀ − GΨGᵀ‖²` over symmetric
//! `Ψ`. The minimizer is `Ψ̂ = (GᵀG)⁻ Gᵀ S G (GᵀG)⁻` and the fitted matrix is
//! `Σ̂ = GΨ̂Gᵀ = ΠSΠ`, with `S` the (uncentered) second-moment matrix and `Π`
//! the projector onto the column space of `G`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{evaluation_vector, BasisFamily, DesignMatrix, ModelSpec};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg::{
    clip_negative_eigenvalues, generalized_inverse_with_rank, vech, DenseMatrix, Projector,
    SymMatrix, DEFAULT_REL_TOL,
};

/// Rows per block in the ordered block reductions over replications.
pub(crate) const REDUCTION_BLOCK: usize = 256;

/// Negative eigenvalues down to this fraction of `λ_max` are treated as rounding and clipped.
pub const CLIP_WARN_RATIO: f64 = 1e-8;

/// Negative eigenvalues beyond this fraction of `λ_max` are reported as a failure.
pub const CLIP_FAIL_RATIO: f64 = 1e-6;

/// N replications observed at n fixed points; `data` is `N×n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    points: Vec<f64>,
    data: DMatrix<f64>,
    centered: bool,
}

impl ObservationSet {
    pub fn new(points: Vec<f64>, data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::invalid("need at least one replication"));
        }
        if points.is_empty() {
            return Err(Error::invalid("need at least one observation point"));
        }
        if data.ncols() != points.len() {
            return Err(Error::dimension(format!(
                "replications have length {} but there are {} points",
                data.ncols(),
                points.len()
            )));
        }
        if !points.iter().all(|t| t.is_finite()) {
            return Err(Error::invalid("observation points must be finite"));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let (rows, _) = data.shape();
            return Err(Error::invalid(format!(
                "non-finite observation in replication {}",
                pos % rows + 1
            )));
        }
        Ok(ObservationSet {
            points,
            data,
            centered: false,
        })
    }

    pub fn from_rows(points: Vec<f64>, rows: &[Vec<f64>]) -> Result<Self> {
        let n = points.len();
        if let Some(i) = rows.iter().position(|r| r.len() != n) {
            return Err(Error::dimension(format!(
                "replication {} has {} values, expected {n}",
                i + 1,
                rows[i].len()
            )));
        }
        let data = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
        ObservationSet::new(points, data)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn n_samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn sample(&self, i: usize) -> DVector<f64> {
        self.data.row(i).transpose()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.data.row_mean().transpose()
    }

    /// Copy with the sample mean subtracted from every replication.
    pub fn centered(&self) -> ObservationSet {
        let mean = self.data.row_mean();
        let mut data = self.data.clone();
        for mut row in data.row_iter_mut() {
            row -= &mean;
        }
        ObservationSet {
            points: self.points.clone(),
            data,
            centered: true,
        }
    }
}

/// `S = (1/N) Σ x_i x_iᵀ` together with the sample mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimates {
    pub s: SymMatrix,
    pub xbar: DVector<f64>,
    pub n_samples: usize,
    pub centered: bool,
}

pub fn sample_second_moment(obs: &ObservationSet) -> MomentEstimates {
    sample_second_moment_with(obs, Execution::default())
}

/// Blocked accumulation of the outer products; blocks are summed in order so
/// the result does not depend on the worker count.
pub fn sample_second_moment_with(obs: &ObservationSet, exec: Execution) -> MomentEstimates {
    let x = obs.data();
    let (big_n, n) = x.shape();
    let blocks = big_n.div_ceil(REDUCTION_BLOCK);
    let partials = exec.map(blocks, |b| {
        let start = b * REDUCTION_BLOCK;
        let rows = REDUCTION_BLOCK.min(big_n - start);
        let chunk = x.rows(start, rows);
        chunk.transpose() * chunk
    });
    let mut acc = DMatrix::zeros(n, n);
    for p in &partials {
        acc += p;
    }
    acc /= big_n as f64;
    MomentEstimates {
        s: SymMatrix::symmetrize_unchecked(acc),
        xbar: obs.mean(),
        n_samples: big_n,
        centered: obs.is_centered(),
    }
}

/// Rounding-repair record for a fitted model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub rank: usize,
    pub d_m: f64,
    pub psi_min_eig: f64,
    pub sigma_min_eig: f64,
    /// Magnitude of the most negative eigenvalue clipped from `Ψ̂` (0 if none).
    pub psi_clip: f64,
    pub sigma_clip: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub model: ModelSpec,
    pub family: BasisFamily,
    pub psi_hat: SymMatrix,
    pub sigma_hat: SymMatrix,
    pub projector: Projector,
    pub diagnostics: FitDiagnostics,
}

impl CovarianceEstimate {
    /// `σ̂(s, t) = G_sᵀ Ψ̂ G_t`.
    pub fn eval(&self, s: f64, t: f64) -> Result<f64> {
        eval_cov_fn(self, s, t)
    }
}

/// Clips rounding-level negative eigenvalues; returns the repaired matrix,
/// the minimum eigenvalue before repair and the clipped magnitude.
fn repair_dnn(m: SymMatrix, what: &str) -> Result<(SymMatrix, f64, f64)> {
    let (min, max) = m.eigen_range();
    if min >= 0.0 {
        return Ok((m, min, 0.0));
    }
    let scale = max.abs().max(f64::MIN_POSITIVE);
    if -min > CLIP_FAIL_RATIO * scale {
        return Err(Error::NotDnn {
            min_eig: min,
            max_eig: max,
        });
    }
    if -min > CLIP_WARN_RATIO * scale {
        log::warn!("{what}: clipping negative eigenvalue {min:e} (largest {max:e})");
    }
    Ok((clip_negative_eigenvalues(&m), min, -min))
}

pub fn fit_model(moments: &MomentEstimates, design: &DesignMatrix) -> Result<CovarianceEstimate> {
    let s = &moments.s;
    let g = &design.g;
    if g.nrows() != s.dim() {
        return Err(Error::dimension(format!(
            "design has {} rows but S is {}x{}",
            g.nrows(),
            s.dim(),
            s.dim()
        )));
    }
    let gram = SymMatrix::symmetrize_unchecked(g.transpose() * g);
    let (gram_inv, rank) = generalized_inverse_with_rank(&gram, DEFAULT_REL_TOL)?;
    if rank == 0 {
        return Err(Error::RankZeroDesign);
    }
    let ybar = SymMatrix::symmetrize_unchecked(s.as_matrix().clone());
    let left = gram_inv.as_matrix() * g.transpose();
    let psi = SymMatrix::symmetrize_unchecked(&left * ybar.as_matrix() * left.transpose());
    let pi = Projector::from_parts(
        SymMatrix::symmetrize_unchecked(g * &left),
        rank,
    );
    let pm = pi.matrix().as_matrix();
    let sigma = SymMatrix::symmetrize_unchecked(pm * s.as_matrix() * pm);

    let (psi_hat, psi_min_eig, psi_clip) = repair_dnn(psi, "psi_hat")?;
    let (sigma_hat, sigma_min_eig, sigma_clip) = repair_dnn(sigma, "sigma_hat")?;
    let diagnostics = FitDiagnostics {
        rank,
        d_m: pi.trace(),
        psi_min_eig,
        sigma_min_eig,
        psi_clip,
        sigma_clip,
    };
    Ok(CovarianceEstimate {
        model: design.model.clone(),
        family: design.family.clone(),
        psi_hat,
        sigma_hat,
        projector: pi,
        diagnostics,
    })
}

/// `(1/N) Σ ‖x_i x_iᵀ − Γ‖²` evaluated entry by entry.
pub fn empirical_contrast(obs: &ObservationSet, candidate: &SymMatrix) -> Result<f64> {
    empirical_contrast_with(obs, candidate, Execution::default())
}

pub fn empirical_contrast_with(
    obs: &ObservationSet,
    candidate: &SymMatrix,
    exec: Execution,
) -> Result<f64> {
    let n = obs.n_points();
    if candidate.dim() != n {
        return Err(Error::dimension(format!(
            "candidate is {0}x{0} but data has {n} points",
            candidate.dim()
        )));
    }
    let x = obs.data();
    let big_n = obs.n_samples();
    let blocks = big_n.div_ceil(REDUCTION_BLOCK);
    let gamma = candidate.as_matrix();
    let partials = exec.map(blocks, |b| {
        let start = b * REDUCTION_BLOCK;
        let end = (start + REDUCTION_BLOCK).min(big_n);
        let mut acc = 0.0;
        for i in start..end {
            for k in 0..n {
                let xk = x[(i, k)];
                for j in 0..n {
                    let r = x[(i, j)] * xk - gamma[(j, k)];
                    acc += r * r;
                }
            }
        }
        acc
    });
    Ok(partials.iter().sum::<f64>() / big_n as f64)
}

/// `σ̂(s, t) = G_sᵀ Ψ̂ G_t`.
pub fn eval_cov_fn(est: &CovarianceEstimate, s: f64, t: f64) -> Result<f64> {
    eval_psi(&est.family, &est.model, &est.psi_hat, s, t)
}

/// `G_sᵀ Ψ G_t` for coefficients `Ψ` of a model in a family.
pub fn eval_psi(family: &BasisFamily, model: &ModelSpec, psi: &SymMatrix, s: f64, t: f64) -> Result<f64> {
    if psi.dim() != model.size() {
        return Err(Error::dimension(format!(
            "coefficient matrix is {0}x{0} for a model of size {1}",
            psi.dim(),
            model.size()
        )));
    }
    let gs = evaluation_vector(family, model, s)?;
    let gt = evaluation_vector(family, model, t)?;
    // Paired terms make the result exactly symmetric in (s, t).
    let mut total = 0.0;
    for i in 0..gs.len() {
        total += psi[(i, i)] * (gs[i] * gt[i]);
        for j in 0..i {
            total += psi[(i, j)] * (gs[i] * gt[j] + gs[j] * gt[i]);
        }
    }
    Ok(total)
}

/// Residual of the half-vectorized normal equation of the matrix regression,
/// `‖vech(GᵀG(Ψ+Ψᵀ)GᵀG − diag(GᵀGΨGᵀG)) − vech(Gᵀ(Ȳ+Ȳᵀ)G − diag(GᵀȲG))‖`.
pub fn normal_equation_residual(s: &SymMatrix, g: &DenseMatrix, psi: &SymMatrix) -> Result<f64> {
    if g.nrows() != s.dim() || g.ncols() != psi.dim() {
        return Err(Error::dimension("normal equation operands do not conform"));
    }
    let gram = g.transpose() * g;
    let p = psi.as_matrix();
    let inner = &gram * p * &gram;
    let lhs = &gram * (p + p.transpose()) * &gram - diag_part(&inner);
    let y = s.as_matrix();
    let gyg = g.transpose() * y * g;
    let rhs = g.transpose() * (y + y.transpose()) * g - diag_part(&gyg);
    Ok((vech(&lhs)? - vech(&rhs)?).norm())
}

fn diag_part(a: &DenseMatrix) -> DenseMatrix {
    DMatrix::from_diagonal(&a.diagonal())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{design_matrix, BasisKind};
    use crate::linalg::{dense_from_rows, frobenius};
    use approx::assert_abs_diff_eq;

    fn obs(rows: &[Vec<f64>]) -> ObservationSet {
        let n = rows[0].len();
        ObservationSet::from_rows((0..n).map(|j| j as f64).collect(), rows).unwrap()
    }

    fn raw_design(g: DenseMatrix) -> DesignMatrix {
        let n = g.nrows();
        let m = g.ncols();
        DesignMatrix {
            g,
            points: (0..n).map(|j| j as f64).collect(),
            model: ModelSpec::prefix(m),
            family: BasisFamily::new(BasisKind::Polynomial, 0.0, n as f64, m).unwrap(),
        }
    }

    #[test]
    fn second_moment_examples() {
        let s = sample_second_moment(&obs(&[vec![1., 2.]])).s;
        assert_eq!(s.as_matrix(), &dense_from_rows(&[vec![1., 2.], vec![2., 4.]]).unwrap());

        let s = sample_second_moment(&obs(&[vec![1., 0.], vec![0., 1.]])).s;
        assert_eq!(s.as_matrix(), &(DMatrix::identity(2, 2) * 0.5));

        let s = sample_second_moment(&obs(&[vec![1., 1.], vec![2., 0.], vec![0., 2.]])).s;
        let expected = dense_from_rows(&[vec![5. / 3., 1. / 3.], vec![1. / 3., 5. / 3.]]).unwrap();
        assert_abs_diff_eq!(s.as_matrix(), &expected, epsilon = 1e-15);
    }

    #[test]
    fn centering_subtracts_mean_and_flags() {
        let o = obs(&[vec![1., 3.], vec![3., 5.]]);
        let c = o.centered();
        assert!(c.is_centered());
        let m = sample_second_moment(&c);
        assert!(m.centered);
        assert_abs_diff_eq!(m.s.as_matrix(), &DMatrix::from_element(2, 2, 1.0), epsilon = 1e-15);
        assert!(!sample_second_moment(&o).centered);
    }

    #[test]
    fn observation_validation() {
        assert!(ObservationSet::from_rows(vec![0., 1.], &[vec![1., 2.], vec![1.]]).is_err());
        assert!(ObservationSet::from_rows(vec![0., 1.], &[]).is_err());
        assert!(ObservationSet::from_rows(vec![0., 1.], &[vec![1., f64::NAN]]).is_err());
    }

    #[test]
    fn identity_design_reproduces_s() {
        let o = obs(&[vec![1., 2.], vec![-1., 0.5], vec![0.3, 0.2]]);
        let mom = sample_second_moment(&o);
        let fit = fit_model(&mom, &raw_design(DMatrix::identity(2, 2))).unwrap();
        assert_abs_diff_eq!(fit.sigma_hat.as_matrix(), mom.s.as_matrix(), epsilon = 1e-14);
        assert_abs_diff_eq!(fit.psi_hat.as_matrix(), mom.s.as_matrix(), epsilon = 1e-14);
    }

    #[test]
    fn constant_design_hand_example() {
        let o = obs(&[vec![1., 1.], vec![2., 0.], vec![0., 2.]]);
        let mom = sample_second_moment(&o);
        let fit = fit_model(&mom, &raw_design(dense_from_rows(&[vec![1.], vec![1.]]).unwrap())).unwrap();
        assert_abs_diff_eq!(fit.sigma_hat.as_matrix(), &DMatrix::from_element(2, 2, 1.0), epsilon = 1e-14);
        assert_eq!(fit.diagnostics.rank, 1);
    }

    #[test]
    fn proportional_columns_match_single_column() {
        let o = obs(&[vec![1., 2., 0.], vec![0., 1., -1.], vec![2., 0.5, 1.]]);
        let mom = sample_second_moment(&o);
        let single = fit_model(&mom, &raw_design(dense_from_rows(&[vec![1.], vec![2.], vec![-1.]]).unwrap())).unwrap();
        let double = fit_model(
            &mom,
            &raw_design(dense_from_rows(&[vec![1., 3.], vec![2., 6.], vec![-1., -3.]]).unwrap()),
        )
        .unwrap();
        assert_eq!(double.diagnostics.rank, 1);
        assert_abs_diff_eq!(single.sigma_hat.as_matrix(), double.sigma_hat.as_matrix(), epsilon = 1e-12);
    }

    #[test]
    fn zero_design_is_rank_zero() {
        let o = obs(&[vec![1., 2.]]);
        let err = fit_model(&sample_second_moment(&o), &raw_design(DMatrix::zeros(2, 1))).unwrap_err();
        assert!(matches!(err, Error::RankZeroDesign));
    }

    #[test]
    fn contrast_examples() {
        let o = obs(&[vec![1., 2.], vec![0., 1.]]);
        let s = sample_second_moment(&o).s;
        let at_s = empirical_contrast(&o, &s).unwrap();
        let gamma = SymMatrix::identity(2);
        let at_i = empirical_contrast(&o, &gamma).unwrap();
        let gap = frobenius(&(s.as_matrix() - gamma.as_matrix())).powi(2);
        assert_abs_diff_eq!(at_i - at_s, gap, epsilon = 1e-12);

        let single = obs(&[vec![1.5, -2.]]);
        let x = single.sample(0);
        let xx = SymMatrix::symmetrize(&x * x.transpose()).unwrap();
        assert_eq!(empirical_contrast(&single, &xx).unwrap(), 0.0);
        assert!(empirical_contrast(&single, &SymMatrix::identity(3)).is_err());
    }

    #[test]
    fn eval_on_design_points_matches_sigma_hat() {
        let f = BasisFamily::new(BasisKind::Fourier, 0.0, 1.0, 5).unwrap();
        let pts = [0.1, 0.3, 0.55, 0.8];
        let o = ObservationSet::from_rows(
            pts.to_vec(),
            &[vec![1., 0.2, -0.3, 0.5], vec![0.1, -1., 0.4, 0.3], vec![0.7, 0.7, 0.1, -0.2]],
        )
        .unwrap();
        let d = design_matrix(&f, &ModelSpec::prefix(3), &pts).unwrap();
        let fit = fit_model(&sample_second_moment(&o), &d).unwrap();
        for j in 0..4 {
            for k in 0..4 {
                let v = fit.eval(pts[j], pts[k]).unwrap();
                assert!((v - fit.sigma_hat[(j, k)]).abs() <= 1e-10);
            }
        }
        let a = fit.eval(0.13, 0.91).unwrap();
        let b = fit.eval(0.91, 0.13).unwrap();
        assert!((a - b).abs() <= 1e-12);
        assert!(fit.eval(1.2, 0.5).is_err());
    }

    #[test]
    fn zero_psi_evaluates_to_zero() {
        let f = BasisFamily::new(BasisKind::Fourier, 0.0, 1.0, 3).unwrap();
        let pts = [0.2, 0.6];
        let o = ObservationSet::from_rows(pts.to_vec(), &[vec![0., 0.]]).unwrap();
        let d = design_matrix(&f, &ModelSpec::prefix(3), &pts).unwrap();
        let fit = fit_model(&sample_second_moment(&o), &d).unwrap();
        assert_eq!(fit.eval(0.31, 0.77).unwrap(), 0.0);
    }

    #[test]
    fn identity_design_has_zero_normal_residual() {
        let s = SymMatrix::from_rows(&[vec![2., 0.5], vec![0.5, 1.]]).unwrap();
        let r = normal_equation_residual(&s, &DMatrix::identity(2, 2), &s).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn second_moment_is_thread_count_independent() {
        let rows: Vec<Vec<f64>> = (0..1000)
            .map(|i| (0..5).map(|j| ((i * 31 + j * 17) % 23) as f64 / 7.0 - 1.5).collect())
            .collect();
        let o = obs(&rows);
        let a = sample_second_moment_with(&o, Execution::Sequential).s;
        let b = sample_second_moment_with(&o, Execution::Parallel).s;
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
