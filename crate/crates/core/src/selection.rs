//! Penalized model selection.
//!
//! Each candidate design `m` is fitted, then scored by
//! `crit(m) = L_N(Σ̂ₘ) + (1+θ) δ²ₘ Dₘ / N` where `Dₘ = Tr(Πₘ)` and
//! `δ²ₘ = Tr((Πₘ⊗Πₘ)Φ̂)/Dₘ`, `Φ̂` being the empirical covariance of
//! `vec(xᵢxᵢᵀ)`. The same rule is also available in the generic form of a
//! vector regression `yᵢ = fⁱ + εᵢ` with arbitrary projectors on `ℝ^{Nd}`.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::DesignMatrix;
use crate::error::{Error, Result};
use crate::estimator::{
    empirical_contrast_with, fit_model, sample_second_moment_with, CovarianceEstimate,
    MomentEstimates, ObservationSet, REDUCTION_BLOCK,
};
use crate::exec::Execution;
use crate::linalg::{
    duplication_matrix, frobenius_dist_sq, kron, projector, trace, vech_index, DenseMatrix,
    Projector, SymMatrix, DEFAULT_REL_TOL,
};

pub const DEFAULT_THETA: f64 = 1.0;

/// Relative gap below which two criteria count as tied.
pub const TIE_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    /// Model-specific `δ²ₘ`.
    #[default]
    DeltaM,
    /// `λ_max(Φ̂)` in place of every `δ²ₘ`.
    LambdaMax,
}

impl std::fmt::Display for PenaltyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PenaltyMode::DeltaM => "delta_m",
            PenaltyMode::LambdaMax => "lambda_max",
        })
    }
}

/// Empirical covariance of `vec(xᵢxᵢᵀ)`, an `n²×n²` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FourthMomentMatrix {
    pub phi: SymMatrix,
    pub n: usize,
    pub n_samples: usize,
}

pub fn estimate_phi(obs: &ObservationSet) -> FourthMomentMatrix {
    let moments = sample_second_moment_with(obs, Execution::default());
    estimate_phi_with(obs, &moments, Execution::default())
}

pub fn estimate_phi_with(
    obs: &ObservationSet,
    moments: &MomentEstimates,
    exec: Execution,
) -> FourthMomentMatrix {
    let n = obs.n_points();
    let big_n = obs.n_samples();
    if big_n < 2 {
        log::warn!("fourth-moment matrix of a single replication is identically zero");
    }
    let x = obs.data();
    let s = moments.s.as_matrix();
    let blocks = big_n.div_ceil(REDUCTION_BLOCK);
    let partials = exec.map(blocks, |b| {
        let start = b * REDUCTION_BLOCK;
        let rows = REDUCTION_BLOCK.min(big_n - start);
        let w = DMatrix::from_fn(rows, n * n, |r, idx| {
            let (a, c) = (idx % n, idx / n);
            x[(start + r, a)] * x[(start + r, c)] - s[(a, c)]
        });
        w.transpose() * w
    });
    let mut acc = DMatrix::zeros(n * n, n * n);
    for p in &partials {
        acc += p;
    }
    acc /= big_n as f64;
    FourthMomentMatrix {
        phi: SymMatrix::symmetrize_unchecked(acc),
        n,
        n_samples: big_n,
    }
}

/// `λ_max(Φ̂)` without forming `Φ̂`.
///
/// `Φ̂` vanishes off the symmetric subspace of `ℝ^{n²}`; on it, the scaled
/// half-vectorization (off-diagonal entries times `√2`) is an isometry, so the
/// nonzero spectrum of `Φ̂` is that of an `n(n+1)/2`-square matrix.
pub fn lambda_max_phi(obs: &ObservationSet, moments: &MomentEstimates, exec: Execution) -> f64 {
    let n = obs.n_points();
    let q = n * (n + 1) / 2;
    let big_n = obs.n_samples();
    let x = obs.data();
    let s = moments.s.as_matrix();
    let mut pairs = vec![(0usize, 0usize, 0.0f64); q];
    for j in 0..n {
        for i in j..n {
            let w = if i == j { 1.0 } else { std::f64::consts::SQRT_2 };
            pairs[vech_index(n, i, j)] = (i, j, w);
        }
    }
    let blocks = big_n.div_ceil(REDUCTION_BLOCK);
    let partials = exec.map(blocks, |b| {
        let start = b * REDUCTION_BLOCK;
        let rows = REDUCTION_BLOCK.min(big_n - start);
        let w = DMatrix::from_fn(rows, q, |r, k| {
            let (i, j, scale) = pairs[k];
            scale * (x[(start + r, i)] * x[(start + r, j)] - s[(i, j)])
        });
        w.transpose() * w
    });
    let mut acc = DMatrix::zeros(q, q);
    for p in &partials {
        acc += p;
    }
    acc /= big_n as f64;
    let acc = SymMatrix::symmetrize_unchecked(acc);
    acc.eigen_range().1.max(0.0)
}

/// `Tr((Π⊗Π)Φ)` through the explicit Kronecker product.
pub fn kron_trace(pi: &Projector, phi: &SymMatrix) -> Result<f64> {
    let n = pi.dim();
    if phi.dim() != n * n {
        return Err(Error::dimension(format!(
            "Phi is {0}x{0}, expected {1}x{1}",
            phi.dim(),
            n * n
        )));
    }
    // Both factors are symmetric, so the trace of the product is an entrywise sum.
    let k = kron(pi.matrix(), pi.matrix());
    Ok(k.component_mul(phi.as_matrix()).sum())
}

fn check_dimension(d_m: f64) -> Result<()> {
    if d_m < 1.0 - 1e-6 {
        return Err(Error::invalid(format!(
            "model dimension {d_m} is below 1"
        )));
    }
    Ok(())
}

/// `Tr((Π⊗Π)Φ)/Tr(Π)` through the explicit Kronecker product.
pub fn delta_sq_from_phi(pi: &Projector, phi: &SymMatrix) -> Result<f64> {
    let d_m = pi.trace();
    check_dimension(d_m)?;
    Ok(kron_trace(pi, phi)?.max(0.0) / d_m)
}

/// `δ²ₘ = (1/N) Σ ‖Π(xᵢxᵢᵀ − S)Π‖² / Tr(Π)`, equal to the Kronecker form for `Φ̂`.
pub fn delta_sq(pi: &Projector, obs: &ObservationSet, moments: &MomentEstimates) -> Result<f64> {
    delta_sq_with(pi, obs, moments, Execution::Sequential)
}

pub fn delta_sq_with(
    pi: &Projector,
    obs: &ObservationSet,
    moments: &MomentEstimates,
    exec: Execution,
) -> Result<f64> {
    let n = obs.n_points();
    if pi.dim() != n || moments.s.dim() != n {
        return Err(Error::dimension("projector, moments and data do not conform"));
    }
    let d_m = pi.trace();
    check_dimension(d_m)?;
    let p = pi.matrix().as_matrix();
    let center = p * moments.s.as_matrix() * p;
    // Rows of U are Π xᵢ, so Π xᵢxᵢᵀ Π = uᵢuᵢᵀ.
    let u = obs.data() * p;
    let big_n = obs.n_samples();
    let blocks = big_n.div_ceil(REDUCTION_BLOCK);
    let partials = exec.map(blocks, |b| {
        let start = b * REDUCTION_BLOCK;
        let end = (start + REDUCTION_BLOCK).min(big_n);
        let mut acc = 0.0;
        for i in start..end {
            for k in 0..n {
                let uk = u[(i, k)];
                for j in 0..n {
                    let r = u[(i, j)] * uk - center[(j, k)];
                    acc += r * r;
                }
            }
        }
        acc
    });
    Ok(partials.iter().sum::<f64>() / big_n as f64 / d_m)
}

/// `(1+θ) δ² D / N`.
pub fn penalty(d_m: f64, delta_sq: f64, theta: f64, n_samples: usize) -> Result<f64> {
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(Error::invalid(format!("theta must be positive, got {theta}")));
    }
    if n_samples == 0 {
        return Err(Error::invalid("need at least one replication"));
    }
    Ok((1.0 + theta) * delta_sq * d_m / n_samples as f64)
}

/// A fitted model with the selection ingredients that do not depend on `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEvaluation {
    pub estimate: CovarianceEstimate,
    pub d_m: f64,
    pub delta_sq: f64,
    pub contrast: f64,
}

/// Fits every design and computes `Dₘ`, `δ²ₘ` and `L_N(Σ̂ₘ)`.
pub fn evaluate_models(
    obs: &ObservationSet,
    moments: &MomentEstimates,
    designs: &[DesignMatrix],
    exec: Execution,
) -> Result<Vec<ModelEvaluation>> {
    if designs.is_empty() {
        return Err(Error::invalid("empty model list"));
    }
    if let Some(d) = designs.iter().find(|d| d.points != obs.points()) {
        return Err(Error::dimension(format!(
            "design for model {} is not built on the observation points",
            d.model.model_id
        )));
    }
    let base = empirical_contrast_with(obs, &moments.s, exec)?;
    exec.try_map(designs.len(), |k| {
        let estimate = fit_model(moments, &designs[k])?;
        let d_m = estimate.projector.trace();
        let delta_sq = delta_sq_with(&estimate.projector, obs, moments, Execution::Sequential)?;
        let contrast = base + frobenius_dist_sq(moments.s.as_matrix(), estimate.sigma_hat.as_matrix());
        Ok(ModelEvaluation {
            estimate,
            d_m,
            delta_sq,
            contrast,
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub model_id: String,
    pub m: usize,
    #[serde(rename = "D_m")]
    pub d_m: f64,
    pub delta_sq: f64,
    pub contrast: f64,
    pub pen: f64,
    pub criterion: f64,
    pub chosen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub chosen: usize,
    pub rows: Vec<SelectionRow>,
    pub estimate: CovarianceEstimate,
    pub tie_broken: bool,
    pub theta: f64,
    pub mode: PenaltyMode,
    pub n_samples: usize,
    pub lambda_max_phi: Option<f64>,
    /// Set when `N = 1` forced the smallest model.
    pub degenerate: bool,
}

impl SelectionResult {
    pub fn chosen_row(&self) -> &SelectionRow {
        &self.rows[self.chosen]
    }

    /// Models whose `δ²ₘ` exceeds `λ_max(Φ̂)·(1+1e-8)`.
    pub fn lambda_bound_violations(&self) -> Vec<&str> {
        let Some(lm) = self.lambda_max_phi else {
            return Vec::new();
        };
        self.rows
            .iter()
            .filter(|r| r.delta_sq > lm * (1.0 + 1e-8))
            .map(|r| r.model_id.as_str())
            .collect()
    }
}

struct Candidate<'a> {
    criterion: f64,
    d_m: f64,
    id: &'a str,
}

/// Index of the smallest criterion; near-ties go to the smaller dimension,
/// then to the lexicographically smaller id. Dimensions are projector traces,
/// so they are compared after rounding. Returns whether a tie was broken.
fn argmin_with_ties(cands: &[Candidate<'_>]) -> (usize, bool) {
    let best = cands
        .iter()
        .map(|c| c.criterion)
        .fold(f64::INFINITY, f64::min);
    let tol = TIE_REL_TOL * best.abs().max(f64::MIN_POSITIVE);
    let tied: Vec<usize> = (0..cands.len())
        .filter(|&k| cands[k].criterion - best <= tol)
        .collect();
    let pick = *tied
        .iter()
        .min_by(|&&a, &&b| {
            cands[a]
                .d_m
                .round()
                .partial_cmp(&cands[b].d_m.round())
                .unwrap_or(Ordering::Equal)
                .then_with(|| cands[a].id.cmp(cands[b].id))
        })
        .expect("at least one candidate");
    (pick, tied.len() > 1)
}

/// Applies the penalty for a given `θ` to a set of evaluated models.
pub fn choose(
    evals: &[ModelEvaluation],
    theta: f64,
    mode: PenaltyMode,
    lambda_max_phi: Option<f64>,
    n_samples: usize,
) -> Result<SelectionResult> {
    if evals.is_empty() {
        return Err(Error::invalid("empty model list"));
    }
    let lm = match (mode, lambda_max_phi) {
        (PenaltyMode::LambdaMax, None) => {
            return Err(Error::invalid("lambda_max mode needs lambda_max(Phi)"))
        }
        (_, v) => v,
    };
    let mut rows = Vec::with_capacity(evals.len());
    for e in evals {
        let level = match mode {
            PenaltyMode::DeltaM => e.delta_sq,
            PenaltyMode::LambdaMax => lm.unwrap_or(0.0),
        };
        let pen = penalty(e.d_m, level, theta, n_samples)?;
        rows.push(SelectionRow {
            model_id: e.estimate.model.model_id.clone(),
            m: e.estimate.model.size(),
            d_m: e.d_m,
            delta_sq: e.delta_sq,
            contrast: e.contrast,
            pen,
            criterion: e.contrast + pen,
            chosen: false,
        });
    }
    let degenerate = n_samples < 2;
    let (chosen, tie_broken) = if degenerate {
        log::warn!("N = 1: penalty is degenerate, falling back to the smallest model");
        let cands: Vec<Candidate> = rows
            .iter()
            .map(|r| Candidate {
                criterion: 0.0,
                d_m: r.d_m,
                id: &r.model_id,
            })
            .collect();
        (argmin_with_ties(&cands).0, false)
    } else {
        let cands: Vec<Candidate> = rows
            .iter()
            .map(|r| Candidate {
                criterion: r.criterion,
                d_m: r.d_m,
                id: &r.model_id,
            })
            .collect();
        argmin_with_ties(&cands)
    };
    rows[chosen].chosen = true;
    Ok(SelectionResult {
        chosen,
        rows,
        estimate: evals[chosen].estimate.clone(),
        tie_broken,
        theta,
        mode,
        n_samples,
        lambda_max_phi: lm,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectOptions {
    pub theta: f64,
    pub mode: PenaltyMode,
}

impl Default for SelectOptions {
    fn default() -> Self {
        SelectOptions {
            theta: DEFAULT_THETA,
            mode: PenaltyMode::DeltaM,
        }
    }
}

pub fn select(
    obs: &ObservationSet,
    designs: &[DesignMatrix],
    opts: SelectOptions,
) -> Result<SelectionResult> {
    select_with(obs, designs, opts, Execution::default())
}

pub fn select_with(
    obs: &ObservationSet,
    designs: &[DesignMatrix],
    opts: SelectOptions,
    exec: Execution,
) -> Result<SelectionResult> {
    let moments = sample_second_moment_with(obs, exec);
    let evals = evaluate_models(obs, &moments, designs, exec)?;
    let lm = lambda_max_phi(obs, &moments, exec);
    choose(&evals, opts.theta, opts.mode, Some(lm), obs.n_samples())
}

/// A candidate subspace of `ℝ^{Nd}` given by its orthogonal projector.
#[derive(Debug, Clone, PartialEq)]
pub struct GenericModel {
    pub id: String,
    pub projector: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenericRow {
    pub id: String,
    pub d_m: f64,
    pub delta_sq: f64,
    pub residual: f64,
    pub pen: f64,
    pub criterion: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenericSelection {
    pub chosen: usize,
    pub rows: Vec<GenericRow>,
    pub fitted: DVector<f64>,
    pub tie_broken: bool,
}

/// Selection for `yᵢ = fⁱ + εᵢ`, `yᵢ ∈ ℝ^d`, with `Cov(εᵢ) = Φ`. The response
/// is stacked as `(y₁; …; y_N)` and the norm is `‖a‖²_N = (1/N) Σ aᵢᵀaᵢ`.
pub fn generic_select(
    y: &[DVector<f64>],
    models: &[GenericModel],
    phi: &SymMatrix,
    theta: f64,
) -> Result<GenericSelection> {
    if models.is_empty() {
        return Err(Error::invalid("empty model list"));
    }
    let big_n = y.len();
    if big_n == 0 {
        return Err(Error::invalid("need at least one response"));
    }
    let d = phi.dim();
    if let Some(i) = y.iter().position(|v| v.len() != d) {
        return Err(Error::dimension(format!(
            "response {} has length {}, Phi is {d}x{d}",
            i + 1,
            y[i].len()
        )));
    }
    let stacked = DVector::from_iterator(big_n * d, y.iter().flat_map(|v| v.iter().copied()));
    let mut rows = Vec::with_capacity(models.len());
    let mut fits = Vec::with_capacity(models.len());
    for model in models {
        let p = &model.projector;
        if p.nrows() != big_n * d || p.ncols() != big_n * d {
            return Err(Error::dimension(format!(
                "projector of model {} is {}x{}, expected {nd}x{nd}",
                model.id,
                p.nrows(),
                p.ncols(),
                nd = big_n * d
            )));
        }
        let d_m = trace(p);
        check_dimension(d_m)?;
        // Tr(P (I_N ⊗ Φ)) is the sum over diagonal blocks of Tr(P_ii Φ).
        let mut gamma_sq = 0.0;
        for i in 0..big_n {
            let block = p.view((i * d, i * d), (d, d));
            gamma_sq += block.component_mul(phi.as_matrix()).sum();
        }
        let delta_sq = gamma_sq.max(0.0) / d_m;
        let fitted = p * &stacked;
        let residual = (&stacked - &fitted).norm_squared() / big_n as f64;
        let pen = penalty(d_m, delta_sq, theta, big_n)?;
        rows.push(GenericRow {
            id: model.id.clone(),
            d_m,
            delta_sq,
            residual,
            pen,
            criterion: residual + pen,
        });
        fits.push(fitted);
    }
    let cands: Vec<Candidate> = rows
        .iter()
        .map(|r| Candidate {
            criterion: r.criterion,
            d_m: r.d_m,
            id: &r.id,
        })
        .collect();
    let (chosen, tie_broken) = argmin_with_ties(&cands);
    Ok(GenericSelection {
        chosen,
        fitted: fits.swap_remove(chosen),
        rows,
        tie_broken,
    })
}

/// Responses `vec(xᵢxᵢᵀ)` of the covariance problem viewed as a vector regression.
pub fn vectorized_responses(obs: &ObservationSet) -> Vec<DVector<f64>> {
    let n = obs.n_points();
    (0..obs.n_samples())
        .map(|i| {
            let x = obs.sample(i);
            DVector::from_fn(n * n, |idx, _| x[idx % n] * x[idx / n])
        })
        .collect()
}

/// Projector on `ℝ^{N n²}` onto `{1_N ⊗ vec(GΨGᵀ) : Ψ symmetric}`.
pub fn covariance_model_projector(design: &DesignMatrix, n_samples: usize) -> Result<GenericModel> {
    if n_samples == 0 {
        return Err(Error::invalid("need at least one replication"));
    }
    let m = design.g.ncols();
    let basis = kron(&design.g, &design.g) * duplication_matrix(m)?;
    let inner = projector(&basis, DEFAULT_REL_TOL)?;
    let mean = DMatrix::from_element(n_samples, n_samples, 1.0 / n_samples as f64);
    Ok(GenericModel {
        id: design.model.model_id.clone(),
        projector: kron(&mean, inner.matrix()),
    })
}
