//! Ground-truth processes and Monte-Carlo experiments.
//!
//! Every replication `r` draws from its own ChaCha stream `(seed, r)`, so the
//! reports are identical for any number of worker threads.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::basis::{design_matrix, nested_model_family, BasisFamily, DesignMatrix, ModelSpec};
use crate::error::{Error, Result};
use crate::estimator::{sample_second_moment_with, ObservationSet};
use crate::exec::Execution;
use crate::linalg::{
    dnn_sqrt, frobenius_dist_sq, kron, projector, trace, vec, vech_index, DenseMatrix, Projector,
    SymMatrix, DEFAULT_REL_TOL,
};
use crate::selection::{choose, evaluate_models, kron_trace, lambda_max_phi, PenaltyMode};

/// Multiplier on the Monte-Carlo standard error in every assertion.
pub const SE_MULTIPLIER: f64 = 3.0;

fn default_scale() -> f64 {
    1.0
}

/// The law of `X` at the design points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProcessKind {
    /// Centered Gaussian vector with an explicit covariance matrix.
    GpCholesky { sigma: Vec<Vec<f64>> },
    /// `X(t) = Σ_{λ≤L} scale·λ^{-α} ζ_λ g_λ(t)` with standard normal `ζ_λ`.
    KlProcess {
        alpha: f64,
        family: BasisFamily,
        truncation: usize,
        #[serde(default = "default_scale")]
        scale: f64,
    },
    /// Same expansion with Student-t coefficients scaled to unit variance.
    NonGaussianKl {
        alpha: f64,
        family: BasisFamily,
        truncation: usize,
        #[serde(default = "default_scale")]
        scale: f64,
        dof: f64,
    },
}

impl ProcessKind {
    pub fn is_gaussian(&self) -> bool {
        !matches!(self, ProcessKind::NonGaussianKl { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ProcessKind::GpCholesky { sigma } => {
                SymMatrix::from_rows(sigma)?;
                Ok(())
            }
            ProcessKind::KlProcess {
                alpha,
                family,
                truncation,
                scale,
            } => validate_kl(*alpha, family, *truncation, *scale),
            ProcessKind::NonGaussianKl {
                alpha,
                family,
                truncation,
                scale,
                dof,
            } => {
                validate_kl(*alpha, family, *truncation, *scale)?;
                if !(*dof > 4.0) || !dof.is_finite() {
                    return Err(Error::invalid(format!(
                        "Student-t innovations need dof > 4 for a finite fourth moment, got {dof}"
                    )));
                }
                Ok(())
            }
        }
    }
}

fn validate_kl(alpha: f64, family: &BasisFamily, truncation: usize, scale: f64) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    if truncation == 0 {
        return Err(Error::invalid("KL truncation must be at least 1"));
    }
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::invalid(format!("scale must be non-negative, got {scale}")));
    }
    BasisFamily::new(family.kind, family.domain[0], family.domain[1], truncation).map(|_| ())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrueProcessSpec {
    pub process: ProcessKind,
    pub rng_seed: u64,
}

/// `∑_{λ>L} λ^{-2α}`, the variance left out by a KL truncation at `L`
/// (per unit of `scale²` and of squared basis amplitude).
pub fn kl_tail_energy(alpha: f64, truncation: usize) -> f64 {
    let s = 2.0 * alpha;
    if s <= 1.0 {
        return f64::INFINITY;
    }
    let cutoff = (truncation + 100_000) as f64;
    let head: f64 = ((truncation + 1)..=(truncation + 100_000))
        .rev()
        .map(|l| (l as f64).powf(-s))
        .sum();
    // Euler-Maclaurin tail beyond the explicit sum.
    head + cutoff.powf(1.0 - s) / (s - 1.0) - 0.5 * cutoff.powf(-s)
}

/// Columns `scale·λ^{-α} g_λ(t_j)`.
fn kl_loadings(
    alpha: f64,
    family: &BasisFamily,
    truncation: usize,
    scale: f64,
    points: &[f64],
) -> Result<DenseMatrix> {
    let fam = BasisFamily::new(family.kind, family.domain[0], family.domain[1], truncation)?;
    let g = design_matrix(&fam, &ModelSpec::prefix(truncation), points)?.g;
    let mut b = g;
    for (k, mut col) in b.column_iter_mut().enumerate() {
        col.scale_mut(scale * ((k + 1) as f64).powf(-alpha));
    }
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Innovation {
    Gaussian,
    StudentT(f64),
}

/// Linear sampler `x = B ζ` with i.i.d. unit-variance coefficients.
#[derive(Debug, Clone)]
pub struct ProcessSampler {
    loadings: DenseMatrix,
    innovation: Innovation,
    seed: u64,
    points: Vec<f64>,
    /// Diagonal jitter added to make the Cholesky factorization succeed, if any.
    pub jitter: Option<f64>,
}

impl ProcessSampler {
    pub fn new(spec: &TrueProcessSpec, points: &[f64]) -> Result<Self> {
        spec.process.validate()?;
        let (loadings, innovation, jitter) = match &spec.process {
            ProcessKind::GpCholesky { sigma } => {
                let sigma = SymMatrix::from_rows(sigma)?;
                check_points(&sigma, points)?;
                let (l, jitter) = cholesky_with_jitter(&sigma)?;
                (l, Innovation::Gaussian, jitter)
            }
            ProcessKind::KlProcess {
                alpha,
                family,
                truncation,
                scale,
            } => (
                kl_loadings(*alpha, family, *truncation, *scale, points)?,
                Innovation::Gaussian,
                None,
            ),
            ProcessKind::NonGaussianKl {
                alpha,
                family,
                truncation,
                scale,
                dof,
            } => (
                kl_loadings(*alpha, family, *truncation, *scale, points)?,
                Innovation::StudentT(*dof),
                None,
            ),
        };
        Ok(ProcessSampler {
            loadings,
            innovation,
            seed: spec.rng_seed,
            points: points.to_vec(),
            jitter,
        })
    }

    /// `N` replications from stream `stream` of the seed.
    pub fn sample(&self, n_samples: usize, stream: u64) -> Result<ObservationSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let l = self.loadings.ncols();
        let z = match self.innovation {
            Innovation::Gaussian => {
                let mut z = DMatrix::zeros(n_samples, l);
                for i in 0..n_samples {
                    for k in 0..l {
                        z[(i, k)] = StandardNormal.sample(&mut rng);
                    }
                }
                z
            }
            Innovation::StudentT(dof) => {
                let t = StudentT::new(dof).map_err(|e| Error::invalid(e.to_string()))?;
                let unit = ((dof - 2.0) / dof).sqrt();
                let mut z = DMatrix::zeros(n_samples, l);
                for i in 0..n_samples {
                    for k in 0..l {
                        z[(i, k)] = unit * t.sample(&mut rng);
                    }
                }
                z
            }
        };
        ObservationSet::new(self.points.clone(), z * self.loadings.transpose())
    }

    pub fn sigma(&self) -> SymMatrix {
        SymMatrix::symmetrize_unchecked(&self.loadings * self.loadings.transpose())
    }
}

fn check_points(sigma: &SymMatrix, points: &[f64]) -> Result<()> {
    if sigma.dim() != points.len() {
        return Err(Error::dimension(format!(
            "covariance is {0}x{0} but there are {1} points",
            sigma.dim(),
            points.len()
        )));
    }
    Ok(())
}

fn cholesky_with_jitter(sigma: &SymMatrix) -> Result<(DenseMatrix, Option<f64>)> {
    if let Some(c) = Cholesky::new(sigma.as_matrix().clone()) {
        return Ok((c.l(), None));
    }
    let (min, max) = sigma.eigen_range();
    if max <= 0.0 && min >= -f64::MIN_POSITIVE {
        return Ok((DMatrix::zeros(sigma.dim(), sigma.dim()), None));
    }
    let jitter = 1e-12 * max.abs();
    log::info!("covariance factorization failed; retrying with jitter {jitter:e}");
    let shifted = sigma.as_matrix() + DMatrix::identity(sigma.dim(), sigma.dim()) * jitter;
    match Cholesky::new(shifted) {
        Some(c) => Ok((c.l(), Some(jitter))),
        None => Err(Error::NotDnn {
            min_eig: min,
            max_eig: max,
        }),
    }
}

pub fn sample_process(spec: &TrueProcessSpec, points: &[f64], n_samples: usize) -> Result<ObservationSet> {
    sample_process_stream(spec, points, n_samples, 0)
}

pub fn sample_process_stream(
    spec: &TrueProcessSpec,
    points: &[f64],
    n_samples: usize,
    stream: u64,
) -> Result<ObservationSet> {
    ProcessSampler::new(spec, points)?.sample(n_samples, stream)
}

/// `Σ` at the design points.
pub fn true_sigma(spec: &TrueProcessSpec, points: &[f64]) -> Result<SymMatrix> {
    match &spec.process {
        ProcessKind::GpCholesky { sigma } => {
            let s = SymMatrix::from_rows(sigma)?;
            check_points(&s, points)?;
            Ok(s)
        }
        _ => Ok(ProcessSampler::new(spec, points)?.sigma()),
    }
}

/// `Φ[(a,b),(c,d)] = Σ_ac Σ_bd + Σ_ad Σ_bc`, the covariance of `vec(xxᵀ)` for
/// a centered Gaussian vector; `(a,b)` sits at position `a + n·b`.
pub fn isserlis_phi(sigma: &SymMatrix) -> SymMatrix {
    let n = sigma.dim();
    let s = sigma.as_matrix();
    let phi = DMatrix::from_fn(n * n, n * n, |r, c| {
        let (a, b) = (r % n, r / n);
        let (cc, d) = (c % n, c / n);
        s[(a, cc)] * s[(b, d)] + s[(a, d)] * s[(b, cc)]
    });
    SymMatrix::symmetrize_unchecked(phi)
}

pub fn true_phi_gaussian(spec: &TrueProcessSpec, points: &[f64]) -> Result<SymMatrix> {
    if !spec.process.is_gaussian() {
        return Err(Error::invalid("Gaussian fourth moments requested for a non-Gaussian process"));
    }
    Ok(isserlis_phi(&true_sigma(spec, points)?))
}

/// Exact `Φ` for every supported process; Student-t coefficients add the
/// excess-kurtosis term `Σ_λ (κ−3) vec(b_λb_λᵀ)vec(b_λb_λᵀ)ᵀ`.
pub fn true_phi(spec: &TrueProcessSpec, points: &[f64]) -> Result<SymMatrix> {
    match &spec.process {
        ProcessKind::NonGaussianKl {
            alpha,
            family,
            truncation,
            scale,
            dof,
        } => {
            spec.process.validate()?;
            let b = kl_loadings(*alpha, family, *truncation, *scale, points)?;
            let sigma = SymMatrix::symmetrize_unchecked(&b * b.transpose());
            let mut phi = isserlis_phi(&sigma).into_inner();
            let excess = 3.0 * (dof - 2.0) / (dof - 4.0) - 3.0;
            for col in b.column_iter() {
                let col = col.into_owned();
                let w = vec(&(&col * col.transpose()));
                phi += (&w * w.transpose()) * excess;
            }
            Ok(SymMatrix::symmetrize_unchecked(phi))
        }
        _ => true_phi_gaussian(spec, points),
    }
}

/// `Tr((Π⊗Π)Φ)` for Gaussian `Φ`: `Tr(ΠΣ)² + ‖ΠΣΠ‖²`.
pub fn gaussian_kron_trace(pi: &Projector, sigma: &SymMatrix) -> f64 {
    let p = pi.matrix().as_matrix();
    let ps = p * sigma.as_matrix();
    let psp = &ps * p;
    ps.trace().powi(2) + psp.norm_squared()
}

/// Mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let r = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / r;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (r - 1.0);
    (mean, (var / r).sqrt())
}

fn within(value: f64, target: f64, se: f64) -> bool {
    (value - target).abs() <= SE_MULTIPLIER * se + 1e-12 * (1.0 + target.abs())
}

/// Counts datasets on which some `δ²ₘ` exceeds `λ_max(Φ̂)·(1+1e-8)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LambdaBoundTracker {
    pub datasets: usize,
    pub comparisons: usize,
    pub violations: usize,
    pub max_ratio: f64,
}

impl LambdaBoundTracker {
    pub fn record(&mut self, delta_sqs: &[f64], lambda_max: f64) {
        self.datasets += 1;
        for &d in delta_sqs {
            self.comparisons += 1;
            if d > lambda_max * (1.0 + 1e-8) {
                self.violations += 1;
            }
            if lambda_max > 0.0 {
                self.max_ratio = self.max_ratio.max(d / lambda_max);
            }
        }
    }

    pub fn merge(&mut self, other: &LambdaBoundTracker) {
        self.datasets += other.datasets;
        self.comparisons += other.comparisons;
        self.violations += other.violations;
        self.max_ratio = self.max_ratio.max(other.max_ratio);
    }
}

/// Entrywise comparison of `Φ̂` at large `N` with the analytic `Φ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiCheck {
    pub n_samples: usize,
    pub entries: usize,
    pub failures: usize,
    pub max_abs_z: f64,
    pub pass: bool,
}

/// Checks the unique entries of `Φ` against `Φ̂` from `N` draws of stream
/// `stream`, each within three standard errors.
pub fn phi_check(
    spec: &TrueProcessSpec,
    points: &[f64],
    n_samples: usize,
    stream: u64,
    exec: Execution,
) -> Result<PhiCheck> {
    let phi = true_phi(spec, points)?;
    let obs = ProcessSampler::new(spec, points)?.sample(n_samples, stream)?;
    let n = points.len();
    let q = n * (n + 1) / 2;
    let mut pairs = vec![(0usize, 0usize); q];
    for j in 0..n {
        for i in j..n {
            pairs[vech_index(n, i, j)] = (i, j);
        }
    }
    let mom = sample_second_moment_with(&obs, exec);
    let s = mom.s.as_matrix();
    let x = obs.data();
    let entries: Vec<(usize, usize)> = (0..q).flat_map(|u| (u..q).map(move |v| (u, v))).collect();
    const BLOCK: usize = 4096;
    let blocks = n_samples.div_ceil(BLOCK);
    let partials = exec.map(blocks, |b| {
        let start = b * BLOCK;
        let end = (start + BLOCK).min(n_samples);
        let mut sum = vec![0.0; entries.len()];
        let mut sum_sq = vec![0.0; entries.len()];
        let mut w = vec![0.0; q];
        for i in start..end {
            for (k, &(a, c)) in pairs.iter().enumerate() {
                w[k] = x[(i, a)] * x[(i, c)] - s[(a, c)];
            }
            for (e, &(u, v)) in entries.iter().enumerate() {
                let p = w[u] * w[v];
                sum[e] += p;
                sum_sq[e] += p * p;
            }
        }
        (sum, sum_sq)
    });
    let mut sum = vec![0.0; entries.len()];
    let mut sum_sq = vec![0.0; entries.len()];
    for (ps, pq) in &partials {
        for e in 0..entries.len() {
            sum[e] += ps[e];
            sum_sq[e] += pq[e];
        }
    }
    let nf = n_samples as f64;
    let mut failures = 0;
    let mut max_abs_z: f64 = 0.0;
    for (e, &(u, v)) in entries.iter().enumerate() {
        let (a, b) = pairs[u];
        let (c, d) = pairs[v];
        let target = phi[(a + n * b, c + n * d)];
        let mean = sum[e] / nf;
        let var = (sum_sq[e] / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
        let se = (var / nf).sqrt();
        if !within(mean, target, se) {
            failures += 1;
        }
        if se > 0.0 {
            max_abs_z = max_abs_z.max((mean - target).abs() / se);
        }
    }
    Ok(PhiCheck {
        n_samples,
        entries: entries.len(),
        failures,
        max_abs_z,
        pass: failures == 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    pub model_id: String,
    pub m: usize,
    #[serde(rename = "D_m")]
    pub d_m: f64,
    /// `‖Σ − ΠΣΠ‖²`.
    pub bias: f64,
    /// `Tr((Π⊗Π)Φ)/N = δ²ₘDₘ/N` with the true `Φ`.
    pub variance_term: f64,
    pub predicted_risk: f64,
    pub mc_risk: f64,
    pub mc_se: f64,
    pub risk_pass: bool,
    /// `Tr((Π⊗Π)Φ)`.
    pub kron_trace: f64,
    /// `N·Tr(Var vec(Σ̂ₘ))` estimated over the replications.
    pub scaled_variance_trace: f64,
    pub scaled_variance_se: f64,
    pub variance_pass: bool,
    pub delta_sq_true: f64,
    /// Replication mean of `δ²ₘ` computed from `Φ̂`.
    pub delta_sq_hat_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub n_samples: usize,
    pub replications: usize,
    pub rows: Vec<RiskRow>,
    pub lambda_bound: LambdaBoundTracker,
    pub all_pass: bool,
}

struct RiskReplication {
    losses: Vec<f64>,
    vecs: Vec<DVector<f64>>,
    delta_sq: Vec<f64>,
    lambda_max: f64,
}

/// Monte-Carlo check of `E‖Σ − Σ̂ₘ‖² = ‖Σ − ΠₘΣΠₘ‖² + Tr((Πₘ⊗Πₘ)Φ)/N`
/// and of `N·Tr(Var vec(Σ̂ₘ)) = Tr((Πₘ⊗Πₘ)Φ)` for every model.
pub fn risk_decomposition_check(
    spec: &TrueProcessSpec,
    designs: &[DesignMatrix],
    n_samples: usize,
    replications: usize,
    exec: Execution,
) -> Result<RiskReport> {
    if designs.is_empty() {
        return Err(Error::invalid("empty model list"));
    }
    if replications < 2 {
        return Err(Error::invalid("need at least two replications"));
    }
    let points = designs[0].points.clone();
    let sampler = ProcessSampler::new(spec, &points)?;
    let sigma = sampler.sigma();
    let phi = true_phi(spec, &points)?;
    let reps = exec.try_map(replications, |r| -> Result<RiskReplication> {
        let obs = sampler.sample(n_samples, r as u64)?;
        let mom = sample_second_moment_with(&obs, Execution::Sequential);
        let evals = evaluate_models(&obs, &mom, designs, Execution::Sequential)?;
        Ok(RiskReplication {
            losses: evals
                .iter()
                .map(|e| frobenius_dist_sq(sigma.as_matrix(), e.estimate.sigma_hat.as_matrix()))
                .collect(),
            vecs: evals.iter().map(|e| vec(e.estimate.sigma_hat.as_matrix())).collect(),
            delta_sq: evals.iter().map(|e| e.delta_sq).collect(),
            lambda_max: lambda_max_phi(&obs, &mom, Execution::Sequential),
        })
    })?;
    let mut lambda_bound = LambdaBoundTracker::default();
    for rep in &reps {
        lambda_bound.record(&rep.delta_sq, rep.lambda_max);
    }
    let nf = n_samples as f64;
    let rf = replications as f64;
    let mut rows = Vec::with_capacity(designs.len());
    for (k, design) in designs.iter().enumerate() {
        let pi = projector(&design.g, DEFAULT_REL_TOL)?;
        let pm = pi.matrix().as_matrix();
        let bias = frobenius_dist_sq(sigma.as_matrix(), &(pm * sigma.as_matrix() * pm));
        let kt = kron_trace(&pi, &phi)?;
        let variance_term = kt / nf;
        let losses: Vec<f64> = reps.iter().map(|r| r.losses[k]).collect();
        let (mc_risk, mc_se) = mean_se(&losses);
        let predicted = bias + variance_term;

        let mean_vec = reps
            .iter()
            .fold(DVector::zeros(sigma.dim() * sigma.dim()), |a, r| a + &r.vecs[k])
            / rf;
        let spread: Vec<f64> = reps
            .iter()
            .map(|r| (&r.vecs[k] - &mean_vec).norm_squared() * rf / (rf - 1.0))
            .collect();
        let (tr_var, tr_se) = mean_se(&spread);
        let d_m = pi.trace();
        let delta_hat: Vec<f64> = reps.iter().map(|r| r.delta_sq[k]).collect();
        rows.push(RiskRow {
            model_id: design.model.model_id.clone(),
            m: design.model.size(),
            d_m,
            bias,
            variance_term,
            predicted_risk: predicted,
            mc_risk,
            mc_se,
            risk_pass: within(mc_risk, predicted, mc_se),
            kron_trace: kt,
            scaled_variance_trace: nf * tr_var,
            scaled_variance_se: nf * tr_se,
            variance_pass: within(nf * tr_var, kt, nf * tr_se),
            delta_sq_true: kt / d_m,
            delta_sq_hat_mean: mean_se(&delta_hat).0,
        });
    }
    let all_pass = rows.iter().all(|r| r.risk_pass && r.variance_pass);
    Ok(RiskReport {
        n_samples,
        replications,
        rows,
        lambda_bound,
        all_pass,
    })
}

/// `K(θ) = (2 + 8/θ)(1 + θ)`.
pub fn oracle_constant(theta: f64) -> f64 {
    (2.0 + 8.0 / theta) * (1.0 + theta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub theta: f64,
    pub k_theta: f64,
    pub selected_risk: f64,
    pub selected_se: f64,
    pub best_model_id: String,
    pub best_model_risk: f64,
    pub best_model_se: f64,
    /// Selected risk over the best single-model risk.
    pub ratio: f64,
    /// Standard error of the paired difference `loss_sel − K·loss_best`.
    pub paired_se: f64,
    /// `N·max(0, selected − best)`, the excess in units of `1/N`.
    pub excess_times_n: f64,
    pub mean_selected_size: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRisk {
    pub model_id: String,
    pub m: usize,
    pub mc_risk: f64,
    pub mc_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub n_samples: usize,
    pub replications: usize,
    pub models: Vec<ModelRisk>,
    pub rows: Vec<OracleRow>,
    pub lambda_bound: LambdaBoundTracker,
    pub all_pass: bool,
}

struct OracleReplication {
    model_losses: Vec<f64>,
    selected: Vec<(f64, usize)>,
    delta_sq: Vec<f64>,
    lambda_max: f64,
}

/// Checks `E‖Σ − Σ̃‖² ≤ K(θ)·min_m E‖Σ − Σ̂ₘ‖²` up to Monte-Carlo error.
pub fn oracle_inequality_check(
    spec: &TrueProcessSpec,
    designs: &[DesignMatrix],
    thetas: &[f64],
    n_samples: usize,
    replications: usize,
    exec: Execution,
) -> Result<OracleReport> {
    if designs.is_empty() {
        return Err(Error::invalid("empty model list"));
    }
    if thetas.is_empty() || thetas.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::invalid("thetas must be a nonempty list of positive values"));
    }
    if replications < 2 {
        return Err(Error::invalid("need at least two replications"));
    }
    let points = designs[0].points.clone();
    let sampler = ProcessSampler::new(spec, &points)?;
    let sigma = sampler.sigma();
    let reps = exec.try_map(replications, |r| -> Result<OracleReplication> {
        let obs = sampler.sample(n_samples, r as u64)?;
        let mom = sample_second_moment_with(&obs, Execution::Sequential);
        let evals = evaluate_models(&obs, &mom, designs, Execution::Sequential)?;
        let model_losses: Vec<f64> = evals
            .iter()
            .map(|e| frobenius_dist_sq(sigma.as_matrix(), e.estimate.sigma_hat.as_matrix()))
            .collect();
        let mut selected = Vec::with_capacity(thetas.len());
        for &theta in thetas {
            let res = choose(&evals, theta, PenaltyMode::DeltaM, None, n_samples)?;
            selected.push((model_losses[res.chosen], res.chosen_row().m));
        }
        Ok(OracleReplication {
            model_losses,
            selected,
            delta_sq: evals.iter().map(|e| e.delta_sq).collect(),
            lambda_max: lambda_max_phi(&obs, &mom, Execution::Sequential),
        })
    })?;
    let mut lambda_bound = LambdaBoundTracker::default();
    for rep in &reps {
        lambda_bound.record(&rep.delta_sq, rep.lambda_max);
    }
    let models: Vec<ModelRisk> = designs
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let losses: Vec<f64> = reps.iter().map(|r| r.model_losses[k]).collect();
            let (mc_risk, mc_se) = mean_se(&losses);
            ModelRisk {
                model_id: d.model.model_id.clone(),
                m: d.model.size(),
                mc_risk,
                mc_se,
            }
        })
        .collect();
    let best = (0..models.len())
        .min_by(|&a, &b| models[a].mc_risk.total_cmp(&models[b].mc_risk))
        .expect("nonempty");
    let nf = n_samples as f64;
    let rows: Vec<OracleRow> = thetas
        .iter()
        .enumerate()
        .map(|(t, &theta)| {
            let k_theta = oracle_constant(theta);
            let sel: Vec<f64> = reps.iter().map(|r| r.selected[t].0).collect();
            let sizes: Vec<f64> = reps.iter().map(|r| r.selected[t].1 as f64).collect();
            let diff: Vec<f64> = reps
                .iter()
                .map(|r| r.selected[t].0 - k_theta * r.model_losses[best])
                .collect();
            let (selected_risk, selected_se) = mean_se(&sel);
            let (gap, paired_se) = mean_se(&diff);
            let best_risk = models[best].mc_risk;
            OracleRow {
                theta,
                k_theta,
                selected_risk,
                selected_se,
                best_model_id: models[best].model_id.clone(),
                best_model_risk: best_risk,
                best_model_se: models[best].mc_se,
                ratio: selected_risk / best_risk,
                paired_se,
                excess_times_n: nf * (selected_risk - best_risk).max(0.0),
                mean_selected_size: mean_se(&sizes).0,
                pass: gap <= SE_MULTIPLIER * paired_se,
            }
        })
        .collect();
    let all_pass = rows.iter().all(|r| r.pass);
    Ok(OracleReport {
        n_samples,
        replications,
        models,
        rows,
        lambda_bound,
        all_pass,
    })
}

/// Inputs of a convergence-rate experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSetup {
    pub spec: TrueProcessSpec,
    pub points: Vec<f64>,
    pub family: BasisFamily,
    pub ns: Vec<usize>,
    /// Nested model sizes, either one list for every `N` or one list per `N`.
    pub sizes: Vec<Vec<usize>>,
    pub replications: usize,
    pub theta: f64,
    pub target_slope: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub n_samples: usize,
    pub mc_risk: f64,
    pub mc_se: f64,
    pub mean_selected_size: f64,
    /// `min_m (‖Σ − ΠₘΣΠₘ‖² + Tr((Πₘ⊗Πₘ)Φ)/N)` from the true `Φ`.
    pub oracle_risk: f64,
    /// Smallest bias over the collection: the risk floor at this `N`.
    pub bias_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub points: Vec<RatePoint>,
    pub slope: f64,
    pub slope_se: f64,
    pub oracle_slope: f64,
    pub target_slope: f64,
    pub tolerance: f64,
    /// `n ≥ 2·m_max` for every `N`.
    pub design_rich_enough: bool,
    /// The bias floor accounts for at least half the risk at the largest `N`.
    pub saturated: bool,
    pub lambda_bound: LambdaBoundTracker,
    pub pass: bool,
}

/// Ordinary least-squares slope of `y` on `x` and its standard error when the
/// `y_i` carry independent errors with standard deviations `sd_i`.
pub fn weighted_slope(x: &[f64], y: &[f64], sd: &[f64]) -> (f64, f64) {
    let k = x.len() as f64;
    let xm = x.iter().sum::<f64>() / k;
    let ym = y.iter().sum::<f64>() / k;
    let sxx: f64 = x.iter().map(|v| (v - xm).powi(2)).sum();
    let slope = x.iter().zip(y).map(|(a, b)| (a - xm) * (b - ym)).sum::<f64>() / sxx;
    let var: f64 = x
        .iter()
        .zip(sd)
        .map(|(a, s)| ((a - xm) / sxx).powi(2) * s * s)
        .sum();
    (slope, var.sqrt())
}

fn stream_seed(seed: u64, n_samples: usize) -> u64 {
    seed ^ (n_samples as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn rate_check(setup: &RateSetup, exec: Execution) -> Result<RateReport> {
    if setup.ns.len() < 2 {
        return Err(Error::invalid("rate check needs at least two sample sizes"));
    }
    if setup.sizes.len() != 1 && setup.sizes.len() != setup.ns.len() {
        return Err(Error::invalid("sizes must hold one list or one list per N"));
    }
    if setup.replications < 2 {
        return Err(Error::invalid("need at least two replications"));
    }
    let base = ProcessSampler::new(&setup.spec, &setup.points)?;
    let sigma = base.sigma();
    let phi = if setup.spec.process.is_gaussian() {
        None
    } else {
        Some(true_phi(&setup.spec, &setup.points)?)
    };
    let mut points = Vec::with_capacity(setup.ns.len());
    let mut lambda_bound = LambdaBoundTracker::default();
    let mut max_size = 0;
    for (idx, &n_samples) in setup.ns.iter().enumerate() {
        let sizes = &setup.sizes[if setup.sizes.len() == 1 { 0 } else { idx }];
        max_size = max_size.max(sizes.iter().copied().max().unwrap_or(0));
        let designs: Vec<DesignMatrix> = nested_model_family(&setup.family, sizes)?
            .iter()
            .map(|m| design_matrix(&setup.family, m, &setup.points))
            .collect::<Result<_>>()?;
        let spec = TrueProcessSpec {
            process: setup.spec.process.clone(),
            rng_seed: stream_seed(setup.spec.rng_seed, n_samples),
        };
        let sampler = ProcessSampler::new(&spec, &setup.points)?;
        let reps = exec.try_map(setup.replications, |r| -> Result<(f64, usize, LambdaBoundTracker)> {
            let obs = sampler.sample(n_samples, r as u64)?;
            let mom = sample_second_moment_with(&obs, Execution::Sequential);
            let evals = evaluate_models(&obs, &mom, &designs, Execution::Sequential)?;
            let res = choose(&evals, setup.theta, PenaltyMode::DeltaM, None, n_samples)?;
            let loss = frobenius_dist_sq(sigma.as_matrix(), res.estimate.sigma_hat.as_matrix());
            let mut tracker = LambdaBoundTracker::default();
            let deltas: Vec<f64> = evals.iter().map(|e| e.delta_sq).collect();
            tracker.record(&deltas, lambda_max_phi(&obs, &mom, Execution::Sequential));
            Ok((loss, res.chosen_row().m, tracker))
        })?;
        for (_, _, t) in &reps {
            lambda_bound.merge(t);
        }
        let losses: Vec<f64> = reps.iter().map(|r| r.0).collect();
        let sizes_chosen: Vec<f64> = reps.iter().map(|r| r.1 as f64).collect();
        let (mc_risk, mc_se) = mean_se(&losses);
        let nf = n_samples as f64;
        let mut oracle_risk = f64::INFINITY;
        let mut bias_floor = f64::INFINITY;
        for d in &designs {
            let pi = projector(&d.g, DEFAULT_REL_TOL)?;
            let pm = pi.matrix().as_matrix();
            let bias = frobenius_dist_sq(sigma.as_matrix(), &(pm * sigma.as_matrix() * pm));
            let kt = match &phi {
                None => gaussian_kron_trace(&pi, &sigma),
                Some(phi) => kron_trace(&pi, phi)?,
            };
            oracle_risk = oracle_risk.min(bias + kt / nf);
            bias_floor = bias_floor.min(bias);
        }
        points.push(RatePoint {
            n_samples,
            mc_risk,
            mc_se,
            mean_selected_size: mean_se(&sizes_chosen).0,
            oracle_risk,
            bias_floor,
        });
    }
    let x: Vec<f64> = points.iter().map(|p| (p.n_samples as f64).ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.mc_risk.ln()).collect();
    let sd: Vec<f64> = points.iter().map(|p| p.mc_se / p.mc_risk).collect();
    let (slope, slope_se) = weighted_slope(&x, &y, &sd);
    let yo: Vec<f64> = points.iter().map(|p| p.oracle_risk.ln()).collect();
    let (oracle_slope, _) = weighted_slope(&x, &yo, &vec![0.0; yo.len()]);
    let last = points.last().expect("nonempty");
    let saturated = last.bias_floor >= 0.5 * last.mc_risk;
    let design_rich_enough = setup.points.len() >= 2 * max_size;
    if !design_rich_enough {
        log::warn!(
            "{} design points for models up to size {max_size}: risk may saturate",
            setup.points.len()
        );
    }
    Ok(RateReport {
        slope,
        slope_se,
        oracle_slope,
        target_slope: setup.target_slope,
        tolerance: setup.tolerance,
        design_rich_enough,
        saturated,
        lambda_bound,
        pass: slope.is_finite() && (slope - setup.target_slope).abs() <= setup.tolerance,
        points,
    })
}

/// `−2α/(2α+1)`.
pub fn kl_rate_exponent(alpha: f64) -> f64 {
    -2.0 * alpha / (2.0 * alpha + 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Noise {
    Gaussian,
    StudentT { dof: f64 },
}

/// Inputs of a tail experiment for `ζ²(ε) = εᵀÃε`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationSetup {
    /// `Cov(εᵢ)`, `d×d`.
    pub phi: SymMatrix,
    /// Non-negative matrix on `ℝ^{Nd}`.
    pub a_tilde: SymMatrix,
    pub n_blocks: usize,
    pub noise: Noise,
    pub p: f64,
    pub replications: usize,
    pub xs: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub x: f64,
    pub threshold: f64,
    pub empirical: f64,
    pub se: f64,
    /// `E‖ε₁‖^p Tr(Ã) / (δ^p ρ(Ã) x^{p/2})`, the bound without its constant.
    pub bound_shape: f64,
    /// Exact tail when `ζ²` is a scaled `χ²₁`.
    pub closed_form: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub delta_sq: f64,
    pub trace_a: f64,
    pub rho_a: f64,
    pub moment_p: f64,
    pub rows: Vec<TailRow>,
    pub slope: f64,
    pub slope_limit: f64,
    pub slope_pass: bool,
    pub closed_form_pass: Option<bool>,
}

/// `δ²Tr(Ã) + 2δ²√(Tr(Ã)·δ·x) + δ²Tr(Ã)x`.
pub fn concentration_threshold(delta_sq: f64, trace_a: f64, x: f64) -> f64 {
    let delta = delta_sq.sqrt();
    delta_sq * trace_a + 2.0 * delta_sq * (trace_a * delta * x).sqrt() + delta_sq * trace_a * x
}

/// Slack allowed above `−p/2` for the fitted log-tail slope.
pub const TAIL_SLOPE_SLACK: f64 = 0.3;

pub fn concentration_check(setup: &ConcentrationSetup, exec: Execution) -> Result<ConcentrationReport> {
    let d = setup.phi.dim();
    let nd = setup.n_blocks * d;
    if setup.a_tilde.dim() != nd {
        return Err(Error::dimension(format!(
            "A is {0}x{0}, expected {nd}x{nd}",
            setup.a_tilde.dim()
        )));
    }
    if !(setup.p >= 2.0) {
        return Err(Error::invalid("p must be at least 2"));
    }
    if let Noise::StudentT { dof } = setup.noise {
        if !(dof > setup.p) {
            return Err(Error::invalid(format!(
                "Student-t noise with dof {dof} has no moment of order {}",
                setup.p
            )));
        }
    }
    if setup.replications < 2 {
        return Err(Error::invalid("need at least two replications"));
    }
    let (a_min, rho_a) = setup.a_tilde.eigen_range();
    if a_min < -1e-10 * rho_a.abs().max(1.0) || rho_a <= 0.0 {
        return Err(Error::invalid("A must be non-negative and nonzero"));
    }
    let trace_a = trace(setup.a_tilde.as_matrix());
    let mut gamma_sq = 0.0;
    for i in 0..setup.n_blocks {
        gamma_sq += setup
            .a_tilde
            .view((i * d, i * d), (d, d))
            .component_mul(setup.phi.as_matrix())
            .sum();
    }
    let delta_sq = gamma_sq / trace_a;
    let root = dnn_sqrt(&setup.phi);
    let thresholds: Vec<f64> = setup
        .xs
        .iter()
        .map(|&x| concentration_threshold(delta_sq, trace_a, x))
        .collect();

    const BLOCK: usize = 2048;
    let blocks = setup.replications.div_ceil(BLOCK);
    let a = setup.a_tilde.as_matrix();
    let partials = exec.try_map(blocks, |b| -> Result<(Vec<usize>, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
        rng.set_stream(b as u64);
        let t = match setup.noise {
            Noise::StudentT { dof } => {
                Some((StudentT::new(dof).map_err(|e| Error::invalid(e.to_string()))?, ((dof - 2.0) / dof).sqrt()))
            }
            Noise::Gaussian => None,
        };
        let start = b * BLOCK;
        let end = (start + BLOCK).min(setup.replications);
        let mut counts = vec![0usize; thresholds.len()];
        let mut moment = 0.0;
        let mut z = DVector::zeros(d);
        let mut eps = DVector::zeros(nd);
        for _ in start..end {
            for i in 0..setup.n_blocks {
                for k in 0..d {
                    z[k] = match &t {
                        None => StandardNormal.sample(&mut rng),
                        Some((dist, unit)) => unit * dist.sample(&mut rng),
                    };
                }
                let e = &root * &z;
                if i == 0 {
                    moment += e.norm().powf(setup.p);
                }
                eps.rows_mut(i * d, d).copy_from(&e);
            }
            let zeta_sq = eps.dot(&(a * &eps));
            for (c, &thr) in counts.iter_mut().zip(&thresholds) {
                if zeta_sq >= thr {
                    *c += 1;
                }
            }
        }
        Ok((counts, moment))
    })?;
    let mut counts = vec![0usize; thresholds.len()];
    let mut moment = 0.0;
    for (c, m) in &partials {
        for (acc, v) in counts.iter_mut().zip(c) {
            *acc += v;
        }
        moment += m;
    }
    let rf = setup.replications as f64;
    let moment_p = moment / rf;

    let whitened = {
        let big_root = kron(&DMatrix::identity(setup.n_blocks, setup.n_blocks), &root);
        SymMatrix::symmetrize_unchecked(&big_root * a * &big_root)
    };
    let eig = whitened.eigen().eigenvalues;
    let mu_max = eig.iter().copied().fold(0.0, f64::max);
    let nonzero: Vec<f64> = eig.iter().copied().filter(|&v| v > 1e-12 * mu_max).collect();
    let chi1_scale = (setup.noise == Noise::Gaussian && nonzero.len() == 1).then(|| nonzero[0]);

    let delta_p = delta_sq.sqrt().powf(setup.p);
    let rows: Vec<TailRow> = setup
        .xs
        .iter()
        .zip(&thresholds)
        .zip(&counts)
        .map(|((&x, &thr), &c)| {
            let emp = c as f64 / rf;
            TailRow {
                x,
                threshold: thr,
                empirical: emp,
                se: (emp * (1.0 - emp) / rf).sqrt(),
                bound_shape: moment_p * trace_a / (delta_p * rho_a * x.powf(setup.p / 2.0)),
                closed_form: chi1_scale.map(|mu| statrs::function::erf::erfc((thr / (2.0 * mu)).sqrt())),
            }
        })
        .collect();
    let slope = if rows.iter().all(|r| r.empirical > 0.0) && rows.len() >= 2 {
        let lx: Vec<f64> = rows.iter().map(|r| r.x.ln()).collect();
        let ly: Vec<f64> = rows.iter().map(|r| r.empirical.ln()).collect();
        weighted_slope(&lx, &ly, &vec![0.0; lx.len()]).0
    } else {
        f64::NAN
    };
    let slope_limit = -setup.p / 2.0 + TAIL_SLOPE_SLACK;
    let closed_form_pass = chi1_scale.map(|_| {
        rows.iter().all(|r| {
            let c = r.closed_form.unwrap_or(f64::NAN);
            let se = (c * (1.0 - c) / rf).sqrt();
            within(r.empirical, c, se)
        })
    });
    Ok(ConcentrationReport {
        delta_sq,
        trace_a,
        rho_a,
        moment_p,
        rows,
        slope,
        slope_limit,
        slope_pass: slope.is_finite() && slope <= slope_limit,
        closed_form_pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{midpoint_grid, BasisKind};
    use approx::assert_abs_diff_eq;

    fn kl_spec(alpha: f64, truncation: usize, seed: u64) -> TrueProcessSpec {
        TrueProcessSpec {
            process: ProcessKind::KlProcess {
                alpha,
                family: BasisFamily::new(BasisKind::Fourier, 0.0, 1.0, truncation).unwrap(),
                truncation,
                scale: 1.0,
            },
            rng_seed: seed,
        }
    }

    #[test]
    fn oracle_constants() {
        assert_eq!(oracle_constant(1.0), 20.0);
        assert_eq!(oracle_constant(0.5), 27.0);
        assert_eq!(oracle_constant(2.0), 18.0);
    }

    #[test]
    fn isserlis_examples() {
        let phi = isserlis_phi(&SymMatrix::identity(2));
        // (0,0)->0, (1,0)->1, (0,1)->2, (1,1)->3
        assert_eq!(phi[(0, 0)], 2.0);
        assert_eq!(phi[(3, 3)], 2.0);
        assert_eq!(phi[(1, 1)], 1.0);
        assert_eq!(phi[(1, 2)], 1.0);
        assert_eq!(phi[(0, 3)], 0.0);
        let one = isserlis_phi(&SymMatrix::from_diagonal(&[1.5]));
        assert_abs_diff_eq!(one[(0, 0)], 2.0 * 1.5f64.powi(2), epsilon = 1e-15);
    }

    #[test]
    fn isserlis_zero_pattern_for_diagonal_sigma() {
        let n = 3;
        let phi = isserlis_phi(&SymMatrix::from_diagonal(&[1.0, 2.0, 0.5]));
        for r in 0..n * n {
            for c in 0..n * n {
                let mut counts = [0usize; 3];
                for idx in [r % n, r / n, c % n, c / n] {
                    counts[idx] += 1;
                }
                if counts.iter().any(|k| k % 2 == 1) {
                    assert_eq!(phi[(r, c)], 0.0);
                }
            }
        }
    }

    #[test]
    fn gaussian_kron_trace_matches_explicit() {
        let spec = kl_spec(1.0, 8, 1);
        let f = BasisFamily::new(BasisKind::Fourier, 0.0, 1.0, 8).unwrap();
        let pts = midpoint_grid(&f, 5);
        let sigma = true_sigma(&spec, &pts).unwrap();
        let phi = isserlis_phi(&sigma);
        let d = design_matrix(&f, &ModelSpec::prefix(3), &pts).unwrap();
        let pi = crate::linalg::projector(&d.g, 1e-12).unwrap();
        let a = gaussian_kron_trace(&pi, &sigma);
        let b = kron_trace(&pi, &phi).unwrap();
        assert!((a - b).abs() <= 1e-10 * b);
    }

    #[test]
    fn sampling_is_deterministic_and_zero_spectrum_is_zero() {
        let spec = kl_spec(1.0, 6, 9);
        let pts = [0.1, 0.4, 0.7];
        let a = sample_process(&spec, &pts, 20).unwrap();
        let b = sample_process(&spec, &pts, 20).unwrap();
        assert!(a.data().iter().zip(b.data().iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = sample_process_stream(&spec, &pts, 20, 1).unwrap();
        assert_ne!(a.data(), c.data());

        let mut zero = spec.clone();
        if let ProcessKind::KlProcess { scale, .. } = &mut zero.process {
            *scale = 0.0;
        }
        assert!(sample_process(&zero, &pts, 5).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_covariance_law_of_large_numbers() {
        let n = 3;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let spec = TrueProcessSpec {
            process: ProcessKind::GpCholesky { sigma: rows },
            rng_seed: 3,
        };
        let big_n = 10_000;
        let obs = sample_process(&spec, &[0.0, 1.0, 2.0], big_n).unwrap();
        let s = sample_second_moment_with(&obs, Execution::Sequential).s;
        let err = (s.as_matrix() - DMatrix::identity(n, n)).norm();
        assert!(err <= 5.0 / (big_n as f64).sqrt() * n as f64);
    }

    #[test]
    fn singular_covariance_uses_jitter() {
        let spec = TrueProcessSpec {
            process: ProcessKind::GpCholesky {
                sigma: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
            },
            rng_seed: 0,
        };
        let s = ProcessSampler::new(&spec, &[0.0, 1.0]).unwrap();
        assert!(s.jitter.is_some());
        let bad = TrueProcessSpec {
            process: ProcessKind::GpCholesky {
                sigma: vec![vec![1.0, 2.0], vec![2.0, 1.0]],
            },
            rng_seed: 0,
        };
        assert!(matches!(ProcessSampler::new(&bad, &[0.0, 1.0]), Err(Error::NotDnn { .. })));
    }

    #[test]
    fn non_gaussian_rejects_low_dof_and_phi_gaussian() {
        let mut spec = kl_spec(1.0, 4, 0);
        if let ProcessKind::KlProcess {
            alpha,
            family,
            truncation,
            scale,
        } = spec.process.clone()
        {
            spec.process = ProcessKind::NonGaussianKl {
                alpha,
                family,
                truncation,
                scale,
                dof: 3.0,
            };
        }
        assert!(ProcessSampler::new(&spec, &[0.2, 0.5]).is_err());
        if let ProcessKind::NonGaussianKl { dof, .. } = &mut spec.process {
            *dof = 6.0;
        }
        assert!(ProcessSampler::new(&spec, &[0.2, 0.5]).is_ok());
        assert!(true_phi_gaussian(&spec, &[0.2, 0.5]).is_err());
        let phi = true_phi(&spec, &[0.2, 0.5]).unwrap();
        let gauss = isserlis_phi(&true_sigma(&spec, &[0.2, 0.5]).unwrap());
        assert!(phi[(0, 0)] > gauss[(0, 0)]);
    }

    #[test]
    fn threshold_as_written() {
        assert_abs_diff_eq!(concentration_threshold(4.0, 3.0, 0.0), 12.0, epsilon = 1e-12);
        let v = concentration_threshold(4.0, 3.0, 2.0);
        assert_abs_diff_eq!(v, 12.0 + 8.0 * (3.0f64 * 2.0 * 2.0).sqrt() + 24.0, epsilon = 1e-12);
    }

    #[test]
    fn slope_of_exact_power_law() {
        let x: Vec<f64> = [1.0f64, 2.0, 4.0, 8.0].iter().map(|v| v.ln()).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 0.5 * v).collect();
        let (s, se) = weighted_slope(&x, &y, &[0.0; 4]);
        assert_abs_diff_eq!(s, -0.5, epsilon = 1e-12);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn tail_energy_of_harmonic_squares() {
        // Σ_{λ≥1} λ^{-2} = π²/6.
        let full = kl_tail_energy(1.0, 0);
        assert_abs_diff_eq!(full, std::f64::consts::PI.powi(2) / 6.0, epsilon = 1e-12);
        assert!(kl_tail_energy(0.5, 10).is_infinite());
    }
}
