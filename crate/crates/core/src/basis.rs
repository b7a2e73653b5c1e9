//! Basis function families on an interval and the design matrices they induce.
//!
//! Every family is orthonormal in `L²([a, b])` and indexed from 1, with the
//! constant function first:
//!
//! - `fourier`: `1/√(b−a)`, then `√(2/(b−a))·cos(2πk u)` at index `2k` and
//!   `√(2/(b−a))·sin(2πk u)` at index `2k+1`, where `u = (t−a)/(b−a)`.
//! - `polynomial`: shifted Legendre polynomials `√((2j+1)/(b−a))·P_j(2u−1)`
//!   at index `j+1`.
//! - `haar`: the constant, then `2^{s/2}ψ(2^s u − l)/√(b−a)` at index
//!   `2^s + l + 1` for `l < 2^s` (dyadic order, coarse scales first).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    Fourier,
    Polynomial,
    Haar,
}

impl std::fmt::Display for BasisKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BasisKind::Fourier => "fourier",
            BasisKind::Polynomial => "polynomial",
            BasisKind::Haar => "haar",
        };
        f.write_str(s)
    }
}

/// A basis family on the interval `[domain[0], domain[1]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisFamily {
    pub kind: BasisKind,
    pub domain: [f64; 2],
    pub max_size: usize,
}

impl BasisFamily {
    pub fn new(kind: BasisKind, a: f64, b: f64, max_size: usize) -> Result<Self> {
        let family = BasisFamily {
            kind,
            domain: [a, b],
            max_size,
        };
        family.validate()?;
        Ok(family)
    }

    pub fn validate(&self) -> Result<()> {
        let [a, b] = self.domain;
        if !(a.is_finite() && b.is_finite() && b > a) {
            return Err(Error::invalid(format!("degenerate basis domain [{a}, {b}]")));
        }
        if self.max_size == 0 {
            return Err(Error::invalid("basis max_size must be at least 1"));
        }
        Ok(())
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.domain[0] && t <= self.domain[1]
    }

    /// `g_λ(t)` for `λ` in `1..=max_size`.
    pub fn evaluate(&self, lambda: usize, t: f64) -> Result<f64> {
        if lambda == 0 || lambda > self.max_size {
            return Err(Error::invalid(format!(
                "basis index {lambda} outside 1..={}",
                self.max_size
            )));
        }
        if !self.contains(t) {
            return Err(Error::OutsideDomain(format!(
                "t = {t} not in [{}, {}]",
                self.domain[0], self.domain[1]
            )));
        }
        Ok(self.evaluate_unchecked(lambda, t))
    }

    fn evaluate_unchecked(&self, lambda: usize, t: f64) -> f64 {
        let [a, b] = self.domain;
        let width = b - a;
        let u = (t - a) / width;
        match self.kind {
            BasisKind::Fourier => fourier(lambda, u, width),
            BasisKind::Polynomial => legendre(lambda - 1, 2.0 * u - 1.0) * ((2 * lambda - 1) as f64 / width).sqrt(),
            BasisKind::Haar => haar(lambda, u) / width.sqrt(),
        }
    }
}

fn fourier(lambda: usize, u: f64, width: f64) -> f64 {
    if lambda == 1 {
        return 1.0 / width.sqrt();
    }
    let k = (lambda / 2) as f64;
    let arg = 2.0 * std::f64::consts::PI * k * u;
    let amp = (2.0 / width).sqrt();
    if lambda % 2 == 0 {
        amp * arg.cos()
    } else {
        amp * arg.sin()
    }
}

/// Legendre polynomial `P_degree(x)` by the three-term recurrence.
fn legendre(degree: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    if degree == 0 {
        return prev;
    }
    for k in 1..degree {
        let kf = k as f64;
        let next = ((2.0 * kf + 1.0) * x * cur - kf * prev) / (kf + 1.0);
        prev = cur;
        cur = next;
    }
    cur
}

/// Haar function on `[0, 1]`; the right endpoint belongs to the last cell.
fn haar(lambda: usize, u: f64) -> f64 {
    if lambda == 1 {
        return 1.0;
    }
    let idx = lambda - 2;
    let scale = usize::BITS - 1 - (idx + 1).leading_zeros();
    let level = 1usize << scale;
    let shift = (idx + 1 - level) as f64;
    let x = level as f64 * u - shift;
    let amp = (level as f64).sqrt();
    let last = shift as usize == level - 1;
    if (0.0..0.5).contains(&x) {
        amp
    } else if (0.5..1.0).contains(&x) || (last && x == 1.0) {
        -amp
    } else {
        0.0
    }
}

/// A candidate model: an ordered set of basis indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub model_id: String,
    pub indices: Vec<usize>,
}

impl ModelSpec {
    pub fn new(model_id: impl Into<String>, indices: Vec<usize>) -> Self {
        ModelSpec {
            model_id: model_id.into(),
            indices,
        }
    }

    /// Prefix model `{1, …, m}`.
    pub fn prefix(m: usize) -> Self {
        ModelSpec::new(format!("m{m}"), (1..=m).collect())
    }

    pub fn size(&self) -> usize {
        self.indices.len()
    }

    pub fn validate(&self, family: &BasisFamily) -> Result<()> {
        if self.indices.is_empty() {
            return Err(Error::invalid(format!("model {} has no basis functions", self.model_id)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &l in &self.indices {
            if l == 0 || l > family.max_size {
                return Err(Error::invalid(format!(
                    "model {} uses index {l} outside 1..={}",
                    self.model_id, family.max_size
                )));
            }
            if !seen.insert(l) {
                return Err(Error::invalid(format!(
                    "model {} repeats index {l}",
                    self.model_id
                )));
            }
        }
        Ok(())
    }
}

/// `G[j][k] = g_{λ_k}(t_j)` for a model and a set of design points.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub g: DenseMatrix,
    pub points: Vec<f64>,
    pub model: ModelSpec,
    pub family: BasisFamily,
}

impl DesignMatrix {
    pub fn n_points(&self) -> usize {
        self.g.nrows()
    }
}

pub fn evaluate_basis(family: &BasisFamily, lambda: usize, t: f64) -> Result<f64> {
    family.evaluate(lambda, t)
}

/// Evaluation vector `G_t = (g_λ(t), λ ∈ model)`.
pub fn evaluation_vector(family: &BasisFamily, model: &ModelSpec, t: f64) -> Result<Vec<f64>> {
    model.indices.iter().map(|&l| family.evaluate(l, t)).collect()
}

pub fn design_matrix(family: &BasisFamily, model: &ModelSpec, points: &[f64]) -> Result<DesignMatrix> {
    family.validate()?;
    model.validate(family)?;
    if points.is_empty() {
        return Err(Error::invalid("design needs at least one point"));
    }
    if let Some((j, &t)) = points.iter().enumerate().find(|(_, &t)| !family.contains(t)) {
        return Err(Error::OutsideDomain(format!(
            "point {} (t = {t}) not in [{}, {}]",
            j + 1,
            family.domain[0],
            family.domain[1]
        )));
    }
    let g = DMatrix::from_fn(points.len(), model.size(), |j, k| {
        family.evaluate_unchecked(model.indices[k], points[j])
    });
    Ok(DesignMatrix {
        g,
        points: points.to_vec(),
        model: model.clone(),
        family: family.clone(),
    })
}

/// Nested prefix models `{1..m}` for each requested size.
pub fn nested_model_family(family: &BasisFamily, sizes: &[usize]) -> Result<Vec<ModelSpec>> {
    if sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("model sizes must be strictly increasing"));
    }
    if let Some(&bad) = sizes.iter().find(|&&m| m == 0 || m > family.max_size) {
        return Err(Error::invalid(format!(
            "model size {bad} outside 1..={}",
            family.max_size
        )));
    }
    Ok(sizes.iter().map(|&m| ModelSpec::prefix(m)).collect())
}

/// Equispaced cell midpoints `a + (j − ½)(b − a)/n`, `j = 1..n`.
pub fn midpoint_grid(family: &BasisFamily, n: usize) -> Vec<f64> {
    let [a, b] = family.domain;
    (0..n)
        .map(|j| a + (j as f64 + 0.5) * (b - a) / n as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn fam(kind: BasisKind, a: f64, b: f64) -> BasisFamily {
        BasisFamily::new(kind, a, b, 64).unwrap()
    }

    #[test]
    fn fourier_examples() {
        let f = fam(BasisKind::Fourier, 0.0, 1.0);
        assert_abs_diff_eq!(f.evaluate(1, 0.37).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f.evaluate(2, 0.0).unwrap(), 2f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(f.evaluate(3, 0.25).unwrap(), 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn polynomial_examples() {
        let p = fam(BasisKind::Polynomial, -1.0, 1.0);
        assert_abs_diff_eq!(p.evaluate(2, 0.5).unwrap(), 1.5f64.sqrt() * 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.evaluate(1, 0.3).unwrap(), 0.5f64.sqrt(), epsilon = 1e-15);
        // P_2(x) = (3x² − 1)/2
        let expected = (2.5f64).sqrt() * (3.0 * 0.09 - 1.0) / 2.0;
        assert_abs_diff_eq!(p.evaluate(3, 0.3).unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn haar_values() {
        let h = fam(BasisKind::Haar, 0.0, 1.0);
        assert_eq!(h.evaluate(2, 0.25).unwrap(), 1.0);
        assert_eq!(h.evaluate(2, 0.75).unwrap(), -1.0);
        assert_eq!(h.evaluate(2, 1.0).unwrap(), -1.0);
        // index 3: scale 1, shift 0 -> support [0, 1/2)
        assert_abs_diff_eq!(h.evaluate(3, 0.1).unwrap(), 2f64.sqrt());
        assert_eq!(h.evaluate(3, 0.6).unwrap(), 0.0);
        // index 4: scale 1, shift 1 -> support [1/2, 1]
        assert_abs_diff_eq!(h.evaluate(4, 1.0).unwrap(), -(2f64.sqrt()));
    }

    #[test]
    fn outside_domain_is_rejected() {
        let f = fam(BasisKind::Fourier, 0.0, 1.0);
        let err = f.evaluate(1, 1.5).unwrap_err();
        assert!(err.to_string().contains("point outside basis domain"));
        assert!(f.evaluate(1, f64::NAN).is_err());
        assert!(f.evaluate(65, 0.5).is_err());
    }

    #[test]
    fn degenerate_domain_rejected() {
        assert!(BasisFamily::new(BasisKind::Haar, 1.0, 1.0, 4).is_err());
        assert!(BasisFamily::new(BasisKind::Haar, 0.0, 1.0, 0).is_err());
    }

    #[test]
    fn design_examples() {
        let h = fam(BasisKind::Haar, 0.0, 1.0);
        let d = design_matrix(&h, &ModelSpec::prefix(1), &[0.25, 0.75]).unwrap();
        assert_eq!(d.g.as_slice(), &[1.0, 1.0]);

        let f = fam(BasisKind::Fourier, 0.0, 1.0);
        let pts: Vec<f64> = (0..4).map(|j| j as f64 / 4.0).collect();
        let d = design_matrix(&f, &ModelSpec::prefix(3), &pts).unwrap();
        let gram = d.g.transpose() * &d.g;
        let target = DMatrix::<f64>::identity(3, 3) * 4.0;
        for (x, y) in gram.iter().zip(target.iter()) {
            assert!((x - y).abs() <= 0.05 * 4.0, "{gram}");
        }

        assert!(design_matrix(&f, &ModelSpec::prefix(3), &[]).is_err());
        let err = design_matrix(&f, &ModelSpec::prefix(1), &[0.5, 2.0]).unwrap_err();
        assert!(err.to_string().contains("point 2"));
    }

    #[test]
    fn model_validation() {
        let f = BasisFamily::new(BasisKind::Fourier, 0.0, 1.0, 5).unwrap();
        assert!(ModelSpec::new("a", vec![]).validate(&f).is_err());
        assert!(ModelSpec::new("a", vec![1, 1]).validate(&f).is_err());
        assert!(ModelSpec::new("a", vec![6]).validate(&f).is_err());
        assert!(ModelSpec::new("a", vec![5, 2]).validate(&f).is_ok());
    }

    #[test]
    fn nested_family_examples() {
        let f = fam(BasisKind::Fourier, 0.0, 1.0);
        let models = nested_model_family(&f, &[1, 2, 4]).unwrap();
        let idx: Vec<_> = models.iter().map(|m| m.indices.clone()).collect();
        assert_eq!(idx, vec![vec![1], vec![1, 2], vec![1, 2, 3, 4]]);
        assert!(nested_model_family(&f, &[]).unwrap().is_empty());
        assert!(nested_model_family(&f, &[3, 2]).is_err());
        assert!(nested_model_family(&f, &[2, 2]).is_err());
    }

    #[test]
    fn orthonormal_by_quadrature() {
        let grid = 10_000;
        for (kind, a, b) in [
            (BasisKind::Fourier, 0.0, 1.0),
            (BasisKind::Polynomial, -1.0, 2.0),
            (BasisKind::Haar, 0.0, 1.0),
        ] {
            let f = BasisFamily::new(kind, a, b, 8).unwrap();
            let h = (b - a) / grid as f64;
            let pts: Vec<f64> = (0..grid).map(|j| a + (j as f64 + 0.5) * h).collect();
            for l in 1..=8 {
                for m in 1..=8 {
                    let ip: f64 = pts
                        .iter()
                        .map(|&t| f.evaluate(l, t).unwrap() * f.evaluate(m, t).unwrap() * h)
                        .sum();
                    let delta = if l == m { 1.0 } else { 0.0 };
                    assert!((ip - delta).abs() <= 1e-3, "{kind} <{l},{m}> = {ip}");
                }
            }
        }
    }

    #[test]
    fn permuting_points_permutes_rows() {
        let f = fam(BasisKind::Polynomial, 0.0, 1.0);
        let pts = [0.1, 0.7, 0.3, 0.95];
        let perm = [2, 0, 3, 1];
        let permuted: Vec<f64> = perm.iter().map(|&i| pts[i]).collect();
        let model = ModelSpec::prefix(4);
        let d = design_matrix(&f, &model, &pts).unwrap();
        let dp = design_matrix(&f, &model, &permuted).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            assert_eq!(dp.g.row(r), d.g.row(src));
        }
    }

    #[test]
    fn rebuilds_are_bit_identical() {
        let f = fam(BasisKind::Fourier, -2.0, 3.0);
        let model = ModelSpec::new("x", vec![7, 2, 5]);
        let pts = midpoint_grid(&f, 11);
        let a = design_matrix(&f, &model, &pts).unwrap();
        let b = design_matrix(&f, &model, &pts).unwrap();
        assert!(a.g.iter().zip(b.g.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
