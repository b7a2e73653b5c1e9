mod common;

use covest::basis::{design_matrix, midpoint_grid, nested_model_family, BasisFamily, BasisKind, DesignMatrix};
use covest::estimator::{sample_second_moment, ObservationSet};
use covest::exec::Execution;
use covest::linalg::projector;
use covest::selection::{
    delta_sq, delta_sq_from_phi, estimate_phi, lambda_max_phi, penalty, select, select_with, PenaltyMode, SelectOptions,
};
use covest::simlab::{sample_process_stream, ProcessKind, TrueProcessSpec};
use nalgebra::DMatrix;
use rand::Rng;

use common::*;

fn fourier(max: usize) -> BasisFamily {
    BasisFamily::new(BasisKind::Fourier, 0.0, 1.0, max).unwrap()
}

fn designs(family: &BasisFamily, sizes: &[usize], pts: &[f64]) -> Vec<DesignMatrix> {
    nested_model_family(family, sizes)
        .unwrap()
        .iter()
        .map(|m| design_matrix(family, m, pts).unwrap())
        .collect()
}

fn random_obs(rng: &mut rand_chacha::ChaCha8Rng, pts: &[f64], big_n: usize) -> ObservationSet {
    let n = pts.len();
    let mix = gaussian(rng, n, n);
    ObservationSet::new(pts.to_vec(), gaussian(rng, big_n, n) * mix.transpose()).unwrap()
}

#[test]
fn phi_matches_brute_force() {
    let mut rng = rng(1);
    for _ in 0..20 {
        let n = rng.random_range(1..=4);
        let big_n = rng.random_range(2..25);
        let pts: Vec<f64> = (0..n).map(|j| j as f64).collect();
        let obs = random_obs(&mut rng, &pts, big_n);
        let phi = estimate_phi(&obs);
        let brute = brute_phi(obs.data());
        assert!((phi.phi.as_matrix() - &brute).norm() <= 1e-10 * (1.0 + brute.norm()));
    }
}

#[test]
fn fast_delta_sq_matches_dense_path() {
    let mut rng = rng(2);
    for _ in 0..50 {
        let n = rng.random_range(2..=4);
        let big_n = rng.random_range(1..30);
        let m = rng.random_range(1..=n + 1);
        let g = gaussian(&mut rng, n, m);
        let pts: Vec<f64> = (0..n).map(|j| j as f64).collect();
        let obs = random_obs(&mut rng, &pts, big_n);
        let mom = sample_second_moment(&obs);
        let pi = projector(&g, 1e-12).unwrap();
        let fast = delta_sq(&pi, &obs, &mom).unwrap();
        let dense = delta_sq_from_phi(&pi, &estimate_phi(&obs).phi).unwrap();
        assert!(rel_close(fast, dense, 1e-9), "{fast} vs {dense}");
    }
}

#[test]
fn lambda_max_matches_largest_eigenvalue_of_phi() {
    let mut rng = rng(3);
    for _ in 0..10 {
        let n = rng.random_range(1..=4);
        let pts: Vec<f64> = (0..n).map(|j| j as f64).collect();
        let obs = random_obs(&mut rng, &pts, 20);
        let mom = sample_second_moment(&obs);
        let lm = lambda_max_phi(&obs, &mom, Execution::Sequential);
        let brute = max_eig(&brute_phi(obs.data()));
        assert!(rel_close(lm, brute, 1e-9), "{lm} vs {brute}");
    }
}

#[test]
fn penalty_rejects_bad_inputs() {
    assert!(penalty(2.0, 1.0, 0.0, 10).is_err());
    assert!(penalty(2.0, 1.0, -1.0, 10).is_err());
    assert!((penalty(2.0, 3.0, 1.0, 10).unwrap() - 1.2).abs() < 1e-15);
}

#[test]
fn argmin_invariant_under_data_scaling() {
    let mut rng = rng(4);
    let family = fourier(8);
    let pts = midpoint_grid(&family, 6);
    let ds = designs(&family, &[1, 2, 3, 4, 5], &pts);
    for _ in 0..20 {
        let obs = random_obs(&mut rng, &pts, 40);
        let base = select(&obs, &ds, SelectOptions::default()).unwrap();
        for c in [1e-3, 7.5, 1e3] {
            let scaled = ObservationSet::new(pts.clone(), obs.data() * c).unwrap();
            let res = select(&scaled, &ds, SelectOptions::default()).unwrap();
            assert_eq!(res.chosen_row().model_id, base.chosen_row().model_id);
        }
    }
}

#[test]
fn argmin_invariant_under_model_order() {
    let mut rng = rng(5);
    let family = fourier(8);
    let pts = midpoint_grid(&family, 6);
    let ds = designs(&family, &[1, 2, 3, 4, 5, 6], &pts);
    for _ in 0..20 {
        let obs = random_obs(&mut rng, &pts, 30);
        let a = select(&obs, &ds, SelectOptions::default()).unwrap();
        let mut rev = ds.clone();
        rev.reverse();
        let b = select(&obs, &rev, SelectOptions::default()).unwrap();
        assert_eq!(a.chosen_row().model_id, b.chosen_row().model_id);
    }
}

#[test]
fn sequential_and_parallel_selection_agree_bitwise() {
    let mut rng = rng(6);
    let family = fourier(10);
    let pts = midpoint_grid(&family, 10);
    let ds = designs(&family, &[1, 3, 5, 7], &pts);
    let obs = random_obs(&mut rng, &pts, 1500);
    let a = select_with(&obs, &ds, SelectOptions::default(), Execution::Sequential).unwrap();
    let b = select_with(&obs, &ds, SelectOptions::default(), Execution::Parallel).unwrap();
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!(x.criterion.to_bits(), y.criterion.to_bits());
        assert_eq!(x.delta_sq.to_bits(), y.delta_sq.to_bits());
    }
    assert_eq!(a.estimate.sigma_hat, b.estimate.sigma_hat);
}

#[test]
fn lambda_mode_penalizes_at_least_as_much() {
    let mut rng = rng(7);
    let family = fourier(6);
    let pts = midpoint_grid(&family, 5);
    let ds = designs(&family, &[1, 2, 3, 4], &pts);
    let obs = random_obs(&mut rng, &pts, 50);
    let a = select(&obs, &ds, SelectOptions { mode: PenaltyMode::DeltaM, ..Default::default() }).unwrap();
    let b = select(&obs, &ds, SelectOptions { mode: PenaltyMode::LambdaMax, ..Default::default() }).unwrap();
    let lm = b.lambda_max_phi.unwrap();
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!(x.contrast, y.contrast);
        assert!(rel_close(y.pen, 2.0 * lm * x.d_m / 50.0, 1e-12));
    }
}

#[test]
fn single_sample_picks_smallest_model() {
    let family = fourier(6);
    let pts = midpoint_grid(&family, 4);
    let obs = ObservationSet::new(pts.clone(), DMatrix::from_row_slice(1, 4, &[1.0, -2.0, 0.5, 3.0])).unwrap();
    let mut ds = designs(&family, &[1, 2, 3], &pts);
    ds.reverse();
    let res = select(&obs, &ds, SelectOptions::default()).unwrap();
    assert!(res.degenerate);
    assert_eq!(res.chosen_row().model_id, "m1");
}

#[test]
fn rank_two_truth_selects_size_two() {
    let family = fourier(6);
    let pts = midpoint_grid(&family, 8);
    let ds = designs(&family, &[1, 2, 3, 4, 5, 6], &pts);
    let spec = TrueProcessSpec {
        process: ProcessKind::KlProcess {
            alpha: 1.0,
            family: family.clone(),
            truncation: 2,
            scale: 1.0,
        },
        rng_seed: 77,
    };
    let runs = 200;
    let mut hits = 0;
    for r in 0..runs {
        let obs = sample_process_stream(&spec, &pts, 2000, r).unwrap();
        let res = select(&obs, &ds, SelectOptions::default()).unwrap();
        if res.chosen_row().model_id == "m2" {
            hits += 1;
        }
    }
    assert!(hits * 10 >= runs * 9, "size 2 chosen in {hits}/{runs} runs");
}
