use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use agropanel::basis::{
    chebyshev_basis, flatten_2d, ncs_basis, recover_curve, reduce, step_basis, tensor_basis, unflatten_2d, BasisMatrix,
};
use agropanel::rng::SplitMix64;
use agropanel::thermal::BinGrid;

/// Largest residual of projecting the columns of `b` on the span of `a`, relative to `b`.
fn projection_residual(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let coef = a.clone().svd(true, true).solve(b, 1e-12).unwrap();
    (a * coef - b).abs().max() / b.abs().max()
}

/// Natural cubic spline basis from truncated powers: 1, x, and
/// d_k − d_{K−1} with d_k = ((x−ξ_k)³₊ − (x−ξ_K)³₊)/(ξ_K − ξ_k).
fn truncated_power_ncs(x: &[f64], knots: &[f64]) -> DMatrix<f64> {
    let kk = knots.len();
    let p3 = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
    let d = |k: usize, v: f64| (p3(v - knots[k]) - p3(v - knots[kk - 1])) / (knots[kk - 1] - knots[k]);
    DMatrix::from_fn(x.len(), kk, |i, j| match j {
        0 => 1.0,
        1 => x[i],
        _ => d(j - 2, x[i]) - d(kk - 2, x[i]),
    })
}

#[test]
fn ncs_spans_the_truncated_power_space() {
    let bins = BinGrid::unit_bins(0, 38).unwrap();
    for df in [3, 5, 7, 12] {
        let b = ncs_basis(&bins, df).unwrap();
        let knots = b.knots.clone().unwrap();
        let tp = truncated_power_ncs(&b.eval_points, &knots);
        assert!(projection_residual(&tp, &b.values) < 1e-8, "df {df}");
        let with_const = DMatrix::from_fn(b.n_bins(), df + 1, |i, j| if j == 0 { 1.0 } else { b.values[(i, j - 1)] });
        assert!(projection_residual(&with_const, &tp) < 1e-8, "df {df}");
    }
}

#[test]
fn chebyshev_second_polynomial_closed_form() {
    let bins = BinGrid::new(-5.0, 40.0, 1.5).unwrap();
    let b = chebyshev_basis(&bins, 4).unwrap();
    for (k, &m) in b.eval_points.iter().enumerate() {
        let x = (m - (-5.0)) / 45.0 * 2.0 - 1.0;
        assert!((b.values[(k, 2)] - (2.0 * x * x - 1.0)).abs() < 1e-12);
        assert!((b.values[(k, 3)] - (4.0 * x.powi(3) - 3.0 * x)).abs() < 1e-12);
    }
}

fn random_custom(rng: &mut SplitMix64, k: usize, j: usize) -> BasisMatrix {
    let v = DMatrix::from_fn(k, j, |_, _| rng.normal());
    BasisMatrix::custom(v, (0..k).map(|i| i as f64).collect()).unwrap()
}

#[test]
fn tensor_matches_two_sided_transform() {
    let mut rng = SplitMix64::new(8);
    for _ in 0..20 {
        let (b1, b2) = (random_custom(&mut rng, 4, 2), random_custom(&mut rng, 3, 2));
        let t = tensor_basis(&b1, &b2).unwrap();
        assert_eq!(t.values.shape(), (12, 4));
        let z2d = DMatrix::from_fn(4, 3, |_, _| rng.uniform_range(0.0, 5.0));
        let z = flatten_2d(&z2d);
        let lhs = z.transpose() * &t.values;
        let x2d = b1.values.transpose() * &z2d * &b2.values;
        // column index j1·J2 + j2
        for j1 in 0..2 {
            for j2 in 0..2 {
                let mut brute = 0.0;
                for k1 in 0..4 {
                    for k2 in 0..3 {
                        brute += z2d[(k1, k2)] * b1.values[(k1, j1)] * b2.values[(k2, j2)];
                    }
                }
                assert!((lhs[j1 * 2 + j2] - x2d[(j1, j2)]).abs() < 1e-12);
                assert!((lhs[j1 * 2 + j2] - brute).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn reduce_and_recover_match_naive_loops() {
    let mut rng = SplitMix64::new(9);
    let b = random_custom(&mut rng, 9, 4);
    let z = DMatrix::from_fn(6, 9, |_, _| rng.uniform_range(0.0, 3.0));
    let x = reduce(&z, &b).unwrap();
    for i in 0..6 {
        for j in 0..4 {
            let mut s = 0.0;
            for k in 0..9 {
                s += z[(i, k)] * b.values[(k, j)];
            }
            assert!((x[(i, j)] - s).abs() < 1e-12);
        }
    }
    let gamma = DVector::from_fn(4, |_, _| rng.normal());
    let a = DMatrix::from_fn(4, 4, |_, _| rng.normal());
    let v = &a * a.transpose();
    let c = recover_curve(&gamma, &v, &b).unwrap();
    for k in 0..9 {
        let mut beta = 0.0;
        let mut var = 0.0;
        for p in 0..4 {
            beta += b.values[(k, p)] * gamma[p];
            for q in 0..4 {
                var += b.values[(k, p)] * v[(p, q)] * b.values[(k, q)];
            }
        }
        assert!((c.beta[k] - beta).abs() < 1e-12);
        assert!((c.se[k] - var.sqrt()).abs() < 1e-10);
    }
}

#[test]
fn step_bases_nest() {
    let bins = BinGrid::unit_bins(0, 39).unwrap();
    for (coarse, fine) in [(10.0, 5.0), (8.0, 4.0), (4.0, 2.0), (2.0, 1.0)] {
        let a = step_basis(&bins, fine).unwrap();
        let b = step_basis(&bins, coarse).unwrap();
        assert!(projection_residual(&a.values, &b.values) < 1e-10);
    }
}

proptest! {
    #[test]
    fn flattening_round_trips(rows in 1usize..8, cols in 1usize..8, seed in 0u64..1000) {
        let mut rng = SplitMix64::new(seed);
        let m = DMatrix::from_fn(rows, cols, |_, _| rng.normal());
        prop_assert_eq!(unflatten_2d(&flatten_2d(&m), rows, cols).unwrap(), m);
    }
}
