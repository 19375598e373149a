//! Basis matrices mapping `K` temperature bins onto `J` regressors.
//!
//! Rows are bins (evaluated at bin midpoints), columns are regressors, so
//! binned exposures `Z` (obs × K) reduce to `X = Z·B` and per-bin effects are
//! recovered as `β = B·Γ` with `Var(β) = B·Var(Γ)·Bᵀ`.
//!
//! Tensor products use the ordering `row = k1·K2 + k2`, `col = j1·J2 + j2`:
//! an observation's 2-D exposure `Z2D` (K1 × K2) flattened row-major then
//! satisfies `vec(Z2D)·(B1 ⊗ B2) = vec(B1ᵀ · Z2D · B2)`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::fmt_f64;
use crate::error::{Error, Result};
use crate::thermal::BinGrid;

const RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Step,
    Ncs,
    Chebyshev,
    Tensor,
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    pub kind: BasisKind,
    /// K × J.
    pub values: DMatrix<f64>,
    pub eval_points: Vec<f64>,
    /// Spline knots (boundary knots included) for `Ncs`.
    pub knots: Option<Vec<f64>>,
    /// `Step` only: the last step covers fewer bins than the others.
    pub short_last_step: bool,
    pub components: Option<Box<(BasisMatrix, BasisMatrix)>>,
}

impl BasisMatrix {
    fn checked(self) -> Result<Self> {
        let (k, j) = self.values.shape();
        if j == 0 {
            return Err(Error::validation("basis needs at least one column"));
        }
        if j > k {
            return Err(Error::Rank {
                column: format!("{:?} basis has {j} columns for {k} bins", self.kind),
            });
        }
        if let Some(col) = first_dependent_column(&self.values) {
            return Err(Error::Rank {
                column: format!("{:?} basis column {col}", self.kind),
            });
        }
        Ok(self)
    }

    pub fn custom(values: DMatrix<f64>, eval_points: Vec<f64>) -> Result<Self> {
        if eval_points.len() != values.nrows() {
            return Err(Error::Length {
                what: "basis evaluation points".into(),
                expected: values.nrows(),
                actual: eval_points.len(),
            });
        }
        BasisMatrix {
            kind: BasisKind::Custom,
            values,
            eval_points,
            knots: None,
            short_last_step: false,
            components: None,
        }
        .checked()
    }

    pub fn identity(bins: &BinGrid) -> Self {
        let k = bins.n_bins();
        BasisMatrix {
            kind: BasisKind::Step,
            values: DMatrix::identity(k, k),
            eval_points: bins.midpoints(),
            knots: None,
            short_last_step: false,
            components: None,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    /// Drop column `j`, e.g. to remove a reference bin or a constant term
    /// that would be collinear with absorbed fixed effects.
    pub fn without_column(&self, j: usize) -> Result<Self> {
        if j >= self.n_cols() {
            return Err(Error::shape(format!("basis has no column {j}")));
        }
        BasisMatrix {
            values: self.values.clone().remove_column(j),
            components: None,
            ..self.clone()
        }
        .checked()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["k", "j", "value"])?;
        for k in 0..self.n_bins() {
            for j in 0..self.n_cols() {
                w.write_record([k.to_string(), j.to_string(), fmt_f64(self.values[(k, j)])])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Index of the first column that is numerically dependent on earlier ones.
fn first_dependent_column(m: &DMatrix<f64>) -> Option<usize> {
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut q: Vec<DVector<f64>> = Vec::new();
    for j in 0..m.ncols() {
        let mut v = m.column(j).into_owned() / scale;
        let norm0 = v.norm();
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for u in &q {
                let d = u.dot(&v);
                v -= u * d;
            }
        }
        let n = v.norm();
        if n <= RANK_TOL * norm0.max(1.0) || n <= RANK_TOL {
            return Some(j);
        }
        q.push(v / n);
    }
    None
}

/// Indicator basis grouping consecutive bins into steps of `step_width` °C.
pub fn step_basis(bins: &BinGrid, step_width: f64) -> Result<BasisMatrix> {
    if step_width < bins.width - 1e-12 {
        return Err(Error::validation(format!(
            "step width {step_width} is narrower than the bin width {}",
            bins.width
        )));
    }
    let per = step_width / bins.width;
    if (per - per.round()).abs() > 1e-9 {
        return Err(Error::validation(format!(
            "step width {step_width} is not a multiple of the bin width {}",
            bins.width
        )));
    }
    let per = per.round() as usize;
    let k_n = bins.n_bins();
    let j_n = k_n.div_ceil(per);
    let values = DMatrix::from_fn(k_n, j_n, |k, j| if k / per == j { 1.0 } else { 0.0 });
    BasisMatrix {
        kind: BasisKind::Step,
        values,
        eval_points: bins.midpoints(),
        knots: None,
        short_last_step: k_n % per != 0,
        components: None,
    }
    .checked()
}

// ---------------------------------------------------------------------------
// Natural cubic splines via B-splines
// ---------------------------------------------------------------------------

/// All B-spline basis functions of degree `p` (or their `r`-th derivative) at `x`.
fn bspline(t: &[f64], x: f64, p: usize, r: usize) -> Vec<f64> {
    if r > 0 {
        if p == 0 {
            return vec![0.0; t.len() - 1];
        }
        let lower = bspline(t, x, p - 1, r - 1);
        let n = t.len() - p - 1;
        return (0..n)
            .map(|i| {
                let d1 = t[i + p] - t[i];
                let d2 = t[i + p + 1] - t[i + 1];
                let a = if d1 > 0.0 { lower[i] / d1 } else { 0.0 };
                let b = if d2 > 0.0 { lower[i + 1] / d2 } else { 0.0 };
                p as f64 * (a - b)
            })
            .collect();
    }
    let m = t.len();
    let last = t[m - 1];
    // degree 0: half-open intervals, the right boundary belongs to the last non-empty one
    let mut cur: Vec<f64> = (0..m - 1)
        .map(|i| if t[i] <= x && x < t[i + 1] { 1.0 } else { 0.0 })
        .collect();
    if x >= last {
        if let Some(i) = (0..m - 1).rev().find(|&i| t[i] < t[i + 1]) {
            cur[i] = 1.0;
        }
    }
    for q in 1..=p {
        let n = m - q - 1;
        cur = (0..n)
            .map(|i| {
                let d1 = t[i + q] - t[i];
                let d2 = t[i + q + 1] - t[i + 1];
                let a = if d1 > 0.0 { (x - t[i]) / d1 * cur[i] } else { 0.0 };
                let b = if d2 > 0.0 { (t[i + q + 1] - x) / d2 * cur[i + 1] } else { 0.0 };
                a + b
            })
            .collect();
    }
    cur
}

/// Natural cubic spline basis without intercept on the given knots.
///
/// Built from the clamped cubic B-spline basis: the first B-spline (the only
/// one nonzero at the left boundary) is dropped, and the remaining
/// coefficients are restricted to the subspace with zero second derivative at
/// both boundary knots. Beyond the boundaries the functions extend linearly.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalSpline {
    knots: Vec<f64>,
    augmented: Vec<f64>,
    /// (n_bsplines − 1) × df map from B-spline coefficients to the basis.
    transform: DMatrix<f64>,
}

impl NaturalSpline {
    pub fn new(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 3 {
            return Err(Error::validation("a natural spline needs at least 3 knots (df >= 2)"));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::validation("spline knots must be strictly increasing"));
        }
        let (a, b) = (knots[0], knots[knots.len() - 1]);
        let mut aug = vec![a; 4];
        aug.extend_from_slice(&knots[1..knots.len() - 1]);
        aug.extend(std::iter::repeat(b).take(4));
        let n_free = aug.len() - 4 - 1;
        let da = bspline(&aug, a, 3, 2);
        let db = bspline(&aug, b, 3, 2);
        let c = DMatrix::from_fn(2, n_free, |r, j| if r == 0 { da[j + 1] } else { db[j + 1] });
        let (pa, pb) = (0usize, n_free - 1);
        let pivot = nalgebra::Matrix2::new(c[(0, pa)], c[(0, pb)], c[(1, pa)], c[(1, pb)]);
        let inv = pivot
            .try_inverse()
            .ok_or_else(|| Error::validation("degenerate natural-spline boundary constraints"))?;
        let free: Vec<usize> = (0..n_free).filter(|&j| j != pa && j != pb).collect();
        let mut transform = DMatrix::zeros(n_free, free.len());
        for (col, &j) in free.iter().enumerate() {
            let rhs = nalgebra::Vector2::new(-c[(0, j)], -c[(1, j)]);
            let sol = inv * rhs;
            transform[(j, col)] = 1.0;
            transform[(pa, col)] = sol[0];
            transform[(pb, col)] = sol[1];
        }
        Ok(NaturalSpline {
            knots,
            augmented: aug,
            transform,
        })
    }

    /// Knots equally spaced over `[a, b]` for `df` columns.
    pub fn equally_spaced(a: f64, b: f64, df: usize) -> Result<Self> {
        if df < 2 {
            return Err(Error::validation("natural spline needs df >= 2"));
        }
        let knots = (0..=df).map(|i| a + (b - a) * i as f64 / df as f64).collect();
        Self::new(knots)
    }

    pub fn df(&self) -> usize {
        self.transform.ncols()
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    fn inside(&self, x: f64, r: usize) -> Vec<f64> {
        let raw = bspline(&self.augmented, x, 3, r);
        (0..self.df())
            .map(|col| (0..self.transform.nrows()).map(|j| raw[j + 1] * self.transform[(j, col)]).sum())
            .collect()
    }

    /// Basis values at `x` (linear extrapolation outside the boundary knots).
    pub fn eval(&self, x: f64) -> Vec<f64> {
        let (a, b) = (self.knots[0], self.knots[self.knots.len() - 1]);
        let edge = if x < a {
            Some(a)
        } else if x > b {
            Some(b)
        } else {
            None
        };
        match edge {
            None => self.inside(x, 0),
            Some(e) => {
                let v = self.inside(e, 0);
                let d = self.inside(e, 1);
                v.iter().zip(&d).map(|(v, d)| v + d * (x - e)).collect()
            }
        }
    }

    pub fn second_derivative(&self, x: f64) -> Vec<f64> {
        self.inside(x, 2)
    }
}

/// Natural cubic spline with `df` columns, knots equally spaced between the
/// first and last bin midpoints.
pub fn ncs_basis(bins: &BinGrid, df: usize) -> Result<BasisMatrix> {
    let mids = bins.midpoints();
    if df > mids.len() {
        return Err(Error::Rank {
            column: format!("ncs df {df} exceeds {} bins", mids.len()),
        });
    }
    let spline = NaturalSpline::equally_spaced(mids[0], mids[mids.len() - 1], df)?;
    ncs_basis_with(bins, &spline)
}

pub fn ncs_basis_with(bins: &BinGrid, spline: &NaturalSpline) -> Result<BasisMatrix> {
    let mids = bins.midpoints();
    let df = spline.df();
    let mut values = DMatrix::zeros(mids.len(), df);
    for (k, &m) in mids.iter().enumerate() {
        for (j, v) in spline.eval(m).into_iter().enumerate() {
            values[(k, j)] = v;
        }
    }
    BasisMatrix {
        kind: BasisKind::Ncs,
        values,
        eval_points: mids,
        knots: Some(spline.knots().to_vec()),
        short_last_step: false,
        components: None,
    }
    .checked()
}

/// Chebyshev polynomials `T_0..T_degree` on midpoints mapped from `[lo, hi]` to `[-1, 1]`.
pub fn chebyshev_basis(bins: &BinGrid, degree: usize) -> Result<BasisMatrix> {
    let mids = bins.midpoints();
    if degree + 1 > mids.len() {
        return Err(Error::Rank {
            column: format!("Chebyshev degree {degree} needs more than {} bins", mids.len()),
        });
    }
    let mut values = DMatrix::zeros(mids.len(), degree + 1);
    for (k, &m) in mids.iter().enumerate() {
        let x = 2.0 * (m - bins.lo) / (bins.hi - bins.lo) - 1.0;
        let (mut prev, mut cur) = (1.0, x);
        values[(k, 0)] = 1.0;
        if degree >= 1 {
            values[(k, 1)] = x;
        }
        for n in 2..=degree {
            let next = 2.0 * x * cur - prev;
            values[(k, n)] = next;
            prev = cur;
            cur = next;
        }
    }
    BasisMatrix {
        kind: BasisKind::Chebyshev,
        values,
        eval_points: mids,
        knots: None,
        short_last_step: false,
        components: None,
    }
    .checked()
}

pub fn tensor_basis(b1: &BasisMatrix, b2: &BasisMatrix) -> Result<BasisMatrix> {
    let values = b1.values.kronecker(&b2.values);
    let eval_points = (0..values.nrows()).map(|r| r as f64).collect();
    BasisMatrix {
        kind: BasisKind::Tensor,
        values,
        eval_points,
        knots: None,
        short_last_step: false,
        components: Some(Box::new((b1.clone(), b2.clone()))),
    }
    .checked()
}

/// Flatten a K1 × K2 matrix with the tensor row ordering.
pub fn flatten_2d(m: &DMatrix<f64>) -> DVector<f64> {
    let (r, c) = m.shape();
    DVector::from_fn(r * c, |i, _| m[(i / c, i % c)])
}

pub fn unflatten_2d(v: &DVector<f64>, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if v.len() != rows * cols {
        return Err(Error::Length {
            what: "flattened matrix".into(),
            expected: rows * cols,
            actual: v.len(),
        });
    }
    Ok(DMatrix::from_fn(rows, cols, |r, c| v[r * cols + c]))
}

/// `X = Z·B`.
pub fn reduce(z: &DMatrix<f64>, basis: &BasisMatrix) -> Result<DMatrix<f64>> {
    if z.ncols() != basis.n_bins() {
        return Err(Error::shape(format!(
            "exposure matrix has {} columns but the basis has {} rows",
            z.ncols(),
            basis.n_bins()
        )));
    }
    Ok(z * &basis.values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseCurve {
    pub eval_points: Vec<f64>,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    #[serde(skip)]
    pub cov: DMatrix<f64>,
}

/// `β = B·Γ`, `Cov(β) = B·V·Bᵀ`, `se = sqrt(diag Cov(β))`.
pub fn recover_curve(gamma: &DVector<f64>, vgamma: &DMatrix<f64>, basis: &BasisMatrix) -> Result<ResponseCurve> {
    let j = basis.n_cols();
    if gamma.len() != j || vgamma.shape() != (j, j) {
        return Err(Error::shape(format!(
            "basis has {j} columns but Γ has {} entries and V is {}x{}",
            gamma.len(),
            vgamma.nrows(),
            vgamma.ncols()
        )));
    }
    let scale = vgamma.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let asym = (vgamma - vgamma.transpose()).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if asym > 1e-10 * scale {
        return Err(Error::validation(format!("coefficient covariance is not symmetric (max gap {asym:e})")));
    }
    let v = (vgamma + vgamma.transpose()) * 0.5;
    let b = &basis.values;
    let beta = b * gamma;
    let cov = b * v * b.transpose();
    let mut se = Vec::with_capacity(cov.nrows());
    for k in 0..cov.nrows() {
        let d = cov[(k, k)];
        if d < -1e-12 {
            return Err(Error::validation(format!(
                "coefficient covariance is indefinite: variance {d:e} at bin {k}"
            )));
        }
        se.push(d.max(0.0).sqrt());
    }
    Ok(ResponseCurve {
        eval_points: basis.eval_points.clone(),
        beta: beta.iter().copied().collect(),
        se,
        cov,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bins(first: i32, last: i32) -> BinGrid {
        BinGrid::unit_bins(first, last).unwrap()
    }

    #[test]
    fn step_full_range_and_identity() {
        let b = bins(0, 9);
        let one = step_basis(&b, 10.0).unwrap();
        assert_eq!(one.values, DMatrix::from_element(10, 1, 1.0));
        let id = step_basis(&b, 1.0).unwrap();
        assert_eq!(id.values, DMatrix::identity(10, 10));
    }

    #[test]
    fn eight_five_degree_steps() {
        let b = BinGrid::new(0.0, 40.0, 1.0).unwrap();
        let s = step_basis(&b, 5.0).unwrap();
        assert_eq!(s.n_cols(), 8);
        assert!(!s.short_last_step);
        let ragged = step_basis(&bins(0, 38), 5.0).unwrap();
        assert_eq!(ragged.n_cols(), 8);
        assert!(ragged.short_last_step);
    }

    #[test]
    fn step_rejects_narrow_or_ragged_width() {
        assert!(step_basis(&bins(0, 9), 0.5).is_err());
        assert!(step_basis(&bins(0, 9), 1.5).is_err());
    }

    #[test]
    fn ncs_shapes_and_rank() {
        for df in [3, 7, 12] {
            assert_eq!(ncs_basis(&bins(0, 38), df).unwrap().values.shape(), (39, df));
        }
        assert!(matches!(ncs_basis(&bins(0, 3), 5), Err(Error::Rank { .. })));
    }

    #[test]
    fn ncs_boundary_second_derivative_vanishes() {
        let s = NaturalSpline::equally_spaced(0.5, 38.5, 7).unwrap();
        for x in [0.5, 38.5] {
            assert!(s.second_derivative(x).iter().all(|v| v.abs() < 1e-10));
        }
    }

    #[test]
    fn chebyshev_constant_and_bound() {
        let c0 = chebyshev_basis(&bins(0, 9), 0).unwrap();
        assert_eq!(c0.values, DMatrix::from_element(10, 1, 1.0));
        let c = chebyshev_basis(&bins(0, 38), 8).unwrap();
        assert!(c.values.iter().all(|v| v.abs() <= 1.0 + 1e-12));
        assert!(matches!(chebyshev_basis(&bins(0, 2), 3), Err(Error::Rank { .. })));
    }

    #[test]
    fn tensor_identity() {
        let a = BasisMatrix::identity(&bins(0, 2));
        let b = BasisMatrix::identity(&bins(0, 3));
        assert_eq!(tensor_basis(&a, &b).unwrap().values, DMatrix::identity(12, 12));
    }

    #[test]
    fn recover_identity_and_zero_variance() {
        let b = BasisMatrix::identity(&bins(0, 2));
        let g = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let v = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0, 0.25]));
        let r = recover_curve(&g, &v, &b).unwrap();
        assert_eq!(r.beta, vec![1.0, -2.0, 0.5]);
        assert_eq!(r.se, vec![2.0, 3.0, 0.5]);
        let r0 = recover_curve(&g, &DMatrix::zeros(3, 3), &b).unwrap();
        assert!(r0.se.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn recover_rejects_indefinite_and_asymmetric() {
        let b = BasisMatrix::identity(&bins(0, 1));
        let g = DVector::from_vec(vec![0.0, 0.0]);
        let neg = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]);
        assert!(recover_curve(&g, &neg, &b).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(recover_curve(&g, &asym, &b).is_err());
        let tiny = DMatrix::from_row_slice(2, 2, &[-1e-14, 0.0, 0.0, 1.0]);
        assert_eq!(recover_curve(&g, &tiny, &b).unwrap().se[0], 0.0);
    }

    #[test]
    fn reduce_shape_mismatch() {
        let b = BasisMatrix::identity(&bins(0, 2));
        assert!(reduce(&DMatrix::zeros(4, 2), &b).is_err());
    }
}
