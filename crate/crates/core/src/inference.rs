//! Sandwich covariance estimators, spatial weights, Moran's I, the spatial
//! error model and permutation placebo tests.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::PanelTable;
use crate::error::{Error, Result};
use crate::geo::{haversine_km, KM_PER_MILE};
use crate::par;
use crate::regress::{fe_groups, fit_within, ols_qr, prepare, warming_gradient, FixedEffect, ModelSpec, WarmingRule};
use crate::rng::SplitMix64;

/// 500 miles.
pub const DEFAULT_CONLEY_KM: f64 = 500.0 * KM_PER_MILE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Bartlett,
    Uniform,
}

impl Kernel {
    pub fn weight(self, d: f64, cutoff: f64) -> f64 {
        match self {
            Kernel::Bartlett => (1.0 - d / cutoff).max(0.0),
            Kernel::Uniform => {
                if d < cutoff {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SeConfig {
    Iid,
    Hc0,
    Hc1,
    Cluster { col: String },
    TwoWay { a: String, b: String },
    Conley { cutoff_km: f64, time_lags: usize, kernel: Kernel },
}

impl SeConfig {
    pub fn iid() -> Self {
        SeConfig::Iid
    }

    pub fn conley(cutoff_km: f64, time_lags: usize) -> Self {
        SeConfig::Conley {
            cutoff_km,
            time_lags,
            kernel: Kernel::Bartlett,
        }
    }

    pub fn label(&self) -> String {
        self.to_string()
    }

    fn validate(&self) -> Result<()> {
        if let SeConfig::Conley { cutoff_km, .. } = self {
            if !(*cutoff_km > 0.0) || !cutoff_km.is_finite() {
                return Err(Error::Config(format!("conley cutoff must be positive, got {cutoff_km}")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for SeConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeConfig::Iid => write!(f, "iid"),
            SeConfig::Hc0 => write!(f, "hc0"),
            SeConfig::Hc1 => write!(f, "hc1"),
            SeConfig::Cluster { col } => write!(f, "cluster:{col}"),
            SeConfig::TwoWay { a, b } => write!(f, "twoway:{a},{b}"),
            SeConfig::Conley {
                cutoff_km,
                time_lags,
                kernel,
            } => {
                write!(f, "conley:{cutoff_km},{time_lags}")?;
                if *kernel == Kernel::Uniform {
                    write!(f, ",uniform")?;
                }
                Ok(())
            }
        }
    }
}

/// Parses `iid | hc0 | hc1 | cluster:COL | twoway:A,B | conley:KM[,LAGS[,uniform]]`.
impl FromStr for SeConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, rest) = match s.split_once(':') {
            Some((h, r)) => (h, Some(r)),
            None => (s, None),
        };
        let bad = || Error::Config(format!("cannot parse standard-error spec `{s}`"));
        let cfg = match (head, rest) {
            ("iid", None) => SeConfig::Iid,
            ("hc0", None) => SeConfig::Hc0,
            ("hc1", None) => SeConfig::Hc1,
            ("cluster", Some(c)) if !c.is_empty() && !c.contains(',') => SeConfig::Cluster { col: c.into() },
            ("twoway", Some(r)) => {
                let (a, b) = r.split_once(',').ok_or_else(bad)?;
                if a.is_empty() || b.is_empty() {
                    return Err(bad());
                }
                SeConfig::TwoWay { a: a.into(), b: b.into() }
            }
            ("conley", Some(r)) => {
                let parts: Vec<&str> = r.split(',').collect();
                let cutoff_km: f64 = parts[0].parse().map_err(|_| bad())?;
                let time_lags = match parts.get(1) {
                    Some(l) => l.parse().map_err(|_| bad())?,
                    None => 0,
                };
                let kernel = match parts.get(2).copied() {
                    None | Some("bartlett") => Kernel::Bartlett,
                    Some("uniform") => Kernel::Uniform,
                    Some(_) => return Err(bad()),
                };
                if parts.len() > 3 {
                    return Err(bad());
                }
                SeConfig::Conley {
                    cutoff_km,
                    time_lags,
                    kernel,
                }
            }
            _ => return Err(bad()),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Observation-level metadata the estimators need.
#[derive(Debug, Clone)]
pub struct SeContext {
    pub rows: Vec<usize>,
    pub unit_codes: Vec<u32>,
    pub years: Vec<i32>,
    pub coords: Option<Vec<(f64, f64)>>,
    pub dof: usize,
}

impl SeContext {
    pub fn from_panel(
        panel: &PanelTable,
        rows: &[usize],
        dof: usize,
        centroids: Option<&HashMap<String, (f64, f64)>>,
    ) -> Result<Self> {
        let (codes, _) = panel.codes("unit")?;
        let coords = match centroids {
            None => None,
            Some(c) => {
                let mut v = Vec::with_capacity(rows.len());
                for &r in rows {
                    let u = &panel.unit_ids[r];
                    v.push(*c.get(u).ok_or_else(|| Error::Config(format!("no centroid for unit `{u}`")))?);
                }
                Some(v)
            }
        };
        Ok(SeContext {
            rows: rows.to_vec(),
            unit_codes: rows.iter().map(|&r| codes[r]).collect(),
            years: rows.iter().map(|&r| panel.years[r]).collect(),
            coords,
            dof,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Covariance {
    pub v: DMatrix<f64>,
    pub warnings: Vec<String>,
}

/// `V = A S A` with `A = (X̃ᵀX̃)⁻¹` and the meat `S` chosen by `cfg`.
pub fn sandwich_se(
    x: &DMatrix<f64>,
    e: &DVector<f64>,
    xtx_inv: &DMatrix<f64>,
    cfg: &SeConfig,
    ctx: &SeContext,
    panel: &PanelTable,
) -> Result<Covariance> {
    cfg.validate()?;
    let (n, j) = x.shape();
    if e.len() != n || ctx.rows.len() != n {
        return Err(Error::shape(format!("{n} design rows but {} residuals", e.len())));
    }
    let mut warnings = Vec::new();
    let sandwich = |s: &DMatrix<f64>| xtx_inv * s * xtx_inv;
    let mut v = match cfg {
        SeConfig::Iid => {
            let s2 = e.dot(e) / ctx.dof.max(1) as f64;
            xtx_inv * s2
        }
        SeConfig::Hc0 => sandwich(&hc0_meat(x, e)),
        SeConfig::Hc1 => sandwich(&hc0_meat(x, e)) * (n as f64 / (n - j).max(1) as f64),
        SeConfig::Cluster { col } => {
            let g = fe_groups(panel, &FixedEffect::col(col), &ctx.rows)?;
            if g.n_levels == 1 {
                warnings.push(format!("cluster column `{col}` has a single level"));
            }
            sandwich(&cluster_meat(x, e, &g.codes, g.n_levels))
        }
        SeConfig::TwoWay { a, b } => {
            let ga = fe_groups(panel, &FixedEffect::col(a), &ctx.rows)?;
            let gb = fe_groups(panel, &FixedEffect::col(b), &ctx.rows)?;
            let gab = fe_groups(panel, &FixedEffect::Interaction(a.clone(), b.clone()), &ctx.rows)?;
            for (name, g) in [(a, &ga), (b, &gb)] {
                if g.n_levels == 1 {
                    warnings.push(format!("cluster column `{name}` has a single level"));
                }
            }
            let s = cluster_meat(x, e, &ga.codes, ga.n_levels) + cluster_meat(x, e, &gb.codes, gb.n_levels)
                - cluster_meat(x, e, &gab.codes, gab.n_levels);
            sandwich(&s)
        }
        SeConfig::Conley {
            cutoff_km,
            time_lags,
            kernel,
        } => {
            let coords = ctx
                .coords
                .as_ref()
                .ok_or_else(|| Error::Config("conley standard errors need unit centroids".into()))?;
            sandwich(&conley_meat(x, e, coords, &ctx.unit_codes, &ctx.years, *cutoff_km, *time_lags, *kernel))
        }
    };
    symmetrize(&mut v);
    if matches!(cfg, SeConfig::TwoWay { .. } | SeConfig::Conley { .. }) {
        if let Some(w) = floor_psd(&mut v) {
            warnings.push(w);
        }
    }
    Ok(Covariance { v, warnings })
}

fn symmetrize(v: &mut DMatrix<f64>) {
    let t = v.transpose();
    *v = (&*v + t) * 0.5;
}

/// Clamp negative eigenvalues to zero; returns a warning if any were clamped.
fn floor_psd(v: &mut DMatrix<f64>) -> Option<String> {
    let eig = SymmetricEigen::new(v.clone());
    let min = eig.eigenvalues.min();
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    if min >= -1e-12 * scale {
        return None;
    }
    let floored = eig.eigenvalues.map(|l| l.max(0.0));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    *v = out;
    Some(format!("covariance was not positive semi-definite (min eigenvalue {min:.3e}); floored at zero"))
}

/// Scores `e_i x_i` as rows.
fn scores(x: &DMatrix<f64>, e: &DVector<f64>) -> DMatrix<f64> {
    let mut u = x.clone();
    for (i, mut row) in u.row_iter_mut().enumerate() {
        row *= e[i];
    }
    u
}

fn hc0_meat(x: &DMatrix<f64>, e: &DVector<f64>) -> DMatrix<f64> {
    let u = scores(x, e);
    u.transpose() * u
}

fn cluster_meat(x: &DMatrix<f64>, e: &DVector<f64>, codes: &[u32], n_levels: usize) -> DMatrix<f64> {
    let u = scores(x, e);
    let mut sums = DMatrix::zeros(n_levels, x.ncols());
    for (i, &c) in codes.iter().enumerate() {
        let mut row = sums.row_mut(c as usize);
        row += u.row(i);
    }
    sums.transpose() * sums
}

#[allow(clippy::too_many_arguments)]
fn conley_meat(
    x: &DMatrix<f64>,
    e: &DVector<f64>,
    coords: &[(f64, f64)],
    units: &[u32],
    years: &[i32],
    cutoff: f64,
    lags: usize,
    kernel: Kernel,
) -> DMatrix<f64> {
    let u = scores(x, e);
    let (n, j) = u.shape();
    let mut by_year: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, &t) in years.iter().enumerate() {
        by_year.entry(t).or_default().push(i);
    }
    // w_i = Σ_j K(d_ij) u_j over observations j in the same period
    let period_of: Vec<&Vec<usize>> = years.iter().map(|t| &by_year[t]).collect();
    let w_rows: Vec<Vec<f64>> = par::map_range(n, |i| {
        let mut acc = vec![0.0; j];
        let (la, lo) = coords[i];
        for &m in period_of[i] {
            let k = if m == i {
                1.0
            } else {
                kernel.weight(haversine_km(la, lo, coords[m].0, coords[m].1), cutoff)
            };
            if k != 0.0 {
                for c in 0..j {
                    acc[c] += k * u[(m, c)];
                }
            }
        }
        acc
    });
    let w = DMatrix::from_fn(n, j, |i, c| w_rows[i][c]);
    let mut meat = u.transpose() * w;
    if lags > 0 {
        let mut by_unit: HashMap<(u32, i32), usize> = HashMap::new();
        for i in 0..n {
            by_unit.insert((units[i], years[i]), i);
        }
        for i in 0..n {
            for l in 1..=lags {
                if let Some(&m) = by_unit.get(&(units[i], years[i] - l as i32)) {
                    let k = 1.0 - l as f64 / (lags as f64 + 1.0);
                    let ui = u.row(i).transpose();
                    let um = u.row(m).transpose();
                    meat += (&ui * um.transpose() + &um * ui.transpose()) * k;
                }
            }
        }
    }
    symmetrize(&mut meat);
    meat
}

// ---------------------------------------------------------------------------
// Spatial weights
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    Knn,
    InverseDistanceCutoff,
    Rook,
    Custom,
}

/// Sparse n×n spatial weights (CSR) with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialWeights {
    pub n: usize,
    pub scheme: WeightScheme,
    pub row_normalized: bool,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    /// Row sums of the symmetric matrix before normalization, when known.
    sym_row_sums: Option<Vec<f64>>,
}

impl SpatialWeights {
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)], scheme: WeightScheme) -> Result<Self> {
        let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for &(i, j, v) in triplets {
            if i >= n || j >= n {
                return Err(Error::validation(format!("weight index ({i}, {j}) outside {n}×{n}")));
            }
            if i == j {
                return Err(Error::validation(format!("spatial weights must have a zero diagonal (row {i})")));
            }
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::validation(format!("invalid weight {v} at ({i}, {j})")));
            }
            if rows[i].insert(j, v).is_some() {
                return Err(Error::validation(format!("duplicate weight entry ({i}, {j})")));
            }
        }
        let mut w = SpatialWeights {
            n,
            scheme,
            row_normalized: false,
            row_ptr: vec![0],
            cols: Vec::new(),
            vals: Vec::new(),
            sym_row_sums: None,
        };
        for r in rows {
            for (j, v) in r {
                if v > 0.0 {
                    w.cols.push(j);
                    w.vals.push(v);
                }
            }
            w.row_ptr.push(w.cols.len());
        }
        Ok(w)
    }

    /// Symmetric k-nearest-neighbour weights (union of both directions), unit weights.
    pub fn knn(coords: &[(f64, f64)], k: usize) -> Result<Self> {
        let n = coords.len();
        if k == 0 || k >= n {
            return Err(Error::validation(format!("knn needs 0 < k < n, got k = {k}, n = {n}")));
        }
        let nbrs: Vec<Vec<usize>> = par::map_range(n, |i| {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (haversine_km(coords[i].0, coords[i].1, coords[j].0, coords[j].1), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().take(k).map(|(_, j)| j).collect()
        });
        let mut set = std::collections::BTreeSet::new();
        for (i, nb) in nbrs.iter().enumerate() {
            for &j in nb {
                set.insert((i, j));
                set.insert((j, i));
            }
        }
        let t: Vec<(usize, usize, f64)> = set.into_iter().map(|(i, j)| (i, j, 1.0)).collect();
        Self::from_triplets(n, &t, WeightScheme::Knn)
    }

    /// `1/d` for pairs closer than `cutoff_km` (coincident points get no weight).
    pub fn inverse_distance(coords: &[(f64, f64)], cutoff_km: f64) -> Result<Self> {
        if !(cutoff_km > 0.0) {
            return Err(Error::validation("distance cutoff must be positive"));
        }
        let n = coords.len();
        let rows: Vec<Vec<(usize, usize, f64)>> = par::map_range(n, |i| {
            (0..n)
                .filter(|&j| j != i)
                .filter_map(|j| {
                    let d = haversine_km(coords[i].0, coords[i].1, coords[j].0, coords[j].1);
                    (d > 0.0 && d <= cutoff_km).then(|| (i, j, 1.0 / d))
                })
                .collect()
        });
        let t: Vec<_> = rows.into_iter().flatten().collect();
        Self::from_triplets(n, &t, WeightScheme::InverseDistanceCutoff)
    }

    /// Rook contiguity on an `nrows × ncols` lattice, cells in row-major order.
    pub fn rook(nrows: usize, ncols: usize) -> Result<Self> {
        let mut t = Vec::new();
        for r in 0..nrows {
            for c in 0..ncols {
                let i = r * ncols + c;
                if r > 0 {
                    t.push((i, i - ncols, 1.0));
                }
                if r + 1 < nrows {
                    t.push((i, i + ncols, 1.0));
                }
                if c > 0 {
                    t.push((i, i - 1, 1.0));
                }
                if c + 1 < ncols {
                    t.push((i, i + 1, 1.0));
                }
            }
        }
        Self::from_triplets(nrows * ncols, &t, WeightScheme::Rook)
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn is_symmetric(&self) -> bool {
        let d = self.to_dense();
        (0..self.n).all(|i| (0..i).all(|j| (d[(i, j)] - d[(j, i)]).abs() <= 1e-14 * (d[(i, j)].abs() + 1.0)))
    }

    /// Scale every nonempty row to sum to one.
    pub fn row_normalize(mut self) -> Self {
        if self.row_normalized {
            return self;
        }
        let sums: Vec<f64> = (0..self.n).map(|i| self.row(i).1.iter().sum()).collect();
        if self.is_symmetric() {
            self.sym_row_sums = Some(sums.clone());
        }
        for i in 0..self.n {
            if sums[i] > 0.0 {
                for v in &mut self.vals[self.row_ptr[i]..self.row_ptr[i + 1]] {
                    *v /= sums[i];
                }
            }
        }
        self.row_normalized = true;
        self
    }

    pub fn sum(&self) -> f64 {
        self.vals.iter().sum()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).map(|(&j, &w)| w * x[j]).sum()
            })
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            let (c, v) = self.row(i);
            for (&j, &w) in c.iter().zip(v) {
                d[(i, j)] = w;
            }
        }
        d
    }

    /// Eigenvalues (ascending). Requires W symmetric, or a row-normalized
    /// symmetric matrix, which is similar to `D^{-1/2} C D^{-1/2}`.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        let d = self.to_dense();
        let sym = if !self.row_normalized {
            if !self.is_symmetric() {
                return Err(Error::validation("eigenvalues need a symmetric or row-normalized symmetric W"));
            }
            d
        } else {
            let s = self
                .sym_row_sums
                .as_ref()
                .ok_or_else(|| Error::validation("eigenvalues need a symmetric or row-normalized symmetric W"))?;
            // D^{1/2} W D^{-1/2} is symmetric when W = D^{-1} C with C symmetric
            let mut m = d;
            for i in 0..self.n {
                for j in 0..self.n {
                    if m[(i, j)] != 0.0 {
                        m[(i, j)] *= (s[i] / s[j]).sqrt();
                    }
                }
            }
            symmetrize(&mut m);
            m
        };
        let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        Ok(ev)
    }
}

/// `log|I − λW| = Σ log(1 − λ ω_i)`.
pub fn log_det_eigen(eigenvalues: &[f64], lambda: f64) -> f64 {
    eigenvalues.iter().map(|w| (1.0 - lambda * w).ln()).sum()
}

// ---------------------------------------------------------------------------
// Moran's I
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoranResult {
    pub i: f64,
    pub p: f64,
    pub permutations: usize,
}

pub const MORAN_PERMUTATIONS: usize = 999;

fn moran_stat(e: &[f64], w: &SpatialWeights, s0: f64) -> f64 {
    let we = w.mul_vec(e);
    let num: f64 = e.iter().zip(&we).map(|(a, b)| a * b).sum();
    let den: f64 = e.iter().map(|a| a * a).sum();
    e.len() as f64 / s0 * num / den
}

/// Moran's I on centered residuals with a two-sided permutation p-value.
pub fn morans_i(residuals: &[f64], w: &SpatialWeights, permutations: usize, seed: u64) -> Result<MoranResult> {
    let n = residuals.len();
    if n != w.n {
        return Err(Error::Length {
            what: "residuals for spatial weights".into(),
            expected: w.n,
            actual: n,
        });
    }
    let mean = residuals.iter().sum::<f64>() / n as f64;
    let e: Vec<f64> = residuals.iter().map(|r| r - mean).collect();
    let ss: f64 = e.iter().map(|a| a * a).sum();
    let scale = residuals.iter().fold(0.0f64, |a, r| a.max(r.abs()));
    if ss <= 1e-24 * scale.max(1.0).powi(2) * n as f64 {
        return Err(Error::validation("Moran's I is undefined for constant residuals"));
    }
    let s0 = w.sum();
    if s0 <= 0.0 {
        return Err(Error::validation("spatial weights are all zero"));
    }
    let stat = moran_stat(&e, w, s0);
    let draws: Vec<f64> = par::map_range(permutations, |b| {
        let mut rng = SplitMix64::stream(seed, b as u64);
        let mut p = e.clone();
        rng.shuffle(&mut p);
        moran_stat(&p, w, s0)
    });
    let tol = 1e-12 * stat.abs();
    let hits = draws.iter().filter(|d| d.abs() >= stat.abs() - tol).count();
    Ok(MoranResult {
        i: stat,
        p: (1 + hits) as f64 / (permutations + 1) as f64,
        permutations,
    })
}

// ---------------------------------------------------------------------------
// Spatial error model
// ---------------------------------------------------------------------------

pub const SEM_MAX_UNITS: usize = 5000;

#[derive(Debug, Clone)]
pub struct SemResult {
    pub coef_names: Vec<String>,
    pub beta: DVector<f64>,
    pub lambda: f64,
    pub sigma2: f64,
    pub vgamma: DMatrix<f64>,
    pub log_likelihood: f64,
}

/// Demeaned data of a balanced panel, ordered period-major with units in
/// sorted order inside each period.
struct SemData {
    names: Vec<String>,
    n: usize,
    t: usize,
    y: Vec<f64>,
    x: Vec<Vec<f64>>,
}

fn sem_data(panel: &PanelTable, spec: &ModelSpec, w: &SpatialWeights) -> Result<SemData> {
    if spec.weights.is_some() {
        return Err(Error::Config("the spatial error model does not take regression weights".into()));
    }
    let units = panel.units();
    let years = panel.year_set();
    let (n, t) = (units.len(), years.len());
    if n > SEM_MAX_UNITS {
        return Err(Error::validation(format!(
            "spatial error model limited to {SEM_MAX_UNITS} units, got {n}"
        )));
    }
    if w.n != n {
        return Err(Error::Length {
            what: "spatial weights for panel units".into(),
            expected: n,
            actual: w.n,
        });
    }
    let index = panel.row_index();
    let mut order = Vec::with_capacity(n * t);
    let mut missing = Vec::new();
    for &yr in &years {
        for u in &units {
            match index.get(&(u.as_str(), yr)) {
                Some(&r) => order.push(r),
                None => missing.push(format!("({u}, {yr})")),
            }
        }
    }
    if !missing.is_empty() {
        let shown: Vec<_> = missing.iter().take(5).cloned().collect();
        return Err(Error::validation(format!(
            "spatial error model needs a balanced panel; {} unit-year pairs missing, e.g. {}",
            missing.len(),
            shown.join(", ")
        )));
    }
    let p = prepare(panel, spec)?;
    // prepare() keeps panel row order; map to the period-major order
    let pos: HashMap<usize, usize> = p.rows.iter().enumerate().map(|(i, &r)| (r, i)).collect();
    let y = order.iter().map(|r| p.y_dm[pos[r]]).collect();
    let x = p
        .x_dm
        .iter()
        .map(|c| order.iter().map(|r| c[pos[r]]).collect())
        .collect();
    Ok(SemData {
        names: p.names,
        n,
        t,
        y,
        x,
    })
}

/// Apply `I − λW` within each period.
fn filter(v: &[f64], w: &SpatialWeights, lambda: f64, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len());
    for chunk in v.chunks(n) {
        let wv = w.mul_vec(chunk);
        out.extend(chunk.iter().zip(&wv).map(|(a, b)| a - lambda * b));
    }
    out
}

struct SemEval {
    beta: DVector<f64>,
    sigma2: f64,
    xtx_inv: DMatrix<f64>,
    loglik: f64,
}

fn sem_eval(d: &SemData, w: &SpatialWeights, eig: Option<&[f64]>, lambda: f64) -> Result<SemEval> {
    let nt = d.n * d.t;
    let ys = DVector::from_vec(filter(&d.y, w, lambda, d.n));
    let cols: Vec<Vec<f64>> = d.x.iter().map(|c| filter(c, w, lambda, d.n)).collect();
    let x = DMatrix::from_fn(nt, cols.len(), |i, j| cols[j][i]);
    let (beta, xtx_inv) = ols_qr(&x, &ys)?;
    let e = &ys - &x * &beta;
    let sigma2 = e.dot(&e) / nt as f64;
    let logdet = eig.map(|ev| log_det_eigen(ev, lambda)).unwrap_or(0.0);
    let loglik = -(nt as f64) / 2.0 * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0) + d.t as f64 * logdet;
    Ok(SemEval {
        beta,
        sigma2,
        xtx_inv,
        loglik,
    })
}

fn sem_result(d: SemData, lambda: f64, ev: SemEval) -> SemResult {
    SemResult {
        coef_names: d.names,
        vgamma: &ev.xtx_inv * ev.sigma2,
        beta: ev.beta,
        lambda,
        sigma2: ev.sigma2,
        log_likelihood: ev.loglik,
    }
}

/// Maximum-likelihood spatial error model on the within-demeaned panel.
/// `W` is indexed by units in sorted id order.
pub fn sem_ml(panel: &PanelTable, spec: &ModelSpec, w: &SpatialWeights) -> Result<SemResult> {
    let d = sem_data(panel, spec, w)?;
    let eig = w.eigenvalues()?;
    let (wmin, wmax) = (eig[0], eig[eig.len() - 1]);
    if !(wmin < 0.0 && wmax > 0.0) {
        return Err(Error::validation("spatial weights need eigenvalues of both signs"));
    }
    let (lo, hi) = (1.0 / wmin, 1.0 / wmax);
    let margin = 1e-6 * (hi - lo);
    let (a0, b0) = (lo + margin, hi - margin);
    let f = |l: f64| sem_eval(&d, w, Some(&eig), l).map(|e| e.loglik);

    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (a0, b0);
    let mut c = b - g * (b - a);
    let mut e = a + g * (b - a);
    let (mut fc, mut fe) = (f(c)?, f(e)?);
    while b - a > 1e-8 {
        if fc > fe {
            b = e;
            e = c;
            fe = fc;
            c = b - g * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = e;
            fc = fe;
            e = a + g * (b - a);
            fe = f(e)?;
        }
    }
    let lambda = (a + b) / 2.0;
    if lambda - a0 < 1e-6 || b0 - lambda < 1e-6 {
        return Err(Error::Convergence(format!(
            "spatial error parameter hit the boundary of ({lo:.4}, {hi:.4}) at {lambda:.6}"
        )));
    }
    let ev = sem_eval(&d, w, Some(&eig), lambda)?;
    Ok(sem_result(d, lambda, ev))
}

/// GLS with λ held fixed.
pub fn sem_fixed_lambda(panel: &PanelTable, spec: &ModelSpec, w: &SpatialWeights, lambda: f64) -> Result<SemResult> {
    let d = sem_data(panel, spec, w)?;
    let eig = w.eigenvalues().ok();
    let ev = sem_eval(&d, w, eig.as_deref(), lambda)?;
    Ok(sem_result(d, lambda, ev))
}

// ---------------------------------------------------------------------------
// Permutation tests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Statistic {
    /// A single coefficient.
    Coefficient { name: String },
    /// Mean impact of uniform warming by `delta` °C.
    Warming { delta: f64 },
}

impl FromStr for Statistic {
    type Err = Error;

    /// `coef:NAME` or `warming:DELTA`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("coef", n)) if !n.is_empty() => Ok(Statistic::Coefficient { name: n.into() }),
            Some(("warming", d)) => d
                .parse()
                .map(|delta| Statistic::Warming { delta })
                .map_err(|_| Error::Config(format!("bad warming delta in `{s}`"))),
            _ => Err(Error::Config(format!("cannot parse statistic `{s}` (coef:NAME or warming:DELTA)"))),
        }
    }
}

pub fn evaluate_statistic(panel: &PanelTable, spec: &ModelSpec, stat: &Statistic) -> Result<f64> {
    let fit = fit_within(panel, spec)?;
    match stat {
        Statistic::Coefficient { name } => Ok(fit.gamma[fit.coef_index(name)?]),
        Statistic::Warming { delta } => {
            let grad = warming_gradient(spec, panel, &fit.rows, *delta)?;
            grad.iter()
                .map(|(n, g)| fit.coef_index(n).map(|i| g * fit.gamma[i]))
                .sum()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermResult {
    pub stat: f64,
    pub p: f64,
    pub null_draws: Vec<f64>,
    pub skipped: usize,
    pub b: usize,
}

/// Panel columns that carry weather: the regressors plus anything the
/// warming rule reads.
pub fn weather_columns(spec: &ModelSpec) -> Vec<String> {
    let mut cols = spec.regressors.clone();
    match &spec.warming {
        Some(WarmingRule::Polynomial { base, terms }) => {
            cols.push(base.clone());
            cols.extend(terms.iter().map(|(c, _)| c.clone()));
        }
        Some(WarmingRule::Binned { z_cols, coef_cols, .. }) => {
            cols.extend(z_cols.iter().cloned());
            cols.extend(coef_cols.iter().cloned());
        }
        None => {}
    }
    let mut seen = std::collections::HashSet::new();
    cols.retain(|c| seen.insert(c.clone()));
    cols
}

/// Reassign whole unit-level weather series: unit `units[i]` receives the
/// series of `units[perm[i]]`. Returns `None` if a donor lacks a needed year.
pub fn permute_weather(panel: &PanelTable, cols: &[String], perm: &[usize]) -> Result<Option<PanelTable>> {
    let units = panel.units();
    let uidx: HashMap<&str, usize> = units.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let index = panel.row_index();
    let mut src = Vec::with_capacity(panel.n_rows());
    for r in 0..panel.n_rows() {
        let donor = &units[perm[uidx[panel.unit_ids[r].as_str()]]];
        match index.get(&(donor.as_str(), panel.years[r])) {
            Some(&s) => src.push(s),
            None => return Ok(None),
        }
    }
    let mut out = panel.clone();
    for c in cols {
        let v = panel.real(c)?;
        out.set_real(c, src.iter().map(|&s| v[s]).collect())?;
    }
    Ok(Some(out))
}

/// Placebo test: re-estimate under `b` random reassignments of unit weather.
/// Draw `i` uses RNG stream `i` of `seed`, so results do not depend on
/// scheduling.
pub fn permutation_test(panel: &PanelTable, spec: &ModelSpec, stat: &Statistic, b: usize, seed: u64) -> Result<PermResult> {
    if b == 0 {
        return Err(Error::validation("permutation test needs at least one draw"));
    }
    let observed = evaluate_statistic(panel, spec, stat)?;
    let cols = weather_columns(spec);
    let n_units = panel.units().len();
    let draws: Vec<Result<Option<f64>>> = par::map_range(b, |i| {
        let mut rng = SplitMix64::stream(seed, i as u64);
        let perm = rng.permutation(n_units);
        let Some(p) = permute_weather(panel, &cols, &perm)? else {
            return Ok(None);
        };
        match evaluate_statistic(&p, spec, stat) {
            Ok(v) => Ok(Some(v)),
            Err(Error::Rank { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    });
    let mut null_draws = Vec::with_capacity(b);
    let mut skipped = 0;
    for d in draws {
        match d? {
            Some(v) => null_draws.push(v),
            None => skipped += 1,
        }
    }
    if skipped * 10 > b {
        return Err(Error::validation(format!(
            "{skipped} of {b} permutations were not estimable (limit 10%)"
        )));
    }
    let tol = 1e-12 * observed.abs();
    let hits = null_draws.iter().filter(|d| d.abs() >= observed.abs() - tol).count();
    Ok(PermResult {
        stat: observed,
        p: (1 + hits) as f64 / (null_draws.len() + 1) as f64,
        null_draws,
        skipped,
        b,
    })
}
