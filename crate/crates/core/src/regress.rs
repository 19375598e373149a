//! Panel regression with absorbed fixed effects, model builders and
//! warming-impact calculations.
//!
//! Fixed effects are swept out by alternating projections: each column is
//! repeatedly demeaned within every absorption category until the largest
//! removed group mean falls below `1e-10` (relative to the column's scale).
//! OLS on the demeaned data then reproduces the dummy-variable regression.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{reduce, BasisMatrix};
use crate::data::PanelTable;
use crate::error::{Error, Result};
use crate::inference::{sandwich_se, SeConfig, SeContext};
use crate::par;
use crate::thermal::{shift_exposure, ExposureTable};

pub const DEMEAN_TOL: f64 = 1e-10;
pub const MAX_SWEEPS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedEffect {
    /// One dummy per level of a column (`unit`, `year` or any panel column).
    Column(String),
    /// One dummy per combination of two columns, e.g. state × year.
    Interaction(String, String),
    /// A single common intercept.
    Constant,
}

impl FixedEffect {
    pub fn col(name: &str) -> Self {
        FixedEffect::Column(name.to_string())
    }

    pub fn name(&self) -> String {
        match self {
            FixedEffect::Column(c) => c.clone(),
            FixedEffect::Interaction(a, b) => format!("{a}:{b}"),
            FixedEffect::Constant => "constant".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    None,
    PooledQuadratic,
    /// Separate quadratic trend per level of the named column.
    ByRegionQuadratic(String),
}

/// How a uniform warming of `delta` °C moves the regressors.
#[derive(Debug, Clone, PartialEq)]
pub enum WarmingRule {
    /// Regressor `col = base^power` for each `(col, power)`; `base` shifts by delta.
    Polynomial { base: String, terms: Vec<(String, i32)> },
    /// Exposure columns shift up by `delta / width` bins; regressors are `Z·B`.
    Binned {
        z_cols: Vec<String>,
        width: f64,
        basis: BasisMatrix,
        coef_cols: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub outcome: String,
    pub log_outcome: bool,
    pub regressors: Vec<String>,
    pub fixed_effects: Vec<FixedEffect>,
    pub trend: Trend,
    pub weights: Option<String>,
    pub warming: Option<WarmingRule>,
}

impl ModelSpec {
    pub fn new(regressors: Vec<String>, fixed_effects: Vec<FixedEffect>) -> Self {
        ModelSpec {
            outcome: "y".into(),
            log_outcome: false,
            regressors,
            fixed_effects,
            trend: Trend::None,
            weights: None,
            warming: None,
        }
    }

    pub fn with_trend(mut self, trend: Trend) -> Self {
        self.trend = trend;
        self
    }

    pub fn with_weights(mut self, col: &str) -> Self {
        self.weights = Some(col.to_string());
        self
    }

    pub fn log(mut self) -> Self {
        self.log_outcome = true;
        self
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub coef_names: Vec<String>,
    pub gamma: DVector<f64>,
    pub vgamma: DMatrix<f64>,
    pub se_type: String,
    pub se_warnings: Vec<String>,
    /// Residuals of the (unweighted) demeaned model, one per used row.
    pub residuals: Vec<f64>,
    pub dof: usize,
    pub r2: f64,
    pub adj_r2: f64,
    pub within_r2: f64,
    pub n_obs: usize,
    pub absorbed_dims: usize,
    pub sweeps: usize,
    /// Demeaned regressors scaled by √weight (n × J).
    pub design: DMatrix<f64>,
    /// Residuals scaled by √weight.
    pub scaled_residuals: DVector<f64>,
    /// Panel row of each observation.
    pub rows: Vec<usize>,
}

impl FitResult {
    pub fn coef_index(&self, name: &str) -> Result<usize> {
        self.coef_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::validation(format!("no coefficient named `{name}`")))
    }

    pub fn se(&self) -> Vec<f64> {
        (0..self.gamma.len()).map(|j| self.vgamma[(j, j)].max(0.0).sqrt()).collect()
    }

    /// Sub-vector and sub-covariance for the named coefficients.
    pub fn subset(&self, names: &[String]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let idx: Vec<usize> = names.iter().map(|n| self.coef_index(n)).collect::<Result<_>>()?;
        let g = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.gamma[i]));
        let v = DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.vgamma[(idx[a], idx[b])]);
        Ok((g, v))
    }
}

/// Grouping of observations for one absorbed effect.
#[derive(Debug, Clone)]
pub(crate) struct Groups {
    pub codes: Vec<u32>,
    pub n_levels: usize,
}

pub(crate) fn fe_groups(panel: &PanelTable, fe: &FixedEffect, rows: &[usize]) -> Result<Groups> {
    let pick = |(codes, _): (Vec<u32>, usize)| -> Groups {
        let sub: Vec<u32> = rows.iter().map(|&r| codes[r]).collect();
        relabel(&sub)
    };
    match fe {
        FixedEffect::Constant => Ok(Groups {
            codes: vec![0; rows.len()],
            n_levels: 1,
        }),
        FixedEffect::Column(c) => Ok(pick(panel.codes(c)?)),
        FixedEffect::Interaction(a, b) => {
            let (ca, _) = panel.codes(a)?;
            let (cb, nb) = panel.codes(b)?;
            let joint: Vec<u32> = rows.iter().map(|&r| ca[r] * nb as u32 + cb[r]).collect();
            Ok(relabel(&joint))
        }
    }
}

fn relabel(codes: &[u32]) -> Groups {
    let mut map: BTreeMap<u32, u32> = BTreeMap::new();
    for &c in codes {
        map.entry(c).or_insert(0);
    }
    for (i, v) in map.values_mut().enumerate() {
        *v = i as u32;
    }
    Groups {
        codes: codes.iter().map(|c| map[c]).collect(),
        n_levels: map.len(),
    }
}

/// Weighted alternating-projections demeaning in place. Returns sweeps used.
pub(crate) fn demean(v: &mut [f64], groups: &[Groups], w: &[f64], wsums: &[Vec<f64>]) -> Result<usize> {
    if groups.is_empty() {
        return Ok(0);
    }
    let scale = v.iter().fold(1.0f64, |a, x| a.max(x.abs()));
    let tol = DEMEAN_TOL * scale;
    let mut sums: Vec<Vec<f64>> = groups.iter().map(|g| vec![0.0; g.n_levels]).collect();
    for sweep in 1..=MAX_SWEEPS {
        let mut max_mean = 0.0f64;
        for (gi, g) in groups.iter().enumerate() {
            let s = &mut sums[gi];
            s.iter_mut().for_each(|x| *x = 0.0);
            for (i, &c) in g.codes.iter().enumerate() {
                s[c as usize] += w[i] * v[i];
            }
            for (l, x) in s.iter_mut().enumerate() {
                *x /= wsums[gi][l];
                max_mean = max_mean.max(x.abs());
            }
            for (i, &c) in g.codes.iter().enumerate() {
                v[i] -= s[c as usize];
            }
        }
        if max_mean < tol || (groups.len() == 1 && sweep == 1) {
            return Ok(sweep);
        }
    }
    Err(Error::Convergence(format!(
        "fixed-effect demeaning did not converge in {MAX_SWEEPS} sweeps"
    )))
}

/// Rank of the stacked dummy matrices: exact for up to two effects (levels
/// minus connected components), then one redundancy per extra effect.
fn absorbed_dimension(groups: &[Groups]) -> usize {
    match groups.len() {
        0 => 0,
        1 => groups[0].n_levels,
        _ => {
            let (a, b) = (&groups[0], &groups[1]);
            let mut parent: Vec<usize> = (0..a.n_levels + b.n_levels).collect();
            fn find(p: &mut [usize], mut x: usize) -> usize {
                while p[x] != x {
                    p[x] = p[p[x]];
                    x = p[x];
                }
                x
            }
            for (&ca, &cb) in a.codes.iter().zip(&b.codes) {
                let (ra, rb) = (find(&mut parent, ca as usize), find(&mut parent, a.n_levels + cb as usize));
                if ra != rb {
                    parent[ra] = rb;
                }
            }
            let comps = (0..parent.len()).filter(|&x| find(&mut parent, x) == x).count();
            let mut dims = a.n_levels + b.n_levels - comps;
            for g in &groups[2..] {
                dims += g.n_levels.saturating_sub(1);
            }
            dims
        }
    }
}

fn trend_columns(panel: &PanelTable, trend: &Trend, rows: &[usize]) -> Result<Vec<(String, Vec<f64>)>> {
    let years: Vec<f64> = rows.iter().map(|&r| panel.years[r] as f64).collect();
    let center = years.iter().sum::<f64>() / years.len().max(1) as f64;
    let t: Vec<f64> = years.iter().map(|y| y - center).collect();
    match trend {
        Trend::None => Ok(vec![]),
        Trend::PooledQuadratic => Ok(vec![
            ("trend".into(), t.clone()),
            ("trend_sq".into(), t.iter().map(|x| x * x).collect()),
        ]),
        Trend::ByRegionQuadratic(col) => {
            let (codes, _) = panel.codes(col)?;
            let sub: Vec<u32> = rows.iter().map(|&r| codes[r]).collect();
            let labels = level_labels(panel, col)?;
            let mut levels: Vec<u32> = sub.clone();
            levels.sort_unstable();
            levels.dedup();
            let mut out = Vec::new();
            for l in levels {
                let name = &labels[l as usize];
                out.push((
                    format!("trend:{name}"),
                    sub.iter().zip(&t).map(|(&c, &x)| if c == l { x } else { 0.0 }).collect(),
                ));
                out.push((
                    format!("trend_sq:{name}"),
                    sub.iter().zip(&t).map(|(&c, &x)| if c == l { x * x } else { 0.0 }).collect(),
                ));
            }
            Ok(out)
        }
    }
}

fn level_labels(panel: &PanelTable, col: &str) -> Result<Vec<String>> {
    use crate::data::ColumnValues;
    let mut labels: Vec<String> = match col {
        "unit" | "unit_id" => panel.units(),
        "year" => panel.year_set().iter().map(|y| y.to_string()).collect(),
        _ => {
            let c = panel
                .columns()
                .iter()
                .find(|c| c.name == col)
                .ok_or_else(|| Error::validation(format!("missing column `{col}`")))?;
            match &c.values {
                ColumnValues::Text(v) => {
                    let s: std::collections::BTreeSet<&String> = v.iter().collect();
                    s.into_iter().cloned().collect()
                }
                ColumnValues::Real(v) => {
                    let mut x = v.clone();
                    x.sort_by(f64::total_cmp);
                    x.dedup();
                    x.iter().map(|f| format!("{f}")).collect()
                }
            }
        }
    };
    labels.dedup();
    Ok(labels)
}

/// Index of the first column dependent on the preceding ones (relative tolerance).
pub(crate) fn first_collinear(x: &DMatrix<f64>, tol: f64) -> Option<usize> {
    let mut q: Vec<DVector<f64>> = Vec::new();
    for j in 0..x.ncols() {
        let mut v = x.column(j).into_owned();
        let n0 = v.norm();
        if n0 == 0.0 {
            return Some(j);
        }
        for _ in 0..2 {
            for u in &q {
                let d = u.dot(&v);
                v -= u * d;
            }
        }
        let n = v.norm();
        if n <= tol * n0 {
            return Some(j);
        }
        q.push(v / n);
    }
    None
}

/// OLS via Householder QR; returns coefficients and `(XᵀX)⁻¹`.
pub(crate) fn ols_qr(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let qr = x.clone().qr();
    let r = qr.r();
    let qty = qr.q().transpose() * y;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Rank { column: "design".into() })?;
    let j = x.ncols();
    let rinv = r
        .solve_upper_triangular(&DMatrix::identity(j, j))
        .ok_or_else(|| Error::Rank { column: "design".into() })?;
    let xtx_inv = &rinv * rinv.transpose();
    Ok((beta, xtx_inv))
}

/// Fit with the classical (iid) covariance.
pub fn fit_within(panel: &PanelTable, spec: &ModelSpec) -> Result<FitResult> {
    fit_within_se(panel, spec, &SeConfig::iid(), None)
}

/// Outcome and regressors after fixed-effect absorption.
pub(crate) struct Prepared {
    pub rows: Vec<usize>,
    pub names: Vec<String>,
    /// Outcome after the optional log transform.
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub absorbed: usize,
    pub sweeps: usize,
    /// Demeaned outcome.
    pub y_dm: Vec<f64>,
    /// Demeaned regressors, one vector per column.
    pub x_dm: Vec<Vec<f64>>,
}

pub(crate) fn prepare(panel: &PanelTable, spec: &ModelSpec) -> Result<Prepared> {
    if spec.regressors.is_empty() && spec.trend == Trend::None {
        return Err(Error::validation("model needs at least one regressor"));
    }
    let rows: Vec<usize> = (0..panel.n_rows()).collect();
    let n = rows.len();

    let raw_y = panel.real(&spec.outcome)?;
    let mut y: Vec<f64> = Vec::with_capacity(n);
    for &r in &rows {
        let v = raw_y[r];
        if spec.log_outcome {
            if !(v > 0.0) {
                return Err(Error::validation(format!(
                    "cannot take the log of outcome {v} (unit `{}`, year {})",
                    panel.unit_ids[r], panel.years[r]
                )));
            }
            y.push(v.ln());
        } else {
            y.push(v);
        }
    }

    let mut names: Vec<String> = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for name in &spec.regressors {
        let c = panel.real(name)?;
        names.push(name.clone());
        cols.push(rows.iter().map(|&r| c[r]).collect());
    }
    for (name, c) in trend_columns(panel, &spec.trend, &rows)? {
        names.push(name);
        cols.push(c);
    }
    let j_n = cols.len();

    let w: Vec<f64> = match &spec.weights {
        None => vec![1.0; n],
        Some(c) => {
            let wc = panel.real(c)?;
            let w: Vec<f64> = rows.iter().map(|&r| wc[r]).collect();
            if let Some(i) = w.iter().position(|&x| !(x > 0.0) || !x.is_finite()) {
                return Err(Error::validation(format!("non-positive regression weight in row {i}")));
            }
            w
        }
    };

    let groups: Vec<Groups> = spec
        .fixed_effects
        .iter()
        .map(|fe| fe_groups(panel, fe, &rows))
        .collect::<Result<_>>()?;
    let absorbed = absorbed_dimension(&groups);
    if n < j_n + absorbed + 1 {
        return Err(Error::validation(format!(
            "{n} observations cannot identify {j_n} regressors plus {absorbed} absorbed dimensions"
        )));
    }
    let wsums: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let mut s = vec![0.0; g.n_levels];
            for (i, &c) in g.codes.iter().enumerate() {
                s[c as usize] += w[i];
            }
            s
        })
        .collect();

    // demean y and every regressor, in parallel over columns
    let mut all: Vec<Vec<f64>> = Vec::with_capacity(j_n + 1);
    all.push(y.clone());
    all.extend(cols.iter().cloned());
    let demeaned: Vec<Result<(Vec<f64>, usize)>> = par::map_range(all.len(), |i| {
        let mut v = all[i].clone();
        let s = demean(&mut v, &groups, &w, &wsums)?;
        Ok((v, s))
    });
    let mut sweeps = 0;
    let mut dm: Vec<Vec<f64>> = Vec::with_capacity(all.len());
    for d in demeaned {
        let (v, s) = d?;
        sweeps = sweeps.max(s);
        dm.push(v);
    }

    let n_regs = spec.regressors.len();
    for j in 0..n_regs {
        let before = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        let after = dm[j + 1].iter().map(|v| v * v).sum::<f64>().sqrt();
        if before == 0.0 || after <= 1e-8 * before {
            return Err(Error::Rank { column: names[j].clone() });
        }
    }
    // Trend columns are controls: drop those the fixed effects (or earlier
    // trends) already span, e.g. one region's trend under year effects.
    let y_dm = dm.remove(0);
    let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut keep = vec![true; j_n];
    // trends are scanned last-first so the first region ends up as the reference
    for j in (0..n_regs).chain((n_regs..j_n).rev()) {
        let before = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut v: Vec<f64> = dm[j].iter().zip(&sw).map(|(a, b)| a * b).collect();
        let n0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for _ in 0..2 {
            for q in &basis {
                let d: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(x, qi)| *x -= d * qi);
            }
        }
        let n1 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let after = dm[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        let absorbed_col = before == 0.0 || after <= 1e-8 * before;
        if j >= n_regs && (absorbed_col || n1 <= 1e-8 * n0) {
            keep[j] = false;
            continue;
        }
        if n1 > 0.0 {
            basis.push(v.iter().map(|x| x / n1).collect());
        }
    }
    let mut names_kept = Vec::with_capacity(j_n);
    let mut x_dm = Vec::with_capacity(j_n);
    for ((name, col), k) in names.into_iter().zip(dm).zip(&keep) {
        if *k {
            names_kept.push(name);
            x_dm.push(col);
        }
    }
    let names = names_kept;
    let dm = x_dm;
    if names.is_empty() {
        return Err(Error::validation("every regressor is absorbed by the fixed effects"));
    }

    Ok(Prepared {
        rows,
        names,
        y,
        w,
        absorbed,
        sweeps,
        y_dm,
        x_dm: dm,
    })
}

/// Fit and compute the covariance under `se`. `centroids` maps unit ids to
/// `(lat, lon)` and is required for Conley errors.
pub fn fit_within_se(
    panel: &PanelTable,
    spec: &ModelSpec,
    se: &SeConfig,
    centroids: Option<&HashMap<String, (f64, f64)>>,
) -> Result<FitResult> {
    let Prepared {
        rows,
        names,
        y,
        w,
        absorbed,
        sweeps,
        y_dm,
        x_dm,
    } = prepare(panel, spec)?;
    let n = rows.len();
    let j_n = names.len();
    let sw: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();
    let x = DMatrix::from_fn(n, j_n, |i, j| x_dm[j][i] * sw[i]);
    let ys = DVector::from_fn(n, |i, _| y_dm[i] * sw[i]);
    if let Some(j) = first_collinear(&x, 1e-8) {
        return Err(Error::Rank { column: names[j].clone() });
    }
    let (gamma, xtx_inv) = ols_qr(&x, &ys)?;
    let scaled_resid = &ys - &x * &gamma;
    let residuals: Vec<f64> = (0..n).map(|i| scaled_resid[i] / sw[i]).collect();

    let wsum: f64 = w.iter().sum();
    let ybar = w.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / wsum;
    let tss: f64 = w.iter().zip(&y).map(|(a, b)| a * (b - ybar).powi(2)).sum();
    let rss: f64 = scaled_resid.iter().map(|e| e * e).sum();
    let wss: f64 = ys.iter().map(|v| v * v).sum();
    let r2 = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    let within_r2 = if wss > 0.0 { 1.0 - rss / wss } else { 1.0 };
    let p = j_n + absorbed;
    let dof = n - p;
    let adj_r2 = 1.0 - (1.0 - r2) * (n as f64 - 1.0) / dof as f64;

    let ctx = SeContext::from_panel(panel, &rows, dof, centroids)?;
    let cov = sandwich_se(&x, &scaled_resid, &xtx_inv, se, &ctx, panel)?;

    Ok(FitResult {
        coef_names: names,
        gamma,
        vgamma: cov.v,
        se_type: se.label(),
        se_warnings: cov.warnings,
        residuals,
        dof,
        r2,
        adj_r2,
        within_r2,
        n_obs: n,
        absorbed_dims: absorbed,
        sweeps,
        design: x,
        scaled_residuals: scaled_resid,
        rows,
    })
}

// ---------------------------------------------------------------------------
// Model builders
// ---------------------------------------------------------------------------

/// Attach exposure bins and their basis reduction `X = Z·B` to a panel.
///
/// Adds `z_0..z_{K-1}` and `{prefix}0..{prefix}{J-1}`; every panel row needs
/// an exposure row. Returns the regressor names and the warming rule.
pub fn attach_binned(
    panel: &PanelTable,
    bins: &ExposureTable,
    basis: &BasisMatrix,
    prefix: &str,
) -> Result<(PanelTable, Vec<String>, WarmingRule)> {
    let k_n = bins.bins.n_bins();
    if basis.n_bins() != k_n {
        return Err(Error::shape(format!("basis has {} rows for {k_n} bins", basis.n_bins())));
    }
    let idx: HashMap<(&str, i32), usize> = bins
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| ((r.unit_id.as_str(), r.period), i))
        .collect();
    let n = panel.n_rows();
    let mut z = DMatrix::zeros(n, k_n);
    for r in 0..n {
        let i = idx
            .get(&(panel.unit_ids[r].as_str(), panel.years[r]))
            .ok_or_else(|| {
                Error::validation(format!(
                    "no exposure bins for unit `{}` year {}",
                    panel.unit_ids[r], panel.years[r]
                ))
            })?;
        for k in 0..k_n {
            z[(r, k)] = bins.rows[*i].z[k];
        }
    }
    let x = reduce(&z, basis)?;
    let mut out = panel.clone();
    let z_cols: Vec<String> = (0..k_n).map(|k| format!("z_{k}")).collect();
    for (k, name) in z_cols.iter().enumerate() {
        out.set_real(name, z.column(k).iter().copied().collect())?;
    }
    let coef_cols: Vec<String> = (0..basis.n_cols()).map(|j| format!("{prefix}{j}")).collect();
    for (j, name) in coef_cols.iter().enumerate() {
        out.set_real(name, x.column(j).iter().copied().collect())?;
    }
    let rule = WarmingRule::Binned {
        z_cols,
        width: bins.bins.width,
        basis: basis.clone(),
        coef_cols: coef_cols.clone(),
    };
    Ok((out, coef_cols, rule))
}

/// Polynomial in a temperature column (and optionally precipitation) with
/// unit fixed effects: regressors `T, T^2[, T^3][, P, P^2[, P^3]]`.
pub fn build_spec_polynomial(
    panel: &PanelTable,
    temp: &str,
    precip: Option<&str>,
    degree: i32,
    trend: Trend,
) -> Result<(PanelTable, ModelSpec)> {
    if !(1..=3).contains(&degree) {
        return Err(Error::validation(format!("polynomial degree must be 1..3, got {degree}")));
    }
    let mut out = panel.clone();
    let mut regs = Vec::new();
    let mut terms = Vec::new();
    let mut add_powers = |out: &mut PanelTable, base: &str, track: bool| -> Result<()> {
        let v = panel.real(base)?.to_vec();
        for p in 1..=degree {
            let name = match p {
                1 => base.to_string(),
                2 => format!("{base}_sq"),
                _ => format!("{base}_cu"),
            };
            if p > 1 {
                out.set_real(&name, v.iter().map(|x| x.powi(p)).collect())?;
            }
            if track {
                terms.push((name.clone(), p));
            }
            regs.push(name);
        }
        Ok(())
    };
    add_powers(&mut out, temp, true)?;
    if let Some(p) = precip {
        add_powers(&mut out, p, false)?;
    }
    let mut spec = ModelSpec::new(regs, vec![FixedEffect::col("unit")]).with_trend(trend);
    spec.warming = Some(WarmingRule::Polynomial {
        base: temp.to_string(),
        terms,
    });
    Ok((out, spec))
}

/// Growing-season mean temperature and precipitation in quadratic form.
pub fn build_spec_quadratic(panel: &PanelTable, temp: &str, precip: &str, trend: Trend) -> Result<(PanelTable, ModelSpec)> {
    build_spec_polynomial(panel, temp, Some(precip), 2, trend)
}

/// Annual weather per unit: `unit → year → value`.
pub type WeatherHistory = BTreeMap<String, BTreeMap<i32, f64>>;

/// Build a history from `(unit, year, value)` triples, rejecting duplicate years.
pub fn weather_history<'a>(obs: impl IntoIterator<Item = (&'a str, i32, f64)>) -> Result<WeatherHistory> {
    let mut h: WeatherHistory = BTreeMap::new();
    for (u, t, v) in obs {
        if h.entry(u.to_string()).or_default().insert(t, v).is_some() {
            return Err(Error::validation(format!("duplicate weather year {t} for unit `{u}`")));
        }
    }
    Ok(h)
}

/// Mean of the `window` years strictly preceding `year`.
pub fn climate_normal(history: &BTreeMap<i32, f64>, year: i32, window: usize) -> Result<f64> {
    let start = year - window as i32;
    let mut sum = 0.0;
    for t in start..year {
        sum += history.get(&t).ok_or_else(|| {
            Error::Window(format!(
                "normal for {year} needs weather for {start}..{}; {t} is missing",
                year - 1
            ))
        })?;
    }
    Ok(sum / window as f64)
}

/// Climate-normal columns `{var}_normal`, `{var}_normal_sq` for each row.
fn add_normals(panel: &mut PanelTable, history: &WeatherHistory, var: &str, window: usize) -> Result<Vec<f64>> {
    let mut normals = Vec::with_capacity(panel.n_rows());
    for r in 0..panel.n_rows() {
        let u = &panel.unit_ids[r];
        let h = history
            .get(u)
            .ok_or_else(|| Error::Window(format!("no weather history for unit `{u}`")))?;
        normals.push(climate_normal(h, panel.years[r], window)?);
    }
    panel.set_real(&format!("{var}_normal"), normals.clone())?;
    panel.set_real(&format!("{var}_normal_sq"), normals.iter().map(|v| v * v).collect())?;
    Ok(normals)
}

/// Cross-sectional (Ricardian) model: outcome on 30-year climate normals
/// (linear and quadratic) plus controls, with year effects only.
pub fn build_spec_ricardian(
    cross_section: &PanelTable,
    history: &WeatherHistory,
    var: &str,
    controls: &[&str],
) -> Result<(PanelTable, ModelSpec)> {
    let mut out = cross_section.clone();
    add_normals(&mut out, history, var, 30)?;
    let normal = format!("{var}_normal");
    let normal_sq = format!("{var}_normal_sq");
    let mut regs = vec![normal.clone(), normal_sq.clone()];
    for c in controls {
        out.real(c)?;
        regs.push(c.to_string());
    }
    let fe = if out.year_set().len() > 1 {
        FixedEffect::col("year")
    } else {
        FixedEffect::Constant
    };
    let mut spec = ModelSpec::new(regs, vec![fe]);
    spec.warming = Some(WarmingRule::Polynomial {
        base: normal.clone(),
        terms: vec![(normal, 1), (normal_sq, 2)],
    });
    Ok((out, spec))
}

/// Hybrid model: `β1·W̄ + β2·W̄² + β3·(W − W̄)²` with unit effects and
/// unit-specific quadratic trends, where `W̄` is the preceding 30-year mean.
pub fn build_spec_hybrid(panel: &PanelTable, history: &WeatherHistory, var: &str) -> Result<(PanelTable, ModelSpec)> {
    let mut out = panel.clone();
    let normals = add_normals(&mut out, history, var, 30)?;
    let mut anom_sq = Vec::with_capacity(out.n_rows());
    for (r, nrm) in normals.iter().enumerate() {
        let u = &out.unit_ids[r];
        let w = history[u].get(&out.years[r]).ok_or_else(|| {
            Error::Window(format!("unit `{u}` has no weather for year {}", out.years[r]))
        })?;
        anom_sq.push((w - nrm).powi(2));
    }
    let anom = format!("{var}_anom_sq");
    out.set_real(&anom, anom_sq)?;
    let normal = format!("{var}_normal");
    let normal_sq = format!("{var}_normal_sq");
    let mut spec = ModelSpec::new(
        vec![normal.clone(), normal_sq.clone(), anom],
        vec![FixedEffect::col("unit")],
    )
    .with_trend(Trend::ByRegionQuadratic("unit".into()));
    // warming moves W and W̄ together, leaving the anomaly unchanged
    spec.warming = Some(WarmingRule::Polynomial {
        base: normal.clone(),
        terms: vec![(normal, 1), (normal_sq, 2)],
    });
    Ok((out, spec))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongDifference {
    pub unit_ids: Vec<String>,
    /// Change in the period-mean outcome.
    pub dy: Vec<f64>,
    /// Per variable: change in the period mean.
    pub dz: BTreeMap<String, Vec<f64>>,
    /// Per variable: `mean_b² − mean_a²`.
    pub dz_sq: BTreeMap<String, Vec<f64>>,
    pub dropped_units: usize,
}

impl LongDifference {
    /// Cross-section with columns `d_{var}` and `d_{var}_sq`, outcome `dy`.
    pub fn to_panel(&self, year: i32) -> Result<PanelTable> {
        let n = self.unit_ids.len();
        let mut p = PanelTable::new(self.unit_ids.clone(), vec![year; n], self.dy.clone())?;
        for (v, d) in &self.dz {
            p.set_real(&format!("d_{v}"), d.clone())?;
            p.set_real(&format!("d_{v}_sq"), self.dz_sq[v].clone())?;
        }
        Ok(p)
    }
}

/// Per-unit differences of period means between two disjoint year ranges.
pub fn long_difference(
    panel: &PanelTable,
    vars: &[&str],
    period_a: (i32, i32),
    period_b: (i32, i32),
) -> Result<LongDifference> {
    if period_a.0 > period_a.1 || period_b.0 > period_b.1 {
        return Err(Error::validation("year ranges must be ordered (start <= end)"));
    }
    if period_a.0 <= period_b.1 && period_b.0 <= period_a.1 {
        return Err(Error::validation(format!(
            "periods {}..{} and {}..{} overlap",
            period_a.0, period_a.1, period_b.0, period_b.1
        )));
    }
    let cols: Vec<&[f64]> = vars.iter().map(|v| panel.real(v)).collect::<Result<_>>()?;
    // unit -> (sums over a, count a, sums over b, count b); sums[0] is y
    let mut acc: BTreeMap<&str, (Vec<f64>, usize, Vec<f64>, usize)> = BTreeMap::new();
    for r in 0..panel.n_rows() {
        let t = panel.years[r];
        let in_a = (period_a.0..=period_a.1).contains(&t);
        let in_b = (period_b.0..=period_b.1).contains(&t);
        let e = acc
            .entry(panel.unit_ids[r].as_str())
            .or_insert_with(|| (vec![0.0; vars.len() + 1], 0, vec![0.0; vars.len() + 1], 0));
        if !(in_a || in_b) {
            continue;
        }
        let (sums, count) = if in_a { (&mut e.0, &mut e.1) } else { (&mut e.2, &mut e.3) };
        sums[0] += panel.y[r];
        for (j, c) in cols.iter().enumerate() {
            sums[j + 1] += c[r];
        }
        *count += 1;
    }
    let mut out = LongDifference {
        unit_ids: Vec::new(),
        dy: Vec::new(),
        dz: vars.iter().map(|v| (v.to_string(), Vec::new())).collect(),
        dz_sq: vars.iter().map(|v| (v.to_string(), Vec::new())).collect(),
        dropped_units: 0,
    };
    for (u, (sa, na, sb, nb)) in acc {
        if na == 0 || nb == 0 {
            out.dropped_units += 1;
            continue;
        }
        let ma: Vec<f64> = sa.iter().map(|s| s / na as f64).collect();
        let mb: Vec<f64> = sb.iter().map(|s| s / nb as f64).collect();
        out.unit_ids.push(u.to_string());
        out.dy.push(mb[0] - ma[0]);
        for (j, v) in vars.iter().enumerate() {
            out.dz.get_mut(*v).unwrap().push(mb[j + 1] - ma[j + 1]);
            out.dz_sq.get_mut(*v).unwrap().push(mb[j + 1].powi(2) - ma[j + 1].powi(2));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Warming impacts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Impact {
    pub estimate: f64,
    pub se: f64,
}

/// Mean change in the outcome (log points for log outcomes) from a uniform
/// warming of `delta` °C, with a delta-method standard error.
pub fn warming_impact(fit: &FitResult, spec: &ModelSpec, panel: &PanelTable, delta: f64) -> Result<Impact> {
    let grad = warming_gradient(spec, panel, &fit.rows, delta)?;
    let names: Vec<String> = grad.iter().map(|(n, _)| n.clone()).collect();
    let g = DVector::from_iterator(grad.len(), grad.iter().map(|(_, v)| *v));
    let (gamma, v) = fit.subset(&names)?;
    let estimate = g.dot(&gamma);
    let var = (g.transpose() * v * &g)[(0, 0)];
    Ok(Impact {
        estimate,
        se: var.max(0.0).sqrt(),
    })
}

/// Mean regressor change per coefficient under warming by `delta`.
pub fn warming_gradient(spec: &ModelSpec, panel: &PanelTable, rows: &[usize], delta: f64) -> Result<Vec<(String, f64)>> {
    let rule = spec
        .warming
        .as_ref()
        .ok_or_else(|| Error::Config("model has no warming rule (needs a temperature polynomial or binned exposure)".into()))?;
    let n = rows.len() as f64;
    match rule {
        WarmingRule::Polynomial { base, terms } => {
            let t = panel.real(base)?;
            Ok(terms
                .iter()
                .map(|(name, p)| {
                    let d: f64 = rows.iter().map(|&r| (t[r] + delta).powi(*p) - t[r].powi(*p)).sum();
                    (name.clone(), d / n)
                })
                .collect())
        }
        WarmingRule::Binned {
            z_cols,
            width,
            basis,
            coef_cols,
        } => {
            let s = delta / width;
            if (s - s.round()).abs() > 1e-9 {
                return Err(Error::validation(format!(
                    "warming of {delta} °C is not a multiple of the bin width {width}"
                )));
            }
            let s = s.round() as i64;
            let zc: Vec<&[f64]> = z_cols.iter().map(|c| panel.real(c)).collect::<Result<_>>()?;
            let mut mean_dz = vec![0.0; z_cols.len()];
            for &r in rows {
                let z: Vec<f64> = zc.iter().map(|c| c[r]).collect();
                let shifted = shift_exposure(&z, s);
                for k in 0..z.len() {
                    mean_dz[k] += (shifted[k] - z[k]) / n;
                }
            }
            let dx = DVector::from_vec(mean_dz).transpose() * &basis.values;
            Ok(coef_cols.iter().cloned().zip(dx.iter().copied()).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_panel() -> PanelTable {
        let mut units = Vec::new();
        let mut years = Vec::new();
        for u in 0..4 {
            for t in 0..5 {
                units.push(format!("u{u}"));
                years.push(2000 + t);
            }
        }
        PanelTable::new(units, years, vec![0.0; 20]).unwrap()
    }

    #[test]
    fn exact_linear_fit() {
        let mut p = small_panel();
        let x: Vec<f64> = (0..20).map(|i| ((i * 7) % 11) as f64).collect();
        let fe = [1.0, -2.0, 0.5, 3.0];
        p.y = (0..20).map(|i| 2.5 * x[i] + fe[i / 5]).collect();
        p.set_real("x", x).unwrap();
        let fit = fit_within(&p, &ModelSpec::new(vec!["x".into()], vec![FixedEffect::col("unit")])).unwrap();
        assert!((fit.gamma[0] - 2.5).abs() < 1e-10);
        assert!(fit.residuals.iter().all(|e| e.abs() < 1e-9));
        assert!((fit.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn within_unit_constant_regressor_is_rank_error() {
        let mut p = small_panel();
        let x: Vec<f64> = (0..20).map(|i| (i / 5) as f64).collect();
        p.y = (0..20).map(|i| i as f64).collect();
        p.set_real("soil", x).unwrap();
        let err = fit_within(&p, &ModelSpec::new(vec!["soil".into()], vec![FixedEffect::col("unit")])).unwrap_err();
        match err {
            Error::Rank { column } => assert_eq!(column, "soil"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn collinear_pair_names_second_column() {
        let mut p = small_panel();
        let x: Vec<f64> = (0..20).map(|i| ((i * 3) % 7) as f64).collect();
        p.y = (0..20).map(|i| (i % 3) as f64).collect();
        p.set_real("a", x.clone()).unwrap();
        p.set_real("b", x.iter().map(|v| 2.0 * v).collect()).unwrap();
        let err = fit_within(&p, &ModelSpec::new(vec!["a".into(), "b".into()], vec![FixedEffect::col("unit")])).unwrap_err();
        assert!(matches!(err, Error::Rank { ref column } if column == "b"), "{err}");
    }

    #[test]
    fn log_outcome_rejects_nonpositive() {
        let mut p = small_panel();
        p.set_real("x", (0..20).map(|i| i as f64).collect()).unwrap();
        let err = fit_within(&p, &ModelSpec::new(vec!["x".into()], vec![]).log()).unwrap_err();
        assert!(err.to_string().contains("u0"));
    }

    #[test]
    fn quadratic_columns() {
        let mut p = small_panel();
        p.set_real("tavg", (0..20).map(|i| i as f64 * 0.5).collect()).unwrap();
        p.set_real("ppt", (0..20).map(|i| 100.0 + i as f64).collect()).unwrap();
        let (q, spec) = build_spec_quadratic(&p, "tavg", "ppt", Trend::None).unwrap();
        assert_eq!(spec.regressors.len(), 4);
        let t = q.real("tavg").unwrap();
        assert!(q.real("tavg_sq").unwrap().iter().zip(t).all(|(s, v)| *s == v * v));
    }

    #[test]
    fn normals() {
        let c: BTreeMap<i32, f64> = (1..=30).map(|y| (y, 4.0)).collect();
        assert_eq!(climate_normal(&c, 31, 30).unwrap(), 4.0);
        let ramp: BTreeMap<i32, f64> = (1..=30).map(|y| (y, y as f64)).collect();
        assert_eq!(climate_normal(&ramp, 31, 30).unwrap(), 15.5);
        assert!(matches!(climate_normal(&ramp, 30, 30), Err(Error::Window(_))));
        assert!(weather_history([("a", 1, 1.0), ("a", 1, 2.0)]).is_err());
    }

    #[test]
    fn hybrid_tangency_and_missing_history() {
        let obs: Vec<(String, i32, f64)> = (1970..2001).flat_map(|y| [("a".to_string(), y, 10.0), ("b".to_string(), y, 12.0)]).collect();
        let hist = weather_history(obs.iter().map(|(u, y, v)| (u.as_str(), *y, *v))).unwrap();
        let p = PanelTable::new(vec!["a".into(), "b".into()], vec![2000, 2000], vec![1.0, 2.0]).unwrap();
        let (h, spec) = build_spec_hybrid(&p, &hist, "w").unwrap();
        assert_eq!(spec.regressors.len(), 3);
        assert!(h.real("w_anom_sq").unwrap().iter().all(|&v| v == 0.0));
        let p2 = PanelTable::new(vec!["c".into()], vec![2000], vec![1.0]).unwrap();
        assert!(matches!(build_spec_hybrid(&p2, &hist, "w"), Err(Error::Window(_))));
    }

    #[test]
    fn long_difference_basic() {
        let mut p = small_panel();
        p.y = (0..20).map(|i| i as f64).collect();
        p.set_real("t", (0..20).map(|i| (i % 5) as f64).collect()).unwrap();
        let ld = long_difference(&p, &["t"], (2000, 2000), (2004, 2004)).unwrap();
        assert_eq!(ld.unit_ids.len(), 4);
        assert!(ld.dy.iter().all(|&d| d == 4.0));
        assert!(ld.dz["t"].iter().all(|&d| d == 4.0));
        assert!(ld.dz_sq["t"].iter().all(|&d| d == 16.0));
        assert!(long_difference(&p, &["t"], (2000, 2002), (2002, 2004)).is_err());
        let same = long_difference(&p, &["t"], (2000, 2000), (2000, 2000));
        assert!(same.is_err());
    }

    #[test]
    fn impact_zero_delta_and_linear_case() {
        let mut p = small_panel();
        let t: Vec<f64> = (0..20).map(|i| 20.0 + ((i * 7) % 5) as f64).collect();
        let fe = [1.0, -2.0, 0.5, 3.0];
        p.y = (0..20).map(|i| 0.1 * t[i] + fe[i / 5] + 0.01 * ((i * 13) % 7) as f64).collect();
        p.set_real("t", t).unwrap();
        let (q, spec) = build_spec_polynomial(&p, "t", None, 1, Trend::None).unwrap();
        let fit = fit_within(&q, &spec).unwrap();
        let zero = warming_impact(&fit, &spec, &q, 0.0).unwrap();
        assert_eq!(zero.estimate, 0.0);
        assert_eq!(zero.se, 0.0);
        let two = warming_impact(&fit, &spec, &q, 2.0).unwrap();
        assert!((two.estimate - 2.0 * fit.gamma[0]).abs() < 1e-12);
    }
}
