use std::collections::HashMap;
use std::path::{Path, PathBuf};

use agropanel::basis::{chebyshev_basis, ncs_basis, step_basis, BasisMatrix};
use agropanel::data::{read_centroids_csv, read_panel_csv, PanelTable};
use agropanel::inference::{SeConfig, SpatialWeights};
use agropanel::regress::{attach_binned, build_spec_polynomial, FixedEffect, ModelSpec, Trend};
use agropanel::thermal::{read_bins_csv, BinGrid};
use agropanel::{Error, Result};
use clap::Args;

use crate::run::{read_json, suffixed, Run};

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Panel CSV: unit_id,year,y,<columns...>
    #[arg(long)]
    pub panel: PathBuf,

    /// Exposure bins CSV written by `agropanel bins`
    #[arg(long)]
    pub bins: Option<PathBuf>,

    /// ncs | step | cheb | dummies | poly
    #[arg(long, default_value = "ncs")]
    pub basis: String,

    /// Spline degrees of freedom, or the Chebyshev / polynomial degree
    #[arg(long, default_value_t = 7)]
    pub df: usize,

    /// Step width in °C for `--basis step`
    #[arg(long, default_value_t = 3.0)]
    pub step: f64,

    /// Temperature column for `--basis poly`
    #[arg(long)]
    pub temp: Option<String>,

    /// Comma-separated fixed effects: column names, `a:b` interactions, `const`
    #[arg(long, default_value = "unit,year")]
    pub fe: String,

    /// none | pooled-quadratic | COL-quadratic
    #[arg(long, default_value = "none")]
    pub trend: String,

    /// Extra regressors; `COL^2` adds the square of COL
    #[arg(long, value_delimiter = ',')]
    pub controls: Vec<String>,

    /// Column of regression weights
    #[arg(long)]
    pub weights: Option<String>,

    /// Regress log(y) instead of y
    #[arg(long)]
    pub log_outcome: bool,
}

#[derive(Args, Debug, Clone)]
pub struct SeArgs {
    /// iid | hc0 | hc1 | cluster:COL | twoway:A,B | conley:KM[,LAGS]
    #[arg(long, default_value = "hc1")]
    pub se: String,

    /// Unit centroids CSV (unit_id,lat,lon), needed for conley
    #[arg(long)]
    pub centroids: Option<PathBuf>,
}

pub struct Model {
    pub panel: PanelTable,
    pub spec: ModelSpec,
    pub basis: Option<BasisMatrix>,
}

pub fn bingrid_path(bins: &Path) -> PathBuf {
    suffixed(bins, ".bingrid.json")
}

pub fn read_bingrid(bins: &Path, run: &mut Run) -> Result<BinGrid> {
    let side = bingrid_path(bins);
    run.input(&side)?;
    let g: BinGrid = read_json(&side)?;
    BinGrid::new(g.lo, g.hi, g.width)
}

pub fn build(a: &ModelArgs, run: &mut Run) -> Result<Model> {
    run.input(&a.panel)?;
    let raw = read_panel_csv(&a.panel)?;
    let (mut panel, mut spec, basis) = if a.basis == "poly" {
        let temp = a
            .temp
            .as_deref()
            .ok_or_else(|| Error::Config("--basis poly needs --temp".into()))?;
        let degree = i32::try_from(a.df).map_err(|_| Error::Config(format!("bad degree {}", a.df)))?;
        let (p, s) = build_spec_polynomial(&raw, temp, None, degree, Trend::None)?;
        (p, s, None)
    } else {
        let path = a
            .bins
            .as_ref()
            .ok_or_else(|| Error::Config(format!("--basis {} needs --bins", a.basis)))?;
        let grid = read_bingrid(path, run)?;
        run.input(path)?;
        let table = read_bins_csv(path, grid)?;
        // bin totals are constant within a season, so drop anything spanning the constant
        let basis = match a.basis.as_str() {
            "ncs" => ncs_basis(&grid, a.df)?,
            "step" => step_basis(&grid, a.step)?.without_column(0)?,
            "cheb" => chebyshev_basis(&grid, a.df)?.without_column(0)?,
            "dummies" => BasisMatrix::identity(&grid).without_column(0)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown basis `{other}` (ncs, step, cheb, dummies, poly)"
                )))
            }
        };
        let (p, regs, rule) = attach_binned(&raw, &table, &basis, "b")?;
        let mut s = ModelSpec::new(regs, Vec::new());
        s.warming = Some(rule);
        (p, s, Some(basis))
    };
    spec.fixed_effects = parse_fe(&a.fe)?;
    spec.trend = parse_trend(&a.trend)?;
    for c in &a.controls {
        match c.strip_suffix("^2") {
            Some(base) => {
                let sq: Vec<f64> = panel.real(base)?.iter().map(|v| v * v).collect();
                let name = format!("{base}_sq");
                panel.set_real(&name, sq)?;
                spec.regressors.push(name);
            }
            None => {
                panel.real(c)?;
                spec.regressors.push(c.clone());
            }
        }
    }
    if let Some(w) = &a.weights {
        spec.weights = Some(w.clone());
    }
    spec.log_outcome = a.log_outcome;
    Ok(Model { panel, spec, basis })
}

pub fn parse_fe(s: &str) -> Result<Vec<FixedEffect>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        out.push(match part.split_once(':') {
            _ if part == "none" => continue,
            _ if part == "const" => FixedEffect::Constant,
            Some((a, b)) if !a.is_empty() && !b.is_empty() => FixedEffect::Interaction(a.into(), b.into()),
            Some(_) => return Err(Error::Config(format!("bad fixed effect `{part}`"))),
            None => FixedEffect::col(part),
        });
    }
    Ok(out)
}

pub fn parse_trend(s: &str) -> Result<Trend> {
    match s {
        "none" => Ok(Trend::None),
        "pooled-quadratic" => Ok(Trend::PooledQuadratic),
        _ => match s.strip_suffix("-quadratic") {
            Some(col) if !col.is_empty() => Ok(Trend::ByRegionQuadratic(col.into())),
            _ => Err(Error::Config(format!(
                "unknown trend `{s}` (none, pooled-quadratic, COL-quadratic)"
            ))),
        },
    }
}

pub fn se_config(a: &SeArgs, run: &mut Run) -> Result<(SeConfig, Option<HashMap<String, (f64, f64)>>)> {
    let se: SeConfig = a.se.parse()?;
    let centroids = read_centroids(a.centroids.as_deref(), run)?;
    if matches!(se, SeConfig::Conley { .. }) && centroids.is_none() {
        return Err(Error::Config("conley standard errors need --centroids".into()));
    }
    Ok((se, centroids))
}

pub fn read_centroids(path: Option<&Path>, run: &mut Run) -> Result<Option<HashMap<String, (f64, f64)>>> {
    match path {
        None => Ok(None),
        Some(p) => {
            run.input(p)?;
            read_centroids_csv(p).map(Some)
        }
    }
}

/// `knn:K` or `idw:KM`, row-normalized.
pub fn spatial_weights(spec: &str, coords: &[(f64, f64)]) -> Result<SpatialWeights> {
    let bad = || Error::Config(format!("cannot parse weights `{spec}` (knn:K or idw:KM)"));
    let (kind, arg) = spec.split_once(':').ok_or_else(bad)?;
    let w = match kind {
        "knn" => SpatialWeights::knn(coords, arg.parse().map_err(|_| bad())?)?,
        "idw" => SpatialWeights::inverse_distance(coords, arg.parse().map_err(|_| bad())?)?,
        _ => return Err(bad()),
    };
    Ok(w.row_normalize())
}

pub fn unit_coords(units: &[String], centroids: &HashMap<String, (f64, f64)>) -> Result<Vec<(f64, f64)>> {
    units
        .iter()
        .map(|u| {
            centroids
                .get(u)
                .copied()
                .ok_or_else(|| Error::Validation(format!("no centroid for unit `{u}`")))
        })
        .collect()
}
