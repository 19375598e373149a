use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use agropanel::aggregate::{project as project_stack, read_projection_csv, read_unit_series_csv, write_unit_series_csv, zonal_fractions};
use agropanel::basis::recover_curve;
use agropanel::data::{
    fmt_f64, read_ascii_grid, read_grid_stack, read_stations_csv, write_admin_weights_csv, write_ascii_grid,
    write_centroids_csv, write_grid_stack, write_panel_csv, write_stations_csv, Variable,
};
use agropanel::inference::{morans_i, permutation_test, sem_ml, SpatialWeights, Statistic, WeightScheme, MORAN_PERMUTATIONS};
use agropanel::interpolate::{interpolate_to_grid, InterpSpec};
use agropanel::regress::{fit_within_se, warming_impact};
use agropanel::rng::mix64;
use agropanel::speccurve::{read_monthly_csv, render_chart, run_grid, write_monthly_csv, SortKey, SpecGrid};
use agropanel::synth::{generate, DGPConfig};
use agropanel::thermal::{degree_days_from_bins, read_bins_csv, seasonal_exposure, write_bins_csv, BinGrid, SineConfig};
use agropanel::{Error, Result};
use chrono::NaiveDate;
use nalgebra::DMatrix;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::model::{self, bingrid_path, read_bingrid, spatial_weights, unit_coords, ModelArgs, SeArgs};
use crate::run::{io_context, read_json, write_json, Run};

// ---------------------------------------------------------------------------
// Weather data
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct InterpolateArgs {
    /// Stations CSV: station_id,lat,lon,date,variable,value
    #[arg(long)]
    stations: PathBuf,
    /// ASCII grid whose header defines the target cells
    #[arg(long)]
    grid: PathBuf,
    /// YYYY-MM-DD
    #[arg(long)]
    date: String,
    /// tmax | tmin | ppt
    #[arg(long)]
    var: String,
    /// nearest | knn | radius
    #[arg(long, default_value = "knn")]
    method: String,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Inverse-distance power
    #[arg(long, default_value_t = 1.0)]
    power: f64,
    /// Search radius in degrees of arc, for `--method radius`
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

pub fn interpolate(a: InterpolateArgs, run: &mut Run) -> Result<()> {
    let date = NaiveDate::parse_from_str(&a.date, "%Y-%m-%d")
        .map_err(|_| Error::Validation(format!("--date `{}` is not YYYY-MM-DD", a.date)))?;
    let var: Variable = a.var.parse()?;
    let spec = match a.method.as_str() {
        "nearest" => InterpSpec::nearest(),
        "knn" => InterpSpec::knn(a.k, a.power),
        "radius" => InterpSpec::radius(
            a.radius.ok_or_else(|| Error::Config("--method radius needs --radius".into()))?,
            a.power,
        ),
        other => return Err(Error::Config(format!("unknown method `{other}` (nearest, knn, radius)"))),
    };
    run.input(&a.stations)?;
    run.input(&a.grid)?;
    let stations = read_stations_csv(&a.stations)?;
    let target = read_ascii_grid(&a.grid)?;
    let (grid, missing) = interpolate_to_grid(&stations, &target.header, date, var, &spec)?;
    if missing > 0 {
        eprintln!("warning: {missing} cells had no station in range and were set to nodata");
    }
    write_ascii_grid(&grid, &a.out)?;
    run.output(&a.out);
    run.finish_beside(&a.out)
}

#[derive(Args)]
pub struct ZonalArgs {
    /// Fine land-cover grid
    #[arg(long)]
    fine: PathBuf,
    /// Grid whose header defines the coarse cells
    #[arg(long)]
    coarse: PathBuf,
    /// Class code to count
    #[arg(long)]
    class: i64,
    #[arg(long)]
    out: PathBuf,
}

pub fn zonal(a: ZonalArgs, run: &mut Run) -> Result<()> {
    run.input(&a.fine)?;
    run.input(&a.coarse)?;
    let fine = read_ascii_grid(&a.fine)?;
    let coarse = read_ascii_grid(&a.coarse)?;
    let frac = zonal_fractions(&fine, &coarse.header, a.class)?;
    write_ascii_grid(&frac, &a.out)?;
    run.output(&a.out);
    run.finish_beside(&a.out)
}

#[derive(Args)]
pub struct ProjectArgs {
    /// Weights CSV: unit_id,cell_index,weight
    #[arg(long)]
    weights: PathBuf,
    /// Stack manifest CSV: layer_index,label,path
    #[arg(long)]
    stack: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn project(a: ProjectArgs, run: &mut Run) -> Result<()> {
    run.input(&a.weights)?;
    run.input(&a.stack)?;
    let stack = read_grid_stack(&a.stack)?;
    let p = read_projection_csv(&a.weights, stack.header.n_cells())?;
    let empty = p.no_coverage();
    if !empty.is_empty() {
        eprintln!("warning: {} units have no cells with weight", empty.len());
    }
    let series = project_stack(&p, &stack)?;
    write_unit_series_csv(&series, &a.out)?;
    run.output(&a.out);
    run.finish_beside(&a.out)
}

// ---------------------------------------------------------------------------
// Exposure
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct BinsArgs {
    /// Daily unit tmax: unit_id,label,value with YYYY-MM-DD labels
    #[arg(long)]
    tmax: PathBuf,
    #[arg(long)]
    tmin: PathBuf,
    /// Lower edge of the first bin (°C)
    #[arg(long, default_value_t = 0.0)]
    lo: f64,
    /// Lower edge of the last bin (°C)
    #[arg(long, default_value_t = 38.0)]
    hi: f64,
    #[arg(long, default_value_t = 1.0)]
    width: f64,
    /// First and last month, e.g. 04-09
    #[arg(long, default_value = "04-09")]
    season: String,
    /// Resolution of the intra-day temperature curve
    #[arg(long, default_value_t = 15)]
    step_minutes: u32,
    #[arg(long)]
    out: PathBuf,
}

fn parse_season(s: &str) -> Result<(u32, u32)> {
    let bad = || Error::Config(format!("--season `{s}` should look like 04-09"));
    let (a, b) = s.split_once('-').ok_or_else(bad)?;
    let (a, b): (u32, u32) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
    if !(1..=12).contains(&a) || !(a..=12).contains(&b) {
        return Err(bad());
    }
    Ok((a, b))
}

pub fn bins(a: BinsArgs, run: &mut Run) -> Result<()> {
    let months = parse_season(&a.season)?;
    if !(a.hi >= a.lo) {
        return Err(Error::Validation(format!("--hi {} is below --lo {}", a.hi, a.lo)));
    }
    let grid = BinGrid::new(a.lo, a.hi + a.width, a.width)?;
    let sine = SineConfig {
        step_minutes: a.step_minutes,
        ..SineConfig::default()
    };
    run.input(&a.tmax)?;
    run.input(&a.tmin)?;
    let tmax = read_unit_series_csv(&a.tmax)?;
    let tmin = read_unit_series_csv(&a.tmin)?;
    let table = seasonal_exposure(&tmax, &tmin, months, &sine, &grid)?;
    write_bins_csv(&table, &a.out)?;
    let side = bingrid_path(&a.out);
    write_json(&side, &grid)?;
    run.output(&a.out);
    run.output(&side);
    run.finish_beside(&a.out)
}

#[derive(Args)]
pub struct DegdaysArgs {
    /// Exposure bins CSV written by `agropanel bins`
    #[arg(long)]
    bins: PathBuf,
    /// Lower threshold (°C)
    #[arg(long)]
    from: f64,
    /// Upper threshold (°C)
    #[arg(long)]
    to: f64,
    #[arg(long)]
    out: PathBuf,
}

pub fn degdays(a: DegdaysArgs, run: &mut Run) -> Result<()> {
    let grid = read_bingrid(&a.bins, run)?;
    run.input(&a.bins)?;
    let table = read_bins_csv(&a.bins, grid)?;
    let mut w = csv::Writer::from_path(&a.out).map_err(csv_err)?;
    w.write_record(["unit_id", "year", "dd"]).map_err(csv_err)?;
    for r in &table.rows {
        let dd = degree_days_from_bins(&r.z, &grid, a.from, a.to)?;
        w.write_record([r.unit_id.clone(), r.period.to_string(), fmt_f64(dd)])
            .map_err(csv_err)?;
    }
    w.flush()?;
    run.output(&a.out);
    run.finish_beside(&a.out)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

// ---------------------------------------------------------------------------
// Regression
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
pub struct Residual {
    pub unit_id: String,
    pub year: i32,
    pub residual: f64,
}

#[derive(Serialize, Deserialize)]
pub struct CurveJson {
    pub eval_points: Vec<f64>,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct Diagnostics {
    pub n_obs: usize,
    pub dof: usize,
    pub r2: f64,
    pub adj_r2: f64,
    pub within_r2: f64,
    pub absorbed_dims: usize,
    pub sweeps: usize,
}

#[derive(Serialize, Deserialize)]
pub struct FitJson {
    pub coef_names: Vec<String>,
    pub gamma: Vec<f64>,
    pub se: Vec<f64>,
    pub vgamma: Vec<Vec<f64>>,
    pub se_type: String,
    pub se_warnings: Vec<String>,
    pub response_curve: Option<CurveJson>,
    pub diagnostics: Diagnostics,
    pub residuals: Vec<Residual>,
}

#[derive(Args)]
pub struct RegressArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    se: SeArgs,
    #[arg(long)]
    out: PathBuf,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn regress(a: RegressArgs, run: &mut Run) -> Result<()> {
    let m = model::build(&a.model, run)?;
    let (se, centroids) = model::se_config(&a.se, run)?;
    let fit = fit_within_se(&m.panel, &m.spec, &se, centroids.as_ref())?;
    for w in &fit.se_warnings {
        eprintln!("warning: {w}");
    }
    let curve = match &m.basis {
        Some(b) => {
            let names: Vec<String> = (0..b.n_cols()).map(|j| format!("b{j}")).collect();
            let (g, v) = fit.subset(&names)?;
            let c = recover_curve(&g, &v, b)?;
            Some(CurveJson {
                eval_points: c.eval_points,
                beta: c.beta,
                se: c.se,
            })
        }
        None => None,
    };
    let out = FitJson {
        coef_names: fit.coef_names.clone(),
        gamma: fit.gamma.iter().copied().collect(),
        se: fit.se(),
        vgamma: matrix_rows(&fit.vgamma),
        se_type: fit.se_type.clone(),
        se_warnings: fit.se_warnings.clone(),
        response_curve: curve,
        diagnostics: Diagnostics {
            n_obs: fit.n_obs,
            dof: fit.dof,
            r2: fit.r2,
            adj_r2: fit.adj_r2,
            within_r2: fit.within_r2,
            absorbed_dims: fit.absorbed_dims,
            sweeps: fit.sweeps,
        },
        residuals: fit
            .rows
            .iter()
            .zip(&fit.residuals)
            .map(|(&r, &e)| Residual {
                unit_id: m.panel.unit_ids[r].clone(),
                year: m.panel.years[r],
                residual: e,
            })
            .collect(),
    };
    write_json(&a.out, &out)?;
    run.output(&a.out);
    run.finish_beside(&a.out)
}

#[derive(Args)]
pub struct ImpactArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    se: SeArgs,
    /// Uniform warming in °C
    #[arg(long, default_value_t = 2.0)]
    delta: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct ImpactJson {
    delta: f64,
    estimate: f64,
    se: f64,
    ci95: (f64, f64),
    se_type: String,
    n_obs: usize,
}

pub fn impact(a: ImpactArgs, run: &mut Run) -> Result<()> {
    let m = model::build(&a.model, run)?;
    let (se, centroids) = model::se_config(&a.se, run)?;
    let fit = fit_within_se(&m.panel, &m.spec, &se, centroids.as_ref())?;
    let imp = warming_impact(&fit, &m.spec, &m.panel, a.delta)?;
    let out = ImpactJson {
        delta: a.delta,
        estimate: imp.estimate,
        se: imp.se,
        ci95: (imp.estimate - 1.96 * imp.se, imp.estimate + 1.96 * imp.se),
        se_type: fit.se_type,
        n_obs: fit.n_obs,
    };
    write_json(&a.out, &out)?;
    run.output(&a.out);
    run.finish_beside(&a.out)
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct PermtestArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Number of permutations
    #[arg(long = "B", default_value_t = 999)]
    b: usize,
    #[arg(long)]
    seed: u64,
    /// coef:NAME or warming:DELTA
    #[arg(long, default_value = "warming:2")]
    stat: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct PermJson {
    statistic: String,
    stat: f64,
    p: f64,
    b: usize,
    skipped: usize,
    seed: u64,
    null_draws: Vec<f64>,
}

pub fn permtest(a: PermtestArgs, run: &mut Run) -> Result<()> {
    run.seed(a.seed);
    let stat: Statistic = a.stat.parse()?;
    let m = model::build(&a.model, run)?;
    let r = permutation_test(&m.panel, &m.spec, &stat, a.b, a.seed)?;
    if r.skipped > 0 {
        eprintln!("warning: {} permutations were not estimable and were skipped", r.skipped);
    }
    let out = PermJson {
        statistic: a.stat,
        stat: r.stat,
        p: r.p,
        b: r.b,
        skipped: r.skipped,
        seed: a.seed,
        null_draws: r.null_draws,
    };
    write_json(&a.out, &out)?;
    run.output(&a.out);
    run.finish_beside(&a.out)
}

#[derive(Args)]
pub struct MoranArgs {
    /// Fit written by `agropanel regress`
    #[arg(long)]
    fit: PathBuf,
    /// Unit centroids CSV: unit_id,lat,lon
    #[arg(long)]
    centroids: PathBuf,
    /// knn:K or idw:KM
    #[arg(long, default_value = "knn:5")]
    wk: String,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = MORAN_PERMUTATIONS)]
    permutations: usize,
    /// Also write the result here (it always goes to stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct MoranEntry {
    year: Option<i32>,
    n: usize,
    i: f64,
    p: f64,
}

#[derive(Serialize)]
struct MoranJson {
    weights: String,
    permutations: usize,
    seed: u64,
    pooled: MoranEntry,
    by_year: Vec<MoranEntry>,
}

pub fn moran(a: MoranArgs, run: &mut Run) -> Result<()> {
    run.seed(a.seed);
    run.input(&a.fit)?;
    let fit: FitJson = read_json(&a.fit)?;
    let centroids = model::read_centroids(Some(&a.centroids), run)?.unwrap_or_default();
    let mut years: BTreeMap<i32, Vec<(&str, f64)>> = BTreeMap::new();
    for r in &fit.residuals {
        years.entry(r.year).or_default().push((&r.unit_id, r.residual));
    }
    // one cross-section per year; the pooled statistic uses the block-diagonal W
    let mut by_year = Vec::new();
    let mut stacked = Vec::new();
    let mut triplets = Vec::new();
    for (idx, (year, mut rows)) in years.into_iter().enumerate() {
        rows.sort_by(|x, y| x.0.cmp(y.0));
        let units: Vec<String> = rows.iter().map(|r| r.0.to_string()).collect();
        let e: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let w = spatial_weights(&a.wk, &unit_coords(&units, &centroids)?)?;
        let r = morans_i(&e, &w, a.permutations, mix64(a.seed ^ (idx as u64 + 1)))?;
        let offset = stacked.len();
        for i in 0..w.n {
            let (cols, vals) = w.row(i);
            triplets.extend(cols.iter().zip(vals).map(|(&j, &v)| (offset + i, offset + j, v)));
        }
        stacked.extend(e);
        by_year.push(MoranEntry {
            year: Some(year),
            n: units.len(),
            i: r.i,
            p: r.p,
        });
    }
    let w = SpatialWeights::from_triplets(stacked.len(), &triplets, WeightScheme::Custom)?;
    let pooled = morans_i(&stacked, &w, a.permutations, mix64(a.seed))?;
    let out = MoranJson {
        weights: a.wk.clone(),
        permutations: a.permutations,
        seed: a.seed,
        pooled: MoranEntry {
            year: None,
            n: stacked.len(),
            i: pooled.i,
            p: pooled.p,
        },
        by_year,
    };
    if let Some(path) = &a.out {
        write_json(path, &out)?;
        run.output(path);
        run.finish_beside(path)?;
    }
    let text = serde_json::to_string_pretty(&out).map_err(|e| Error::Parse(e.to_string()))?;
    match writeln!(std::io::stdout(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

#[derive(Args)]
pub struct SemArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Unit centroids CSV: unit_id,lat,lon
    #[arg(long)]
    centroids: PathBuf,
    /// knn:K or idw:KM
    #[arg(long, default_value = "knn:5")]
    wk: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct SemJson {
    coef_names: Vec<String>,
    beta: Vec<f64>,
    se: Vec<f64>,
    vgamma: Vec<Vec<f64>>,
    lambda: f64,
    sigma2: f64,
    log_likelihood: f64,
    weights: String,
    n_units: usize,
    n_periods: usize,
}

pub fn sem(a: SemArgs, run: &mut Run) -> Result<()> {
    let m = model::build(&a.model, run)?;
    let centroids = model::read_centroids(Some(&a.centroids), run)?.unwrap_or_default();
    let units = m.panel.units();
    let w = spatial_weights(&a.wk, &unit_coords(&units, &centroids)?)?;
    let r = sem_ml(&m.panel, &m.spec, &w)?;
    let out = SemJson {
        coef_names: r.coef_names,
        beta: r.beta.iter().copied().collect(),
        se: (0..r.vgamma.nrows()).map(|i| r.vgamma[(i, i)].max(0.0).sqrt()).collect(),
        vgamma: matrix_rows(&r.vgamma),
        lambda: r.lambda,
        sigma2: r.sigma2,
        log_likelihood: r.log_likelihood,
        weights: a.wk.clone(),
        n_units: units.len(),
        n_periods: m.panel.year_set().len(),
    };
    write_json(&a.out, &out)?;
    run.output(&a.out);
    run.finish_beside(&a.out)
}

// ---------------------------------------------------------------------------
// Specification chart
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct SpeccurveArgs {
    /// Panel CSV: unit_id,year,y,<columns...>
    #[arg(long)]
    panel: PathBuf,
    /// Monthly weather CSV written by `agropanel simulate`
    #[arg(long)]
    weather: PathBuf,
    /// temp,precip|no_precip,form,season,trend
    #[arg(long, default_value = "tmean,precip,quadratic,mar_aug,pooled")]
    baseline: String,
    /// iid | hc0 | hc1 | cluster:COL | twoway:A,B | conley:KM[,LAGS]
    #[arg(long, default_value = "hc1")]
    se: String,
    /// Column used for by-region trends
    #[arg(long, default_value = "state")]
    region: String,
    /// Unit centroids CSV, needed for conley
    #[arg(long)]
    centroids: Option<PathBuf>,
    /// adj_r2 | estimate | input_order
    #[arg(long, default_value = "adj_r2")]
    sort: String,
    #[arg(long)]
    out_svg: PathBuf,
    #[arg(long)]
    out_csv: PathBuf,
}

pub fn speccurve(a: SpeccurveArgs, run: &mut Run) -> Result<()> {
    let baseline = a.baseline.parse()?;
    let key: SortKey = a.sort.parse()?;
    let (se, centroids) = model::se_config(
        &SeArgs {
            se: a.se.clone(),
            centroids: a.centroids.clone(),
        },
        run,
    )?;
    run.input(&a.panel)?;
    run.input(&a.weather)?;
    let panel = agropanel::data::read_panel_csv(&a.panel)?;
    let monthly = read_monthly_csv(&a.weather)?;
    let grid = SpecGrid::full(baseline);
    let results = run_grid(&panel, &monthly, &grid, &se, &a.region, centroids.as_ref())?;
    let sorted = render_chart(results, key, &a.out_svg, &a.out_csv)?;
    let failed = sorted.iter().filter(|r| !r.ok()).count();
    eprintln!("{} specifications, {failed} failed", sorted.len());
    run.output(&a.out_svg);
    run.output(&a.out_csv);
    run.finish_beside(&a.out_svg)
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct SimulateArgs {
    /// Generator config JSON; omitted fields take their defaults
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

pub fn simulate(a: SimulateArgs, run: &mut Run) -> Result<()> {
    run.input(&a.config)?;
    let mut cfg: DGPConfig = read_json(&a.config).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    run.seed(cfg.seed);
    let g = generate(&cfg)?;
    let dir = &a.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| io_context(e, dir))?;
    let mut wrote = |p: PathBuf| {
        run.output(&p);
        p
    };
    write_stations_csv(&g.stations, wrote(dir.join("stations.csv")))?;
    write_ascii_grid(&g.tmax.layer_grid(0), wrote(dir.join("grid.asc")))?;
    for (name, stack) in [("tmax", &g.tmax), ("tmin", &g.tmin), ("ppt", &g.ppt)] {
        let sub = dir.join(name);
        std::fs::create_dir_all(&sub).map_err(|e| io_context(e, &sub))?;
        write_grid_stack(stack, wrote(sub.join(format!("{name}.csv"))))?;
    }
    write_admin_weights_csv(&g.units, wrote(dir.join("admin_weights.csv")))?;
    let centroids: Vec<(String, (f64, f64))> = g.units.units.iter().map(|u| (u.unit_id.clone(), u.centroid)).collect();
    write_centroids_csv(&centroids, wrote(dir.join("centroids.csv")))?;
    write_unit_series_csv(&g.daily_tmax, wrote(dir.join("A_tmax.csv")))?;
    write_unit_series_csv(&g.daily_tmin, wrote(dir.join("A_tmin.csv")))?;
    write_bins_csv(&g.exposures, wrote(dir.join("exposures.csv")))?;
    write_json(&wrote(bingrid_path(&dir.join("exposures.csv"))), &g.exposures.bins)?;
    write_panel_csv(&g.panel, wrote(dir.join("panel.csv")))?;
    write_monthly_csv(&g.monthly, wrote(dir.join("weather.csv")))?;
    write_json(&wrote(dir.join("truth.json")), &g.truth)?;
    run.finish(&dir.join("manifest.json"))
}
