//! Synthetic data generator and brute-force oracles.
//!
//! `generate` simulates smooth daily weather fields on a grid, samples
//! stations from them, carves the grid into administrative units, builds
//! exposure bins and draws yields from
//!
//! ```text
//! y_it = Σ_k g(m_k) z_itk + βp·P_it + βp2·P_it² + α_i + τ1·t + τ2·t² + ε_it
//! ```
//!
//! with `g` piecewise linear over temperature and `ε` from the configured
//! error model. All randomness is drawn from counter-based streams indexed by
//! (purpose, year, day/unit), so output does not depend on thread count.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::aggregate::UnitSeries;
use crate::data::{AdminUnit, AdminUnits, GridHeader, GridStack, PanelTable, StationRecord, StationTable, Variable};
use crate::error::{Error, Result};
use crate::inference::SpatialWeights;
use crate::par;
use crate::rng::SplitMix64;
use crate::speccurve::MonthlyRow;
use crate::thermal::{exposure_from_daily, BinGrid, ExposureBins, ExposureTable, SineConfig};

/// Piecewise-linear response `g(h)` through `(h, g)` knots, extrapolated
/// linearly beyond the end knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    pub knots: Vec<(f64, f64)>,
}

impl PiecewiseLinear {
    pub fn validate(&self) -> Result<()> {
        if self.knots.len() < 2 {
            return Err(Error::validation("response needs at least two knots"));
        }
        if self.knots.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::validation("response knots must be strictly increasing"));
        }
        Ok(())
    }

    pub fn eval(&self, h: f64) -> f64 {
        let k = &self.knots;
        let i = match k.iter().position(|p| p.0 >= h) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => k.len() - 2,
        };
        let (a, b) = (k[i], k[i + 1]);
        a.1 + (b.1 - a.1) * (h - a.0) / (b.0 - a.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ErrorModel {
    Iid,
    /// Per period `u = λWu + ε` with symmetric 5-nearest-neighbour W, row-normalized.
    Sar { lambda: f64 },
    /// Share `rho` of the variance is a common state-by-year shock.
    Clustered { rho: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DGPConfig {
    pub seed: u64,
    pub n_units: usize,
    pub n_years: usize,
    pub first_year: i32,
    pub n_states: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub cellsize: f64,
    pub xll: f64,
    pub yll: f64,
    pub n_stations: usize,
    /// Growing season as inclusive calendar months.
    pub season_start_month: u32,
    pub season_end_month: u32,
    pub step_minutes: u32,
    pub bins: BinGrid,
    pub response: PiecewiseLinear,
    pub beta_p: f64,
    pub beta_p2: f64,
    pub fe_sd: f64,
    pub trend_linear: f64,
    pub trend_quadratic: f64,
    pub noise_sd: f64,
    pub error: ErrorModel,
}

impl Default for DGPConfig {
    fn default() -> Self {
        DGPConfig {
            seed: 1,
            n_units: 60,
            n_years: 20,
            first_year: 2000,
            n_states: 5,
            grid_rows: 20,
            grid_cols: 20,
            cellsize: 0.25,
            xll: -95.0,
            yll: 38.0,
            n_stations: 25,
            season_start_month: 4,
            season_end_month: 9,
            step_minutes: 15,
            bins: BinGrid {
                lo: 0.0,
                hi: 39.0,
                width: 1.0,
            },
            response: PiecewiseLinear {
                knots: vec![(0.0, 0.0), (30.0, 0.015), (39.0, -0.045)],
            },
            beta_p: 0.0018,
            beta_p2: -0.000002,
            fe_sd: 0.3,
            trend_linear: 0.01,
            trend_quadratic: 0.0,
            noise_sd: 0.2,
            error: ErrorModel::Iid,
        }
    }
}

impl DGPConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_units", self.n_units),
            ("n_years", self.n_years),
            ("n_states", self.n_states),
            ("grid_rows", self.grid_rows),
            ("grid_cols", self.grid_cols),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be positive")));
            }
        }
        if self.n_units > self.grid_rows * self.grid_cols {
            return Err(Error::validation(format!(
                "{} units cannot be carved from {} grid cells",
                self.n_units,
                self.grid_rows * self.grid_cols
            )));
        }
        if self.n_states > self.n_units {
            return Err(Error::validation("more states than units"));
        }
        if !(1..=12).contains(&self.season_start_month)
            || !(1..=12).contains(&self.season_end_month)
            || self.season_start_month > self.season_end_month
        {
            return Err(Error::validation("season months must satisfy 1 <= start <= end <= 12"));
        }
        GridHeader::new(self.grid_cols, self.grid_rows, self.xll, self.yll, self.cellsize, -9999.0)?;
        BinGrid::new(self.bins.lo, self.bins.hi, self.bins.width)?;
        SineConfig {
            step_minutes: self.step_minutes,
            ..SineConfig::default()
        }
        .validate()?;
        self.response.validate()?;
        for (name, v) in [("fe_sd", self.fe_sd), ("noise_sd", self.noise_sd)] {
            if !(v >= 0.0) {
                return Err(Error::validation(format!("{name} must be non-negative")));
            }
        }
        match self.error {
            ErrorModel::Iid => {}
            ErrorModel::Sar { lambda } => {
                // row-normalized W has spectral radius 1
                if !(lambda > -1.0 && lambda < 1.0) {
                    return Err(Error::validation(format!("sar lambda {lambda} outside (-1, 1)")));
                }
                if self.n_units < 7 {
                    return Err(Error::validation("sar errors need at least 7 units"));
                }
            }
            ErrorModel::Clustered { rho } => {
                if !(0.0..=1.0).contains(&rho) {
                    return Err(Error::validation(format!("cluster share rho {rho} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }

    fn sine(&self) -> SineConfig {
        SineConfig {
            step_minutes: self.step_minutes,
            ..SineConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub config: DGPConfig,
    pub bin_midpoints: Vec<f64>,
    /// `g` at each bin midpoint.
    pub g_mid: Vec<f64>,
    pub alpha: BTreeMap<String, f64>,
    pub state: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct Generated {
    /// Stations over the first simulated season.
    pub stations: StationTable,
    /// Daily grids over the first simulated season.
    pub tmax: GridStack,
    pub tmin: GridStack,
    pub ppt: GridStack,
    pub units: AdminUnits,
    pub exposures: ExposureTable,
    /// Unit-level daily temperatures over every season, labelled by date.
    pub daily_tmax: UnitSeries,
    pub daily_tmin: UnitSeries,
    pub monthly: Vec<MonthlyRow>,
    pub panel: PanelTable,
    pub truth: Truth,
}

/// Random smooth field: a few plane waves plus nothing else.
#[derive(Debug, Clone)]
struct Field {
    waves: [(f64, f64, f64, f64); 3],
}

impl Field {
    fn random(rng: &mut SplitMix64, sd: f64, wavelength_deg: f64) -> Self {
        let amp = sd * (2.0f64 / 3.0).sqrt();
        let k = 2.0 * std::f64::consts::PI / wavelength_deg;
        let mut wave = || {
            let theta = rng.uniform() * 2.0 * std::f64::consts::PI;
            let scale = 0.5 + rng.uniform();
            (amp, k * scale * theta.cos(), k * scale * theta.sin(), rng.uniform() * 2.0 * std::f64::consts::PI)
        };
        Field {
            waves: [wave(), wave(), wave()],
        }
    }

    /// Add the field over a lattice: `out[r * lons.len() + c] += f(lats[r], lons[c])`.
    /// The waves are separable, so only `O(rows + cols)` sines are needed.
    fn add_to(&self, lats: &[f64], lons: &[f64], scale: f64, out: &mut [f64]) {
        for &(amp, kx, ky, ph) in &self.waves {
            let cols: Vec<(f64, f64)> = lons.iter().map(|&x| (kx * x).sin_cos()).collect();
            for (r, &lat) in lats.iter().enumerate() {
                let (sb, cb) = (ky * lat + ph).sin_cos();
                let row = &mut out[r * lons.len()..(r + 1) * lons.len()];
                for (o, &(sa, ca)) in row.iter_mut().zip(&cols) {
                    *o += scale * amp * (sa * cb + ca * sb);
                }
            }
        }
    }
}

// stream purposes
const S_YEAR: u64 = 1;
const S_DAY: u64 = 2;
const S_LAYOUT: u64 = 3;
const S_ALPHA: u64 = 4;
const S_NOISE: u64 = 5;
const S_STATE_SHOCK: u64 = 6;

/// Daily cell weather for one year: `(tmax, tmin, ppt)` each `[day][cell]`.
struct YearWeather {
    dates: Vec<NaiveDate>,
    tmax: Vec<Vec<f64>>,
    tmin: Vec<Vec<f64>>,
    ppt: Vec<Vec<f64>>,
}

fn climatology(doy: f64) -> f64 {
    12.0 + 13.0 * (2.0 * std::f64::consts::PI * (doy - 105.0) / 365.0).sin()
}

fn year_dates(year: i32) -> Vec<NaiveDate> {
    let start = NaiveDate::from_ymd_opt(year, 1, 1).expect("valid year");
    start.iter_days().take_while(|d| d.year() == year).collect()
}

fn simulate_weather(cfg: &DGPConfig, header: &GridHeader, year_idx: usize) -> YearWeather {
    let year = cfg.first_year + year_idx as i32;
    let lat0 = header.yll + header.nrows as f64 * header.cellsize / 2.0;
    let lats: Vec<f64> = (0..header.nrows).map(|r| header.cell_center(r, 0).1).collect();
    let lons: Vec<f64> = (0..header.ncols).map(|c| header.cell_center(0, c).0).collect();
    let n = header.n_cells();
    let mut yr = SplitMix64::substream(cfg.seed, S_YEAR, year_idx as u64);
    let year_common = 0.8 * yr.normal();
    // static part of the mean temperature for this year
    let mut base = vec![0.0; n];
    Field::random(&mut yr, 1.2, 6.0).add_to(&lats, &lons, 1.0, &mut base);
    for (i, b) in base.iter_mut().enumerate() {
        *b += year_common - 0.7 * (lats[i / header.ncols] - lat0);
    }
    let dates = year_dates(year);
    let mut out = YearWeather {
        dates: dates.clone(),
        tmax: Vec::with_capacity(dates.len()),
        tmin: Vec::with_capacity(dates.len()),
        ppt: Vec::with_capacity(dates.len()),
    };
    for (d, date) in dates.iter().enumerate() {
        let mut rng = SplitMix64::substream(cfg.seed, S_DAY, (year_idx as u64) << 16 | d as u64);
        let temp = Field::random(&mut rng, 2.0, 4.0);
        let common = 2.5 * rng.normal();
        let dtr = Field::random(&mut rng, 1.5, 5.0);
        let wet = Field::random(&mut rng, 0.5, 3.0);
        let wet_common = 0.3 * rng.normal();
        let shift = climatology(date.ordinal() as f64) + common;
        let mut tm: Vec<f64> = base.iter().map(|b| b + shift).collect();
        temp.add_to(&lats, &lons, 1.0, &mut tm);
        let mut range = vec![12.0; n];
        dtr.add_to(&lats, &lons, 1.0, &mut range);
        let mut w = vec![wet_common - 0.6; n];
        wet.add_to(&lats, &lons, 1.0, &mut w);
        let half: Vec<f64> = range.iter().map(|r| r.max(2.0) / 2.0).collect();
        out.tmax.push(tm.iter().zip(&half).map(|(t, h)| t + h).collect());
        out.tmin.push(tm.iter().zip(&half).map(|(t, h)| t - h).collect());
        out.ppt.push(w.iter().map(|v| (25.0 * v).max(0.0)).collect());
    }
    out
}

fn carve_units(cfg: &DGPConfig, header: &GridHeader) -> Result<(AdminUnits, Vec<String>)> {
    let n_cells = header.n_cells();
    let mut rng = SplitMix64::stream(cfg.seed, S_LAYOUT);
    let perm = rng.permutation(n_cells);
    let seeds: Vec<usize> = perm[..cfg.n_units].to_vec();
    let seed_pos: Vec<(f64, f64)> = seeds.iter().map(|&c| header.cell_center_of(c)).collect();
    let mut members: Vec<Vec<(usize, f64)>> = vec![Vec::new(); cfg.n_units];
    for c in 0..n_cells {
        let (x, y) = header.cell_center_of(c);
        let mut best = (f64::INFINITY, 0usize);
        for (u, &(sx, sy)) in seed_pos.iter().enumerate() {
            let d = (x - sx).powi(2) + (y - sy).powi(2);
            if d < best.0 {
                best = (d, u);
            }
        }
        members[best.1].push((c, 0.2 + 0.8 * rng.uniform()));
    }
    let width = (cfg.n_units as f64).log10().floor() as usize + 1;
    let mut units = Vec::with_capacity(cfg.n_units);
    for (u, cw) in members.into_iter().enumerate() {
        let total: f64 = cw.iter().map(|p| p.1).sum();
        let (mut lat, mut lon) = (0.0, 0.0);
        for &(c, w) in &cw {
            let (x, y) = header.cell_center_of(c);
            lon += w * x / total;
            lat += w * y / total;
        }
        units.push(AdminUnit {
            unit_id: format!("U{:0width$}", u + 1, width = width.max(3)),
            centroid: (lat, lon),
            cell_weights: cw,
        });
    }
    let admin = AdminUnits::new(*header, units)?;
    // states: contiguous blocks by centroid longitude
    let mut order: Vec<usize> = (0..cfg.n_units).collect();
    order.sort_by(|&a, &b| {
        admin.units[a].centroid.1.total_cmp(&admin.units[b].centroid.1).then(a.cmp(&b))
    });
    let mut state = vec![String::new(); cfg.n_units];
    for (rank, &u) in order.iter().enumerate() {
        state[u] = format!("S{}", rank * cfg.n_states / cfg.n_units + 1);
    }
    Ok((admin, state))
}

fn in_season(cfg: &DGPConfig, d: &NaiveDate) -> bool {
    (cfg.season_start_month..=cfg.season_end_month).contains(&d.month())
}

/// Simulate the full pipeline inputs from `cfg`.
pub fn generate(cfg: &DGPConfig) -> Result<Generated> {
    cfg.validate()?;
    let header = GridHeader::new(cfg.grid_cols, cfg.grid_rows, cfg.xll, cfg.yll, cfg.cellsize, -9999.0)?;
    let (units, state) = carve_units(cfg, &header)?;
    let nu = cfg.n_units;
    let sine = cfg.sine();
    let bins = BinGrid::new(cfg.bins.lo, cfg.bins.hi, cfg.bins.width)?;

    struct YearOut {
        first: Option<YearWeather>,
        exposures: Vec<ExposureBins>,
        monthly: Vec<MonthlyRow>,
        season_tavg: Vec<f64>,
        season_ppt: Vec<f64>,
        season_labels: Vec<String>,
        season_tx: Vec<Vec<f64>>,
        season_tn: Vec<Vec<f64>>,
    }

    let years: Vec<Result<YearOut>> = par::map_range(cfg.n_years, |t| {
        let w = simulate_weather(cfg, &header, t);
        let year = cfg.first_year + t as i32;
        let project = |field: &Vec<Vec<f64>>, u: usize| -> Vec<f64> {
            field
                .iter()
                .map(|day| units.units[u].cell_weights.iter().map(|&(c, wt)| wt * day[c]).sum())
                .collect()
        };
        let mut exposures = Vec::with_capacity(nu);
        let mut monthly = Vec::with_capacity(nu * 12);
        let mut season_tavg = Vec::with_capacity(nu);
        let mut season_ppt = Vec::with_capacity(nu);
        let mut season_tx = Vec::with_capacity(nu);
        let mut season_tn = Vec::with_capacity(nu);
        let season: Vec<usize> = (0..w.dates.len()).filter(|&d| in_season(cfg, &w.dates[d])).collect();
        let season_labels = season.iter().map(|&d| w.dates[d].format("%Y-%m-%d").to_string()).collect();
        for u in 0..nu {
            let (tx, tn, pp) = (project(&w.tmax, u), project(&w.tmin, u), project(&w.ppt, u));
            let s_tn: Vec<f64> = season.iter().map(|&d| tn[d]).collect();
            let s_tx: Vec<f64> = season.iter().map(|&d| tx[d]).collect();
            let id = &units.units[u].unit_id;
            exposures.push(exposure_from_daily(id, year, &s_tn, &s_tx, &sine, &bins)?);
            season_tavg.push(season.iter().map(|&d| (tx[d] + tn[d]) / 2.0).sum::<f64>() / season.len() as f64);
            season_ppt.push(season.iter().map(|&d| pp[d]).sum());
            for m in 1..=12u32 {
                let days: Vec<usize> = (0..w.dates.len()).filter(|&d| w.dates[d].month() == m).collect();
                let nd = days.len() as f64;
                monthly.push(MonthlyRow {
                    unit_id: id.clone(),
                    year,
                    month: m,
                    tmax: days.iter().map(|&d| tx[d]).sum::<f64>() / nd,
                    tmin: days.iter().map(|&d| tn[d]).sum::<f64>() / nd,
                    tmean: days.iter().map(|&d| (tx[d] + tn[d]) / 2.0).sum::<f64>() / nd,
                    ppt: days.iter().map(|&d| pp[d]).sum(),
                });
            }
            season_tx.push(s_tx);
            season_tn.push(s_tn);
        }
        Ok(YearOut {
            first: (t == 0).then_some(w),
            exposures,
            monthly,
            season_tavg,
            season_ppt,
            season_labels,
            season_tx,
            season_tn,
        })
    });
    let mut years: Vec<YearOut> = years.into_iter().collect::<Result<_>>()?;

    // stacks and stations from the first season
    let first = years[0].first.take().expect("first year kept");
    let season_days: Vec<usize> = (0..first.dates.len()).filter(|&d| in_season(cfg, &first.dates[d])).collect();
    let labels: Vec<String> = season_days.iter().map(|&d| first.dates[d].format("%Y-%m-%d").to_string()).collect();
    let stack = |f: &Vec<Vec<f64>>| GridStack::new(header, season_days.iter().map(|&d| f[d].clone()).collect(), labels.clone());
    let (tmax, tmin, ppt) = (stack(&first.tmax)?, stack(&first.tmin)?, stack(&first.ppt)?);
    let stations = sample_stations(cfg, &header, &first, &season_days)?;

    // outcome
    let mids = bins.midpoints();
    let g_mid: Vec<f64> = mids.iter().map(|&m| cfg.response.eval(m)).collect();
    let mut arng = SplitMix64::stream(cfg.seed, S_ALPHA);
    let alpha: Vec<f64> = (0..nu).map(|_| cfg.fe_sd * arng.normal()).collect();
    let tbar = (cfg.n_years as f64 - 1.0) / 2.0;
    let noise = draw_noise(cfg, &units, &state)?;

    let mut unit_ids = Vec::new();
    let mut yrs = Vec::new();
    let mut y = Vec::new();
    let mut tavg = Vec::new();
    let mut pcol = Vec::new();
    let mut states = Vec::new();
    let mut acres = Vec::new();
    let mut acre_rng = SplitMix64::stream(cfg.seed, S_LAYOUT + 100);
    let unit_acres: Vec<f64> = (0..nu).map(|_| 50.0 + 450.0 * acre_rng.uniform()).collect();
    for (t, yo) in years.iter().enumerate() {
        let tc = t as f64 - tbar;
        for u in 0..nu {
            let z = &yo.exposures[u].z;
            let p = yo.season_ppt[u];
            let signal: f64 = z.iter().zip(&g_mid).map(|(a, b)| a * b).sum();
            y.push(
                signal + cfg.beta_p * p + cfg.beta_p2 * p * p + alpha[u] + cfg.trend_linear * tc
                    + cfg.trend_quadratic * tc * tc
                    + noise[t][u],
            );
            unit_ids.push(units.units[u].unit_id.clone());
            yrs.push(cfg.first_year + t as i32);
            tavg.push(yo.season_tavg[u]);
            pcol.push(p);
            states.push(state[u].clone());
            acres.push(unit_acres[u]);
        }
    }
    let mut panel = PanelTable::new(unit_ids, yrs, y)?;
    panel.set_real("tavg", tavg)?;
    panel.set_real("ppt", pcol)?;
    panel.set_text("state", states)?;
    panel.set_real("acres", acres)?;

    let exposures = ExposureTable {
        bins,
        rows: years.iter_mut().flat_map(|y| std::mem::take(&mut y.exposures)).collect(),
    };
    let daily = |pick: fn(&YearOut) -> &Vec<Vec<f64>>| UnitSeries {
        unit_ids: units.units.iter().map(|u| u.unit_id.clone()).collect(),
        labels: years.iter().flat_map(|y| y.season_labels.iter().cloned()).collect(),
        values: (0..nu).flat_map(|u| years.iter().flat_map(move |y| pick(y)[u].iter().copied())).collect(),
    };
    let (daily_tmax, daily_tmin) = (daily(|y| &y.season_tx), daily(|y| &y.season_tn));
    let monthly = years.iter_mut().flat_map(|y| std::mem::take(&mut y.monthly)).collect();
    let truth = Truth {
        config: cfg.clone(),
        bin_midpoints: mids,
        g_mid,
        alpha: units.units.iter().zip(&alpha).map(|(u, a)| (u.unit_id.clone(), *a)).collect(),
        state: units.units.iter().zip(&state).map(|(u, s)| (u.unit_id.clone(), s.clone())).collect(),
    };
    Ok(Generated {
        stations,
        tmax,
        tmin,
        ppt,
        units,
        exposures,
        daily_tmax,
        daily_tmin,
        monthly,
        panel,
        truth,
    })
}

fn sample_stations(cfg: &DGPConfig, header: &GridHeader, w: &YearWeather, days: &[usize]) -> Result<StationTable> {
    let mut rng = SplitMix64::stream(cfg.seed, S_LAYOUT + 200);
    let mut records = Vec::new();
    for s in 0..cfg.n_stations {
        let col = rng.below(header.ncols as u64) as usize;
        let row = rng.below(header.nrows as u64) as usize;
        let (lon, lat) = header.cell_center(row, col);
        let c = header.index(row, col);
        let id = format!("ST{:03}", s + 1);
        for &d in days {
            for (var, v) in [(Variable::Tmax, w.tmax[d][c]), (Variable::Tmin, w.tmin[d][c]), (Variable::Ppt, w.ppt[d][c])] {
                records.push(StationRecord {
                    station_id: id.clone(),
                    lat,
                    lon,
                    date: w.dates[d],
                    variable: var,
                    value: v,
                });
            }
        }
    }
    StationTable::new(records)
}

/// Error draws `[year][unit]`.
fn draw_noise(cfg: &DGPConfig, units: &AdminUnits, state: &[String]) -> Result<Vec<Vec<f64>>> {
    let nu = units.len();
    let base: Vec<Vec<f64>> = (0..cfg.n_years)
        .map(|t| {
            let mut r = SplitMix64::substream(cfg.seed, S_NOISE, t as u64);
            (0..nu).map(|_| cfg.noise_sd * r.normal()).collect()
        })
        .collect();
    match cfg.error {
        ErrorModel::Iid => Ok(base),
        ErrorModel::Clustered { rho } => {
            let mut out = Vec::with_capacity(cfg.n_years);
            for (t, eps) in base.into_iter().enumerate() {
                let mut r = SplitMix64::substream(cfg.seed, S_STATE_SHOCK, t as u64);
                let mut shocks: BTreeMap<&str, f64> = BTreeMap::new();
                for s in state {
                    shocks.entry(s.as_str()).or_insert(0.0);
                }
                for v in shocks.values_mut() {
                    *v = cfg.noise_sd * r.normal();
                }
                out.push(
                    eps.iter()
                        .zip(state)
                        .map(|(e, s)| rho.sqrt() * shocks[s.as_str()] + (1.0 - rho).sqrt() * e)
                        .collect(),
                );
            }
            Ok(out)
        }
        ErrorModel::Sar { lambda } => {
            let coords: Vec<(f64, f64)> = units.units.iter().map(|u| u.centroid).collect();
            let w = SpatialWeights::knn(&coords, 5)?.row_normalize();
            let lu = (DMatrix::identity(nu, nu) - w.to_dense() * lambda).lu();
            base.into_iter()
                .map(|eps| {
                    lu.solve(&DVector::from_vec(eps))
                        .map(|u| u.iter().copied().collect())
                        .ok_or_else(|| Error::validation("I - lambda W is singular"))
                })
                .collect()
        }
    }
}

// ---------------------------------------------------------------------------
// Small Monte-Carlo panels
// ---------------------------------------------------------------------------

/// Random balanced panel with regressors `x1..xJ`, unit and year effects,
/// Gaussian noise and a positive weight column `w`.
pub fn fe_test_panel(seed: u64, n_units: usize, n_years: usize, n_regressors: usize) -> Result<PanelTable> {
    let mut rng = SplitMix64::stream(seed, 0);
    let alpha: Vec<f64> = (0..n_units).map(|_| rng.normal()).collect();
    let delta: Vec<f64> = (0..n_years).map(|_| rng.normal()).collect();
    let beta: Vec<f64> = (0..n_regressors).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
    let n = n_units * n_years;
    let mut x = vec![Vec::with_capacity(n); n_regressors];
    let (mut ids, mut years, mut y, mut w) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..n_units {
        for t in 0..n_years {
            let mut yi = alpha[i] + delta[t] + rng.normal();
            for (j, col) in x.iter_mut().enumerate() {
                // correlated with the effects so the within step matters
                let v = rng.normal() + 0.5 * alpha[i] - 0.3 * delta[t];
                yi += beta[j] * v;
                col.push(v);
            }
            ids.push(format!("u{i:03}"));
            years.push(1990 + t as i32);
            y.push(yi);
            w.push(rng.uniform_range(0.5, 2.0));
        }
    }
    let mut p = PanelTable::new(ids, years, y)?;
    for (j, col) in x.into_iter().enumerate() {
        p.set_real(&format!("x{}", j + 1), col)?;
    }
    p.set_real("w", w)?;
    Ok(p)
}

/// Weather `w` with unit-level persistence and an outcome unrelated to it.
pub fn null_weather_panel(seed: u64, n_units: usize, n_years: usize) -> Result<PanelTable> {
    let mut rng = SplitMix64::stream(seed, 0);
    let (mut ids, mut years, mut y, mut w) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let delta: Vec<f64> = (0..n_years).map(|_| rng.normal()).collect();
    for i in 0..n_units {
        let a = rng.normal();
        let clim = 20.0 + 3.0 * rng.normal();
        for (t, d) in delta.iter().enumerate() {
            ids.push(format!("u{i:03}"));
            years.push(2000 + t as i32);
            w.push(clim + rng.normal() + 0.5 * d);
            y.push(a + d + rng.normal());
        }
    }
    let mut p = PanelTable::new(ids, years, y)?;
    p.set_real("w", w)?;
    Ok(p)
}

/// Balanced panel on an `rows × cols` rook lattice with spatially
/// autoregressive errors `u = λWu + ε` (W row-normalized), regressors
/// `x1..` drawn iid, and unit effects. Units are ordered row-major so the
/// returned W matches the panel's sorted unit order.
pub fn sem_lattice_panel(
    seed: u64,
    rows: usize,
    cols: usize,
    n_years: usize,
    lambda: f64,
    beta: &[f64],
) -> Result<(PanelTable, SpatialWeights)> {
    let n = rows * cols;
    let w = SpatialWeights::rook(rows, cols)?.row_normalize();
    let lu = (DMatrix::identity(n, n) - w.to_dense() * lambda).lu();
    let mut rng = SplitMix64::stream(seed, 0);
    let alpha: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let (mut ids, mut years, mut y) = (Vec::new(), Vec::new(), Vec::new());
    let mut x = vec![Vec::new(); beta.len()];
    for t in 0..n_years {
        let eps = DVector::from_fn(n, |_, _| rng.normal());
        let u = lu.solve(&eps).ok_or_else(|| Error::validation("I - lambda W is singular"))?;
        for i in 0..n {
            let mut yi = alpha[i] + u[i];
            for (j, b) in beta.iter().enumerate() {
                let v = rng.normal();
                x[j].push(v);
                yi += b * v;
            }
            ids.push(format!("c{i:05}"));
            years.push(2000 + t as i32);
            y.push(yi);
        }
    }
    let mut p = PanelTable::new(ids, years, y)?;
    for (j, col) in x.into_iter().enumerate() {
        p.set_real(&format!("x{}", j + 1), col)?;
    }
    Ok((p, w))
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

/// Least squares by the normal equations, solved with Gauss-Jordan
/// elimination and partial pivoting. `x` is given column by column.
pub fn oracle_dense_ols(y: &[f64], x: &[Vec<f64>]) -> Result<Vec<f64>> {
    let p = x.len();
    let n = y.len();
    if p == 0 {
        return Err(Error::validation("oracle needs at least one column"));
    }
    if let Some(c) = x.iter().position(|c| c.len() != n) {
        return Err(Error::Length {
            what: format!("oracle column {c}"),
            expected: n,
            actual: x[c].len(),
        });
    }
    // augmented [XᵀX | Xᵀy]
    let mut a = vec![vec![0.0; p + 1]; p];
    for i in 0..p {
        for j in 0..p {
            let mut s = 0.0;
            for r in 0..n {
                s += x[i][r] * x[j][r];
            }
            a[i][j] = s;
        }
        let mut s = 0.0;
        for r in 0..n {
            s += x[i][r] * y[r];
        }
        a[i][p] = s;
    }
    let scale = (0..p).map(|i| a[i][i].abs()).fold(0.0, f64::max);
    for col in 0..p {
        let piv = (col..p).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        if a[piv][col].abs() <= 1e-12 * scale {
            return Err(Error::Rank {
                column: format!("oracle column {col}"),
            });
        }
        a.swap(col, piv);
        let d = a[col][col];
        for v in a[col].iter_mut() {
            *v /= d;
        }
        for i in 0..p {
            if i != col {
                let f = a[i][col];
                if f != 0.0 {
                    for j in col..=p {
                        a[i][j] -= f * a[col][j];
                    }
                }
            }
        }
    }
    Ok((0..p).map(|i| a[i][p]).collect())
}

/// Regressor columns followed by explicit dummies: one per unit and one per
/// year except the first.
pub fn dummy_design(panel: &PanelTable, regressors: &[&str], unit: bool, year: bool) -> Result<Vec<Vec<f64>>> {
    let mut cols: Vec<Vec<f64>> = regressors.iter().map(|r| panel.real(r).map(|c| c.to_vec())).collect::<Result<_>>()?;
    if unit {
        for u in panel.units() {
            cols.push(panel.unit_ids.iter().map(|v| if *v == u { 1.0 } else { 0.0 }).collect());
        }
    }
    if year {
        for t in panel.year_set().into_iter().skip(1) {
            cols.push(panel.years.iter().map(|&v| if v == t { 1.0 } else { 0.0 }).collect());
        }
    }
    Ok(cols)
}
