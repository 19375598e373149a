//! Intra-day temperature reconstruction, exposure bins and degree days.
//!
//! Daily Tmin/Tmax are joined by half-cosine segments through the anchors
//! `Tmin(d) @ tmin_hour → Tmax(d) @ tmax_hour → Tmin(d+1) @ tmin_hour`, sampled
//! every `step_minutes`. The stretch before the first anchor and after the
//! last one is held flat at that anchor's value. Exposure bins count the time
//! (in days) samples spend in each temperature interval.

use std::path::Path;

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::aggregate::UnitSeries;
use crate::data::{expect_header, fmt_f64, parse_f64};
use crate::error::{Error, Result};
use crate::par;

pub const MINUTES_PER_DAY: u32 = 1440;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SineConfig {
    pub step_minutes: u32,
    pub tmin_hour: f64,
    pub tmax_hour: f64,
}

impl Default for SineConfig {
    fn default() -> Self {
        SineConfig {
            step_minutes: 15,
            tmin_hour: 6.0,
            tmax_hour: 15.0,
        }
    }
}

impl SineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_minutes == 0 || MINUTES_PER_DAY % self.step_minutes != 0 {
            return Err(Error::validation(format!(
                "step_minutes must divide 1440, got {}",
                self.step_minutes
            )));
        }
        if !(0.0..24.0).contains(&self.tmin_hour) || !(0.0..24.0).contains(&self.tmax_hour) {
            return Err(Error::validation("anchor hours must lie in [0, 24)"));
        }
        if self.tmin_hour >= self.tmax_hour {
            return Err(Error::validation("tmin_hour must precede tmax_hour"));
        }
        Ok(())
    }
}

/// Evenly sampled temperature trajectory starting at minute 0 of day 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TempSeries {
    pub step_minutes: u32,
    pub values: Vec<f64>,
}

impl TempSeries {
    pub fn duration_days(&self) -> f64 {
        self.values.len() as f64 * self.step_minutes as f64 / MINUTES_PER_DAY as f64
    }

    /// `(minute, °C)` pairs.
    pub fn timestamps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .map(move |(i, &v)| (i as f64 * self.step_minutes as f64, v))
    }

    pub fn shifted(&self, delta: f64) -> TempSeries {
        TempSeries {
            step_minutes: self.step_minutes,
            values: self.values.iter().map(|v| v + delta).collect(),
        }
    }
}

pub fn sine_series(tmin: &[f64], tmax: &[f64], config: &SineConfig) -> Result<TempSeries> {
    config.validate()?;
    if tmin.len() != tmax.len() {
        return Err(Error::Length {
            what: "tmax sequence".into(),
            expected: tmin.len(),
            actual: tmax.len(),
        });
    }
    if tmin.is_empty() {
        return Err(Error::validation("need at least one day of temperatures"));
    }
    for (d, (&lo, &hi)) in tmin.iter().zip(tmax).enumerate() {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::validation(format!("day {d}: non-finite temperature")));
        }
        if hi < lo {
            return Err(Error::validation(format!("day {d}: tmax {hi} below tmin {lo}")));
        }
    }
    // Anchors repeat daily, so the half-cosine weight of each in-day step is
    // the same every day. Segment 0 runs from the previous Tmax to today's
    // Tmin, 1 from Tmin to Tmax, 2 from Tmax to tomorrow's Tmin.
    let spd = (MINUTES_PER_DAY / config.step_minutes) as usize;
    let step = config.step_minutes as f64;
    let (lo_m, hi_m) = (config.tmin_hour * 60.0, config.tmax_hour * 60.0);
    let night = MINUTES_PER_DAY as f64 - hi_m + lo_m;
    let weight = |frac: f64| 0.5 * (1.0 - (std::f64::consts::PI * frac).cos());
    let pattern: Vec<(u8, f64)> = (0..spd)
        .map(|i| {
            let m = i as f64 * step;
            if m <= lo_m {
                (0, weight((m + MINUTES_PER_DAY as f64 - hi_m) / night))
            } else if m <= hi_m {
                (1, weight((m - lo_m) / (hi_m - lo_m)))
            } else {
                (2, weight((m - hi_m) / night))
            }
        })
        .collect();
    let days = tmin.len();
    let mut values = Vec::with_capacity(days * spd);
    for d in 0..days {
        for &(seg, w) in &pattern {
            let v = match seg {
                0 if d == 0 => tmin[0],
                0 => tmax[d - 1] + (tmin[d] - tmax[d - 1]) * w,
                1 => tmin[d] + (tmax[d] - tmin[d]) * w,
                _ if d + 1 == days => tmax[d],
                _ => tmax[d] + (tmin[d + 1] - tmax[d]) * w,
            };
            values.push(v);
        }
    }
    Ok(TempSeries {
        step_minutes: config.step_minutes,
        values,
    })
}

/// Contiguous temperature intervals `[lo + k·width, lo + (k+1)·width)`,
/// `k = 0..K` with `K = (hi − lo) / width`. Values below `lo` are
/// bottom-coded into the first bin and values at or above `hi` top-coded
/// into the last.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    pub lo: f64,
    pub hi: f64,
    pub width: f64,
}

impl BinGrid {
    pub fn new(lo: f64, hi: f64, width: f64) -> Result<Self> {
        if !(width > 0.0) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::validation("bin width must be positive and edges finite"));
        }
        if hi <= lo {
            return Err(Error::validation(format!("bin upper edge {hi} must exceed lower edge {lo}")));
        }
        let k = (hi - lo) / width;
        if (k - k.round()).abs() > 1e-9 {
            return Err(Error::validation(format!("bin range {lo}..{hi} is not a multiple of width {width}")));
        }
        Ok(BinGrid { lo, hi, width })
    }

    /// Unit-width bins labelled `first..=last` (e.g. `0..=38` gives 39 bins).
    pub fn unit_bins(first: i32, last: i32) -> Result<Self> {
        Self::new(first as f64, last as f64 + 1.0, 1.0)
    }

    pub fn n_bins(&self) -> usize {
        ((self.hi - self.lo) / self.width).round() as usize
    }

    pub fn edge(&self, k: usize) -> f64 {
        self.lo + k as f64 * self.width
    }

    pub fn midpoint(&self, k: usize) -> f64 {
        self.lo + (k as f64 + 0.5) * self.width
    }

    pub fn midpoints(&self) -> Vec<f64> {
        (0..self.n_bins()).map(|k| self.midpoint(k)).collect()
    }

    /// Bin of temperature `v`, clamped into the coded ends.
    #[inline]
    pub fn index_of(&self, v: f64) -> usize {
        let k = ((v - self.lo) / self.width).floor();
        if k <= 0.0 {
            0
        } else {
            (k as usize).min(self.n_bins() - 1)
        }
    }
}

/// Time-in-bin vector (days) for one unit and period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureBins {
    pub unit_id: String,
    pub period: i32,
    pub z: Vec<f64>,
    pub season_length: f64,
}

/// Exposure per bin in days; sums to the series duration.
pub fn bin_exposure(series: &TempSeries, bins: &BinGrid) -> Result<Vec<f64>> {
    if series.values.is_empty() {
        return Err(Error::validation("empty temperature series"));
    }
    let mut counts = vec![0u64; bins.n_bins()];
    for &v in &series.values {
        counts[bins.index_of(v)] += 1;
    }
    let day_frac = series.step_minutes as f64 / MINUTES_PER_DAY as f64;
    Ok(counts.into_iter().map(|c| c as f64 * day_frac).collect())
}

/// Exposure from daily Tmin/Tmax in one go.
pub fn exposure_from_daily(
    unit_id: &str,
    period: i32,
    tmin: &[f64],
    tmax: &[f64],
    config: &SineConfig,
    bins: &BinGrid,
) -> Result<ExposureBins> {
    let s = sine_series(tmin, tmax, config)?;
    let z = bin_exposure(&s, bins)?;
    Ok(ExposureBins {
        unit_id: unit_id.to_string(),
        period,
        z,
        season_length: s.duration_days(),
    })
}

/// Seasonal exposure for every unit and year from unit-level daily series
/// whose labels are ISO dates. Days outside `months` (inclusive) are ignored;
/// within a season every day must be present and finite.
pub fn seasonal_exposure(
    tmax: &UnitSeries,
    tmin: &UnitSeries,
    months: (u32, u32),
    config: &SineConfig,
    bins: &BinGrid,
) -> Result<ExposureTable> {
    if tmax.unit_ids != tmin.unit_ids || tmax.labels != tmin.labels {
        return Err(Error::validation("tmax and tmin series must list the same units and dates in the same order"));
    }
    if !(1..=12).contains(&months.0) || !(1..=12).contains(&months.1) || months.0 > months.1 {
        return Err(Error::validation(format!("bad season months {:02}-{:02}", months.0, months.1)));
    }
    config.validate()?;
    let dates = tmax
        .labels
        .iter()
        .map(|l| {
            NaiveDate::parse_from_str(l.trim(), "%Y-%m-%d").map_err(|_| Error::parse(format!("series label `{l}` is not a YYYY-MM-DD date")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut seasons: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (t, d) in dates.iter().enumerate() {
        if (months.0..=months.1).contains(&d.month()) {
            seasons.entry(d.year()).or_default().push(t);
        }
    }
    if seasons.is_empty() {
        return Err(Error::validation("no dates fall inside the season"));
    }
    for (year, idx) in seasons.iter_mut() {
        idx.sort_by_key(|&t| dates[t]);
        let first = NaiveDate::from_ymd_opt(*year, months.0, 1).unwrap();
        let last = if months.1 == 12 {
            NaiveDate::from_ymd_opt(*year, 12, 31).unwrap()
        } else {
            NaiveDate::from_ymd_opt(*year, months.1 + 1, 1).unwrap().pred_opt().unwrap()
        };
        let want = (last - first).num_days() as usize + 1;
        if idx.len() != want || idx.windows(2).any(|w| dates[w[0]] == dates[w[1]]) {
            return Err(Error::validation(format!(
                "season {year}: expected {want} distinct days, found {}",
                idx.len()
            )));
        }
    }
    let jobs: Vec<(usize, i32, &Vec<usize>)> = (0..tmax.n_units())
        .flat_map(|u| seasons.iter().map(move |(y, idx)| (u, *y, idx)))
        .collect();
    let rows = par::map_range(jobs.len(), |j| {
        let (u, year, idx) = jobs[j];
        let pick = |s: &UnitSeries| -> Vec<f64> { idx.iter().map(|&t| s.get(u, t)).collect() };
        let (hi, lo) = (pick(tmax), pick(tmin));
        if let Some(k) = hi.iter().zip(&lo).position(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(Error::validation(format!(
                "unit `{}`: missing temperature on {}",
                tmax.unit_ids[u], dates[idx[k]]
            )));
        }
        exposure_from_daily(&tmax.unit_ids[u], year, &lo, &hi, config, bins)
    });
    Ok(ExposureTable {
        bins: *bins,
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}

fn check_thresholds(h_lo: f64, h_hi: f64) -> Result<()> {
    if h_lo.is_nan() || h_hi.is_nan() || h_lo >= h_hi {
        return Err(Error::validation(format!(
            "lower threshold {h_lo} must be below upper threshold {h_hi}"
        )));
    }
    Ok(())
}

#[inline]
fn thermal_rate(h: f64, h_lo: f64, h_hi: f64) -> f64 {
    h.clamp(h_lo, h_hi) - h_lo
}

/// Degree days between `h_lo` and `h_hi` (`h_hi` may be `+∞`), by the
/// trapezoid rule on the sampling grid; the final sample is held for one step.
pub fn degree_days_exact(series: &TempSeries, h_lo: f64, h_hi: f64) -> Result<f64> {
    check_thresholds(h_lo, h_hi)?;
    if series.values.is_empty() {
        return Ok(0.0);
    }
    let rates: Vec<f64> = series.values.iter().map(|&v| thermal_rate(v, h_lo, h_hi)).collect();
    let interior: f64 = rates.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
    let total = interior + rates[rates.len() - 1];
    Ok(total * series.step_minutes as f64 / MINUTES_PER_DAY as f64)
}

/// Degree days from exposure bins with each bin evaluated at its midpoint.
pub fn degree_days_from_bins(z: &[f64], bins: &BinGrid, h_lo: f64, h_hi: f64) -> Result<f64> {
    check_thresholds(h_lo, h_hi)?;
    if z.len() != bins.n_bins() {
        return Err(Error::Length {
            what: "exposure vector".into(),
            expected: bins.n_bins(),
            actual: z.len(),
        });
    }
    if h_lo < bins.lo || h_lo > bins.hi {
        return Err(Error::validation(format!(
            "lower threshold {h_lo} outside the bin range [{}, {}]",
            bins.lo, bins.hi
        )));
    }
    Ok(z
        .iter()
        .enumerate()
        .map(|(k, zk)| zk * thermal_rate(bins.midpoint(k), h_lo, h_hi))
        .sum())
}

/// Move exposure `shift` bins up (or down when negative), piling what falls
/// off either end into the coded end bins. Total exposure is unchanged.
pub fn shift_exposure(z: &[f64], shift: i64) -> Vec<f64> {
    let k_n = z.len() as i64;
    let mut out = vec![0.0; z.len()];
    for (k, &v) in z.iter().enumerate() {
        let j = (k as i64 + shift).clamp(0, k_n - 1);
        out[j as usize] += v;
    }
    out
}

/// Exposure table with its bin definition.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureTable {
    pub bins: BinGrid,
    pub rows: Vec<ExposureBins>,
}

pub fn write_bins_csv(table: &ExposureTable, path: impl AsRef<Path>) -> Result<()> {
    let k_n = table.bins.n_bins();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["unit_id".to_string(), "year".to_string()];
    header.extend((0..k_n).map(|k| format!("z_{k}")));
    w.write_record(&header)?;
    for r in &table.rows {
        if r.z.len() != k_n {
            return Err(Error::Length {
                what: format!("exposure of unit `{}`", r.unit_id),
                expected: k_n,
                actual: r.z.len(),
            });
        }
        let mut row = vec![r.unit_id.clone(), r.period.to_string()];
        row.extend(r.z.iter().map(|&v| fmt_f64(v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Read `unit_id,year,z_0,...,z_{K-1}` for the given bin definition.
pub fn read_bins_csv(path: impl AsRef<Path>, bins: BinGrid) -> Result<ExposureTable> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let k_n = bins.n_bins();
    let mut expected = vec!["unit_id".to_string(), "year".to_string()];
    expected.extend((0..k_n).map(|k| format!("z_{k}")));
    let expected_ref: Vec<&str> = expected.iter().map(String::as_str).collect();
    expect_header(rdr.headers()?, &expected_ref, path)?;
    let mut rows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let unit_id = rec.get(0).unwrap_or("").trim().to_string();
        let period: i32 = rec
            .get(1)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::parse(format!("unit `{unit_id}`: bad year")))?;
        if !seen.insert((unit_id.clone(), period)) {
            return Err(Error::validation(format!("duplicate exposure row (unit `{unit_id}`, year {period})")));
        }
        let z = (0..k_n)
            .map(|k| parse_f64(rec.get(k + 2).unwrap_or(""), "exposure"))
            .collect::<Result<Vec<f64>>>()?;
        if z.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::validation(format!("unit `{unit_id}` year {period}: negative or missing exposure")));
        }
        let season_length = z.iter().sum();
        rows.push(ExposureBins {
            unit_id,
            period,
            z,
            season_length,
        });
    }
    Ok(ExposureTable { bins, rows })
}
