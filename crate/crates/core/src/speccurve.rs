//! Specification curves: estimate a common +2 °C impact across a grid of
//! modeling choices and chart the results.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{expect_header, fmt_f64, parse_f64, PanelTable};
use crate::error::{Error, Result};
use crate::inference::SeConfig;
use crate::par;
use crate::regress::{build_spec_polynomial, fit_within_se, warming_impact, Trend};

pub const IMPACT_DELTA: f64 = 2.0;

// ---------------------------------------------------------------------------
// Monthly weather
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthlyRow {
    pub unit_id: String,
    pub year: i32,
    pub month: u32,
    pub tmax: f64,
    pub tmin: f64,
    pub tmean: f64,
    /// Monthly total.
    pub ppt: f64,
}

const MONTHLY_HEADER: [&str; 7] = ["unit_id", "year", "month", "tmax", "tmin", "tmean", "ppt"];

pub fn write_monthly_csv(rows: &[MonthlyRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MONTHLY_HEADER)?;
    for r in rows {
        w.write_record([
            r.unit_id.clone(),
            r.year.to_string(),
            r.month.to_string(),
            fmt_f64(r.tmax),
            fmt_f64(r.tmin),
            fmt_f64(r.tmean),
            fmt_f64(r.ppt),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_monthly_csv(path: impl AsRef<Path>) -> Result<Vec<MonthlyRow>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    expect_header(rdr.headers()?, &MONTHLY_HEADER, path)?;
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let field = |k: usize| rec.get(k).unwrap_or("").trim();
        let year: i32 = field(1)
            .parse()
            .map_err(|_| Error::parse(format!("{}:{line}: bad year `{}`", path.display(), field(1))))?;
        let month: u32 = field(2)
            .parse()
            .ok()
            .filter(|m| (1..=12).contains(m))
            .ok_or_else(|| Error::parse(format!("{}:{line}: bad month `{}`", path.display(), field(2))))?;
        let row = MonthlyRow {
            unit_id: field(0).to_string(),
            year,
            month,
            tmax: parse_f64(field(3), "tmax")?,
            tmin: parse_f64(field(4), "tmin")?,
            tmean: parse_f64(field(5), "tmean")?,
            ppt: parse_f64(field(6), "ppt")?,
        };
        if !seen.insert((row.unit_id.clone(), year, month)) {
            return Err(Error::validation(format!(
                "duplicate monthly weather for unit `{}` {year}-{month:02}",
                row.unit_id
            )));
        }
        out.push(row);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Grid axes
// ---------------------------------------------------------------------------

macro_rules! axis {
    ($name:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name { $($var),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$var => $s),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($s => Ok($name::$var),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{other}` (expected one of: {})",
                        stringify!($name),
                        [$($s),+].join(", ")
                    ))),
                }
            }
        }
    };
}

axis!(TempVar { Tmax => "tmax", Tmean => "tmean", Tmin => "tmin" });
axis!(Precip { Include => "precip", Exclude => "no_precip" });
axis!(Form { Quadratic => "quadratic", Cubic => "cubic" });
axis!(Season { MarAug => "mar_aug", AprSep => "apr_sep", Annual => "annual" });
axis!(TrendAxis { Pooled => "pooled", ByState => "by_state" });

impl Season {
    pub fn months(self) -> std::ops::RangeInclusive<u32> {
        match self {
            Season::MarAug => 3..=8,
            Season::AprSep => 4..=9,
            Season::Annual => 1..=12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpecDescriptor {
    pub temp: TempVar,
    pub precip: Precip,
    pub form: Form,
    pub season: Season,
    pub trend: TrendAxis,
}

impl fmt::Display for SpecDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{}", self.temp, self.precip, self.form, self.season, self.trend)
    }
}

/// `temp,precip|no_precip,form,season,trend`, e.g. `tmean,precip,quadratic,mar_aug,pooled`.
impl FromStr for SpecDescriptor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::Config(format!(
                "specification `{s}` needs 5 comma-separated fields (temp,precip,form,season,trend)"
            )));
        }
        Ok(SpecDescriptor {
            temp: parts[0].parse()?,
            precip: parts[1].parse()?,
            form: parts[2].parse()?,
            season: parts[3].parse()?,
            trend: parts[4].parse()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecGrid {
    pub temps: Vec<TempVar>,
    pub precips: Vec<Precip>,
    pub forms: Vec<Form>,
    pub seasons: Vec<Season>,
    pub trends: Vec<TrendAxis>,
    pub baseline: SpecDescriptor,
}

impl SpecGrid {
    /// Every axis value.
    pub fn full(baseline: SpecDescriptor) -> Self {
        SpecGrid {
            temps: TempVar::ALL.to_vec(),
            precips: Precip::ALL.to_vec(),
            forms: Form::ALL.to_vec(),
            seasons: Season::ALL.to_vec(),
            trends: TrendAxis::ALL.to_vec(),
            baseline,
        }
    }

    pub fn default_baseline() -> SpecDescriptor {
        SpecDescriptor {
            temp: TempVar::Tmean,
            precip: Precip::Include,
            form: Form::Quadratic,
            season: Season::MarAug,
            trend: TrendAxis::Pooled,
        }
    }

    /// Cartesian product in axis order; repeated axis values collapse.
    pub fn specs(&self) -> Result<Vec<SpecDescriptor>> {
        fn uniq<T: Copy + PartialEq>(v: &[T]) -> Vec<T> {
            let mut out: Vec<T> = Vec::new();
            for x in v {
                if !out.contains(x) {
                    out.push(*x);
                }
            }
            out
        }
        let (t, p, f, s, r) = (
            uniq(&self.temps),
            uniq(&self.precips),
            uniq(&self.forms),
            uniq(&self.seasons),
            uniq(&self.trends),
        );
        let mut out = Vec::with_capacity(t.len() * p.len() * f.len() * s.len() * r.len());
        for &temp in &t {
            for &precip in &p {
                for &form in &f {
                    for &season in &s {
                        for &trend in &r {
                            out.push(SpecDescriptor {
                                temp,
                                precip,
                                form,
                                season,
                                trend,
                            });
                        }
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Config("specification grid has an empty axis".into()));
        }
        if !out.contains(&self.baseline) {
            return Err(Error::Config(format!("baseline `{}` is not in the grid", self.baseline)));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecResult {
    pub spec: SpecDescriptor,
    pub baseline: bool,
    pub estimate: f64,
    pub se: f64,
    pub adj_r2: f64,
    pub n_obs: usize,
    /// 1-based position after sorting (0 before sorting).
    pub rank: usize,
    pub error: Option<String>,
}

impl SpecResult {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn ci(&self) -> (f64, f64) {
        (self.estimate - 1.96 * self.se, self.estimate + 1.96 * self.se)
    }
}

/// Seasonal weather per `(unit, year)`: `[tmax, tmin, tmean]` means and summed ppt.
type Seasonal = HashMap<(String, i32), ([f64; 3], f64)>;

fn seasonal(monthly: &[MonthlyRow], season: Season) -> Seasonal {
    let mut acc: HashMap<(String, i32), ([f64; 3], f64, BTreeMap<u32, ()>)> = HashMap::new();
    for r in monthly.iter().filter(|r| season.months().contains(&r.month)) {
        let e = acc.entry((r.unit_id.clone(), r.year)).or_insert(([0.0; 3], 0.0, BTreeMap::new()));
        e.0[0] += r.tmax;
        e.0[1] += r.tmin;
        e.0[2] += r.tmean;
        e.1 += r.ppt;
        e.2.insert(r.month, ());
    }
    let need = season.months().count();
    acc.into_iter()
        .filter(|(_, v)| v.2.len() == need)
        .map(|(k, (t, p, _))| (k, (t.map(|x| x / need as f64), p)))
        .collect()
}

/// Attach columns `T` and `P` for one season and temperature variable.
fn spec_panel(panel: &PanelTable, s: &Seasonal, spec: &SpecDescriptor) -> Result<PanelTable> {
    let idx = match spec.temp {
        TempVar::Tmax => 0,
        TempVar::Tmin => 1,
        TempVar::Tmean => 2,
    };
    let mut t = Vec::with_capacity(panel.n_rows());
    let mut p = Vec::with_capacity(panel.n_rows());
    for r in 0..panel.n_rows() {
        let key = (panel.unit_ids[r].clone(), panel.years[r]);
        let (tv, pv) = s.get(&key).ok_or_else(|| {
            Error::validation(format!(
                "monthly weather for unit `{}` year {} does not cover season {}",
                key.0, key.1, spec.season
            ))
        })?;
        t.push(tv[idx]);
        p.push(*pv);
    }
    let mut out = panel.clone();
    out.set_real("T", t)?;
    out.set_real("P", p)?;
    Ok(out)
}

/// Estimate every specification of `grid`. Individual failures are recorded
/// in the result; a failing baseline is an error.
pub fn run_grid(
    panel: &PanelTable,
    monthly: &[MonthlyRow],
    grid: &SpecGrid,
    se: &SeConfig,
    region_col: &str,
    centroids: Option<&HashMap<String, (f64, f64)>>,
) -> Result<Vec<SpecResult>> {
    let specs = grid.specs()?;
    let mut seasons: BTreeMap<Season, Seasonal> = BTreeMap::new();
    for s in &specs {
        seasons.entry(s.season).or_insert_with(|| seasonal(monthly, s.season));
    }
    // missing weather is an input error, not a per-spec failure
    for (season, s) in &seasons {
        for r in 0..panel.n_rows() {
            if !s.contains_key(&(panel.unit_ids[r].clone(), panel.years[r])) {
                return Err(Error::validation(format!(
                    "monthly weather for unit `{}` year {} does not cover season {season}",
                    panel.unit_ids[r], panel.years[r]
                )));
            }
        }
    }
    let results: Vec<Result<SpecResult>> = par::map_range(specs.len(), |i| {
        let spec = specs[i];
        let base = SpecResult {
            spec,
            baseline: spec == grid.baseline,
            estimate: f64::NAN,
            se: f64::NAN,
            adj_r2: f64::NAN,
            n_obs: 0,
            rank: 0,
            error: None,
        };
        let attempt = || -> Result<SpecResult> {
            let p = spec_panel(panel, &seasons[&spec.season], &spec)?;
            let degree = match spec.form {
                Form::Quadratic => 2,
                Form::Cubic => 3,
            };
            let trend = match spec.trend {
                TrendAxis::Pooled => Trend::PooledQuadratic,
                TrendAxis::ByState => Trend::ByRegionQuadratic(region_col.to_string()),
            };
            let precip = (spec.precip == Precip::Include).then_some("P");
            let (q, model) = build_spec_polynomial(&p, "T", precip, degree, trend)?;
            let fit = fit_within_se(&q, &model, se, centroids)?;
            let imp = warming_impact(&fit, &model, &q, IMPACT_DELTA)?;
            Ok(SpecResult {
                estimate: imp.estimate,
                se: imp.se,
                adj_r2: fit.adj_r2,
                n_obs: fit.n_obs,
                ..base.clone()
            })
        };
        match attempt() {
            Ok(r) => Ok(r),
            Err(e) if spec == grid.baseline => Err(Error::validation(format!("baseline specification `{spec}` failed: {e}"))),
            Err(e) => Ok(SpecResult {
                error: Some(e.to_string()),
                ..base
            }),
        }
    });
    results.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortKey {
    AdjR2,
    Estimate,
    InputOrder,
}

impl FromStr for SortKey {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adj_r2" => Ok(SortKey::AdjR2),
            "estimate" => Ok(SortKey::Estimate),
            "input_order" => Ok(SortKey::InputOrder),
            _ => Err(Error::Config(format!("unknown sort key `{s}` (adj_r2, estimate, input_order)"))),
        }
    }
}

/// Sort ascending by `key` (failed specs last), break ties by the descriptor
/// string, and assign ranks `1..=n`.
pub fn sort_results(mut results: Vec<SpecResult>, key: SortKey) -> Vec<SpecResult> {
    if key != SortKey::InputOrder {
        let value = |r: &SpecResult| match key {
            SortKey::AdjR2 => r.adj_r2,
            SortKey::Estimate => r.estimate,
            SortKey::InputOrder => unreachable!(),
        };
        results.sort_by(|a, b| {
            let (va, vb) = (value(a), value(b));
            let ord = match (va.is_nan(), vb.is_nan()) {
                (false, false) => va.total_cmp(&vb),
                (a_nan, b_nan) => a_nan.cmp(&b_nan),
            };
            ord.then_with(|| a.spec.to_string().cmp(&b.spec.to_string()))
        });
    }
    for (i, r) in results.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    results
}

const RESULT_HEADER: [&str; 14] = [
    "rank", "temp", "precip", "form", "season", "trend", "baseline", "estimate", "se", "ci_lo", "ci_hi", "adj_r2",
    "n_obs", "error",
];

pub fn write_results_csv(results: &[SpecResult], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULT_HEADER)?;
    for r in results {
        let (lo, hi) = r.ci();
        w.write_record([
            r.rank.to_string(),
            r.spec.temp.to_string(),
            r.spec.precip.to_string(),
            r.spec.form.to_string(),
            r.spec.season.to_string(),
            r.spec.trend.to_string(),
            (r.baseline as u8).to_string(),
            fmt_f64(r.estimate),
            fmt_f64(r.se),
            fmt_f64(lo),
            fmt_f64(hi),
            fmt_f64(r.adj_r2),
            r.n_obs.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: impl AsRef<Path>) -> Result<Vec<SpecResult>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    expect_header(rdr.headers()?, &RESULT_HEADER, path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |k: usize| rec.get(k).unwrap_or("");
        let int = |k: usize| -> Result<usize> { f(k).parse().map_err(|_| Error::parse(format!("bad integer `{}`", f(k)))) };
        let spec: SpecDescriptor = format!("{},{},{},{},{}", f(1), f(2), f(3), f(4), f(5)).parse()?;
        out.push(SpecResult {
            spec,
            rank: int(0)?,
            baseline: f(6) == "1",
            estimate: parse_f64(f(7), "estimate")?,
            se: parse_f64(f(8), "se")?,
            adj_r2: parse_f64(f(11), "adj_r2")?,
            n_obs: int(12)?,
            error: Some(f(13).to_string()).filter(|s| !s.is_empty()),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Chart
// ---------------------------------------------------------------------------

const BASE_COLOR: &str = "#d62728";
const POINT_COLOR: &str = "#1f1f1f";

/// Upper panel: estimates with 95% intervals in the given order, baseline
/// in red. Lower panel: one row per axis value, filled where the
/// specification uses it.
pub fn render_svg(results: &[SpecResult]) -> Result<String> {
    if results.is_empty() {
        return Err(Error::validation("no specification results to chart"));
    }
    let n = results.len();
    let col_w = 12.0;
    let left = 110.0;
    let top = 30.0;
    let plot_h = 260.0;
    let row_h = 12.0;
    let flag_rows: Vec<(&str, Box<dyn Fn(&SpecDescriptor) -> bool>)> = {
        let mut v: Vec<(&str, Box<dyn Fn(&SpecDescriptor) -> bool>)> = Vec::new();
        for &t in TempVar::ALL {
            v.push((t.as_str(), Box::new(move |s: &SpecDescriptor| s.temp == t)));
        }
        for &p in Precip::ALL {
            v.push((p.as_str(), Box::new(move |s: &SpecDescriptor| s.precip == p)));
        }
        for &f in Form::ALL {
            v.push((f.as_str(), Box::new(move |s: &SpecDescriptor| s.form == f)));
        }
        for &se in Season::ALL {
            v.push((se.as_str(), Box::new(move |s: &SpecDescriptor| s.season == se)));
        }
        for &tr in TrendAxis::ALL {
            v.push((tr.as_str(), Box::new(move |s: &SpecDescriptor| s.trend == tr)));
        }
        v
    };
    let width = left + col_w * n as f64 + 20.0;
    let matrix_top = top + plot_h + 20.0;
    let height = matrix_top + row_h * flag_rows.len() as f64 + 20.0;

    let finite: Vec<&SpecResult> = results.iter().filter(|r| r.ok() && r.estimate.is_finite()).collect();
    let (mut lo, mut hi) = finite.iter().fold((0.0f64, 0.0f64), |(lo, hi), r| {
        let (a, b) = r.ci();
        (lo.min(if a.is_finite() { a } else { r.estimate }), hi.max(if b.is_finite() { b } else { r.estimate }))
    });
    if hi - lo < 1e-12 {
        lo -= 1.0;
        hi += 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let ypos = |v: f64| top + plot_h * (hi - v) / (hi - lo);
    let xpos = |i: usize| left + col_w * (i as f64 + 0.5);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.1}" height="{height:.1}" viewBox="0 0 {width:.1} {height:.1}" font-family="sans-serif" font-size="9">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{width:.1}" height="{height:.1}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{left:.1}" y="16" font-size="11">Impact of +2 °C (log points), {n} specifications</text>"#
    );
    // axis and ticks
    let _ = writeln!(
        s,
        r#"<line x1="{left:.1}" y1="{top:.1}" x2="{left:.1}" y2="{:.1}" stroke="black"/>"#,
        top + plot_h
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = ypos(v);
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{y:.2}" x2="{left:.1}" y2="{y:.2}" stroke="black"/><text x="{:.1}" y="{:.2}" text-anchor="end">{v:.3}</text>"#,
            left - 4.0,
            left - 6.0,
            y + 3.0
        );
    }
    if lo < 0.0 && hi > 0.0 {
        let y0 = ypos(0.0);
        let _ = writeln!(
            s,
            r##"<line x1="{left:.1}" y1="{y0:.2}" x2="{:.1}" y2="{y0:.2}" stroke="#999999" stroke-dasharray="3,3"/>"##,
            left + col_w * n as f64
        );
    }
    for (i, r) in results.iter().enumerate() {
        if !(r.ok() && r.estimate.is_finite()) {
            continue;
        }
        let color = if r.baseline { BASE_COLOR } else { POINT_COLOR };
        let x = xpos(i);
        let (a, b) = r.ci();
        if a.is_finite() && b.is_finite() {
            let _ = writeln!(
                s,
                r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{color}"/>"#,
                ypos(a),
                ypos(b)
            );
        }
        let _ = writeln!(
            s,
            r#"<circle cx="{x:.2}" cy="{:.2}" r="3" fill="{color}"><title>{}</title></circle>"#,
            ypos(r.estimate),
            r.spec
        );
    }
    // flag matrix
    for (k, (label, pred)) in flag_rows.iter().enumerate() {
        let y = matrix_top + row_h * (k as f64 + 0.5);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.2}" text-anchor="end">{label}</text>"#, left - 6.0, y + 3.0);
        for (i, r) in results.iter().enumerate() {
            let x = xpos(i);
            let color = if r.baseline { BASE_COLOR } else { POINT_COLOR };
            if pred(&r.spec) {
                let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#);
            } else {
                let _ = writeln!(
                    s,
                    r##"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="none" stroke="#bbbbbb"/>"##
                );
            }
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Sort, then write the CSV and SVG.
pub fn render_chart(results: Vec<SpecResult>, key: SortKey, out_svg: impl AsRef<Path>, out_csv: impl AsRef<Path>) -> Result<Vec<SpecResult>> {
    let sorted = sort_results(results, key);
    let svg = render_svg(&sorted)?;
    write_results_csv(&sorted, out_csv)?;
    std::fs::write(out_svg, svg)?;
    Ok(sorted)
}
