//! Station-to-point and station-to-grid interpolation, and the two monthly
//! infusion steps that pull interpolated daily layers onto a reference
//! monthly climatology.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data::{Grid, GridHeader, GridStack, StationTable, Variable};
use crate::error::{Error, Result};
use crate::geo::haversine_km;
use crate::par;

/// Great-circle length of one degree of arc, km.
pub const KM_PER_DEGREE: f64 = 2.0 * std::f64::consts::PI * crate::geo::EARTH_RADIUS_KM / 360.0;

/// Targets closer than this to a station take its value verbatim.
const COINCIDENT_KM: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Nearest,
    KnnIdw,
    RadiusIdw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpSpec {
    pub method: Method,
    pub k: usize,
    /// Search radius in degrees of arc.
    pub radius: f64,
    pub power: f64,
}

impl Default for InterpSpec {
    fn default() -> Self {
        InterpSpec {
            method: Method::KnnIdw,
            k: 5,
            radius: 1.0,
            power: 1.0,
        }
    }
}

impl InterpSpec {
    pub fn nearest() -> Self {
        InterpSpec {
            method: Method::Nearest,
            ..Default::default()
        }
    }

    pub fn knn(k: usize, power: f64) -> Self {
        InterpSpec {
            method: Method::KnnIdw,
            k,
            power,
            ..Default::default()
        }
    }

    pub fn radius(radius_deg: f64, power: f64) -> Self {
        InterpSpec {
            method: Method::RadiusIdw,
            radius: radius_deg,
            power,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::validation("k must be at least 1"));
        }
        if !(self.radius > 0.0) {
            return Err(Error::validation("radius must be positive"));
        }
        if !(self.power > 0.0) || !self.power.is_finite() {
            return Err(Error::validation("power must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointEstimates {
    pub values: Vec<Option<f64>>,
    /// Targets left without a value (radius search found nothing).
    pub missing: usize,
}

#[derive(Debug, Clone)]
struct Candidate<'a> {
    id: &'a str,
    lat: f64,
    lon: f64,
    value: f64,
}

/// Inverse-distance weighted mean of `(distance, value)` pairs with
/// weights `1 / d^power`, normalized to one. Distances must be positive.
pub fn idw(pairs: &[(f64, f64)], power: f64) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let (mut num, mut den) = (0.0, 0.0);
    for &(d, v) in pairs {
        let w = d.powf(-power);
        num += w * v;
        den += w;
    }
    Some(num / den)
}

fn estimate(cands: &[Candidate<'_>], lat: f64, lon: f64, spec: &InterpSpec) -> Option<f64> {
    // (distance, id, value), ordered by distance then id
    let mut dist: Vec<(f64, &str, f64)> = cands
        .iter()
        .map(|c| (haversine_km(lat, lon, c.lat, c.lon), c.id, c.value))
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let first = dist.first()?;
    if first.0 < COINCIDENT_KM {
        return Some(first.2);
    }
    match spec.method {
        Method::Nearest => Some(first.2),
        Method::KnnIdw => {
            let pairs: Vec<(f64, f64)> = dist.iter().take(spec.k).map(|p| (p.0, p.2)).collect();
            idw(&pairs, spec.power)
        }
        Method::RadiusIdw => {
            let r_km = spec.radius * KM_PER_DEGREE;
            let pairs: Vec<(f64, f64)> = dist.iter().take_while(|p| p.0 <= r_km).map(|p| (p.0, p.2)).collect();
            idw(&pairs, spec.power)
        }
    }
}

fn candidates(stations: &StationTable, date: NaiveDate, variable: Variable) -> Result<Vec<Candidate<'_>>> {
    let cands: Vec<Candidate<'_>> = stations
        .select(date, variable)
        .map(|r| Candidate {
            id: &r.station_id,
            lat: r.lat,
            lon: r.lon,
            value: r.value,
        })
        .collect();
    if cands.is_empty() {
        return Err(Error::validation(format!("no station observations of {variable} on {date}")));
    }
    Ok(cands)
}

/// Interpolate station values of `variable` on `date` at `(lat, lon)` targets.
pub fn interpolate_points(
    stations: &StationTable,
    targets: &[(f64, f64)],
    date: NaiveDate,
    variable: Variable,
    spec: &InterpSpec,
) -> Result<PointEstimates> {
    spec.validate()?;
    let cands = candidates(stations, date, variable)?;
    let values = par::map_range(targets.len(), |i| estimate(&cands, targets[i].0, targets[i].1, spec));
    let missing = values.iter().filter(|v| v.is_none()).count();
    Ok(PointEstimates { values, missing })
}

/// Interpolate at every cell center of `header`; cells without an estimate get nodata.
pub fn interpolate_to_grid(
    stations: &StationTable,
    header: &GridHeader,
    date: NaiveDate,
    variable: Variable,
    spec: &InterpSpec,
) -> Result<(Grid, usize)> {
    let targets: Vec<(f64, f64)> = (0..header.n_cells())
        .map(|i| {
            let (lon, lat) = header.cell_center_of(i);
            (lat, lon)
        })
        .collect();
    let est = interpolate_points(stations, &targets, date, variable, spec)?;
    let values = est.values.iter().map(|v| v.unwrap_or(header.nodata)).collect();
    Ok((Grid::new(*header, values)?, est.missing))
}

fn check_month(stack: &GridStack) -> Result<()> {
    let month = |l: &str| l.get(..7).map(str::to_string);
    let first = month(&stack.labels[0]);
    if first.is_none() || stack.labels.iter().any(|l| month(l) != first) {
        return Err(Error::validation(format!(
            "daily layers must all belong to one calendar month (labels `{}`..`{}`)",
            stack.labels[0],
            stack.labels[stack.labels.len() - 1]
        )));
    }
    Ok(())
}

fn check_reference(stack: &GridStack, reference: &Grid) -> Result<()> {
    if !stack.header.same_geometry(&reference.header) {
        return Err(Error::shape("daily stack and reference grid have different headers"));
    }
    Ok(())
}

/// Replace each cell's monthly mean with the reference value while keeping
/// the daily anomalies: `out_d = daily_d - mean(daily) + reference`.
pub fn anomaly_infuse_temperature(daily: &GridStack, reference: &Grid) -> Result<GridStack> {
    check_month(daily)?;
    check_reference(daily, reference)?;
    let n = daily.header.n_cells();
    let nodata = daily.header.nodata;
    let mut layers = vec![vec![nodata; n]; daily.n_layers()];
    for c in 0..n {
        if reference.is_nodata(c) {
            continue;
        }
        let valid: Vec<usize> = (0..daily.n_layers()).filter(|&t| daily.layers[t][c] != nodata).collect();
        if valid.is_empty() {
            continue;
        }
        let mean = valid.iter().map(|&t| daily.layers[t][c]).sum::<f64>() / valid.len() as f64;
        let shift = reference.values[c] - mean;
        for &t in &valid {
            layers[t][c] = daily.layers[t][c] + shift;
        }
    }
    GridStack::new(daily.header, layers, daily.labels.clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioInfusion {
    pub stack: GridStack,
    /// Cells whose daily total was zero; their output is zero on every day.
    pub zero_total_cells: Vec<usize>,
}

/// Rescale daily precipitation so each cell's monthly total equals the
/// reference total. Cells with no daily rain stay dry.
pub fn ratio_infuse_precipitation(daily: &GridStack, reference_total: &Grid) -> Result<RatioInfusion> {
    check_month(daily)?;
    check_reference(daily, reference_total)?;
    let nodata = daily.header.nodata;
    for (t, layer) in daily.layers.iter().enumerate() {
        if let Some(c) = layer.iter().position(|&v| v != nodata && v < 0.0) {
            return Err(Error::validation(format!(
                "negative precipitation in layer `{}` cell {c}",
                daily.labels[t]
            )));
        }
    }
    let n = daily.header.n_cells();
    let mut layers = vec![vec![nodata; n]; daily.n_layers()];
    let mut zero_total_cells = Vec::new();
    for c in 0..n {
        if reference_total.is_nodata(c) {
            continue;
        }
        let valid: Vec<usize> = (0..daily.n_layers()).filter(|&t| daily.layers[t][c] != nodata).collect();
        if valid.is_empty() {
            continue;
        }
        let total: f64 = valid.iter().map(|&t| daily.layers[t][c]).sum();
        if total > 0.0 {
            let scale = reference_total.values[c] / total;
            for &t in &valid {
                layers[t][c] = daily.layers[t][c] * scale;
            }
        } else {
            zero_total_cells.push(c);
            for &t in &valid {
                layers[t][c] = 0.0;
            }
        }
    }
    Ok(RatioInfusion {
        stack: GridStack::new(daily.header, layers, daily.labels.clone())?,
        zero_total_cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::StationRecord;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn station(id: &str, lat: f64, lon: f64, value: f64) -> StationRecord {
        StationRecord {
            station_id: id.into(),
            lat,
            lon,
            date: d("2020-08-01"),
            variable: Variable::Tmax,
            value,
        }
    }

    #[test]
    fn coincident_target_returns_station_value() {
        let st = StationTable::new(vec![station("a", 40.0, -90.0, 31.5), station("b", 41.0, -91.0, 20.0)]).unwrap();
        for spec in [InterpSpec::nearest(), InterpSpec::knn(5, 1.0), InterpSpec::radius(1.0, 2.0)] {
            let est = interpolate_points(&st, &[(40.0, -90.0)], d("2020-08-01"), Variable::Tmax, &spec).unwrap();
            assert_eq!(est.values[0], Some(31.5));
        }
    }

    #[test]
    fn equidistant_pair_averages() {
        let st = StationTable::new(vec![station("a", 40.0, -90.5, 10.0), station("b", 40.0, -89.5, 20.0)]).unwrap();
        let est = interpolate_points(&st, &[(40.0, -90.0)], d("2020-08-01"), Variable::Tmax, &InterpSpec::knn(2, 1.0)).unwrap();
        assert!((est.values[0].unwrap() - 15.0).abs() < 1e-9);
    }

    #[test]
    fn idw_arithmetic() {
        // weights 1, 1/2, 1/4 -> (0 + 3 + 3) / 1.75
        let v = idw(&[(1.0, 0.0), (2.0, 6.0), (4.0, 12.0)], 1.0).unwrap();
        assert!((v - 6.0 / 1.75).abs() < 1e-12);
        assert!((v - 3.428_571_428_571_428_5).abs() < 1e-12);
    }

    #[test]
    fn nearest_ties_break_by_station_id() {
        let st = StationTable::new(vec![station("z", 40.0, -89.0, 1.0), station("m", 40.0, -91.0, 2.0)]).unwrap();
        let est = interpolate_points(&st, &[(40.0, -90.0)], d("2020-08-01"), Variable::Tmax, &InterpSpec::nearest()).unwrap();
        assert_eq!(est.values[0], Some(2.0));
    }

    #[test]
    fn radius_without_stations_is_missing_not_error() {
        let st = StationTable::new(vec![station("a", 40.0, -90.0, 1.0)]).unwrap();
        let est = interpolate_points(&st, &[(45.0, -90.0), (40.2, -90.0)], d("2020-08-01"), Variable::Tmax, &InterpSpec::radius(1.0, 1.0)).unwrap();
        assert_eq!(est.values[0], None);
        assert_eq!(est.values[1], Some(1.0));
        assert_eq!(est.missing, 1);
    }

    #[test]
    fn empty_station_set_errors() {
        let st = StationTable::new(vec![station("a", 40.0, -90.0, 1.0)]).unwrap();
        assert!(interpolate_points(&st, &[(40.0, -90.0)], d("2020-08-02"), Variable::Tmax, &InterpSpec::nearest()).is_err());
        assert!(interpolate_points(&st, &[(40.0, -90.0)], d("2020-08-01"), Variable::Tmin, &InterpSpec::nearest()).is_err());
    }

    #[test]
    fn one_degree_is_about_111_km() {
        assert!((KM_PER_DEGREE - 111.195).abs() < 1e-3);
    }

    fn stack(vals: Vec<Vec<f64>>) -> GridStack {
        let h = GridHeader::new(2, 1, 0.0, 0.0, 1.0, -9999.0).unwrap();
        let labels = (1..=vals.len()).map(|i| format!("2020-08-{i:02}")).collect();
        GridStack::new(h, vals, labels).unwrap()
    }

    #[test]
    fn anomaly_constant_layers() {
        let s = stack(vec![vec![20.0, 20.0]; 3]);
        let r = Grid::new(s.header, vec![25.0, 25.0]).unwrap();
        let out = anomaly_infuse_temperature(&s, &r).unwrap();
        assert!(out.layers.iter().flatten().all(|&v| v == 25.0));
    }

    #[test]
    fn anomaly_identity_when_means_match() {
        let s = stack(vec![vec![1.0, 4.0], vec![3.0, 6.0]]);
        let r = Grid::new(s.header, vec![2.0, 5.0]).unwrap();
        let out = anomaly_infuse_temperature(&s, &r).unwrap();
        assert_eq!(out.layers, s.layers);
    }

    #[test]
    fn anomaly_rejects_mixed_months_and_headers() {
        let h = GridHeader::new(2, 1, 0.0, 0.0, 1.0, -9999.0).unwrap();
        let s = GridStack::new(h, vec![vec![1.0, 1.0]; 2], vec!["2020-07-31".into(), "2020-08-01".into()]).unwrap();
        let r = Grid::new(h, vec![0.0, 0.0]).unwrap();
        assert!(anomaly_infuse_temperature(&s, &r).is_err());
        let s = stack(vec![vec![1.0, 1.0]]);
        let other = Grid::new(GridHeader::new(1, 2, 0.0, 0.0, 1.0, -9999.0).unwrap(), vec![0.0, 0.0]).unwrap();
        assert!(matches!(anomaly_infuse_temperature(&s, &other), Err(Error::Shape(_))));
    }

    #[test]
    fn ratio_no_ghost_rain() {
        let s = stack(vec![vec![0.0, 1.0], vec![0.0, 3.0]]);
        let r = Grid::new(s.header, vec![30.0, 8.0]).unwrap();
        let out = ratio_infuse_precipitation(&s, &r).unwrap();
        assert_eq!(out.zero_total_cells, vec![0]);
        assert_eq!(out.stack.layers[0][0], 0.0);
        assert_eq!(out.stack.layers[1][0], 0.0);
        assert_eq!(out.stack.layers[0][1], 2.0);
        assert_eq!(out.stack.layers[1][1], 6.0);
    }

    #[test]
    fn ratio_identity_and_negative_input() {
        let s = stack(vec![vec![1.0, 2.0], vec![3.0, 0.0]]);
        let r = Grid::new(s.header, vec![4.0, 2.0]).unwrap();
        assert_eq!(ratio_infuse_precipitation(&s, &r).unwrap().stack.layers, s.layers);
        let neg = stack(vec![vec![-1.0, 2.0]]);
        assert!(ratio_infuse_precipitation(&neg, &r).is_err());
    }
}
