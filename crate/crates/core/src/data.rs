//! Domain types shared across the pipeline and their text formats.
//!
//! Grids are ESRI ASCII rasters (row-major, first row northernmost). Multi-layer
//! stacks are a manifest CSV `layer_index,label,path` pointing at one `.asc`
//! per layer. Every real number written by this crate uses 17 significant
//! digits so that reading a file back reproduces the same `f64` bits.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Format with 17 significant digits (exact round-trip for `f64`).
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        return "NA".to_string();
    }
    format!("{:.16e}", v)
}

pub fn parse_f64(s: &str, what: &str) -> Result<f64> {
    let t = s.trim();
    if t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") || t.is_empty() {
        return Ok(f64::NAN);
    }
    t.parse::<f64>()
        .map_err(|_| Error::parse(format!("cannot parse `{t}` as a number ({what})")))
}

fn parse_finite(s: &str, what: &str) -> Result<f64> {
    let v = parse_f64(s, what)?;
    if !v.is_finite() {
        return Err(Error::validation(format!("{what}: non-finite value `{}`", s.trim())));
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// Grids
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub ncols: usize,
    pub nrows: usize,
    /// Longitude of the lower-left corner.
    pub xll: f64,
    /// Latitude of the lower-left corner.
    pub yll: f64,
    pub cellsize: f64,
    pub nodata: f64,
}

impl GridHeader {
    pub fn new(ncols: usize, nrows: usize, xll: f64, yll: f64, cellsize: f64, nodata: f64) -> Result<Self> {
        let h = GridHeader {
            ncols,
            nrows,
            xll,
            yll,
            cellsize,
            nodata,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ncols == 0 || self.nrows == 0 {
            return Err(Error::validation(format!(
                "grid must have positive dimensions, got {}x{}",
                self.nrows, self.ncols
            )));
        }
        if !(self.cellsize > 0.0) || !self.cellsize.is_finite() {
            return Err(Error::validation(format!("cellsize must be > 0, got {}", self.cellsize)));
        }
        if !self.xll.is_finite() || !self.yll.is_finite() {
            return Err(Error::validation("grid corner must be finite"));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.ncols * self.nrows
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.ncols + col
    }

    /// Center of cell `(row, col)` as `(lon, lat)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.xll + (col as f64 + 0.5) * self.cellsize,
            self.yll + (self.nrows as f64 - row as f64 - 0.5) * self.cellsize,
        )
    }

    /// Center of the cell with flat index `idx` as `(lon, lat)`.
    pub fn cell_center_of(&self, idx: usize) -> (f64, f64) {
        self.cell_center(idx / self.ncols, idx % self.ncols)
    }

    /// Cell containing `(lon, lat)`, if inside the extent.
    pub fn locate(&self, lon: f64, lat: f64) -> Option<(usize, usize)> {
        let c = ((lon - self.xll) / self.cellsize).floor();
        let r_from_bottom = ((lat - self.yll) / self.cellsize).floor();
        if c < 0.0 || r_from_bottom < 0.0 {
            return None;
        }
        let (c, rb) = (c as usize, r_from_bottom as usize);
        if c >= self.ncols || rb >= self.nrows {
            return None;
        }
        Some((self.nrows - 1 - rb, c))
    }

    pub fn same_geometry(&self, other: &GridHeader) -> bool {
        self.ncols == other.ncols
            && self.nrows == other.nrows
            && self.xll == other.xll
            && self.yll == other.yll
            && self.cellsize == other.cellsize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub header: GridHeader,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn new(header: GridHeader, values: Vec<f64>) -> Result<Self> {
        header.validate()?;
        if values.len() != header.n_cells() {
            return Err(Error::Length {
                what: "grid values".into(),
                expected: header.n_cells(),
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|&v| v != header.nodata && !v.is_finite()) {
            return Err(Error::validation(format!("grid cell {i} holds a non-finite value")));
        }
        Ok(Grid { header, values })
    }

    pub fn filled(header: GridHeader, value: f64) -> Result<Self> {
        Self::new(header, vec![value; header.n_cells()])
    }

    #[inline]
    pub fn is_nodata(&self, idx: usize) -> bool {
        self.values[idx] == self.header.nodata
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let v = self.values[self.header.index(row, col)];
        (v != self.header.nodata).then_some(v)
    }
}

const GRID_KEYS: [&str; 6] = ["ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value"];

pub fn parse_ascii_grid(text: &str) -> Result<Grid> {
    let mut header: HashMap<&'static str, String> = HashMap::new();
    let mut tokens = text.split_whitespace().peekable();
    while let Some(&tok) = tokens.peek() {
        let lower = tok.to_ascii_lowercase();
        let Some(key) = GRID_KEYS.iter().find(|k| **k == lower) else {
            break;
        };
        tokens.next();
        let val = tokens
            .next()
            .ok_or_else(|| Error::parse(format!("header key `{key}` has no value")))?;
        header.insert(key, val.to_string());
    }
    let get = |key: &str| -> Result<&String> {
        header
            .get(key)
            .ok_or_else(|| Error::parse(format!("missing header key `{}`", key.to_ascii_uppercase())))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        let s = get(key)?;
        s.parse::<usize>()
            .map_err(|_| Error::parse(format!("header `{}` is not a positive integer: `{s}`", key.to_ascii_uppercase())))
    };
    let ncols = parse_usize("ncols")?;
    let nrows = parse_usize("nrows")?;
    let xll = parse_finite(get("xllcorner")?, "XLLCORNER")?;
    let yll = parse_finite(get("yllcorner")?, "YLLCORNER")?;
    let cellsize = parse_finite(get("cellsize")?, "CELLSIZE")?;
    let nodata = parse_finite(get("nodata_value")?, "NODATA_VALUE")?;
    let header = GridHeader::new(ncols, nrows, xll, yll, cellsize, nodata)?;

    let mut values = Vec::with_capacity(header.n_cells());
    for tok in tokens {
        values.push(parse_f64(tok, "grid value")?);
    }
    if values.len() != header.n_cells() {
        return Err(Error::Length {
            what: "grid values".into(),
            expected: header.n_cells(),
            actual: values.len(),
        });
    }
    Grid::new(header, values)
}

pub fn read_ascii_grid(path: impl AsRef<Path>) -> Result<Grid> {
    let text = fs::read_to_string(path)?;
    parse_ascii_grid(&text)
}

pub fn format_ascii_grid(grid: &Grid) -> String {
    let h = &grid.header;
    let mut out = String::with_capacity(h.n_cells() * 24 + 200);
    let _ = writeln!(out, "NCOLS {}", h.ncols);
    let _ = writeln!(out, "NROWS {}", h.nrows);
    let _ = writeln!(out, "XLLCORNER {}", fmt_f64(h.xll));
    let _ = writeln!(out, "YLLCORNER {}", fmt_f64(h.yll));
    let _ = writeln!(out, "CELLSIZE {}", fmt_f64(h.cellsize));
    let _ = writeln!(out, "NODATA_VALUE {}", fmt_f64(h.nodata));
    for row in grid.values.chunks(h.ncols) {
        let line: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_ascii_grid(grid: &Grid, path: impl AsRef<Path>) -> Result<()> {
    grid.header.validate()?;
    if grid.values.len() != grid.header.n_cells() {
        return Err(Error::Length {
            what: "grid values".into(),
            expected: grid.header.n_cells(),
            actual: grid.values.len(),
        });
    }
    fs::write(path, format_ascii_grid(grid))?;
    Ok(())
}

/// Layers sharing one grid geometry, ordered by label.
#[derive(Debug, Clone, PartialEq)]
pub struct GridStack {
    pub header: GridHeader,
    pub layers: Vec<Vec<f64>>,
    pub labels: Vec<String>,
}

impl GridStack {
    pub fn new(header: GridHeader, layers: Vec<Vec<f64>>, labels: Vec<String>) -> Result<Self> {
        header.validate()?;
        if layers.is_empty() {
            return Err(Error::validation("grid stack needs at least one layer"));
        }
        if layers.len() != labels.len() {
            return Err(Error::Length {
                what: "stack labels".into(),
                expected: layers.len(),
                actual: labels.len(),
            });
        }
        for (i, l) in layers.iter().enumerate() {
            if l.len() != header.n_cells() {
                return Err(Error::Length {
                    what: format!("stack layer {i}"),
                    expected: header.n_cells(),
                    actual: l.len(),
                });
            }
        }
        for w in labels.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::validation(format!(
                    "stack labels must be strictly increasing: `{}` then `{}`",
                    w[0], w[1]
                )));
            }
        }
        Ok(GridStack { header, layers, labels })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_grid(&self, t: usize) -> Grid {
        Grid {
            header: self.header,
            values: self.layers[t].clone(),
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct ManifestRow {
    layer_index: usize,
    label: String,
    path: String,
}

/// Read a stack manifest; layer paths are relative to the manifest's directory.
pub fn read_grid_stack(manifest: impl AsRef<Path>) -> Result<GridStack> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut rdr = csv::Reader::from_path(manifest)?;
    expect_header(rdr.headers()?, &["layer_index", "label", "path"], manifest)?;
    let mut rows: Vec<ManifestRow> = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec?);
    }
    rows.sort_by_key(|r| r.layer_index);
    for (i, r) in rows.iter().enumerate() {
        if r.layer_index != i {
            return Err(Error::validation(format!(
                "manifest layer indices must be 0..T-1 without gaps (found {} at position {i})",
                r.layer_index
            )));
        }
    }
    let mut header: Option<GridHeader> = None;
    let mut layers = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for r in rows {
        let p = resolve(&base, &r.path);
        let g = read_ascii_grid(&p)?;
        match header {
            None => header = Some(g.header),
            Some(h) => {
                if !h.same_geometry(&g.header) || h.nodata != g.header.nodata {
                    return Err(Error::shape(format!("layer `{}` header differs from the first layer", p.display())));
                }
            }
        }
        layers.push(g.values);
        labels.push(r.label);
    }
    let header = header.ok_or_else(|| Error::validation("manifest lists no layers"))?;
    GridStack::new(header, layers, labels)
}

/// Write each layer as `<stem>_<index>.asc` next to the manifest.
pub fn write_grid_stack(stack: &GridStack, manifest: impl AsRef<Path>) -> Result<()> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let stem = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "layer".into());
    let mut w = csv::Writer::from_path(manifest)?;
    for (t, layer) in stack.layers.iter().enumerate() {
        let name = format!("{stem}_{t:04}.asc");
        write_ascii_grid(
            &Grid {
                header: stack.header,
                values: layer.clone(),
            },
            base.join(&name),
        )?;
        w.serialize(ManifestRow {
            layer_index: t,
            label: stack.labels[t].clone(),
            path: name,
        })?;
    }
    w.flush()?;
    Ok(())
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let pb = PathBuf::from(p);
    if pb.is_absolute() {
        pb
    } else {
        base.join(pb)
    }
}

pub fn expect_header(found: &csv::StringRecord, expected: &[&str], path: &Path) -> Result<()> {
    let got: Vec<&str> = found.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::parse(format!(
            "{}: header must be `{}`, found `{}`",
            path.display(),
            expected.join(","),
            got.join(",")
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Stations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variable {
    Tmax,
    Tmin,
    Ppt,
}

impl std::str::FromStr for Variable {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tmax" => Ok(Variable::Tmax),
            "tmin" => Ok(Variable::Tmin),
            "ppt" => Ok(Variable::Ppt),
            other => Err(Error::parse(format!("unknown variable `{other}` (expected tmax, tmin or ppt)"))),
        }
    }
}

impl std::fmt::Display for Variable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variable::Tmax => "tmax",
            Variable::Tmin => "tmin",
            Variable::Ppt => "ppt",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationRecord {
    pub station_id: String,
    pub lat: f64,
    pub lon: f64,
    pub date: NaiveDate,
    pub variable: Variable,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StationTable {
    records: Vec<StationRecord>,
}

impl StationTable {
    pub fn new(records: Vec<StationRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !(-90.0..=90.0).contains(&r.lat) {
                return Err(Error::validation(format!("station `{}`: latitude {} outside [-90, 90]", r.station_id, r.lat)));
            }
            if !(-180.0..=180.0).contains(&r.lon) {
                return Err(Error::validation(format!(
                    "station `{}`: longitude {} outside [-180, 180]",
                    r.station_id, r.lon
                )));
            }
            if !r.value.is_finite() {
                return Err(Error::validation(format!("station `{}` on {}: non-finite value", r.station_id, r.date)));
            }
            if r.variable == Variable::Ppt && r.value < 0.0 {
                return Err(Error::validation(format!(
                    "station `{}` on {}: negative precipitation {}",
                    r.station_id, r.date, r.value
                )));
            }
            if !seen.insert((r.station_id.as_str(), r.date, r.variable)) {
                return Err(Error::validation(format!(
                    "duplicate station record ({}, {}, {})",
                    r.station_id, r.date, r.variable
                )));
            }
        }
        let mut pairs: HashMap<(&str, NaiveDate), (Option<f64>, Option<f64>)> = HashMap::new();
        for r in &records {
            let e = pairs.entry((r.station_id.as_str(), r.date)).or_default();
            match r.variable {
                Variable::Tmax => e.0 = Some(r.value),
                Variable::Tmin => e.1 = Some(r.value),
                Variable::Ppt => {}
            }
        }
        let mut bad: Vec<(&str, NaiveDate)> = pairs
            .iter()
            .filter_map(|(k, v)| match v {
                (Some(tx), Some(tn)) if tn > tx => Some(*k),
                _ => None,
            })
            .collect();
        bad.sort();
        if let Some((s, d)) = bad.first() {
            return Err(Error::validation(format!("station `{s}` on {d}: tmin exceeds tmax")));
        }
        Ok(StationTable { records })
    }

    pub fn records(&self) -> &[StationRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn select(&self, date: NaiveDate, variable: Variable) -> impl Iterator<Item = &StationRecord> {
        self.records
            .iter()
            .filter(move |r| r.date == date && r.variable == variable)
    }
}

const STATION_HEADER: [&str; 6] = ["station_id", "lat", "lon", "date", "variable", "value"];

pub fn read_stations_csv(path: impl AsRef<Path>) -> Result<StationTable> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    expect_header(rdr.headers()?, &STATION_HEADER, path)?;
    let mut records = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let date = NaiveDate::parse_from_str(field(3), "%Y-%m-%d")
            .map_err(|_| Error::parse(format!("row {}: bad date `{}`", line + 2, field(3))))?;
        records.push(StationRecord {
            station_id: field(0).to_string(),
            lat: parse_finite(field(1), "lat")?,
            lon: parse_finite(field(2), "lon")?,
            date,
            variable: field(4).parse()?,
            value: parse_finite(field(5), "value")?,
        });
    }
    StationTable::new(records)
}

pub fn write_stations_csv(table: &StationTable, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(STATION_HEADER)?;
    for r in table.records() {
        w.write_record([
            r.station_id.clone(),
            fmt_f64(r.lat),
            fmt_f64(r.lon),
            r.date.format("%Y-%m-%d").to_string(),
            r.variable.to_string(),
            fmt_f64(r.value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Administrative units
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AdminUnit {
    pub unit_id: String,
    /// `(lat, lon)` in degrees.
    pub centroid: (f64, f64),
    /// `(cell_index, weight)`; weights sum to one when nonempty.
    pub cell_weights: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdminUnits {
    pub header: GridHeader,
    pub units: Vec<AdminUnit>,
}

impl AdminUnits {
    /// Validates cell indices and normalizes each unit's membership weights.
    pub fn new(header: GridHeader, mut units: Vec<AdminUnit>) -> Result<Self> {
        let mut ids = HashSet::new();
        for u in &mut units {
            if !ids.insert(u.unit_id.clone()) {
                return Err(Error::validation(format!("duplicate unit `{}`", u.unit_id)));
            }
            let mut cells = HashSet::new();
            for &(c, w) in &u.cell_weights {
                if c >= header.n_cells() {
                    return Err(Error::validation(format!(
                        "unit `{}`: cell {c} outside grid of {} cells",
                        u.unit_id,
                        header.n_cells()
                    )));
                }
                if !(w >= 0.0) || !w.is_finite() {
                    return Err(Error::validation(format!("unit `{}`: invalid weight {w} on cell {c}", u.unit_id)));
                }
                if !cells.insert(c) {
                    return Err(Error::validation(format!("unit `{}`: cell {c} listed twice", u.unit_id)));
                }
            }
            let total: f64 = u.cell_weights.iter().map(|p| p.1).sum();
            if total > 0.0 {
                for p in &mut u.cell_weights {
                    p.1 /= total;
                }
            }
        }
        Ok(AdminUnits { header, units })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn centroids(&self) -> HashMap<String, (f64, f64)> {
        self.units.iter().map(|u| (u.unit_id.clone(), u.centroid)).collect()
    }
}

/// Read `unit_id,cell_index,weight`. Centroids come from `centroids` when
/// given, otherwise from the weighted mean of the member cell centers.
pub fn read_admin_weights_csv(
    path: impl AsRef<Path>,
    header: GridHeader,
    centroids: Option<&HashMap<String, (f64, f64)>>,
) -> Result<AdminUnits> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    expect_header(rdr.headers()?, &["unit_id", "cell_index", "weight"], path)?;
    let mut order: Vec<String> = Vec::new();
    let mut cells: HashMap<String, Vec<(usize, f64)>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or("").trim().to_string();
        let c: usize = rec
            .get(1)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::parse(format!("unit `{id}`: bad cell index")))?;
        let w = parse_finite(rec.get(2).unwrap_or(""), "weight")?;
        if !cells.contains_key(&id) {
            order.push(id.clone());
        }
        cells.entry(id).or_default().push((c, w));
    }
    let mut units = Vec::with_capacity(order.len());
    for id in order {
        let cw = cells.remove(&id).unwrap_or_default();
        let centroid = match centroids.and_then(|m| m.get(&id)) {
            Some(&c) => c,
            None => weighted_centroid(&header, &cw),
        };
        units.push(AdminUnit {
            unit_id: id,
            centroid,
            cell_weights: cw,
        });
    }
    AdminUnits::new(header, units)
}

fn weighted_centroid(header: &GridHeader, cw: &[(usize, f64)]) -> (f64, f64) {
    let (mut slat, mut slon, mut sw) = (0.0, 0.0, 0.0);
    for &(c, w) in cw {
        if c < header.n_cells() {
            let (lon, lat) = header.cell_center_of(c);
            let w = if w > 0.0 { w } else { 0.0 };
            slat += w * lat;
            slon += w * lon;
            sw += w;
        }
    }
    if sw > 0.0 {
        (slat / sw, slon / sw)
    } else if let Some(&(c, _)) = cw.first() {
        let (lon, lat) = header.cell_center_of(c.min(header.n_cells() - 1));
        (lat, lon)
    } else {
        (f64::NAN, f64::NAN)
    }
}

pub fn write_admin_weights_csv(units: &AdminUnits, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["unit_id", "cell_index", "weight"])?;
    for u in &units.units {
        for &(c, wt) in &u.cell_weights {
            w.write_record([u.unit_id.clone(), c.to_string(), fmt_f64(wt)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `unit_id,lat,lon`.
pub fn read_centroids_csv(path: impl AsRef<Path>) -> Result<HashMap<String, (f64, f64)>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    expect_header(rdr.headers()?, &["unit_id", "lat", "lon"], path)?;
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or("").trim().to_string();
        let lat = parse_finite(rec.get(1).unwrap_or(""), "lat")?;
        let lon = parse_finite(rec.get(2).unwrap_or(""), "lon")?;
        if out.insert(id.clone(), (lat, lon)).is_some() {
            return Err(Error::validation(format!("duplicate centroid for unit `{id}`")));
        }
    }
    Ok(out)
}

pub fn write_centroids_csv(centroids: &[(String, (f64, f64))], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["unit_id", "lat", "lon"])?;
    for (id, (lat, lon)) in centroids {
        w.write_record([id.clone(), fmt_f64(*lat), fmt_f64(*lon)])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Panels
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnValues {
    Real(Vec<f64>),
    Text(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub values: ColumnValues,
}

/// Unit-by-year table in column layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelTable {
    pub unit_ids: Vec<String>,
    pub years: Vec<i32>,
    pub y: Vec<f64>,
    columns: Vec<Column>,
}

const RESERVED: [&str; 3] = ["unit_id", "year", "y"];

impl PanelTable {
    pub fn new(unit_ids: Vec<String>, years: Vec<i32>, y: Vec<f64>) -> Result<Self> {
        if unit_ids.len() != years.len() || unit_ids.len() != y.len() {
            return Err(Error::Length {
                what: "panel key columns".into(),
                expected: unit_ids.len(),
                actual: years.len().max(y.len()),
            });
        }
        let mut seen = HashSet::new();
        for (u, t) in unit_ids.iter().zip(&years) {
            if !seen.insert((u.as_str(), *t)) {
                return Err(Error::validation(format!("duplicate panel row (unit `{u}`, year {t})")));
            }
        }
        Ok(PanelTable {
            unit_ids,
            years,
            y,
            columns: Vec::new(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    fn check_new_column(&self, name: &str, len: usize) -> Result<()> {
        if RESERVED.contains(&name) {
            return Err(Error::validation(format!("column name `{name}` is reserved")));
        }
        if len != self.n_rows() {
            return Err(Error::Length {
                what: format!("column `{name}`"),
                expected: self.n_rows(),
                actual: len,
            });
        }
        Ok(())
    }

    /// Add or replace a real-valued column.
    pub fn set_real(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        self.check_new_column(name, values.len())?;
        let col = Column {
            name: name.to_string(),
            values: ColumnValues::Real(values),
        };
        match self.columns.iter_mut().find(|c| c.name == name) {
            Some(c) => *c = col,
            None => self.columns.push(col),
        }
        Ok(())
    }

    pub fn set_text(&mut self, name: &str, values: Vec<String>) -> Result<()> {
        self.check_new_column(name, values.len())?;
        let col = Column {
            name: name.to_string(),
            values: ColumnValues::Text(values),
        };
        match self.columns.iter_mut().find(|c| c.name == name) {
            Some(c) => *c = col,
            None => self.columns.push(col),
        }
        Ok(())
    }

    pub fn has_column(&self, name: &str) -> bool {
        RESERVED.contains(&name) || self.columns.iter().any(|c| c.name == name)
    }

    pub fn real(&self, name: &str) -> Result<&[f64]> {
        if name == "y" {
            return Ok(&self.y);
        }
        match self.columns.iter().find(|c| c.name == name) {
            Some(Column {
                values: ColumnValues::Real(v),
                ..
            }) => Ok(v),
            Some(_) => Err(Error::validation(format!("column `{name}` is not numeric"))),
            None => Err(Error::validation(format!("missing column `{name}`"))),
        }
    }

    /// Categorical codes (0-based, in sorted level order) for any column,
    /// including the `unit`/`unit_id` and `year` keys.
    pub fn codes(&self, name: &str) -> Result<(Vec<u32>, usize)> {
        match name {
            "unit" | "unit_id" => Ok(encode(self.unit_ids.iter().map(String::as_str))),
            "year" => Ok(encode_ord(self.years.iter().copied())),
            _ => match self.columns.iter().find(|c| c.name == name) {
                Some(Column {
                    values: ColumnValues::Text(v),
                    ..
                }) => Ok(encode(v.iter().map(String::as_str))),
                Some(Column {
                    values: ColumnValues::Real(v),
                    ..
                }) => Ok(encode_ord(v.iter().map(|x| OrdF64(*x)))),
                None => Err(Error::validation(format!("missing column `{name}`"))),
            },
        }
    }

    pub fn units(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.unit_ids.iter().map(String::as_str).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn year_set(&self) -> Vec<i32> {
        let set: BTreeSet<i32> = self.years.iter().copied().collect();
        set.into_iter().collect()
    }

    pub fn require_panel_shape(&self) -> Result<()> {
        if self.units().len() < 2 || self.year_set().len() < 2 {
            return Err(Error::validation("panel estimators need at least 2 units and 2 periods"));
        }
        Ok(())
    }

    /// Row index keyed by `(unit, year)`.
    pub fn row_index(&self) -> HashMap<(&str, i32), usize> {
        self.unit_ids
            .iter()
            .zip(&self.years)
            .enumerate()
            .map(|(i, (u, t))| ((u.as_str(), *t), i))
            .collect()
    }

    /// Subset of rows, in the given order.
    pub fn take_rows(&self, rows: &[usize]) -> PanelTable {
        let pick = |v: &ColumnValues| match v {
            ColumnValues::Real(x) => ColumnValues::Real(rows.iter().map(|&i| x[i]).collect()),
            ColumnValues::Text(x) => ColumnValues::Text(rows.iter().map(|&i| x[i].clone()).collect()),
        };
        PanelTable {
            unit_ids: rows.iter().map(|&i| self.unit_ids[i].clone()).collect(),
            years: rows.iter().map(|&i| self.years[i]).collect(),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            columns: self
                .columns
                .iter()
                .map(|c| Column {
                    name: c.name.clone(),
                    values: pick(&c.values),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy)]
struct OrdF64(f64);
impl PartialEq for OrdF64 {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other).is_eq()
    }
}
impl Eq for OrdF64 {}
impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn encode<'a>(values: impl Iterator<Item = &'a str> + Clone) -> (Vec<u32>, usize) {
    let levels: BTreeMap<&str, u32> = values
        .clone()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, v)| (v, i as u32))
        .collect();
    (values.map(|v| levels[v]).collect(), levels.len())
}

fn encode_ord<T: Ord + Copy>(values: impl Iterator<Item = T> + Clone) -> (Vec<u32>, usize) {
    let levels: BTreeMap<T, u32> = values
        .clone()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, v)| (v, i as u32))
        .collect();
    (values.map(|v| levels[&v]).collect(), levels.len())
}

/// Read `unit_id,year,y,<columns...>`. Columns whose every entry parses as a
/// number are numeric; the rest are categorical text.
pub fn read_panel_csv(path: impl AsRef<Path>) -> Result<PanelTable> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if headers.len() < 3 || headers[..3] != RESERVED {
        return Err(Error::parse(format!(
            "{}: header must start with `unit_id,year,y`, found `{}`",
            path.display(),
            headers.join(",")
        )));
    }
    let mut uid = Vec::new();
    let mut years = Vec::new();
    let mut y = Vec::new();
    let mut raw: Vec<Vec<String>> = vec![Vec::new(); headers.len() - 3];
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(Error::Length {
                what: format!("panel row {}", line + 2),
                expected: headers.len(),
                actual: rec.len(),
            });
        }
        uid.push(rec[0].trim().to_string());
        years.push(
            rec[1]
                .trim()
                .parse::<i32>()
                .map_err(|_| Error::parse(format!("row {}: bad year `{}`", line + 2, &rec[1])))?,
        );
        y.push(parse_finite(&rec[2], "y")?);
        for (j, col) in raw.iter_mut().enumerate() {
            col.push(rec[j + 3].trim().to_string());
        }
    }
    let mut table = PanelTable::new(uid, years, y)?;
    for (name, vals) in headers[3..].iter().zip(raw) {
        let parsed: Option<Vec<f64>> = vals.iter().map(|s| s.parse::<f64>().ok()).collect();
        match parsed {
            Some(v) if v.iter().all(|x| x.is_finite()) => table.set_real(name, v)?,
            _ => table.set_text(name, vals)?,
        }
    }
    Ok(table)
}

pub fn write_panel_csv(table: &PanelTable, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    header.extend(table.columns.iter().map(|c| c.name.clone()));
    w.write_record(&header)?;
    for i in 0..table.n_rows() {
        let mut row = vec![table.unit_ids[i].clone(), table.years[i].to_string(), fmt_f64(table.y[i])];
        for c in &table.columns {
            row.push(match &c.values {
                ColumnValues::Real(v) => fmt_f64(v[i]),
                ColumnValues::Text(v) => v[i].clone(),
            });
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
