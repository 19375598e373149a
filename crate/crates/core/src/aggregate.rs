//! Zonal statistics and sparse grid-to-unit aggregation (`A = P × G`).
//!
//! A [`ProjectionMatrix`] is row-stochastic: row `u` holds the weights with
//! which grid cells contribute to administrative unit `u`. It is stored in
//! compressed-row form; on disk it is the triplet CSV `unit_id,cell_index,weight`.

use std::collections::HashMap;
use std::path::Path;

use crate::data::{expect_header, fmt_f64, parse_f64, AdminUnits, Grid, GridHeader, GridStack};
use crate::error::{Error, Result};
use crate::par;

const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    pub unit_ids: Vec<String>,
    pub n_cells: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl ProjectionMatrix {
    /// Build from `(row, col, weight)` triplets. Rows must sum to one or be empty.
    pub fn from_triplets(unit_ids: Vec<String>, n_cells: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        let n_units = unit_ids.len();
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        for w in triplets.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(Error::validation(format!(
                    "duplicate projection entry (unit `{}`, cell {})",
                    unit_ids[w[0].0], w[0].1
                )));
            }
        }
        let mut row_ptr = vec![0usize; n_units + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut weights = Vec::with_capacity(triplets.len());
        for &(r, c, w) in &triplets {
            if r >= n_units {
                return Err(Error::validation(format!("projection row {r} out of range ({n_units} units)")));
            }
            if c >= n_cells {
                return Err(Error::validation(format!("projection cell {c} out of range ({n_cells} cells)")));
            }
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::validation(format!(
                    "projection weight must be positive (unit `{}`, cell {c}: {w})",
                    unit_ids[r]
                )));
            }
            row_ptr[r + 1] += 1;
            cols.push(c);
            weights.push(w);
        }
        for r in 0..n_units {
            row_ptr[r + 1] += row_ptr[r];
        }
        let p = ProjectionMatrix {
            unit_ids,
            n_cells,
            row_ptr,
            cols,
            weights,
        };
        for r in 0..n_units {
            let (_, w) = p.row(r);
            if !w.is_empty() {
                let s: f64 = w.iter().sum();
                if (s - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::validation(format!(
                        "weights of unit `{}` sum to {s}, not 1",
                        p.unit_ids[r]
                    )));
                }
            }
        }
        Ok(p)
    }

    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.cols[a..b], &self.weights[a..b])
    }

    /// Units whose row is empty.
    pub fn no_coverage(&self) -> Vec<usize> {
        (0..self.n_units()).filter(|&r| self.row_ptr[r] == self.row_ptr[r + 1]).collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n_cells]; self.n_units()];
        for (r, row) in d.iter_mut().enumerate() {
            let (c, w) = self.row(r);
            for (&c, &w) in c.iter().zip(w) {
                row[c] = w;
            }
        }
        d
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_units()).flat_map(move |r| {
            let (c, w) = self.row(r);
            c.iter().zip(w).map(move |(&c, &w)| (r, c, w))
        })
    }
}

pub fn write_projection_csv(p: &ProjectionMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["unit_id", "cell_index", "weight"])?;
    for (r, c, wt) in p.triplets() {
        w.write_record([p.unit_ids[r].clone(), c.to_string(), fmt_f64(wt)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_projection_csv(path: impl AsRef<Path>, n_cells: usize) -> Result<ProjectionMatrix> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    expect_header(rdr.headers()?, &["unit_id", "cell_index", "weight"], path)?;
    let mut ids: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut triplets = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or("").trim().to_string();
        let c: usize = rec
            .get(1)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::parse(format!("unit `{id}`: bad cell index")))?;
        let w = parse_f64(rec.get(2).unwrap_or(""), "weight")?;
        let r = *index.entry(id.clone()).or_insert_with(|| {
            ids.push(id);
            ids.len() - 1
        });
        triplets.push((r, c, w));
    }
    ProjectionMatrix::from_triplets(ids, n_cells, triplets)
}

fn integer_ratio(x: f64, what: &str) -> Result<i64> {
    let r = x.round();
    if (x - r).abs() > 1e-9 * x.abs().max(1.0) {
        return Err(Error::validation(format!("alignment error: {what} is {x}, not an integer")));
    }
    Ok(r as i64)
}

/// Share of fine cells of `class_code` inside each coarse cell.
pub fn zonal_fractions(fine: &Grid, coarse: &GridHeader, class_code: i64) -> Result<Grid> {
    let f = &fine.header;
    let ratio = integer_ratio(coarse.cellsize / f.cellsize, "coarse/fine resolution ratio")?;
    if ratio < 1 {
        return Err(Error::validation("alignment error: coarse grid is finer than the categorical grid"));
    }
    let col_off = integer_ratio((coarse.xll - f.xll) / f.cellsize, "column offset")?;
    let fine_top = f.yll + f.nrows as f64 * f.cellsize;
    let coarse_top = coarse.yll + coarse.nrows as f64 * coarse.cellsize;
    let row_off = integer_ratio((fine_top - coarse_top) / f.cellsize, "row offset")?;
    let class = class_code as f64;
    let values = par::map_range(coarse.n_cells(), |idx| {
        let (rr, cc) = ((idx / coarse.ncols) as i64, (idx % coarse.ncols) as i64);
        let (mut hit, mut total) = (0usize, 0usize);
        for dr in 0..ratio {
            let r = row_off + rr * ratio + dr;
            if r < 0 || r >= f.nrows as i64 {
                continue;
            }
            for dc in 0..ratio {
                let c = col_off + cc * ratio + dc;
                if c < 0 || c >= f.ncols as i64 {
                    continue;
                }
                let v = fine.values[r as usize * f.ncols + c as usize];
                if v == f.nodata {
                    continue;
                }
                total += 1;
                if v == class {
                    hit += 1;
                }
            }
        }
        if total == 0 {
            coarse.nodata
        } else {
            hit as f64 / total as f64
        }
    });
    Grid::new(*coarse, values)
}

/// Projection whose row `u` is `membership(u, c) · weight(c)`, normalized.
/// Units whose cells carry no weight get an empty row.
pub fn build_projection(units: &AdminUnits, weight_grid: &Grid) -> Result<ProjectionMatrix> {
    if !units.header.same_geometry(&weight_grid.header) {
        return Err(Error::shape("weight grid does not match the units' grid header"));
    }
    if let Some(i) = (0..weight_grid.values.len()).find(|&i| !weight_grid.is_nodata(i) && weight_grid.values[i] < 0.0) {
        return Err(Error::validation(format!("negative weight {} at cell {i}", weight_grid.values[i])));
    }
    let mut triplets = Vec::new();
    for (r, u) in units.units.iter().enumerate() {
        let entries: Vec<(usize, f64)> = u
            .cell_weights
            .iter()
            .filter(|&&(c, _)| !weight_grid.is_nodata(c))
            .map(|&(c, m)| (c, m * weight_grid.values[c]))
            .filter(|&(_, w)| w > 0.0)
            .collect();
        let total: f64 = entries.iter().map(|e| e.1).sum();
        if total > 0.0 {
            triplets.extend(entries.into_iter().map(|(c, w)| (r, c, w / total)));
        }
    }
    ProjectionMatrix::from_triplets(
        units.units.iter().map(|u| u.unit_id.clone()).collect(),
        weight_grid.header.n_cells(),
        triplets,
    )
}

/// Unit-by-period matrix; `NaN` marks a missing value.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSeries {
    pub unit_ids: Vec<String>,
    pub labels: Vec<String>,
    /// Row-major `n_units × n_periods`.
    pub values: Vec<f64>,
}

impl UnitSeries {
    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn n_periods(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, u: usize, t: usize) -> f64 {
        self.values[u * self.n_periods() + t]
    }

    pub fn row(&self, u: usize) -> &[f64] {
        let t = self.n_periods();
        &self.values[u * t..(u + 1) * t]
    }
}

#[inline]
fn project_cell_row(cols: &[usize], w: &[f64], layer: &[f64], nodata: f64) -> f64 {
    if cols.is_empty() {
        return f64::NAN;
    }
    let (mut sum, mut wsum) = (0.0, 0.0);
    let mut skipped = false;
    for (&c, &w) in cols.iter().zip(w) {
        let v = layer[c];
        if v == nodata {
            skipped = true;
        } else {
            sum += w * v;
            wsum += w;
        }
    }
    if !skipped {
        sum
    } else if wsum > 0.0 {
        sum / wsum
    } else {
        f64::NAN
    }
}

fn project_one_layer(p: &ProjectionMatrix, layer: &[f64], nodata: f64) -> Vec<f64> {
    (0..p.n_units())
        .map(|r| {
            let (c, w) = p.row(r);
            project_cell_row(c, w, layer, nodata)
        })
        .collect()
}

fn check_layers(p: &ProjectionMatrix, layers: &[&[f64]]) -> Result<()> {
    if let Some((t, l)) = layers.iter().enumerate().find(|(_, l)| l.len() != p.n_cells) {
        return Err(Error::shape(format!(
            "layer {t} has {} cells but the projection expects {}",
            l.len(),
            p.n_cells
        )));
    }
    Ok(())
}

fn assemble(p: &ProjectionMatrix, cols: Vec<Vec<f64>>, labels: Vec<String>) -> UnitSeries {
    let t_n = cols.len();
    let mut values = vec![0.0; p.n_units() * t_n];
    for (t, col) in cols.into_iter().enumerate() {
        for (u, v) in col.into_iter().enumerate() {
            values[u * t_n + t] = v;
        }
    }
    UnitSeries {
        unit_ids: p.unit_ids.clone(),
        labels,
        values,
    }
}

/// Sparse `P × G` over raw layers, parallel over layers when enabled.
///
/// Cells equal to `nodata` are skipped and the remaining weights in the row
/// renormalized; a row with no valid cell (or no coverage) yields `NaN`.
pub fn project_layers(p: &ProjectionMatrix, layers: &[&[f64]], nodata: f64, labels: Vec<String>) -> Result<UnitSeries> {
    check_layers(p, layers)?;
    let cols = par::map_range(layers.len(), |t| project_one_layer(p, layers[t], nodata));
    Ok(assemble(p, cols, labels))
}

/// Single-threaded reference of [`project_layers`].
pub fn project_layers_seq(p: &ProjectionMatrix, layers: &[&[f64]], nodata: f64, labels: Vec<String>) -> Result<UnitSeries> {
    check_layers(p, layers)?;
    let cols = par::map_range_seq(layers.len(), |t| project_one_layer(p, layers[t], nodata));
    Ok(assemble(p, cols, labels))
}

pub fn project(p: &ProjectionMatrix, g: &GridStack) -> Result<UnitSeries> {
    let layers: Vec<&[f64]> = g.layers.iter().map(Vec::as_slice).collect();
    project_layers(p, &layers, g.header.nodata, g.labels.clone())
}

pub fn write_unit_series_csv(a: &UnitSeries, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["unit_id", "label", "value"])?;
    for u in 0..a.n_units() {
        for t in 0..a.n_periods() {
            w.write_record([a.unit_ids[u].clone(), a.labels[t].clone(), fmt_f64(a.get(u, t))])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read `unit_id,label,value`; absent (unit, label) pairs become `NaN`.
pub fn read_unit_series_csv(path: impl AsRef<Path>) -> Result<UnitSeries> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    expect_header(rdr.headers()?, &["unit_id", "label", "value"], path)?;
    let mut units: Vec<String> = Vec::new();
    let mut uidx: HashMap<String, usize> = HashMap::new();
    let mut labels = std::collections::BTreeSet::new();
    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or("").trim().to_string();
        let label = rec.get(1).unwrap_or("").trim().to_string();
        let v = parse_f64(rec.get(2).unwrap_or(""), "value")?;
        let u = *uidx.entry(id.clone()).or_insert_with(|| {
            units.push(id);
            units.len() - 1
        });
        labels.insert(label.clone());
        entries.push((u, label, v));
    }
    let labels: Vec<String> = labels.into_iter().collect();
    let lidx: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let t_n = labels.len();
    let mut values = vec![f64::NAN; units.len() * t_n];
    let mut seen = vec![false; values.len()];
    for (u, l, v) in entries {
        let k = u * t_n + lidx[l.as_str()];
        if seen[k] {
            return Err(Error::validation(format!("duplicate entry (unit `{}`, label `{l}`)", units[u])));
        }
        seen[k] = true;
        values[k] = v;
    }
    Ok(UnitSeries {
        unit_ids: units,
        labels,
        values,
    })
}
