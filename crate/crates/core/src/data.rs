//! Snapshot matrices, case series and synthetic initial conditions.
//!
//! A snapshot row is one flattened state in compartment-major order: all
//! `s` cells, then `e`, `i`, `r`, `d`. The wide CSV form has one row per
//! snapshot with columns `day,s_0..s_{n-1},e_0,..,d_{n-1}`.

use crate::error::{check_len, Error, Result};
use crate::grid::Grid;
use crate::integrators::Trajectory;
use crate::seird::{CompartmentFields, COMPARTMENT_NAMES, N_COMPARTMENTS};
use chrono::NaiveDate;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMatrix {
    days: Vec<i64>,
    rows: Vec<Vec<f64>>,
    n_cells: usize,
    /// Days between consecutive day indices.
    cadence: f64,
}

impl SnapshotMatrix {
    pub fn new(days: Vec<i64>, rows: Vec<Vec<f64>>, n_cells: usize) -> Result<Self> {
        Self::with_cadence(days, rows, n_cells, 1.0)
    }

    pub fn with_cadence(days: Vec<i64>, rows: Vec<Vec<f64>>, n_cells: usize, cadence: f64) -> Result<Self> {
        if n_cells == 0 {
            return Err(Error::ShapeMismatch("snapshot matrix needs at least one cell".into()));
        }
        if !(cadence.is_finite() && cadence > 0.0) {
            return Err(Error::ShapeMismatch(format!("invalid cadence {cadence}")));
        }
        check_len("snapshot day indices", rows.len(), days.len())?;
        for (k, row) in rows.iter().enumerate() {
            if row.len() != N_COMPARTMENTS * n_cells {
                return Err(Error::ShapeMismatch(format!(
                    "row {k} has {} entries, expected {}",
                    row.len(),
                    N_COMPARTMENTS * n_cells
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::ShapeMismatch(format!("row {k} has non-finite entries")));
            }
        }
        if let Some(k) = days.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::ShapeMismatch(format!(
                "day indices not strictly increasing at row {}",
                k + 1
            )));
        }
        Ok(Self {
            days,
            rows,
            n_cells,
            cadence,
        })
    }

    pub fn days(&self) -> &[i64] {
        &self.days
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.rows[k]
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_days(&self) -> usize {
        self.rows.len()
    }

    pub fn row_len(&self) -> usize {
        N_COMPARTMENTS * self.n_cells
    }

    pub fn cadence(&self) -> f64 {
        self.cadence
    }

    /// Time in days of row `k`.
    pub fn time(&self, k: usize) -> f64 {
        self.days[k] as f64 * self.cadence
    }

    pub fn compartment(&self, row: usize, c: usize) -> &[f64] {
        &self.rows[row][c * self.n_cells..(c + 1) * self.n_cells]
    }

    pub fn fields(&self, row: usize) -> CompartmentFields {
        CompartmentFields::from_flat(&self.rows[row], self.n_cells).expect("rows are validated on construction")
    }

    pub fn row_index_of_day(&self, day: i64) -> Option<usize> {
        self.days.binary_search(&day).ok()
    }

    /// Rows whose day index lies in `[from, to]`.
    pub fn select_days(&self, from: i64, to: i64) -> Result<Self> {
        let keep: Vec<usize> = (0..self.n_days())
            .filter(|&k| self.days[k] >= from && self.days[k] <= to)
            .collect();
        Self::with_cadence(
            keep.iter().map(|&k| self.days[k]).collect(),
            keep.iter().map(|&k| self.rows[k].clone()).collect(),
            self.n_cells,
            self.cadence,
        )
    }

    /// Sums every compartment over all cells, giving a one-cell matrix.
    pub fn aggregate_compartments(&self) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|row| row.chunks_exact(self.n_cells).map(|c| c.iter().sum()).collect())
            .collect();
        Self {
            days: self.days.clone(),
            rows,
            n_cells: 1,
            cadence: self.cadence,
        }
    }

    /// Multiplies every entry by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|v| v * factor).collect())
                .collect(),
            ..self.clone()
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = Vec::with_capacity(1 + self.row_len());
        h.push("day".to_string());
        for name in COMPARTMENT_NAMES {
            for k in 0..self.n_cells {
                h.push(format!("{name}_{k}"));
            }
        }
        h
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        if self.cadence != 1.0 {
            writeln!(out, "# cadence = {}", self.cadence)?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for (day, row) in self.days.iter().zip(&self.rows) {
            let mut rec = Vec::with_capacity(row.len() + 1);
            rec.push(day.to_string());
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = BufReader::new(input);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let mut cadence = 1.0;
        let mut header_line = first.clone();
        let mut line_offset = 1;
        if let Some(rest) = first.trim().strip_prefix('#') {
            let (key, value) = rest.split_once('=').ok_or_else(|| Error::Parse {
                line: 1,
                message: "expected `# cadence = <days>`".into(),
            })?;
            if key.trim() != "cadence" {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("unknown directive `{}`", key.trim()),
                });
            }
            cadence = value.trim().parse().map_err(|_| Error::Parse {
                line: 1,
                message: format!("bad cadence `{}`", value.trim()),
            })?;
            header_line.clear();
            reader.read_line(&mut header_line)?;
            line_offset = 2;
        }
        if header_line.trim().is_empty() {
            return Err(Error::Parse {
                line: line_offset,
                message: "missing header".into(),
            });
        }
        let body = std::io::Cursor::new(header_line.into_bytes()).chain(reader);
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(body);
        let header = r.headers()?.clone();
        if header.get(0) != Some("day") || (header.len() - 1) % N_COMPARTMENTS != 0 || header.len() < 6 {
            return Err(Error::Parse {
                line: line_offset,
                message: "header must be `day` followed by 5*n_cells columns".into(),
            });
        }
        let n_cells = (header.len() - 1) / N_COMPARTMENTS;
        let mut days = Vec::new();
        let mut rows = Vec::new();
        for (k, rec) in r.records().enumerate() {
            let line = line_offset + k + 1;
            let rec = rec.map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            let parse_err = |what: &str| Error::Parse {
                line,
                message: format!("cannot parse {what}"),
            };
            days.push(rec[0].trim().parse::<i64>().map_err(|_| parse_err("day"))?);
            let row = rec
                .iter()
                .skip(1)
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| parse_err("value"))?;
            rows.push(row);
        }
        Self::with_cadence(days, rows, n_cells, cadence)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Keeps every `(cadence / h)`-th state of a fixed-step trajectory; row 0
/// is the initial state.
pub fn assemble_snapshots(trajectory: &Trajectory, cadence: f64, n_cells: usize) -> Result<SnapshotMatrix> {
    if trajectory.is_empty() {
        return Err(Error::ShapeMismatch("empty trajectory".into()));
    }
    let h = if trajectory.len() > 1 {
        trajectory.times[1] - trajectory.times[0]
    } else {
        cadence
    };
    let ratio = cadence / h;
    let stride = ratio.round();
    if !(cadence > 0.0) || stride < 1.0 || (ratio - stride).abs() > 1e-9 * ratio {
        return Err(Error::CadenceMismatch { cadence, step: h });
    }
    let stride = stride as usize;
    let t0 = trajectory.times[0];
    let first = (t0 / cadence).round() as i64;
    let keep: Vec<usize> = (0..trajectory.len()).step_by(stride).collect();
    SnapshotMatrix::with_cadence(
        keep.iter().enumerate().map(|(j, _)| first + j as i64).collect(),
        keep.iter().map(|&k| trajectory.states[k].clone()).collect(),
        n_cells,
        cadence,
    )
}

/// Divides every entry by the day-0 (first row) total living population.
pub fn normalize(matrix: &SnapshotMatrix) -> Result<(SnapshotMatrix, f64)> {
    let scale = living_total(matrix, 0)?;
    if !(scale > 0.0) {
        return Err(Error::ZeroPopulation);
    }
    Ok((matrix.scaled(1.0 / scale), scale))
}

pub fn denormalize(matrix: &SnapshotMatrix, scale: f64) -> SnapshotMatrix {
    matrix.scaled(scale)
}

/// `sum(s + e + i + r)` over all cells of row `row`.
pub fn living_total(matrix: &SnapshotMatrix, row: usize) -> Result<f64> {
    if row >= matrix.n_days() {
        return Err(Error::ZeroPopulation);
    }
    let n = matrix.n_cells();
    Ok(matrix.row(row)[..4 * n].iter().sum())
}

/// First `train_days` rows and the remainder.
pub fn split_train_forecast(matrix: &SnapshotMatrix, train_days: usize) -> Result<(SnapshotMatrix, SnapshotMatrix)> {
    let n = matrix.n_days();
    if train_days == 0 || train_days >= n {
        return Err(Error::InvalidSplit { train_days, n_days: n });
    }
    let part = |range: std::ops::Range<usize>| {
        SnapshotMatrix::with_cadence(
            matrix.days[range.clone()].to_vec(),
            matrix.rows[range].to_vec(),
            matrix.n_cells,
            matrix.cadence,
        )
    };
    Ok((part(0..train_days)?, part(train_days..n)?))
}

/// Daily counts per compartment for one region. Compartments missing from
/// the source file are `None`, never zero-filled.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseSeries {
    pub region: String,
    pub dates: Vec<NaiveDate>,
    pub counts: [Option<Vec<f64>>; N_COMPARTMENTS],
}

impl CaseSeries {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn missing(&self) -> Vec<&'static str> {
        COMPARTMENT_NAMES
            .iter()
            .zip(&self.counts)
            .filter(|(_, c)| c.is_none())
            .map(|(n, _)| *n)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let present: Vec<usize> = (0..N_COMPARTMENTS).filter(|&c| self.counts[c].is_some()).collect();
        let mut header = vec!["date".to_string()];
        header.extend(present.iter().map(|&c| COMPARTMENT_NAMES[c].to_string()));
        w.write_record(&header)?;
        for (k, date) in self.dates.iter().enumerate() {
            let mut rec = vec![date.format("%Y-%m-%d").to_string()];
            rec.extend(present.iter().map(|&c| self.counts[c].as_ref().unwrap()[k].to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, region: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
        let mut records = r.records();
        let header = match records.next() {
            Some(h) => h.map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?,
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "empty file".into(),
                })
            }
        };
        if header.get(0).map(str::trim) != Some("date") {
            return Err(Error::Parse {
                line: 1,
                message: "first column must be `date`".into(),
            });
        }
        let mut columns = Vec::new();
        for name in header.iter().skip(1) {
            let c = COMPARTMENT_NAMES
                .iter()
                .position(|n| *n == name.trim())
                .ok_or_else(|| Error::Parse {
                    line: 1,
                    message: format!("unknown column `{name}`"),
                })?;
            if columns.contains(&c) {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("duplicate column `{name}`"),
                });
            }
            columns.push(c);
        }
        let mut dates: Vec<NaiveDate> = Vec::new();
        let mut counts: [Option<Vec<f64>>; N_COMPARTMENTS] = Default::default();
        for &c in &columns {
            counts[c] = Some(Vec::new());
        }
        for (k, rec) in records.enumerate() {
            let line = k + 2;
            let rec = rec.map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            if rec.len() != columns.len() + 1 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {} fields, found {}", columns.len() + 1, rec.len()),
                });
            }
            let date = NaiveDate::parse_from_str(rec[0].trim(), "%Y-%m-%d").map_err(|_| Error::Parse {
                line,
                message: format!("bad ISO-8601 date `{}`", &rec[0]),
            })?;
            if dates.last().is_some_and(|prev| *prev >= date) {
                return Err(Error::NonMonotonicDates { row: line });
            }
            dates.push(date);
            for (j, &c) in columns.iter().enumerate() {
                let v: f64 = rec[j + 1].trim().parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("bad count `{}`", &rec[j + 1]),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        message: "count is not finite".into(),
                    });
                }
                if v < 0.0 {
                    return Err(Error::NegativeCount {
                        row: line,
                        column: COMPARTMENT_NAMES[c].to_string(),
                    });
                }
                counts[c].as_mut().unwrap().push(v);
            }
        }
        if dates.is_empty() {
            return Err(Error::Parse {
                line: 2,
                message: "no data rows".into(),
            });
        }
        Ok(Self {
            region: region.to_string(),
            dates,
            counts,
        })
    }
}

/// Reads a `date,s,e,i,r,d` CSV; the region label is the file stem.
pub fn load_case_series(path: &Path) -> Result<CaseSeries> {
    let region = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    CaseSeries::read_csv(std::fs::File::open(path)?, &region)
}

/// Turns aggregate counts into density snapshots. With a layout, each
/// compartment takes the spatial shape of the layout field, scaled so that
/// its integral equals the count; without one, the result is a single cell
/// holding `count / area_km2`.
pub fn case_series_to_snapshots(
    series: &CaseSeries,
    area_km2: f64,
    layout: Option<(&CompartmentFields, &Grid)>,
) -> Result<SnapshotMatrix> {
    let missing = series.missing();
    if !missing.is_empty() {
        return Err(Error::InvalidSpec(format!(
            "case series lacks compartments {missing:?}; a full state is required"
        )));
    }
    let origin = series.dates[0];
    let days: Vec<i64> = series.dates.iter().map(|d| (*d - origin).num_days()).collect();
    let counts: Vec<&Vec<f64>> = series.counts.iter().map(|c| c.as_ref().unwrap()).collect();
    match layout {
        None => {
            if !(area_km2 > 0.0) {
                return Err(Error::InvalidSpec("area must be positive".into()));
            }
            let rows = (0..series.len())
                .map(|k| counts.iter().map(|c| c[k] / area_km2).collect())
                .collect();
            SnapshotMatrix::new(days, rows, 1)
        }
        Some((fields, grid)) => {
            check_len("layout vs grid", grid.n_cells(), fields.n_cells())?;
            let n = grid.n_cells();
            let shapes: Vec<Vec<f64>> = fields
                .fields()
                .iter()
                .map(|f| {
                    let mass: f64 = f.iter().sum::<f64>() * grid.cell_area();
                    if mass > 0.0 {
                        f.iter().map(|v| v / mass).collect()
                    } else {
                        vec![1.0 / (n as f64 * grid.cell_area()); n]
                    }
                })
                .collect();
            let rows = (0..series.len())
                .map(|k| {
                    shapes
                        .iter()
                        .zip(&counts)
                        .flat_map(|(shape, c)| shape.iter().map(move |v| v * c[k]))
                        .collect()
                })
                .collect();
            SnapshotMatrix::new(days, rows, n)
        }
    }
}

/// Isotropic Gaussian bump added to one compartment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    pub compartment: usize,
    /// Centre in km.
    pub x: f64,
    pub y: f64,
    pub amplitude: f64,
    pub sigma: f64,
}

impl Bump {
    pub fn value_at(&self, x: f64, y: f64) -> f64 {
        let d2 = (x - self.x).powi(2) + (y - self.y).powi(2);
        self.amplitude * (-d2 / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Sums the bumps at cell centres; `s` additionally carries a uniform
/// background density.
pub fn synth_initial_conditions(grid: &Grid, bumps: &[Bump], s_background: f64) -> Result<CompartmentFields> {
    if !(s_background.is_finite() && s_background >= 0.0) {
        return Err(Error::InvalidSpec(format!(
            "background density must be >= 0, got {s_background}"
        )));
    }
    for b in bumps {
        if b.compartment >= N_COMPARTMENTS {
            return Err(Error::InvalidSpec(format!("no compartment {}", b.compartment)));
        }
        if !(b.amplitude.is_finite() && b.amplitude >= 0.0) {
            return Err(Error::InvalidSpec(format!(
                "bump amplitude must be >= 0, got {}",
                b.amplitude
            )));
        }
        if !(b.sigma.is_finite() && b.sigma > 0.0) {
            return Err(Error::InvalidSpec(format!("bump width must be > 0, got {}", b.sigma)));
        }
        if !(b.x.is_finite() && b.y.is_finite()) {
            return Err(Error::InvalidSpec("bump centre must be finite".into()));
        }
    }
    let mut fields = CompartmentFields::zeros(grid.n_cells());
    fields.s.iter_mut().for_each(|v| *v = s_background);
    for k in 0..grid.n_cells() {
        let (x, y) = grid.cell_center(k);
        for b in bumps {
            let target = fields.fields_mut()[b.compartment].get_mut(k).unwrap();
            *target += b.value_at(x, y);
        }
    }
    Ok(fields)
}
