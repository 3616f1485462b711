//! Field CSV files, JSON reports and rejection tables.
//!
//! A field file has the header `i1,...,id,x1,...,xp` and one row per lattice
//! point with 1-based indices. Rows may come in any order but must cover the
//! lattice exactly once; the extent of each axis is its largest index.
//! Reals are written in shortest round-trip form.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::bootstrap::TestReport;
use crate::error::{Error, Result};
use crate::hilbert::ObservationField;
use crate::lattice::LatticeShape;
use crate::scalar::Scalar;
use crate::sim::RejectionTable;

/// Splits a header into `(d, p)`, requiring exactly `i1..id` then `x1..xp`.
fn parse_header(header: &csv::StringRecord) -> Result<(usize, usize)> {
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    let d = cols.iter().take_while(|c| c.starts_with('i')).count();
    let p = cols.len() - d;
    let bad = |msg: String| Error::data(Some(1), format!("malformed header {cols:?}: {msg}"));
    if d == 0 || p == 0 {
        return Err(bad("need at least one index column i1.. and one value column x1..".into()));
    }
    for (k, c) in cols.iter().enumerate() {
        let want = if k < d { format!("i{}", k + 1) } else { format!("x{}", k - d + 1) };
        if *c != want {
            return Err(bad(format!("column {} should be {want}", k + 1)));
        }
    }
    Ok((d, p))
}

/// Parses a field from CSV text.
pub fn parse_field<R: Read>(reader: R) -> Result<ObservationField<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let (d, p) = parse_header(rdr.headers()?)?;

    let mut points: Vec<(Vec<usize>, Vec<f64>, usize)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec.position().map_or(points.len() + 2, |pos| pos.line() as usize);
        if rec.len() != d + p {
            return Err(Error::data(Some(row), format!("expected {} columns, found {}", d + p, rec.len())));
        }
        let idx = rec
            .iter()
            .take(d)
            .map(|s| match s.parse::<usize>() {
                Ok(i) if i >= 1 => Ok(i),
                _ => Err(Error::data(Some(row), format!("index {s:?} is not a positive integer"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let vals = rec
            .iter()
            .skip(d)
            .map(|s| match s.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                Ok(_) => Err(Error::data(Some(row), format!("non-finite value {s:?}"))),
                Err(_) => Err(Error::data(Some(row), format!("value {s:?} is not a number"))),
            })
            .collect::<Result<Vec<_>>>()?;
        points.push((idx, vals, row));
    }
    if points.is_empty() {
        return Err(Error::data(None, "field file has no data rows"));
    }

    let dims: Vec<usize> = (0..d).map(|l| points.iter().map(|(i, _, _)| i[l]).max().unwrap_or(0)).collect();
    let shape = LatticeShape::new(dims.clone()).map_err(|e| Error::data(None, e.to_string()))?;
    let mut data = vec![0.0; shape.len() * p];
    let mut seen: HashMap<usize, usize> = HashMap::with_capacity(points.len());
    for (idx, vals, row) in &points {
        let zero_based: Vec<usize> = idx.iter().map(|i| i - 1).collect();
        let flat = shape.flat_index(&zero_based);
        if let Some(first) = seen.insert(flat, *row) {
            return Err(Error::data(Some(*row), format!("duplicate lattice point {idx:?} (first seen at row {first})")));
        }
        data[flat * p..(flat + 1) * p].copy_from_slice(vals);
    }
    if seen.len() != shape.len() {
        let missing = (0..shape.len()).find(|f| !seen.contains_key(f)).expect("some point is missing");
        let idx: Vec<usize> = shape.coords(missing).iter().map(|c| c + 1).collect();
        return Err(Error::data(
            None,
            format!("missing lattice point {idx:?}: {} of {} points present for extents {dims:?}", seen.len(), shape.len()),
        ));
    }
    ObservationField::new(shape, p, data)
}

/// Reads a field file.
pub fn read_field(path: impl AsRef<Path>) -> Result<ObservationField<f64>> {
    parse_field(fs::File::open(path)?)
}

/// CSV text of a field, rows in lattice order.
pub fn format_field<S: Scalar>(field: &ObservationField<S>) -> Result<Vec<u8>> {
    let shape = field.shape();
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = (1..=shape.ndim())
        .map(|l| format!("i{l}"))
        .chain((1..=field.p()).map(|k| format!("x{k}")))
        .collect();
    w.write_record(&header)?;
    for flat in 0..shape.len() {
        let rec: Vec<String> = shape
            .coords(flat)
            .iter()
            .map(|c| (c + 1).to_string())
            .chain(field.point(flat).iter().map(|x| x.to_string()))
            .collect();
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Writes a field file atomically.
pub fn write_field<S: Scalar>(path: impl AsRef<Path>, field: &ObservationField<S>) -> Result<()> {
    atomic_write(path, &format_field(field)?)
}

/// Writes `bytes` to a temporary file next to `path`, then renames it.
pub fn atomic_write(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn write_report(path: impl AsRef<Path>, report: &TestReport) -> Result<()> {
    write_json(path, report)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<TestReport> {
    read_json(path)
}

/// One CSV row per grid cell.
pub fn format_table_csv(table: &RejectionTable) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &table.rows {
        w.serialize(row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_table_csv(path: impl AsRef<Path>, table: &RejectionTable) -> Result<()> {
    atomic_write(path, &format_table_csv(table)?)
}

/// The table with its full configuration.
pub fn write_table_json(path: impl AsRef<Path>, table: &RejectionTable) -> Result<()> {
    write_json(path, table)
}

pub fn read_table_json(path: impl AsRef<Path>) -> Result<RejectionTable> {
    read_json(path)
}
