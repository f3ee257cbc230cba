//! Point files: headerless CSV, one point per row, `.` decimal separator, LF
//! line endings.

use std::io::{Read, Write};
use std::path::Path;

use crate::baselines::{GaussianMeasure, GaussianParams};
use crate::error::{create_file, open_file, Error, Result};
use crate::kernels::SampleSet;

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn read_rows(reader: impl Read, path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, e.to_string()))?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| parse_err(path, format!("row {}: `{f}` is not a number", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn write_rows<'a>(out: impl Write, rows: impl Iterator<Item = &'a [f64]>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(crate::selection::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a point file.
pub fn read_points(path: &Path) -> Result<SampleSet> {
    let rows = read_rows(open_file(path)?, path)?;
    if rows.is_empty() {
        return Err(parse_err(path, "no points"));
    }
    let d = rows[0].len();
    if let Some(i) = rows.iter().position(|r| r.len() != d) {
        return Err(parse_err(
            path,
            format!("row {} has {} columns, expected {d}", i + 1, rows[i].len()),
        ));
    }
    SampleSet::from_rows(&rows).map_err(|e| parse_err(path, e.to_string()))
}

pub fn write_points_to(out: impl Write, points: &SampleSet) -> Result<()> {
    write_rows(out, points.iter())
}

pub fn write_points(path: &Path, points: &SampleSet) -> Result<()> {
    write_points_to(create_file(path)?, points)
}

/// Gaussian parameters as CSV: the mean on the first row, then the `d`
/// covariance rows.
pub fn write_gaussian(path: &Path, g: &GaussianMeasure) -> Result<()> {
    let p = GaussianParams::from(g.clone());
    let mut rows = vec![p.mean];
    rows.extend(p.covariance);
    write_rows(create_file(path)?, rows.iter().map(Vec::as_slice))
}

pub fn read_gaussian(path: &Path) -> Result<GaussianMeasure> {
    let mut rows = read_rows(open_file(path)?, path)?;
    if rows.is_empty() {
        return Err(parse_err(path, "empty parameter file"));
    }
    let mean = rows.remove(0);
    let d = mean.len();
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(parse_err(
            path,
            format!("expected a {d}x{d} covariance after the mean row"),
        ));
    }
    GaussianMeasure::try_from(GaussianParams {
        mean,
        covariance: rows,
    })
}
