//! CSV ingestion and emission for graphs, coordinates and signals.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::spectral_graph::{Edge, Graph};

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_path(path).map_err(csv_error)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

fn parse_f64(field: &str, line: usize) -> Result<f64> {
    let v: f64 = field.parse().map_err(|_| Error::Parse {
        line,
        message: format!("not a number: {field:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("non-finite value {field:?}"),
        });
    }
    Ok(v)
}

/// Dense `[0, N)` labels for node ids; numeric ids sort numerically.
fn dense_ids(ids: impl IntoIterator<Item = String>) -> BTreeMap<String, usize> {
    let mut unique: Vec<String> = ids.into_iter().collect();
    unique.sort_by(|a, b| match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    });
    unique.dedup();
    unique.into_iter().enumerate().map(|(i, id)| (id, i)).collect()
}

/// Edge list with header `u,v,w`.
pub fn load_edges_csv(path: impl AsRef<Path>) -> Result<Graph> {
    let mut rdr = reader(path.as_ref())?;
    let mut raw = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 3 {
            return Err(Error::Parse {
                line,
                message: format!("expected 3 fields u,v,w, found {}", record.len()),
            });
        }
        let w = parse_f64(&record[2], line)?;
        raw.push((record[0].to_string(), record[1].to_string(), w, line));
    }
    let ids = dense_ids(raw.iter().flat_map(|(u, v, _, _)| [u.clone(), v.clone()]));
    let edges = raw.iter().map(|(u, v, w, _)| Edge {
        u: ids[u],
        v: ids[v],
        weight: *w,
    });
    Graph::new(ids.len(), edges.collect::<Vec<_>>())
}

pub fn write_edges_csv(g: &Graph, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_error)?;
    w.write_record(["u", "v", "w"]).map_err(csv_error)?;
    for e in g.edges() {
        w.write_record([e.u.to_string(), e.v.to_string(), format!("{:?}", e.weight)]).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Coordinates with header `id,x1,...,xd`, returned in dense id order.
pub fn load_coords_csv(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let mut rdr = reader(path.as_ref())?;
    let width = rdr.headers().map_err(csv_error)?.len();
    if width < 2 {
        return Err(Error::Parse {
            line: 1,
            message: "expected header id,x1,...".into(),
        });
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != width {
            return Err(Error::InconsistentNodeCount(format!("line {line} has {} fields, header has {width}", record.len())));
        }
        let coords = record.iter().skip(1).map(|f| parse_f64(f, line)).collect::<Result<Vec<_>>>()?;
        rows.push((record[0].to_string(), coords));
    }
    let ids = dense_ids(rows.iter().map(|(id, _)| id.clone()));
    if ids.len() != rows.len() {
        return Err(Error::InconsistentNodeCount("duplicate node ids".into()));
    }
    let mut out = vec![Vec::new(); rows.len()];
    for (id, coords) in rows {
        out[ids[&id]] = coords;
    }
    Ok(out)
}

/// Signals with one header row and one row per time step, one column per node.
pub fn load_signals_csv(path: impl AsRef<Path>) -> Result<Matrix> {
    let mut rdr = reader(path.as_ref())?;
    let n = rdr.headers().map_err(csv_error)?.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != n {
            return Err(Error::InconsistentNodeCount(format!("line {line} has {} values, header has {n}", record.len())));
        }
        for f in record.iter() {
            values.push(parse_f64(f, line)?);
        }
        rows += 1;
    }
    Ok(Matrix::from_row_slice(rows, n, &values))
}

pub fn write_signals_csv(signals: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_error)?;
    w.write_record((0..signals.ncols()).map(|i| format!("n{i}"))).map_err(csv_error)?;
    for row in signals.row_iter() {
        w.write_record(row.iter().map(|v| format!("{v:?}"))).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}
