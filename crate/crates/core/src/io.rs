//! Field exchange as CSV.
//!
//! Scalar files carry the header `i,j,x,y,value`, vector files
//! `i,j,x,y,vx,vy`. Rows run over `i` fastest, then `j`, and every value is
//! written with 17 significant digits so a round trip is exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::discretization::{DiscreteField, DiscreteVectorField, GridSpec};
use crate::error::{MfgError, Result};

const SCALAR_HEADER: [&str; 5] = ["i", "j", "x", "y", "value"];
const VECTOR_HEADER: [&str; 6] = ["i", "j", "x", "y", "vx", "vy"];

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(e: csv::Error) -> MfgError {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => MfgError::Io(e),
        other => MfgError::Format(format!("{other:?}")),
    }
}

fn write_rows<W: Write>(out: W, grid: &GridSpec, header: &[&str], values: impl Fn(usize) -> Vec<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(csv_err)?;
    for k in 0..grid.node_count() {
        let (i, j) = grid.ij(k);
        let [x, y] = grid.node(k);
        let mut rec = vec![i.to_string(), j.to_string(), fmt(x), fmt(y)];
        rec.extend(values(k).into_iter().map(fmt));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_scalar<W: Write>(out: W, grid: &GridSpec, field: &[f64]) -> Result<()> {
    check_len(grid, field.len())?;
    write_rows(out, grid, &SCALAR_HEADER, |k| vec![field[k]])
}

pub fn write_vector<W: Write>(out: W, grid: &GridSpec, field: &DiscreteVectorField) -> Result<()> {
    check_len(grid, field.len())?;
    write_rows(out, grid, &VECTOR_HEADER, |k| vec![field[k][0], field[k][1]])
}

pub fn write_scalar_file(path: &Path, grid: &GridSpec, field: &[f64]) -> Result<()> {
    write_scalar(std::io::BufWriter::new(std::fs::File::create(path)?), grid, field)
}

pub fn write_vector_file(path: &Path, grid: &GridSpec, field: &DiscreteVectorField) -> Result<()> {
    write_vector(std::io::BufWriter::new(std::fs::File::create(path)?), grid, field)
}

fn check_len(grid: &GridSpec, len: usize) -> Result<()> {
    if len != grid.node_count() {
        return Err(MfgError::InvalidInput(format!("field has {len} values, grid has {} nodes", grid.node_count())));
    }
    Ok(())
}

/// Reads rows in file order and checks each `(i, j)` against the grid.
fn read_rows<R: Read>(input: R, grid: &GridSpec, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_reader(input);
    let found: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
    if found != header {
        return Err(MfgError::Format(format!("expected header {}, found {}", header.join(","), found.join(","))));
    }
    let width = header.len() - 4;
    let mut rows = Vec::with_capacity(grid.node_count());
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = k + 2;
        if k >= grid.node_count() {
            return Err(MfgError::Format(format!("line {line}: more rows than grid nodes")));
        }
        let int = |c: usize| -> Result<usize> {
            rec[c].trim().parse().map_err(|_| MfgError::Format(format!("line {line}: bad index {:?}", &rec[c])))
        };
        let (i, j) = grid.ij(k);
        if (int(0)?, int(1)?) != (i, j) {
            return Err(MfgError::Format(format!("line {line}: expected node ({i}, {j})")));
        }
        let vals = (4..4 + width)
            .map(|c| {
                let v: f64 =
                    rec[c].trim().parse().map_err(|_| MfgError::Format(format!("line {line}: bad value {:?}", &rec[c])))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(MfgError::Format(format!("line {line}: non-finite value")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(vals);
    }
    if rows.len() != grid.node_count() {
        return Err(MfgError::Format(format!("{} rows for {} grid nodes", rows.len(), grid.node_count())));
    }
    Ok(rows)
}

pub fn read_scalar<R: Read>(input: R, grid: &GridSpec) -> Result<DiscreteField> {
    Ok(read_rows(input, grid, &SCALAR_HEADER)?.into_iter().map(|r| r[0]).collect::<Vec<_>>().into())
}

pub fn read_vector<R: Read>(input: R, grid: &GridSpec) -> Result<DiscreteVectorField> {
    Ok(read_rows(input, grid, &VECTOR_HEADER)?.into_iter().map(|r| [r[0], r[1]]).collect::<Vec<_>>().into())
}

pub fn read_scalar_file(path: &Path, grid: &GridSpec) -> Result<DiscreteField> {
    read_scalar(std::fs::File::open(path)?, grid)
}

pub fn read_vector_file(path: &Path, grid: &GridSpec) -> Result<DiscreteVectorField> {
    read_vector(std::fs::File::open(path)?, grid)
}
