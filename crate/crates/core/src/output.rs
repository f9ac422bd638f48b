//! Legacy VTK and CSV writers.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crate::mesh::TriangleMesh;

/// Per-vertex data attached to a VTK dump.
#[derive(Debug, Clone, Copy)]
pub enum PointData<'a> {
    Scalar {
        name: &'a str,
        values: &'a [f64],
    },
    /// Interleaved `(x, y)` pairs, one pair per vertex (at least).
    Vector {
        name: &'a str,
        values: &'a [f64],
    },
}

/// Writes the triangulation as a legacy ASCII unstructured grid.
pub fn write_vtk_grid<W: Write>(out: &mut W, mesh: &TriangleMesh, title: &str) -> io::Result<()> {
    writeln!(out, "# vtk DataFile Version 3.0")?;
    writeln!(out, "{}", title.lines().next().unwrap_or(""))?;
    writeln!(out, "ASCII")?;
    writeln!(out, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(out, "POINTS {} double", mesh.num_vertices())?;
    for p in mesh.vertices() {
        writeln!(out, "{} {} 0", p[0], p[1])?;
    }
    let nt = mesh.num_triangles();
    writeln!(out, "CELLS {} {}", nt, 4 * nt)?;
    for t in mesh.triangles() {
        writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
    }
    writeln!(out, "CELL_TYPES {nt}")?;
    for _ in 0..nt {
        writeln!(out, "5")?;
    }
    Ok(())
}

/// Writes the grid followed by point data. Only the first `num_vertices`
/// entries of each field are used, so P2 coefficient vectors (vertex dofs
/// first) can be passed directly.
pub fn write_vtk_fields<W: Write>(
    out: &mut W,
    mesh: &TriangleMesh,
    title: &str,
    fields: &[PointData<'_>],
) -> io::Result<()> {
    write_vtk_grid(out, mesh, title)?;
    let nv = mesh.num_vertices();
    if fields.is_empty() {
        return Ok(());
    }
    writeln!(out, "POINT_DATA {nv}")?;
    for field in fields {
        match *field {
            PointData::Scalar { name, values } => {
                check_len(name, values.len(), nv)?;
                writeln!(out, "SCALARS {name} double 1")?;
                writeln!(out, "LOOKUP_TABLE default")?;
                for v in &values[..nv] {
                    writeln!(out, "{v}")?;
                }
            }
            PointData::Vector { name, values } => {
                check_len(name, values.len(), 2 * nv)?;
                writeln!(out, "VECTORS {name} double")?;
                for v in values[..2 * nv].chunks_exact(2) {
                    writeln!(out, "{} {} 0", v[0], v[1])?;
                }
            }
        }
    }
    Ok(())
}

fn check_len(name: &str, got: usize, need: usize) -> io::Result<()> {
    if got < need {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("field {name} has {got} values, need {need}")));
    }
    Ok(())
}

pub fn write_vtk_file(path: &Path, mesh: &TriangleMesh, title: &str, fields: &[PointData<'_>]) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_vtk_fields(&mut out, mesh, title, fields)?;
    out.flush()
}

/// Writes a header line and numeric rows.
pub fn write_csv<W: Write>(out: &mut W, header: &[&str], rows: &[Vec<f64>]) -> io::Result<()> {
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format_number(*v)).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn write_csv_file(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_csv(&mut out, header, rows)?;
    out.flush()
}

/// Shortest round-trip representation; NaN is written as an empty cell.
pub fn format_number(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:e}")
    }
}
