//! CSV form of a [`ScalarField`]: header `nx,ny,dx,dy`, one row with those
//! values, then one cell value per line in row-major order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::grid::{Grid2D, ScalarField};
use crate::error::{Error, Result};

pub fn write_field<W: Write>(field: &ScalarField, mut w: W) -> Result<()> {
    let g = &field.grid;
    writeln!(w, "nx,ny,dx,dy")?;
    writeln!(w, "{},{},{:.16e},{:.16e}", g.nx, g.ny, g.dx, g.dy)?;
    for v in &field.values {
        writeln!(w, "{v:.16e}")?;
    }
    Ok(())
}

pub fn read_field<R: Read>(r: R) -> Result<ScalarField> {
    let mut lines = BufReader::new(r).lines();
    let mut next = |what: &str| -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Parse(format!("missing {what}")))?
            .map_err(Error::from)
    };
    let header = next("header")?;
    if header.trim() != "nx,ny,dx,dy" {
        return Err(Error::Parse(format!("unexpected header {header:?}")));
    }
    let dims = next("grid line")?;
    let parts: Vec<&str> = dims.trim().split(',').collect();
    if parts.len() != 4 {
        return Err(Error::Parse(format!("bad grid line {dims:?}")));
    }
    let int = |s: &str| s.trim().parse::<usize>().map_err(|e| Error::Parse(format!("{s:?}: {e}")));
    let real = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{s:?}: {e}")));
    let grid = Grid2D::new(int(parts[0])?, int(parts[1])?, real(parts[2])?, real(parts[3])?)?;
    let mut values = Vec::with_capacity(grid.n_cells());
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        values.push(real(&line)?);
    }
    ScalarField::new(grid, values).map_err(|e| Error::Parse(e.to_string()))
}

pub fn save_field(field: &ScalarField, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_field(field, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_field(path: &Path) -> Result<ScalarField> {
    read_field(std::fs::File::open(path)?)
}
