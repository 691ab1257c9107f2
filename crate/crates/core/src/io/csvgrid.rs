//! Comma-separated depth grids; `NaN` (any case) or empty cells are holes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{DepthGrid, Grid2D};

pub fn load_depth_csv(path: &Path) -> Result<DepthGrid> {
    let text = fs::read_to_string(path)?;
    let err = |m: String| Error::parse(path.display().to_string(), m);

    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for cell in line.split(',') {
            let cell = cell.trim();
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                row.push(None);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| err(format!("bad number {cell:?} on line {}", line_no + 1)))?;
                row.push(v.is_finite().then_some(v));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(err("empty grid".into()));
    }
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(err("ragged rows".into()));
    }
    let height = rows.len();
    let mut values = vec![0.0; width * height];
    let mut mask = vec![false; width * height];
    for (y, row) in rows.iter().enumerate() {
        for (x, cell) in row.iter().enumerate() {
            if let Some(v) = cell {
                values[y * width + x] = *v;
                mask[y * width + x] = true;
            }
        }
    }
    DepthGrid::new(Grid2D::new(width, height, values, mask)?, 1.0, 1.0)
}

pub fn save_depth_csv(path: &Path, depth: &DepthGrid) -> Result<()> {
    let mut out = String::new();
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            if x > 0 {
                out.push(',');
            }
            match depth.grid.get(x, y) {
                Some(z) => out.push_str(&format!("{z}")),
                None => out.push_str("NaN"),
            }
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
