//! PFM reader/writer. Grayscale `Pf` carries depth (NaN = hole), color `PF`
//! carries normals or log-shading. Rows are stored bottom-to-top per the
//! format; a negative scale marks little-endian data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::types::{DepthGrid, Grid2D, LogShadingImage, NormalField};

use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
struct PitchSidecar {
    pitch_x: f64,
    pitch_y: f64,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

pub fn save_depth_pfm(path: &Path, depth: &DepthGrid) -> Result<()> {
    let data: Vec<f32> = depth
        .grid
        .values()
        .iter()
        .zip(depth.grid.mask())
        .map(|(z, m)| if *m { *z as f32 } else { f32::NAN })
        .collect();
    write_pfm(path, depth.width(), depth.height(), 1, &data)?;
    if depth.pitch_x != 1.0 || depth.pitch_y != 1.0 {
        let sidecar = PitchSidecar {
            pitch_x: depth.pitch_x,
            pitch_y: depth.pitch_y,
        };
        let file = File::create(sidecar_path(path))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &sidecar)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    }
    Ok(())
}

pub fn load_depth_pfm(path: &Path) -> Result<DepthGrid> {
    let (width, height, channels, data) = read_pfm(path)?;
    if channels != 1 {
        return Err(Error::parse(
            path.display().to_string(),
            format!("expected grayscale PFM, got {channels} channels"),
        ));
    }
    let mut values = vec![0.0f64; width * height];
    let mut mask = vec![false; width * height];
    for (i, v) in data.iter().enumerate() {
        if v.is_finite() {
            values[i] = *v as f64;
            mask[i] = true;
        }
    }
    let (pitch_x, pitch_y) = match File::open(sidecar_path(path)) {
        Ok(file) => {
            let sidecar: PitchSidecar = serde_json::from_reader(BufReader::new(file))
                .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
            (sidecar.pitch_x, sidecar.pitch_y)
        }
        Err(_) => (1.0, 1.0),
    };
    DepthGrid::new(Grid2D::new(width, height, values, mask)?, pitch_x, pitch_y)
}

pub fn save_normals_pfm(path: &Path, normals: &NormalField) -> Result<()> {
    save_vector_pfm(path, &normals.grid)
}

pub fn load_normals_pfm(path: &Path) -> Result<NormalField> {
    // Renormalize: 32-bit storage perturbs unit length past the invariant.
    let grid = load_vector_pfm(path)?.map(|n| crate::types::orient_camera_facing(n.normalize()));
    NormalField::new(grid)
}

pub fn save_shading_pfm(path: &Path, shading: &LogShadingImage) -> Result<()> {
    save_vector_pfm(path, &shading.grid)
}

pub fn load_shading_pfm(path: &Path) -> Result<LogShadingImage> {
    LogShadingImage::new(load_vector_pfm(path)?)
}

fn save_vector_pfm(path: &Path, grid: &Grid2D<Vector3<f64>>) -> Result<()> {
    let mut data = Vec::with_capacity(grid.width() * grid.height() * 3);
    for (v, m) in grid.values().iter().zip(grid.mask()) {
        if *m {
            data.extend([v.x as f32, v.y as f32, v.z as f32]);
        } else {
            data.extend([f32::NAN; 3]);
        }
    }
    write_pfm(path, grid.width(), grid.height(), 3, &data)
}

fn load_vector_pfm(path: &Path) -> Result<Grid2D<Vector3<f64>>> {
    let (width, height, channels, data) = read_pfm(path)?;
    if channels != 3 {
        return Err(Error::parse(
            path.display().to_string(),
            format!("expected color PFM, got {channels} channels"),
        ));
    }
    let mut values = vec![Vector3::zeros(); width * height];
    let mut mask = vec![false; width * height];
    for i in 0..width * height {
        let v = Vector3::new(
            data[3 * i] as f64,
            data[3 * i + 1] as f64,
            data[3 * i + 2] as f64,
        );
        if v.iter().all(|c| c.is_finite()) {
            values[i] = v;
            mask[i] = true;
        }
    }
    Grid2D::new(width, height, values, mask)
}

/// Rows in `data` are top-to-bottom (our grid order); PFM stores them
/// bottom-to-top, little-endian (negative scale).
fn write_pfm(path: &Path, width: usize, height: usize, channels: usize, data: &[f32]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let magic = if channels == 1 { "Pf" } else { "PF" };
    write!(out, "{magic}\n{width} {height}\n-1.0\n")?;
    let row_len = width * channels;
    for y in (0..height).rev() {
        for v in &data[y * row_len..(y + 1) * row_len] {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_pfm(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let err = |m: &str| Error::parse(path.display().to_string(), m);

    let mut cursor = 0usize;
    let mut token = || -> Result<String> {
        while cursor < bytes.len() && bytes[cursor].is_ascii_whitespace() {
            cursor += 1;
        }
        let start = cursor;
        while cursor < bytes.len() && !bytes[cursor].is_ascii_whitespace() {
            cursor += 1;
        }
        if start == cursor {
            return Err(err("truncated header"));
        }
        let t = std::str::from_utf8(&bytes[start..cursor])
            .map_err(|_| err("non-utf8 header"))?
            .to_string();
        // Exactly one whitespace byte separates the scale from the data.
        cursor += 1;
        Ok(t)
    };

    let magic = token()?;
    let channels = match magic.as_str() {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(err(&format!("bad magic {magic:?}"))),
    };
    // The tokenizer consumes one separator after each token, so unwind the
    // extra skip for multi-space separators by re-tokenizing plain fields.
    let width: usize = token()?
        .parse()
        .map_err(|_| err("bad width"))?;
    let height: usize = token()?
        .parse()
        .map_err(|_| err("bad height"))?;
    let scale: f32 = token()?
        .parse()
        .map_err(|_| err("bad scale"))?;
    let little_endian = scale < 0.0;

    let expected = width * height * channels * 4;
    if bytes.len() < cursor + expected {
        return Err(err(&format!(
            "expected {expected} data bytes, found {}",
            bytes.len().saturating_sub(cursor)
        )));
    }
    let raw = &bytes[cursor..cursor + expected];
    let mut data = vec![0.0f32; width * height * channels];
    let row_len = width * channels;
    for file_row in 0..height {
        let grid_row = height - 1 - file_row; // bottom-to-top storage
        for k in 0..row_len {
            let off = (file_row * row_len + k) * 4;
            let chunk: [u8; 4] = raw[off..off + 4].try_into().unwrap();
            let v = if little_endian {
                f32::from_le_bytes(chunk)
            } else {
                f32::from_be_bytes(chunk)
            };
            data[grid_row * row_len + k] = v;
        }
    }
    Ok((width, height, channels, data))
}
