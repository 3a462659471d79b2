//! Field, spectrum and matrix writers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thermopost_core::forward::{TimeGrid, Trajectory};
use thermopost_core::prior::PriorModel;
use thermopost_core::sens::SensitivityBundle;

use crate::error::{Error, Result};
use crate::system_io::{write_json, Mesh};

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `node,x,y,z,variance`, one row per node. Values use the shortest
/// round-tripping representation.
pub fn write_field_csv(path: &Path, coords: &[[f64; 3]], values: &[f64], column: &str) -> Result<()> {
    check_nodes(coords.len(), values.len())?;
    let mut out = String::with_capacity(64 * values.len() + 32);
    writeln!(out, "node,x,y,z,{column}").unwrap();
    for (k, (p, v)) in coords.iter().zip(values).enumerate() {
        writeln!(out, "{k},{},{},{},{v:?}", p[0], p[1], p[2]).unwrap();
    }
    write_text(path, &out)
}

/// Reads the last column of a field CSV written by [`write_field_csv`],
/// returning coordinates and values.
pub fn read_field_csv(path: &Path) -> Result<(Vec<[f64; 3]>, Vec<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::format(path, "empty file"))?;
    if header.split(',').count() != 5 {
        return Err(Error::format(path, format!("expected 5 columns, header is {header:?}")));
    }
    let mut coords = Vec::new();
    let mut values = Vec::new();
    for (k, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(Error::format(path, format!("row {}: expected 5 columns", k + 1)));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::format(path, format!("row {}: bad number {s:?}", k + 1)))
        };
        coords.push([num(fields[1])?, num(fields[2])?, num(fields[3])?]);
        values.push(num(fields[4])?);
    }
    Ok((coords, values))
}

fn vtk_cell_type(n_vertices: usize) -> Option<u8> {
    match n_vertices {
        1 => Some(1),
        2 => Some(3),
        3 => Some(5),
        4 => Some(10),
        _ => None,
    }
}

/// Legacy ASCII VTK unstructured grid with one point-data scalar. Without a
/// mesh every node is written as a vertex cell.
pub fn write_field_vtk(path: &Path, coords: &[[f64; 3]], mesh: Option<&Mesh>, values: &[f64], name: &str) -> Result<()> {
    check_nodes(coords.len(), values.len())?;
    let vertex_cells: Vec<Vec<usize>>;
    let cells: &[Vec<usize>] = match mesh {
        Some(m) => &m.cells,
        None => {
            vertex_cells = (0..coords.len()).map(|k| vec![k]).collect();
            &vertex_cells
        }
    };
    let mut out = String::with_capacity(48 * coords.len() + 32 * cells.len() + 256);
    out.push_str("# vtk DataFile Version 3.0\n");
    writeln!(out, "{name}").unwrap();
    out.push_str("ASCII\nDATASET UNSTRUCTURED_GRID\n");
    writeln!(out, "POINTS {} double", coords.len()).unwrap();
    for p in coords {
        writeln!(out, "{:?} {:?} {:?}", p[0], p[1], p[2]).unwrap();
    }
    let size: usize = cells.iter().map(|c| c.len() + 1).sum();
    writeln!(out, "CELLS {} {size}", cells.len()).unwrap();
    for c in cells {
        write!(out, "{}", c.len()).unwrap();
        for v in c {
            if *v >= coords.len() {
                return Err(Error::Config(format!("cell references node {v} of {}", coords.len())));
            }
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    writeln!(out, "CELL_TYPES {}", cells.len()).unwrap();
    for c in cells {
        let t = vtk_cell_type(c.len()).ok_or_else(|| Error::Config(format!("no VTK cell type for {} vertices", c.len())))?;
        writeln!(out, "{t}").unwrap();
    }
    writeln!(out, "POINT_DATA {}", coords.len()).unwrap();
    writeln!(out, "SCALARS {name} double 1\nLOOKUP_TABLE default").unwrap();
    for v in values {
        writeln!(out, "{v:?}").unwrap();
    }
    write_text(path, &out)
}

/// `index,<label>...`; shorter columns are padded with empty cells.
pub fn write_spectrum_csv(path: &Path, columns: &[(&str, &[f64])]) -> Result<()> {
    let rows = columns.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    let mut out = String::from("index");
    for (label, _) in columns {
        write!(out, ",{label}").unwrap();
    }
    out.push('\n');
    for i in 0..rows {
        write!(out, "{i}").unwrap();
        for (_, c) in columns {
            match c.get(i) {
                Some(v) => write!(out, ",{v:?}").unwrap(),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    write_text(path, &out)
}

/// `time,y0,y1,…`, one row per time point.
pub fn write_trajectory_csv(path: &Path, grid: &TimeGrid, traj: &Trajectory) -> Result<()> {
    let n_y = traj.outputs.first().map_or(0, Vec::len);
    let mut out = String::from("time");
    for j in 0..n_y {
        write!(out, ",y{j}").unwrap();
    }
    out.push('\n');
    for (s, y) in traj.outputs.iter().enumerate() {
        write!(out, "{:?}", grid.time(s)).unwrap();
        for v in y {
            write!(out, ",{v:?}").unwrap();
        }
        out.push('\n');
    }
    write_text(path, &out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixHeader {
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub order: String,
}

/// Raw little-endian row-major `f64` dump of `F` with a JSON sidecar
/// `<path>.json`.
pub fn write_sensitivity(path: &Path, f: &SensitivityBundle) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 * f.data().len());
    for v in f.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let header = MatrixHeader {
        rows: f.rows(),
        cols: f.cols(),
        dtype: "f64le".into(),
        order: "row-major".into(),
    };
    write_json(&sidecar(path), &header)
}

pub fn read_sensitivity(path: &Path) -> Result<(MatrixHeader, Vec<f64>)> {
    let header: MatrixHeader = crate::system_io::read_json(&sidecar(path))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 8 * header.rows * header.cols {
        return Err(Error::format(
            path,
            format!("{} bytes for a {}x{} matrix", bytes.len(), header.rows, header.cols),
        ));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, data))
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    name.into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartCalibration {
    pub part: usize,
    pub beta: f64,
    pub a: f64,
    pub b: f64,
    pub achieved_mean_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub tau_prior: f64,
    pub target_mean_variance: f64,
    pub parts: Vec<PartCalibration>,
}

impl CalibrationReport {
    pub fn new(prior: &PriorModel) -> Self {
        Self {
            tau_prior: prior.prior_time_constant,
            target_mean_variance: prior.target_mean_variance,
            parts: prior
                .parts
                .iter()
                .enumerate()
                .map(|(part, p)| PartCalibration {
                    part,
                    beta: p.beta,
                    a: p.a,
                    b: p.b,
                    achieved_mean_variance: p.achieved_mean_variance,
                })
                .collect(),
        }
    }
}

fn check_nodes(coords: usize, values: usize) -> Result<()> {
    if coords != values {
        return Err(Error::Config(format!("{values} values for {coords} nodes")));
    }
    Ok(())
}
