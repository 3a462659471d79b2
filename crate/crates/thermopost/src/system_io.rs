//! On-disk layout of an assembled system: one Matrix Market file per matrix
//! plus a JSON manifest, with optional materials and mesh.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thermopost_core::femkit::{MaterialPart, MultiPartModel, StateSpaceSystem};
use thermopost_core::CsrMatrix;

use crate::error::{Error, Result};
use crate::mtx::{read_matrix_market, write_matrix_market};

pub const MANIFEST: &str = "manifest.json";
pub const MESH: &str = "mesh.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialRecord {
    pub id: usize,
    pub rho: f64,
    pub cp: f64,
    pub lambda: f64,
}

impl From<MaterialPart> for MaterialRecord {
    fn from(m: MaterialPart) -> Self {
        Self {
            id: m.id,
            rho: m.rho,
            cp: m.cp,
            lambda: m.lambda,
        }
    }
}

impl From<MaterialRecord> for MaterialPart {
    fn from(m: MaterialRecord) -> Self {
        Self {
            id: m.id,
            rho: m.rho,
            cp: m.cp,
            lambda: m.lambda,
        }
    }
}

/// Node coordinates and simplex cells, used for field export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub dim: usize,
    pub nodes: Vec<[f64; 3]>,
    /// global node indices per simplex
    pub cells: Vec<Vec<usize>>,
}

impl Mesh {
    pub fn from_model(model: &MultiPartModel) -> Self {
        let offsets = model.part_offsets();
        let cells = model
            .parts
            .iter()
            .zip(&offsets)
            .flat_map(|(p, &off)| p.elements.iter().map(move |e| e.iter().map(|&v| v + off).collect()))
            .collect();
        Self {
            dim: model.dim,
            nodes: model.node_coords(),
            cells,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_x: usize,
    pub n_y: usize,
    pub m: usize,
    pub part_offsets: Vec<usize>,
    pub units: BTreeMap<String, String>,
    /// matrix name → file name relative to the manifest
    pub files: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub materials: Option<Vec<MaterialRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominal_input: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh: Option<String>,
}

/// A system together with the metadata needed by the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemBundle {
    pub system: StateSpaceSystem,
    pub materials: Option<Vec<MaterialPart>>,
    pub nominal_input: Option<Vec<f64>>,
    pub mesh: Option<Mesh>,
}

impl SystemBundle {
    pub fn from_model(model: &MultiPartModel, system: StateSpaceSystem) -> Self {
        Self {
            system,
            materials: Some(model.materials()),
            nominal_input: Some(model.nominal_input()),
            mesh: Some(Mesh::from_model(model)),
        }
    }

    pub fn node_coords(&self) -> Vec<[f64; 3]> {
        match &self.mesh {
            Some(m) => m.nodes.clone(),
            None => vec![[0.0; 3]; self.system.n_x],
        }
    }
}

const MATRICES: [(&str, &str); 6] = [
    ("m_phys", "J/K"),
    ("k_phys", "W/K"),
    ("m_unit", "m^d"),
    ("k_unit", "m^(d-2)"),
    ("n", "input-dependent"),
    ("c", "1"),
];

fn matrix<'a>(sys: &'a StateSpaceSystem, name: &str) -> &'a CsrMatrix {
    match name {
        "m_phys" => &sys.m_phys,
        "k_phys" => &sys.k_phys,
        "m_unit" => &sys.m_unit,
        "k_unit" => &sys.k_unit,
        "n" => &sys.n,
        "c" => &sys.c,
        _ => unreachable!(),
    }
}

pub fn save_system(dir: &Path, bundle: &SystemBundle) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let sys = &bundle.system;
    let mut files = BTreeMap::new();
    let mut units = BTreeMap::new();
    for (name, unit) in MATRICES {
        let file = format!("{name}.mtx");
        write_matrix_market(&dir.join(&file), matrix(sys, name))?;
        files.insert(name.to_string(), file);
        units.insert(name.to_string(), unit.to_string());
    }
    units.insert("state".into(), "K".into());
    units.insert("time".into(), "s".into());
    let mesh = match &bundle.mesh {
        Some(mesh) => {
            write_json(&dir.join(MESH), mesh)?;
            Some(MESH.to_string())
        }
        None => None,
    };
    let manifest = Manifest {
        n_x: sys.n_x,
        n_y: sys.n_y,
        m: sys.m,
        part_offsets: sys.part_offsets.clone(),
        units,
        files,
        materials: bundle
            .materials
            .as_ref()
            .map(|m| m.iter().copied().map(MaterialRecord::from).collect()),
        nominal_input: bundle.nominal_input.clone(),
        mesh,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn load_system(dir: &Path) -> Result<SystemBundle> {
    let manifest_path = dir.join(MANIFEST);
    let manifest: Manifest = read_json(&manifest_path)?;
    let mut loaded = BTreeMap::new();
    for (name, _) in MATRICES {
        let file = manifest
            .files
            .get(name)
            .ok_or_else(|| Error::format(&manifest_path, format!("manifest lists no file for {name}")))?;
        let path = dir.join(file);
        let a = read_matrix_market(&path)?;
        let (rows, cols) = match name {
            "n" => (manifest.n_x, manifest.m),
            "c" => (manifest.n_y, manifest.n_x),
            _ => (manifest.n_x, manifest.n_x),
        };
        if (a.nrows(), a.ncols()) != (rows, cols) {
            return Err(Error::format(
                &path,
                format!(
                    "manifest expects {name} to be {rows}x{cols}, file holds {}x{}",
                    a.nrows(),
                    a.ncols()
                ),
            ));
        }
        loaded.insert(name, a);
    }
    let mut take = |n: &str| loaded.remove(n).unwrap();
    let system = StateSpaceSystem::from_matrices(
        manifest.part_offsets.clone(),
        take("m_phys"),
        take("k_phys"),
        take("m_unit"),
        take("k_unit"),
        take("n"),
        take("c"),
    )?;
    let mesh: Option<Mesh> = match &manifest.mesh {
        Some(f) => Some(read_json(&dir.join(f))?),
        None => None,
    };
    if let Some(mesh) = &mesh {
        if mesh.nodes.len() != system.n_x {
            return Err(Error::format(
                dir.join(manifest.mesh.as_deref().unwrap_or(MESH)),
                format!("mesh has {} nodes, system has {}", mesh.nodes.len(), system.n_x),
            ));
        }
    }
    if let Some(m) = &manifest.materials {
        if m.len() != system.n_parts() {
            return Err(Error::format(
                &manifest_path,
                format!("{} materials for {} parts", m.len(), system.n_parts()),
            ));
        }
    }
    if let Some(u) = &manifest.nominal_input {
        if u.len() != system.m {
            return Err(Error::format(
                &manifest_path,
                format!("nominal input has {} entries, system has {} inputs", u.len(), system.m),
            ));
        }
    }
    Ok(SystemBundle {
        system,
        materials: manifest
            .materials
            .map(|m| m.into_iter().map(MaterialPart::from).collect()),
        nominal_input: manifest.nominal_input,
        mesh,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST)
}
