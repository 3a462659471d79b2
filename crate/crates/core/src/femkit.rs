//! Coupled multi-part finite-element models.
//!
//! Each part is an axis-aligned segment, rectangle or box meshed with a
//! structured grid of linear simplices (segments, triangles, Kuhn
//! tetrahedra). Node numbering is part-major and lexicographic within a part
//! with the x index running fastest. Interfaces between parts must be
//! geometrically matching, node to node.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::DMatrix;

use crate::error::{check_len, Error, Result};
use crate::sparse::{CsrMatrix, TripletBuilder};

const COORD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialPart {
    pub id: usize,
    /// density [kg/m³]
    pub rho: f64,
    /// specific heat capacity [J/(kg·K)]
    pub cp: f64,
    /// heat conductivity [W/(m·K)]
    pub lambda: f64,
}

impl MaterialPart {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.cp > 0.0 && self.lambda > 0.0) {
            return Err(Error::Validation(format!(
                "material of part {} needs rho, cp, lambda > 0 (got {}, {}, {})",
                self.id, self.rho, self.cp, self.lambda
            )));
        }
        Ok(())
    }

    /// Volumetric heat capacity ρ·C_p.
    pub fn heat_capacity(&self) -> f64 {
        self.rho * self.cp
    }
}

/// One side of a box, e.g. `x-` (axis 0, lower) or `z+` (axis 2, upper).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Face {
    pub axis: usize,
    pub upper: bool,
}

impl Face {
    pub fn parse(s: &str) -> Result<Self> {
        let bytes = s.trim().as_bytes();
        if bytes.len() != 2 {
            return Err(Error::Validation(format!("unknown face '{s}'")));
        }
        let axis = match bytes[0] {
            b'x' | b'X' => 0,
            b'y' | b'Y' => 1,
            b'z' | b'Z' => 2,
            _ => return Err(Error::Validation(format!("unknown face '{s}'"))),
        };
        let upper = match bytes[1] {
            b'+' => true,
            b'-' => false,
            _ => return Err(Error::Validation(format!("unknown face '{s}'"))),
        };
        Ok(Self { axis, upper })
    }
}

impl core::fmt::Display for Face {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let axis = ['x', 'y', 'z'][self.axis];
        write!(f, "{axis}{}", if self.upper { '+' } else { '-' })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartSpec {
    pub material: MaterialPart,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub elements: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingSpec {
    pub part_a: usize,
    pub face_a: Face,
    pub part_b: usize,
    pub face_b: Face,
    /// exchange coefficient [W/(m²·K)]
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentSpec {
    pub part: usize,
    pub face: Face,
    /// exchange coefficient [W/(m²·K)]
    pub alpha: f64,
    /// environment temperature [K]
    pub t_env: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpec {
    pub part: usize,
    pub face: Face,
    pub id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorSpec {
    pub part: usize,
    pub point: Vec<f64>,
}

/// Description of a desk-scale multi-part geometry.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GeometryConfig {
    pub parts: Vec<PartSpec>,
    pub couplings: Vec<CouplingSpec>,
    pub environment: Vec<EnvironmentSpec>,
    pub sources: Vec<SourceSpec>,
    pub sensors: Vec<SensorSpec>,
}

/// Structured simplex mesh of one part. Element and facet connectivity use
/// part-local node indices.
#[derive(Debug, Clone, PartialEq)]
pub struct PartMesh {
    pub material: MaterialPart,
    pub lower: [f64; 3],
    pub upper: [f64; 3],
    pub counts: [usize; 3],
    pub nodes: Vec<[f64; 3]>,
    pub elements: Vec<Vec<usize>>,
}

/// Boundary facets (simplices of dimension `dim - 1`) of one part.
#[derive(Debug, Clone, PartialEq)]
pub struct FacetSet {
    pub part: usize,
    pub face: Face,
    pub facets: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub part_a: usize,
    pub part_b: usize,
    /// Interface facets on the side of `part_a`.
    pub facets: FacetSet,
    /// Matched node pairs `(local node in a, local node in b)`.
    pub node_pairs: Vec<(usize, usize)>,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub facets: FacetSet,
    pub alpha: f64,
    pub t_env: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Source {
    pub facets: FacetSet,
    pub id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sensor {
    pub part: usize,
    pub point: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiPartModel {
    pub dim: usize,
    pub parts: Vec<PartMesh>,
    pub couplings: Vec<Coupling>,
    pub environment: Vec<Environment>,
    pub sources: Vec<Source>,
    pub sensors: Vec<Sensor>,
}

impl MultiPartModel {
    pub fn part_offsets(&self) -> Vec<usize> {
        let mut offsets = vec![0];
        for p in &self.parts {
            offsets.push(offsets.last().unwrap() + p.nodes.len());
        }
        offsets
    }

    pub fn n_nodes(&self) -> usize {
        self.parts.iter().map(|p| p.nodes.len()).sum()
    }

    /// Coordinates of all nodes in global order.
    pub fn node_coords(&self) -> Vec<[f64; 3]> {
        self.parts.iter().flat_map(|p| p.nodes.iter().copied()).collect()
    }

    pub fn materials(&self) -> Vec<MaterialPart> {
        self.parts.iter().map(|p| p.material).collect()
    }

    /// Distinct environment temperatures in order of first appearance; one
    /// input channel each.
    pub fn environment_temperatures(&self) -> Vec<f64> {
        let mut temps: Vec<f64> = Vec::new();
        for env in &self.environment {
            if !temps.contains(&env.t_env) {
                temps.push(env.t_env);
            }
        }
        temps
    }

    /// Input vector with all sources switched off and the environment
    /// channels at their temperatures: `u = (0, …, 0, T_env…)`.
    pub fn nominal_input(&self) -> Vec<f64> {
        let mut u = vec![0.0; self.sources.len()];
        u.extend(self.environment_temperatures());
        u
    }
}

fn pad3(v: &[f64]) -> [f64; 3] {
    let mut out = [0.0; 3];
    out[..v.len()].copy_from_slice(v);
    out
}

fn node_index(counts: &[usize; 3], idx: [usize; 3]) -> usize {
    idx[0] + (counts[0] + 1) * (idx[1] + (counts[1] + 1) * idx[2])
}

fn build_part(spec: &PartSpec, dim: usize) -> Result<PartMesh> {
    spec.material.validate()?;
    if spec.lower.len() != dim || spec.upper.len() != dim || spec.elements.len() != dim {
        return Err(Error::Validation(format!(
            "part {} must give lower, upper and element counts for {dim} axes",
            spec.material.id
        )));
    }
    if spec.elements.contains(&0) {
        return Err(Error::Validation(format!("part {} has a zero element count", spec.material.id)));
    }
    if spec.lower.iter().zip(&spec.upper).any(|(l, u)| !(u > l)) {
        return Err(Error::Validation(format!("part {} has an empty extent", spec.material.id)));
    }
    let lower = pad3(&spec.lower);
    let upper = pad3(&spec.upper);
    let mut counts = [0usize; 3];
    counts[..dim].copy_from_slice(&spec.elements);

    let mut nodes = Vec::new();
    for k in 0..=counts[2] {
        for j in 0..=counts[1] {
            for i in 0..=counts[0] {
                let idx = [i, j, k];
                let mut x = [0.0; 3];
                for a in 0..dim {
                    let t = idx[a] as f64 / counts[a] as f64;
                    x[a] = if idx[a] == counts[a] { upper[a] } else { lower[a] + t * (upper[a] - lower[a]) };
                }
                nodes.push(x);
            }
        }
    }

    let mut elements = Vec::new();
    let at = |i: usize, j: usize, k: usize| node_index(&counts, [i, j, k]);
    match dim {
        1 => {
            for i in 0..counts[0] {
                elements.push(vec![at(i, 0, 0), at(i + 1, 0, 0)]);
            }
        }
        2 => {
            for j in 0..counts[1] {
                for i in 0..counts[0] {
                    let (v00, v10, v01, v11) = (at(i, j, 0), at(i + 1, j, 0), at(i, j + 1, 0), at(i + 1, j + 1, 0));
                    elements.push(vec![v00, v10, v11]);
                    elements.push(vec![v00, v11, v01]);
                }
            }
        }
        3 => {
            const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            for k in 0..counts[2] {
                for j in 0..counts[1] {
                    for i in 0..counts[0] {
                        for perm in PERMS {
                            let mut corner = [i, j, k];
                            let mut tet = vec![at(corner[0], corner[1], corner[2])];
                            for axis in perm {
                                corner[axis] += 1;
                                tet.push(at(corner[0], corner[1], corner[2]));
                            }
                            elements.push(tet);
                        }
                    }
                }
            }
        }
        _ => unreachable!(),
    }

    Ok(PartMesh {
        material: spec.material,
        lower,
        upper,
        counts,
        nodes,
        elements,
    })
}

fn face_facets(part_index: usize, mesh: &PartMesh, dim: usize, face: Face) -> Result<FacetSet> {
    if face.axis >= dim {
        return Err(Error::Validation(format!("face {face} does not exist in {dim}D")));
    }
    let c = &mesh.counts;
    let fixed = if face.upper { c[face.axis] } else { 0 };
    let tangential: Vec<usize> = (0..dim).filter(|&a| a != face.axis).collect();
    let at = |t: &[usize]| {
        let mut idx = [0usize; 3];
        idx[face.axis] = fixed;
        for (a, &v) in tangential.iter().zip(t) {
            idx[*a] = v;
        }
        node_index(c, idx)
    };
    let mut facets = Vec::new();
    match dim {
        1 => facets.push(vec![at(&[])]),
        2 => {
            for p in 0..c[tangential[0]] {
                facets.push(vec![at(&[p]), at(&[p + 1])]);
            }
        }
        3 => {
            let (t0, t1) = (tangential[0], tangential[1]);
            for q in 0..c[t1] {
                for p in 0..c[t0] {
                    let (c00, c10, c01, c11) = (at(&[p, q]), at(&[p + 1, q]), at(&[p, q + 1]), at(&[p + 1, q + 1]));
                    facets.push(vec![c00, c10, c11]);
                    facets.push(vec![c00, c11, c01]);
                }
            }
        }
        _ => unreachable!(),
    }
    Ok(FacetSet {
        part: part_index,
        face,
        facets,
    })
}

fn facet_nodes(set: &FacetSet) -> Vec<usize> {
    let mut nodes: Vec<usize> = set.facets.iter().flatten().copied().collect();
    nodes.sort_unstable();
    nodes.dedup();
    nodes
}

fn close(a: &[f64; 3], b: &[f64; 3], scale: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= COORD_TOL * scale)
}

fn check_part(index: usize, n_parts: usize, what: &str) -> Result<()> {
    if index >= n_parts {
        return Err(Error::Validation(format!("{what} refers to missing part {index}")));
    }
    Ok(())
}

/// Meshes every part and resolves couplings, boundary sets and sensors.
pub fn build_coupled_geometry(spec: &GeometryConfig) -> Result<MultiPartModel> {
    if spec.parts.is_empty() {
        return Err(Error::Validation("geometry has no parts".into()));
    }
    let dim = spec.parts[0].lower.len();
    if !(1..=3).contains(&dim) {
        return Err(Error::Validation(format!("unsupported dimension {dim}")));
    }
    let parts = spec
        .parts
        .iter()
        .map(|p| build_part(p, dim))
        .collect::<Result<Vec<_>>>()?;
    let n_parts = parts.len();
    let scale = parts
        .iter()
        .flat_map(|p| p.lower.iter().chain(&p.upper))
        .fold(1.0f64, |m, v| m.max(v.abs()));

    let mut couplings = Vec::new();
    for (ci, c) in spec.couplings.iter().enumerate() {
        check_part(c.part_a, n_parts, "coupling")?;
        check_part(c.part_b, n_parts, "coupling")?;
        if c.part_a == c.part_b {
            return Err(Error::Validation(format!("coupling {ci} couples part {} to itself", c.part_a)));
        }
        if !(c.alpha >= 0.0) {
            return Err(Error::Validation(format!("coupling {ci}: alpha must be >= 0, got {}", c.alpha)));
        }
        let facets = face_facets(c.part_a, &parts[c.part_a], dim, c.face_a)?;
        let other = face_facets(c.part_b, &parts[c.part_b], dim, c.face_b)?;
        let nodes_a = facet_nodes(&facets);
        let nodes_b = facet_nodes(&other);
        if nodes_a.len() != nodes_b.len() {
            return Err(Error::Geometry(format!(
                "coupling {ci}: face {} of part {} has {} nodes, face {} of part {} has {}",
                c.face_a,
                c.part_a,
                nodes_a.len(),
                c.face_b,
                c.part_b,
                nodes_b.len()
            )));
        }
        let mut node_pairs = Vec::with_capacity(nodes_a.len());
        for &na in &nodes_a {
            let xa = &parts[c.part_a].nodes[na];
            let nb = nodes_b
                .iter()
                .copied()
                .find(|&nb| close(xa, &parts[c.part_b].nodes[nb], scale))
                .ok_or_else(|| {
                    Error::Geometry(format!(
                        "coupling {ci}: node {xa:?} of part {} has no coincident node on face {} of part {}",
                        c.part_a, c.face_b, c.part_b
                    ))
                })?;
            node_pairs.push((na, nb));
        }
        couplings.push(Coupling {
            part_a: c.part_a,
            part_b: c.part_b,
            facets,
            node_pairs,
            alpha: c.alpha,
        });
    }

    let mut environment = Vec::new();
    for e in &spec.environment {
        check_part(e.part, n_parts, "environment")?;
        if !(e.alpha >= 0.0) {
            return Err(Error::Validation(format!("environment alpha must be >= 0, got {}", e.alpha)));
        }
        if !e.t_env.is_finite() {
            return Err(Error::Validation("environment temperature must be finite".into()));
        }
        environment.push(Environment {
            facets: face_facets(e.part, &parts[e.part], dim, e.face)?,
            alpha: e.alpha,
            t_env: e.t_env,
        });
    }

    let mut sources = Vec::new();
    for s in &spec.sources {
        check_part(s.part, n_parts, "source")?;
        sources.push(Source {
            facets: face_facets(s.part, &parts[s.part], dim, s.face)?,
            id: s.id,
        });
    }

    let mut sensors = Vec::new();
    for (k, s) in spec.sensors.iter().enumerate() {
        check_part(s.part, n_parts, "sensor")?;
        if s.point.len() != dim {
            return Err(Error::Validation(format!("sensor {k} needs {dim} coordinates")));
        }
        sensors.push(Sensor {
            part: s.part,
            point: pad3(&s.point),
        });
    }

    Ok(MultiPartModel {
        dim,
        parts,
        couplings,
        environment,
        sources,
        sensors,
    })
}

/// Linear state-space system `𝕄 ẋ = −𝕂 x + N u`, `y = C x` together with
/// the unit-coefficient matrices used by the prior and the parameter inner
/// product.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceSystem {
    pub n_x: usize,
    pub n_y: usize,
    pub m: usize,
    pub part_offsets: Vec<usize>,
    /// 𝕄 = blockdiag(ρC_p M⁽ⁱ⁾) [J/K]
    pub m_phys: CsrMatrix,
    /// 𝕂 = blockdiag(λ K⁽ⁱ⁾) + Robin terms [W/K]
    pub k_phys: CsrMatrix,
    pub m_unit: CsrMatrix,
    pub k_unit: CsrMatrix,
    /// n_x × m
    pub n: CsrMatrix,
    /// n_y × n_x
    pub c: CsrMatrix,
}

impl StateSpaceSystem {
    /// Assembles a system from externally provided matrices, checking all
    /// dimensions against each other.
    #[allow(clippy::too_many_arguments)]
    pub fn from_matrices(
        part_offsets: Vec<usize>,
        m_phys: CsrMatrix,
        k_phys: CsrMatrix,
        m_unit: CsrMatrix,
        k_unit: CsrMatrix,
        n: CsrMatrix,
        c: CsrMatrix,
    ) -> Result<Self> {
        let n_x = m_phys.nrows();
        let sys = Self {
            n_x,
            n_y: c.nrows(),
            m: n.ncols(),
            part_offsets,
            m_phys,
            k_phys,
            m_unit,
            k_unit,
            n,
            c,
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_x;
        for (what, a) in [
            ("M_phys", &self.m_phys),
            ("K_phys", &self.k_phys),
            ("M_unit", &self.m_unit),
            ("K_unit", &self.k_unit),
        ] {
            check_len(what, n, a.nrows())?;
            check_len(what, n, a.ncols())?;
        }
        check_len("N rows", n, self.n.nrows())?;
        check_len("N columns", self.m, self.n.ncols())?;
        check_len("C rows", self.n_y, self.c.nrows())?;
        check_len("C columns", n, self.c.ncols())?;
        let offsets = &self.part_offsets;
        if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != n || offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!(
                "part offsets {offsets:?} do not partition {n} degrees of freedom"
            )));
        }
        Ok(())
    }

    pub fn n_parts(&self) -> usize {
        self.part_offsets.len() - 1
    }

    pub fn part_range(&self, part: usize) -> core::ops::Range<usize> {
        self.part_offsets[part]..self.part_offsets[part + 1]
    }
}

struct SimplexGeometry {
    measure: f64,
    /// gradients of the barycentric basis functions (only for volume elements)
    gradients: Vec<[f64; 3]>,
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

fn simplex_geometry(points: &[[f64; 3]], dim: usize, with_gradients: bool) -> Result<SimplexGeometry> {
    let k = points.len() - 1;
    if k == 0 {
        return Ok(SimplexGeometry {
            measure: 1.0,
            gradients: Vec::new(),
        });
    }
    // edge vectors restricted to the ambient dimension
    let edges = DMatrix::from_fn(dim, k, |r, c| points[c + 1][r] - points[0][r]);
    let gram = edges.transpose() * &edges;
    let det = gram.determinant();
    let scale = edges.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(det > 1e-24 * libm::pow(scale, 2.0 * k as f64)) {
        return Err(Error::Assembly(format!("degenerate element with vertices {points:?}")));
    }
    let measure = libm::sqrt(det) / factorial(k);
    let mut gradients = Vec::new();
    if with_gradients {
        debug_assert_eq!(k, dim);
        let inv = edges
            .try_inverse()
            .ok_or_else(|| Error::Assembly(format!("singular element with vertices {points:?}")))?;
        let mut g0 = [0.0; 3];
        gradients.push(g0);
        for i in 0..k {
            let mut g = [0.0; 3];
            for r in 0..dim {
                g[r] = inv[(i, r)];
                g0[r] -= inv[(i, r)];
            }
            gradients.push(g);
        }
        gradients[0] = g0;
    }
    Ok(SimplexGeometry { measure, gradients })
}

fn simplex_mass(measure: f64, n: usize, i: usize, j: usize) -> f64 {
    // ∫ φ_i φ_j over a k-simplex = |T| (1 + δ_ij) / ((k+1)(k+2)) with n = k+1
    let base = measure / (n as f64 * (n as f64 + 1.0));
    if i == j {
        2.0 * base
    } else {
        base
    }
}

/// Boundary mass matrix `∫_Γ φ_k φ_l` as part-local triplets.
fn boundary_mass(mesh: &PartMesh, set: &FacetSet, dim: usize) -> Result<Vec<(usize, usize, f64)>> {
    let mut out = Vec::new();
    for facet in &set.facets {
        let pts: Vec<[f64; 3]> = facet.iter().map(|&v| mesh.nodes[v]).collect();
        let geo = simplex_geometry(&pts, dim, false)?;
        for (a, &va) in facet.iter().enumerate() {
            for (b, &vb) in facet.iter().enumerate() {
                out.push((va, vb, simplex_mass(geo.measure, facet.len(), a, b)));
            }
        }
    }
    Ok(out)
}

/// Barycentric coordinates of `point` in the simplex, if it lies inside.
fn locate(point: &[f64; 3], pts: &[[f64; 3]], dim: usize) -> Option<Vec<f64>> {
    let jac = DMatrix::from_fn(dim, dim, |r, c| pts[c + 1][r] - pts[0][r]);
    let rhs = nalgebra::DVector::from_fn(dim, |r, _| point[r] - pts[0][r]);
    let lam = jac.lu().solve(&rhs)?;
    let mut weights = Vec::with_capacity(dim + 1);
    weights.push(1.0 - lam.iter().sum::<f64>());
    weights.extend(lam.iter().copied());
    if weights.iter().all(|&w| w >= -1e-10) {
        Some(weights)
    } else {
        None
    }
}

/// Assembles the coupled state-space system.
///
/// Inputs are ordered sources first, then one channel per distinct
/// environment temperature, so that `u = (Q_src…, T_env…)` reproduces the
/// flux boundary conditions.
pub fn assemble(model: &MultiPartModel) -> Result<StateSpaceSystem> {
    let dim = model.dim;
    let offsets = model.part_offsets();
    let n_x = *offsets.last().unwrap();

    let mut m_unit = TripletBuilder::new(n_x, n_x);
    let mut k_unit = TripletBuilder::new(n_x, n_x);
    let mut m_phys = TripletBuilder::new(n_x, n_x);
    let mut k_phys = TripletBuilder::new(n_x, n_x);

    for (p, mesh) in model.parts.iter().enumerate() {
        let off = offsets[p];
        let rho_cp = mesh.material.heat_capacity();
        let lambda = mesh.material.lambda;
        for element in &mesh.elements {
            let pts: Vec<[f64; 3]> = element.iter().map(|&v| mesh.nodes[v]).collect();
            let geo = simplex_geometry(&pts, dim, true)?;
            for (a, &va) in element.iter().enumerate() {
                for (b, &vb) in element.iter().enumerate() {
                    let mass = simplex_mass(geo.measure, element.len(), a, b);
                    let grad: f64 = (0..dim).map(|r| geo.gradients[a][r] * geo.gradients[b][r]).sum();
                    let stiff = geo.measure * grad;
                    let (gi, gj) = (off + va, off + vb);
                    m_unit.push(gi, gj, mass);
                    k_unit.push(gi, gj, stiff);
                    m_phys.push(gi, gj, rho_cp * mass);
                    k_phys.push(gi, gj, lambda * stiff);
                }
            }
        }
    }

    for c in &model.couplings {
        let mesh_a = &model.parts[c.part_a];
        let pair_of = |na: usize| c.node_pairs.iter().find(|(a, _)| *a == na).map(|&(_, b)| b).unwrap();
        let (oa, ob) = (offsets[c.part_a], offsets[c.part_b]);
        for (ka, la, v) in boundary_mass(mesh_a, &c.facets, dim)? {
            let w = c.alpha * v;
            let (kb, lb) = (pair_of(ka), pair_of(la));
            k_phys.push(oa + ka, oa + la, w);
            k_phys.push(ob + kb, ob + lb, w);
            k_phys.push(oa + ka, ob + lb, -w);
            k_phys.push(ob + kb, oa + la, -w);
        }
    }

    let temps = model.environment_temperatures();
    let m = model.sources.len() + temps.len();
    let mut n = TripletBuilder::new(n_x, m);
    for (col, src) in model.sources.iter().enumerate() {
        let off = offsets[src.facets.part];
        for (k, _, v) in boundary_mass(&model.parts[src.facets.part], &src.facets, dim)? {
            n.push(off + k, col, v);
        }
    }
    for env in &model.environment {
        let part = env.facets.part;
        let off = offsets[part];
        let col = model.sources.len() + temps.iter().position(|&t| t == env.t_env).unwrap();
        for (k, l, v) in boundary_mass(&model.parts[part], &env.facets, dim)? {
            k_phys.push(off + k, off + l, env.alpha * v);
            n.push(off + k, col, env.alpha * v);
        }
    }

    let mut c = TripletBuilder::new(model.sensors.len(), n_x);
    for (s, sensor) in model.sensors.iter().enumerate() {
        let mesh = &model.parts[sensor.part];
        let off = offsets[sensor.part];
        let hit = mesh.elements.iter().find_map(|el| {
            let pts: Vec<[f64; 3]> = el.iter().map(|&v| mesh.nodes[v]).collect();
            locate(&sensor.point, &pts, dim).map(|w| (el, w))
        });
        let (element, weights) = hit.ok_or(Error::Location {
            sensor: s,
            part: sensor.part,
            point: sensor.point,
        })?;
        for (&v, w) in element.iter().zip(weights) {
            if w != 0.0 {
                c.push(s, off + v, w);
            }
        }
    }

    StateSpaceSystem::from_matrices(
        offsets,
        m_phys.build(),
        k_phys.build(),
        m_unit.build(),
        k_unit.build(),
        n.build(),
        c.build(),
    )
}

/// Human-readable summary line for CLI output.
pub fn summary(sys: &StateSpaceSystem) -> String {
    format!(
        "n_x = {}, n_y = {}, m = {}, parts = {}",
        sys.n_x,
        sys.n_y,
        sys.m,
        sys.n_parts()
    )
}
