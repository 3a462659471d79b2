//! TOML run configuration.
//!
//! ```toml
//! [[geometry.parts]]
//! material = { id = 0, rho = 7850.0, cp = 460.0, lambda = 50.0 }
//! lower = [0.0, 0.0]
//! upper = [0.3, 0.3]
//! elements = [30, 30]
//!
//! [[geometry.sensors]]
//! part = 0
//! point = [0.1, 0.2]
//!
//! [time]
//! n_t = 120
//! dt = 1.0
//! ```
//!
//! Every section except `geometry`/`system` is optional; missing keys take the
//! defaults below. Relative paths are resolved against the directory of the
//! configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thermopost_core::eig::{Backend, EigOptions, Formulation};
use thermopost_core::femkit::{
    CouplingSpec, EnvironmentSpec, Face, GeometryConfig, PartSpec, SensorSpec, SourceSpec,
};
use thermopost_core::tt::AmenOptions;

use crate::error::{Error, Result};
use crate::system_io::MaterialRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartEntry {
    pub material: MaterialRecord,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub elements: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingEntry {
    pub part_a: usize,
    pub face_a: String,
    pub part_b: usize,
    pub face_b: String,
    /// W/(m²·K)
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentEntry {
    pub part: usize,
    pub face: String,
    /// W/(m²·K)
    pub alpha: f64,
    /// K
    pub t_env: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceEntry {
    pub part: usize,
    pub face: String,
    #[serde(default)]
    pub id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorEntry {
    pub part: usize,
    pub point: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub parts: Vec<PartEntry>,
    #[serde(default)]
    pub couplings: Vec<CouplingEntry>,
    #[serde(default)]
    pub environment: Vec<EnvironmentEntry>,
    #[serde(default)]
    pub sources: Vec<SourceEntry>,
    #[serde(default)]
    pub sensors: Vec<SensorEntry>,
}

impl GeometrySection {
    pub fn to_spec(&self) -> Result<GeometryConfig> {
        let face = |s: &str| Face::parse(s).map_err(Error::from);
        Ok(GeometryConfig {
            parts: self
                .parts
                .iter()
                .map(|p| PartSpec {
                    material: p.material.into(),
                    lower: p.lower.clone(),
                    upper: p.upper.clone(),
                    elements: p.elements.clone(),
                })
                .collect(),
            couplings: self
                .couplings
                .iter()
                .map(|c| {
                    Ok(CouplingSpec {
                        part_a: c.part_a,
                        face_a: face(&c.face_a)?,
                        part_b: c.part_b,
                        face_b: face(&c.face_b)?,
                        alpha: c.alpha,
                    })
                })
                .collect::<Result<_>>()?,
            environment: self
                .environment
                .iter()
                .map(|e| {
                    Ok(EnvironmentSpec {
                        part: e.part,
                        face: face(&e.face)?,
                        alpha: e.alpha,
                        t_env: e.t_env,
                    })
                })
                .collect::<Result<_>>()?,
            sources: self
                .sources
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    Ok(SourceSpec {
                        part: s.part,
                        face: face(&s.face)?,
                        id: s.id.unwrap_or(k),
                    })
                })
                .collect::<Result<_>>()?,
            sensors: self
                .sensors
                .iter()
                .map(|s| SensorSpec {
                    part: s.part,
                    point: s.point.clone(),
                })
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    /// directory holding a saved system
    pub path: PathBuf,
    /// per-part materials, needed when the saved manifest has none
    #[serde(default)]
    pub materials: Option<Vec<MaterialRecord>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeSection {
    pub n_t: usize,
    /// s
    pub dt: f64,
}

impl Default for TimeSection {
    fn default() -> Self {
        Self { n_t: 120, dt: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    /// s
    pub tau_prior: f64,
    /// K²
    pub target_mean_variance: f64,
    /// constant prior mean, K
    pub mean: f64,
}

impl Default for PriorSection {
    fn default() -> Self {
        Self {
            tau_prior: 1800.0,
            target_mean_variance: 3.0,
            mean: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    /// K
    pub sigma: f64,
    /// K
    pub mean: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self { sigma: 0.1, mean: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormulationChoice {
    /// prior inner product for the direct backend, mass inner product for the
    /// tensor backend
    #[default]
    Auto,
    PriorInner,
    MassInner,
}

impl FormulationChoice {
    pub fn resolve(self, backend: Backend) -> Formulation {
        match (self, backend) {
            (FormulationChoice::PriorInner, _) => Formulation::PriorInner,
            (FormulationChoice::MassInner, _) => Formulation::MassInner,
            (FormulationChoice::Auto, Backend::Direct) => Formulation::PriorInner,
            (FormulationChoice::Auto, Backend::Tensor) => Formulation::MassInner,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EigSection {
    pub rank: usize,
    pub tol: f64,
    pub formulation: FormulationChoice,
    pub max_restarts: usize,
    pub seed: u64,
}

impl Default for EigSection {
    fn default() -> Self {
        let d = EigOptions::default();
        Self {
            rank: 50,
            tol: d.tol,
            formulation: FormulationChoice::Auto,
            max_restarts: d.max_restarts,
            seed: d.seed,
        }
    }
}

impl EigSection {
    pub fn options(&self) -> EigOptions {
        EigOptions {
            rank: self.rank,
            tol: self.tol,
            max_restarts: self.max_restarts,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtSection {
    pub tol: f64,
    pub round_tol: f64,
    pub max_rank: usize,
    pub max_sweeps: usize,
    pub enrich_rank: usize,
}

impl Default for TtSection {
    fn default() -> Self {
        let d = AmenOptions::default();
        Self {
            tol: d.tol,
            round_tol: d.round_tol,
            max_rank: d.max_rank,
            max_sweeps: d.max_sweeps,
            enrich_rank: d.enrich_rank,
        }
    }
}

impl TtSection {
    pub fn options(&self) -> AmenOptions {
        AmenOptions {
            tol: self.tol,
            round_tol: self.round_tol,
            max_rank: self.max_rank,
            max_sweeps: self.max_sweeps,
            enrich_rank: self.enrich_rank,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldFormat {
    Csv,
    Vtk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub formats: Vec<FieldFormat>,
    /// write the dense sensitivity matrix of the direct backend
    pub dump_f: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            formats: vec![FieldFormat::Csv, FieldFormat::Vtk],
            dump_f: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// worker threads; `THERMOPOST_THREADS` overrides
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub geometry: Option<GeometrySection>,
    #[serde(default)]
    pub system: Option<SystemSection>,
    #[serde(default)]
    pub time: TimeSection,
    #[serde(default)]
    pub prior: PriorSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub eig: EigSection,
    #[serde(default)]
    pub tt: TtSection,
    #[serde(default)]
    pub outputs: OutputSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("serializable configuration")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.outputs.dir)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        match (&self.geometry, &self.system) {
            (None, None) => return fail("either [geometry] or [system] is required".into()),
            (Some(_), Some(_)) => return fail("[geometry] and [system] are mutually exclusive".into()),
            _ => {}
        }
        let positive = [
            ("time.dt", self.time.dt),
            ("prior.tau_prior", self.prior.tau_prior),
            ("prior.target_mean_variance", self.prior.target_mean_variance),
            ("noise.sigma", self.noise.sigma),
            ("eig.tol", self.eig.tol),
            ("tt.tol", self.tt.tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.tt.round_tol >= 0.0) {
            return fail(format!("tt.round_tol must be nonnegative, got {}", self.tt.round_tol));
        }
        for (name, v) in [
            ("time.n_t", self.time.n_t),
            ("tt.max_rank", self.tt.max_rank),
            ("tt.max_sweeps", self.tt.max_sweeps),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.run.threads == Some(0) {
            return fail("run.threads must be positive".into());
        }
        if let Some(g) = &self.geometry {
            if g.parts.is_empty() {
                return fail("geometry needs at least one part".into());
            }
            for (k, c) in g.couplings.iter().enumerate() {
                if !(c.alpha >= 0.0) {
                    return fail(format!("coupling {k}: alpha must be nonnegative, got {}", c.alpha));
                }
            }
            for (k, e) in g.environment.iter().enumerate() {
                if !(e.alpha >= 0.0) {
                    return fail(format!("environment {k}: alpha must be nonnegative, got {}", e.alpha));
                }
            }
        }
        Ok(())
    }
}

/// Worker-thread count from `THERMOPOST_THREADS`, falling back to the
/// configuration.
pub fn thread_count(cfg: Option<usize>) -> Result<Option<usize>> {
    match std::env::var("THERMOPOST_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("THERMOPOST_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(cfg),
    }
}
