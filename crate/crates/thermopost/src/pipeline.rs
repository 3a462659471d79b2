//! calibrate → sensitivities → eigenpairs → variance, with timings.

use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use thermopost_core::eig::{misfit_eigenpairs, Backend, Formulation, SpectralApproximation};
use thermopost_core::femkit::{assemble, build_coupled_geometry, MaterialPart};
use thermopost_core::forward::TimeGrid;
use thermopost_core::noise::NoiseModel;
use thermopost_core::posterior::{posterior_variance, VarianceField};
use thermopost_core::prior::PriorModel;
use thermopost_core::sens::{AdjointSolver, ParameterToObservable, SensitivityBundle};
use thermopost_core::tt::TtForwardMap;
use thermopost_core::Error as CoreError;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::report::{self, EigInfo, PhaseTimings, RunReport, SystemInfo, TtInfo};
use crate::system_io::{load_system, SystemBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    Direct,
    Tensor,
}

impl Method {
    pub fn backend(self) -> Backend {
        match self {
            Method::Direct => Backend::Direct,
            Method::Tensor => Backend::Tensor,
        }
    }

    pub fn name(self) -> &'static str {
        self.backend().name()
    }
}

/// Assembles the configured geometry or loads the configured system.
pub fn load_bundle(cfg: &RunConfig) -> Result<SystemBundle> {
    if let Some(g) = &cfg.geometry {
        let model = build_coupled_geometry(&g.to_spec()?)?;
        let system = assemble(&model)?;
        return Ok(SystemBundle::from_model(&model, system));
    }
    let section = cfg
        .system
        .as_ref()
        .ok_or_else(|| Error::Config("either [geometry] or [system] is required".into()))?;
    let mut bundle = load_system(&cfg.resolve(&section.path))?;
    if let Some(m) = &section.materials {
        if m.len() != bundle.system.n_parts() {
            return Err(Error::Config(format!(
                "{} materials given for {} parts",
                m.len(),
                bundle.system.n_parts()
            )));
        }
        bundle.materials = Some(m.iter().copied().map(MaterialPart::from).collect());
    }
    Ok(bundle)
}

/// Prior model and its nodal variances.
pub struct CalibratedPrior {
    pub prior: PriorModel,
    pub diag: Vec<f64>,
    pub seconds: f64,
}

pub fn calibrate(cfg: &RunConfig, bundle: &SystemBundle) -> Result<CalibratedPrior> {
    let start = Instant::now();
    let materials = bundle
        .materials
        .as_deref()
        .ok_or_else(|| Error::Config("the system has no materials; add [system].materials".into()))?;
    let sys = &bundle.system;
    let prior = PriorModel::calibrate(sys, materials, cfg.prior.tau_prior, cfg.prior.target_mean_variance)?
        .with_mean(vec![cfg.prior.mean; sys.n_x])?;
    let diag = prior_diagonal(&prior);
    Ok(CalibratedPrior {
        prior,
        diag,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Nodal prior variances, one independent pair of solves per node.
pub fn prior_diagonal(prior: &PriorModel) -> Vec<f64> {
    (0..prior.dim()).into_par_iter().map(|k| prior.variance_entry(k)).collect()
}

/// `8·(n_t+1)·n_y·n_x`, or `None` on overflow.
pub fn sensitivity_bytes(n_points: usize, n_y: usize, n_x: usize) -> Option<usize> {
    n_points.checked_mul(n_y)?.checked_mul(n_x)?.checked_mul(8)
}

/// Dense `F`, one adjoint recurrence per output in parallel.
pub fn assemble_f_parallel(bundle: &SystemBundle, grid: &TimeGrid) -> Result<SensitivityBundle> {
    let sys = &bundle.system;
    let bytes = sensitivity_bytes(grid.n_points(), sys.n_y, sys.n_x).unwrap_or(usize::MAX);
    if let Some(avail) = report::available_memory_bytes() {
        if bytes as u64 > avail {
            return Err(CoreError::Resource { bytes }.into());
        }
    }
    let f = SensitivityBundle::zeros(grid.n_points(), sys.n_y, sys.n_x)?;
    let solver = AdjointSolver::new(sys, grid)?;
    let shared = Mutex::new(f);
    (0..sys.n_y).into_par_iter().for_each(|j| {
        solver.sensitivity_rows(j, |s, row| {
            shared.lock().unwrap().block_row_mut(s, j).copy_from_slice(row);
        });
    });
    Ok(shared.into_inner().unwrap())
}

pub struct PosteriorRun {
    pub variance: VarianceField,
    pub spectrum: SpectralApproximation,
    pub f: Option<SensitivityBundle>,
    pub report: RunReport,
}

impl PosteriorRun {
    /// Reasons the run cannot be trusted, empty when everything converged.
    pub fn convergence_failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.spectrum.converged {
            out.push(format!(
                "eigensolver did not converge after {} restarts",
                self.spectrum.restarts
            ));
        }
        if let Some(tt) = &self.report.tt {
            if tt.unconverged > 0 {
                out.push(format!(
                    "{} of {} AMEn solves missed the tolerance (max residual {:e})",
                    tt.unconverged, tt.solves, tt.max_residual
                ));
            }
        }
        out
    }
}

/// Formulation actually used: the tensor backend always works in the mass
/// inner product.
pub fn formulation_for(cfg: &RunConfig, method: Method) -> Formulation {
    let requested = cfg.eig.formulation.resolve(method.backend());
    if method == Method::Tensor && requested == Formulation::PriorInner {
        log::warn!("the tensor backend uses the mass_inner formulation; ignoring prior_inner");
        return Formulation::MassInner;
    }
    requested
}

pub fn run_posterior(cfg: &RunConfig, bundle: &SystemBundle, method: Method) -> Result<PosteriorRun> {
    let calibrated = calibrate(cfg, bundle)?;
    run_posterior_with(cfg, bundle, &calibrated, method, formulation_for(cfg, method))
}

/// As [`run_posterior`] with an existing prior and an explicit formulation.
pub fn run_posterior_with(
    cfg: &RunConfig,
    bundle: &SystemBundle,
    calibrated: &CalibratedPrior,
    method: Method,
    formulation: Formulation,
) -> Result<PosteriorRun> {
    let sys = &bundle.system;
    let grid = TimeGrid::new(cfg.time.n_t, cfg.time.dt)?;
    let noise = NoiseModel::new(cfg.noise.sigma, grid.n_points() * sys.n_y)?.with_mean(cfg.noise.mean);
    let opts = cfg.eig.options();
    let prior = &calibrated.prior;
    let mut timings = PhaseTimings {
        prior_variance: calibrated.seconds,
        ..Default::default()
    };

    let (spectrum, f, tt) = match method {
        Method::Direct => {
            let start = Instant::now();
            let f = assemble_f_parallel(bundle, &grid)?;
            timings.sensitivity = start.elapsed().as_secs_f64();
            let start = Instant::now();
            let spec = misfit_eigenpairs(&f, prior, &noise, formulation, Backend::Direct, &opts)?;
            timings.eigenproblem = start.elapsed().as_secs_f64();
            (spec, Some(f), None)
        }
        Method::Tensor => {
            let start = Instant::now();
            let map = TtForwardMap::new(sys, &grid, cfg.tt.options());
            timings.sensitivity = start.elapsed().as_secs_f64();
            let start = Instant::now();
            let spec = misfit_eigenpairs(&map, prior, &noise, formulation, Backend::Tensor, &opts)?;
            timings.eigenproblem = start.elapsed().as_secs_f64();
            (spec, None, Some(TtInfo::new(map.stats(), cfg.tt.tol)))
        }
    };

    let start = Instant::now();
    let amen_tol = (method == Method::Tensor).then_some(cfg.tt.tol);
    let variance =
        posterior_variance(&spectrum, prior, &calibrated.diag, formulation)?.with_tolerances(Some(opts.tol), amen_tol);
    timings.posterior_variance = start.elapsed().as_secs_f64();

    let report = RunReport {
        method: method.name().into(),
        formulation: formulation.name().into(),
        system: SystemInfo {
            n_x: sys.n_x,
            n_y: sys.n_y,
            m: sys.m,
            parts: sys.n_parts(),
            n_t: grid.n_t,
            dt: grid.dt,
        },
        total_seconds: timings.total(),
        timings,
        peak_memory_bytes: report::peak_memory_bytes(),
        f_memory_bytes: f.as_ref().map(|f| f.memory_bytes),
        eig: EigInfo::new(&spectrum, opts.rank, opts.tol),
        tt,
        clamped_variances: variance.metadata.clamped,
        outputs: Vec::new(),
    };
    Ok(PosteriorRun {
        variance,
        spectrum,
        f,
        report,
    })
}

/// Leading eigenvalues only.
pub fn run_spectrum(cfg: &RunConfig, bundle: &SystemBundle, calibrated: &CalibratedPrior, method: Method) -> Result<SpectralApproximation> {
    let sys = &bundle.system;
    let grid = TimeGrid::new(cfg.time.n_t, cfg.time.dt)?;
    let noise = NoiseModel::new(cfg.noise.sigma, grid.n_points() * sys.n_y)?;
    let formulation = formulation_for(cfg, method);
    let opts = cfg.eig.options();
    let map: Box<dyn ParameterToObservable + '_> = match method {
        Method::Direct => Box::new(assemble_f_parallel(bundle, &grid)?),
        Method::Tensor => Box::new(TtForwardMap::new(sys, &grid, cfg.tt.options())),
    };
    Ok(misfit_eigenpairs(map.as_ref(), &calibrated.prior, &noise, formulation, method.backend(), &opts)?)
}
