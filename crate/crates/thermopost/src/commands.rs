//! Subcommand bodies. Each returns the paths it wrote.

use std::path::{Path, PathBuf};

use serde::Serialize;
use thermopost_core::femkit;
use thermopost_core::forward::{simulate, InputSignal, TimeGrid};
use thermopost_core::posterior::{compare_fields, difference_field, FieldComparison};

use crate::config::{FieldFormat, RunConfig};
use crate::error::{Error, Result};
use crate::export::{
    read_field_csv, write_field_csv, write_field_vtk, write_sensitivity, write_spectrum_csv, write_trajectory_csv,
    CalibrationReport,
};
use crate::pipeline::{calibrate, load_bundle, run_posterior_with, run_spectrum, formulation_for, Method};
use crate::report::{render_table, RunReport};
use crate::system_io::{save_system, write_json, SystemBundle};

pub fn assemble(cfg: &RunConfig, out: &Path) -> Result<(SystemBundle, String)> {
    let bundle = load_bundle(cfg)?;
    save_system(out, &bundle)?;
    let summary = femkit::summary(&bundle.system);
    Ok((bundle, summary))
}

fn write_field(cfg: &RunConfig, dir: &Path, stem: &str, bundle: &SystemBundle, values: &[f64], name: &str) -> Result<Vec<PathBuf>> {
    let coords = bundle.node_coords();
    let mut written = Vec::new();
    for format in &cfg.outputs.formats {
        let path = match format {
            FieldFormat::Csv => dir.join(format!("{stem}.csv")),
            FieldFormat::Vtk => dir.join(format!("{stem}.vtk")),
        };
        match format {
            FieldFormat::Csv => write_field_csv(&path, &coords, values, name)?,
            FieldFormat::Vtk => write_field_vtk(&path, &coords, bundle.mesh.as_ref(), values, name)?,
        }
        written.push(path);
    }
    Ok(written)
}

pub struct PosteriorOutcome {
    pub report: RunReport,
    pub report_path: PathBuf,
    pub table: String,
    /// non-empty when a solver missed its tolerance
    pub failures: Vec<String>,
}

pub fn posterior(cfg: &RunConfig, method: Method) -> Result<PosteriorOutcome> {
    let bundle = load_bundle(cfg)?;
    let dir = cfg.output_dir();
    let calibrated = calibrate(cfg, &bundle)?;
    let mut written = Vec::new();
    let calib_path = dir.join("calibration.json");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(&calib_path, &CalibrationReport::new(&calibrated.prior))?;
    written.push(calib_path);
    written.extend(write_field(cfg, &dir, "prior_variance", &bundle, &calibrated.diag, "variance")?);

    let run = run_posterior_with(cfg, &bundle, &calibrated, method, formulation_for(cfg, method))?;
    let name = method.name();
    written.extend(write_field(cfg, &dir, &format!("variance_{name}"), &bundle, &run.variance.values, "variance")?);
    let spec_path = dir.join(format!("spectrum_{name}.csv"));
    write_spectrum_csv(&spec_path, &[(name, &run.spectrum.eigenvalues)])?;
    written.push(spec_path);
    if cfg.outputs.dump_f {
        if let Some(f) = &run.f {
            let p = dir.join("sensitivity.bin");
            write_sensitivity(&p, f)?;
            written.push(p);
        }
    }
    let failures = run.convergence_failures();
    let mut report = run.report;
    let report_path = dir.join(format!("report_{name}.json"));
    written.push(report_path.clone());
    report.outputs = written.iter().map(|p| p.display().to_string()).collect();
    write_json(&report_path, &report)?;
    let table = render_table(&[&report]);
    Ok(PosteriorOutcome {
        report,
        report_path,
        table,
        failures,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub nodes: usize,
    #[serde(flatten)]
    pub stats: FieldComparisonRecord,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct FieldComparisonRecord {
    pub max_abs_diff: f64,
    pub mean_abs_diff: f64,
    pub max_rel_diff: f64,
}

impl From<FieldComparison> for FieldComparisonRecord {
    fn from(c: FieldComparison) -> Self {
        Self {
            max_abs_diff: c.max_abs_diff,
            mean_abs_diff: c.mean_abs_diff,
            max_rel_diff: c.max_rel_diff,
        }
    }
}

/// Statistics of `a − b`; the difference field goes to `out` when given.
pub fn compare(a: &Path, b: &Path, out: Option<&Path>) -> Result<Comparison> {
    let (coords, va) = read_field_csv(a)?;
    let (_, vb) = read_field_csv(b)?;
    let stats = compare_fields(&va, &vb)?;
    if let Some(out) = out {
        write_field_csv(out, &coords, &difference_field(&va, &vb)?, "difference")?;
    }
    Ok(Comparison {
        nodes: va.len(),
        stats: stats.into(),
    })
}

pub fn spectrum(cfg: &RunConfig, methods: &[Method], out: &Path) -> Result<Vec<(Method, Vec<f64>, bool)>> {
    let bundle = load_bundle(cfg)?;
    let calibrated = calibrate(cfg, &bundle)?;
    let mut results = Vec::new();
    for &m in methods {
        let spec = run_spectrum(cfg, &bundle, &calibrated, m)?;
        results.push((m, spec.eigenvalues, spec.converged));
    }
    let columns: Vec<(&str, &[f64])> = results.iter().map(|(m, v, _)| (m.name(), v.as_slice())).collect();
    write_spectrum_csv(out, &columns)?;
    Ok(results)
}

/// Forward run from a uniform initial temperature under the nominal input.
pub fn simulate_outputs(cfg: &RunConfig, initial: f64, out: &Path) -> Result<()> {
    let bundle = load_bundle(cfg)?;
    let sys = &bundle.system;
    let grid = TimeGrid::new(cfg.time.n_t, cfg.time.dt)?;
    let input = match &bundle.nominal_input {
        Some(u) if !u.is_empty() => InputSignal::Constant(u.clone()),
        _ => InputSignal::Zero,
    };
    let traj = simulate(sys, &grid, &vec![initial; sys.n_x], &input)?;
    write_trajectory_csv(out, &grid, &traj)
}
