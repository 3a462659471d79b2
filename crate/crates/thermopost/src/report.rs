//! Run reports: phase timings, memory, solver statistics.

use std::fmt::Write as _;
use std::fs;

use serde::{Deserialize, Serialize};
use thermopost_core::eig::SpectralApproximation;
use thermopost_core::tt::TtStatsSnapshot;

/// Wall-clock seconds per phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    /// offline; excluded from `total`
    pub prior_variance: f64,
    /// dense `F` for the direct backend, operator setup for the tensor backend
    pub sensitivity: f64,
    pub eigenproblem: f64,
    pub posterior_variance: f64,
}

impl PhaseTimings {
    pub fn total(&self) -> f64 {
        self.sensitivity + self.eigenproblem + self.posterior_variance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemInfo {
    pub n_x: usize,
    pub n_y: usize,
    pub m: usize,
    pub parts: usize,
    pub n_t: usize,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigInfo {
    pub requested_rank: usize,
    pub eigen_rank: usize,
    pub tol: f64,
    pub converged: bool,
    pub restarts: usize,
    pub h_applications: usize,
    pub largest: Option<f64>,
    pub smallest: Option<f64>,
    pub max_residual: Option<f64>,
}

impl EigInfo {
    pub fn new(spec: &SpectralApproximation, requested_rank: usize, tol: f64) -> Self {
        Self {
            requested_rank,
            eigen_rank: spec.eigen_rank(),
            tol,
            converged: spec.converged,
            restarts: spec.restarts,
            h_applications: spec.h_applications,
            largest: spec.eigenvalues.first().copied(),
            smallest: spec.eigenvalues.last().copied(),
            max_residual: spec.residuals.iter().copied().reduce(f64::max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtInfo {
    pub tol: f64,
    pub solves: usize,
    pub sweeps: usize,
    pub max_rank: usize,
    pub unconverged: usize,
    pub max_residual: f64,
}

impl TtInfo {
    pub fn new(s: TtStatsSnapshot, tol: f64) -> Self {
        Self {
            tol,
            solves: s.solves,
            sweeps: s.sweeps,
            max_rank: s.max_rank,
            unconverged: s.unconverged,
            max_residual: s.max_residual,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub formulation: String,
    pub system: SystemInfo,
    pub timings: PhaseTimings,
    pub total_seconds: f64,
    /// high-water resident set size, when the platform reports it
    pub peak_memory_bytes: Option<u64>,
    /// storage of the dense sensitivity matrix, direct backend only
    pub f_memory_bytes: Option<usize>,
    pub eig: EigInfo,
    pub tt: Option<TtInfo>,
    pub clamped_variances: usize,
    pub outputs: Vec<String>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report")
    }
}

pub const TABLE_ROWS: [&str; 5] = [
    "prior variance (offline)",
    "sensitivity matrix",
    "generalized eigenvalue problem",
    "posterior variance",
    "total",
];

/// Runtime table in seconds, one column per report.
pub fn render_table(reports: &[&RunReport]) -> String {
    let width = TABLE_ROWS.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut out = String::new();
    write!(out, "{:width$}", "runtime [s]").unwrap();
    for r in reports {
        write!(out, "  {:>12}", r.method).unwrap();
    }
    out.push('\n');
    for (k, label) in TABLE_ROWS.iter().enumerate() {
        write!(out, "{label:width$}").unwrap();
        for r in reports {
            let t = &r.timings;
            let v = [t.prior_variance, t.sensitivity, t.eigenproblem, t.posterior_variance, r.total_seconds][k];
            write!(out, "  {v:>12.3}").unwrap();
        }
        out.push('\n');
    }
    write!(out, "{:width$}", "peak memory [MiB]").unwrap();
    for r in reports {
        match r.peak_memory_bytes {
            Some(b) => write!(out, "  {:>12.1}", b as f64 / (1024.0 * 1024.0)).unwrap(),
            None => write!(out, "  {:>12}", "n/a").unwrap(),
        }
    }
    out.push('\n');
    out
}

/// `VmHWM` from `/proc/self/status`.
pub fn peak_memory_bytes() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    parse_vm_hwm(&status)
}

fn parse_vm_hwm(status: &str) -> Option<u64> {
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let mut it = line["VmHWM:".len()..].split_whitespace();
    let value: u64 = it.next()?.parse().ok()?;
    let scale = match it.next() {
        Some("kB") | None => 1024,
        Some("mB") | Some("MB") => 1024 * 1024,
        Some(_) => return None,
    };
    Some(value * scale)
}

/// `MemAvailable` from `/proc/meminfo`.
pub fn available_memory_bytes() -> Option<u64> {
    let info = fs::read_to_string("/proc/meminfo").ok()?;
    let line = info.lines().find(|l| l.starts_with("MemAvailable:"))?;
    let kb: u64 = line["MemAvailable:".len()..].split_whitespace().next()?.parse().ok()?;
    Some(kb * 1024)
}
