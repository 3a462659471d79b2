//! Acceptance criteria, one PASS/FAIL line each. Run with
//! `cargo test -p thermopost --test acceptance`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use thermopost::commands;
use thermopost::config::RunConfig;
use thermopost::export::read_field_csv;
use thermopost::pipeline::{calibrate, load_bundle, prior_diagonal, CalibratedPrior, Method};
use thermopost::report::{render_table, RunReport, TABLE_ROWS};
use thermopost::system_io::SystemBundle;
use thermopost_core::eig::{misfit_eigenpairs, Backend, EigOptions, Formulation, SpectralApproximation};
use thermopost_core::factor::SparseLu;
use thermopost_core::forward::{observable_map, simulate, InputSignal, TimeGrid};
use thermopost_core::noise::NoiseModel;
use thermopost_core::posterior::{dense_oracle_posterior, posterior_variance};
use thermopost_core::sens::{assemble_f, ParameterToObservable, SensitivityBundle};
use thermopost_core::sparse::{dot, norm};
use thermopost_core::tt::{op_apply, AmenOptions, KroneckerOperator, TtForwardMap, TtVector};

const ROD: &str = include_str!("data/rod_1d.toml");
const PLATES: &str = include_str!("data/plates_2d.toml");

const ORACLE_REL_TOL: f64 = 1e-8;
const ORACLE_SECONDS: f64 = 60.0;
const SPECTRUM_REL_TOL: f64 = 1e-4;
const SPECTRUM_FLOOR: f64 = 1e-8;
const SPECTRUM_SECONDS: f64 = 600.0;
const SPECTRUM_RANK: usize = 30;
const VARIANCE_ABS_TOL: f64 = 1e-4;
const CALIBRATION_REL_TOL: f64 = 1e-10;
const ADJOINT_TOL: f64 = 1e-10;
const ADJOINT_PAIRS: usize = 20;
const SENSITIVITY_REL_TOL: f64 = 1e-10;
const PRIOR_SLACK: f64 = 1e-8;
const TRAJECTORY_REL_TOL: f64 = 1e-7;
const TRUNCATION_SLACK: f64 = 1e-8;
const TRUNCATION_PAIRS: [(usize, usize); 3] = [(20, 30), (25, 35), (30, 40)];

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

/// label, eigenvalues, eigen tolerance, posterior and prior variances
type SpectrumCase = (String, Vec<f64>, f64, Vec<f64>, Vec<f64>);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn config(text: &str, dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::parse(text).unwrap();
    cfg.base_dir = dir.to_path_buf();
    cfg
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b).max(f64::MIN_POSITIVE)
}

/// Shared two-plate runs: CLI posterior for both backends at r = 30 and a
/// direct spectrum at r = 40.
struct Plates {
    dir: tempfile::TempDir,
    cfg: RunConfig,
    bundle: SystemBundle,
    calibrated: CalibratedPrior,
    grid: TimeGrid,
    f: SensitivityBundle,
    direct: RunReport,
    tensor: RunReport,
    tensor_seconds: f64,
    wide: SpectralApproximation,
}

fn plates() -> &'static Plates {
    static CELL: OnceLock<Plates> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(PLATES, dir.path());
        let bundle = load_bundle(&cfg).unwrap();
        let direct = commands::posterior(&cfg, Method::Direct).unwrap();
        let start = Instant::now();
        let tensor = commands::posterior(&cfg, Method::Tensor).unwrap();
        let tensor_seconds = start.elapsed().as_secs_f64();
        let calibrated = calibrate(&cfg, &bundle).unwrap();
        let grid = TimeGrid::new(cfg.time.n_t, cfg.time.dt).unwrap();
        let f = assemble_f(&bundle.system, &grid).unwrap();
        let noise = NoiseModel::new(cfg.noise.sigma, f.rows()).unwrap();
        let opts = EigOptions { rank: 40, ..cfg.eig.options() };
        let wide =
            misfit_eigenpairs(&f, &calibrated.prior, &noise, Formulation::PriorInner, Backend::Direct, &opts).unwrap();
        Plates {
            dir,
            cfg,
            bundle,
            calibrated,
            grid,
            f,
            direct: direct.report,
            tensor: tensor.report,
            tensor_seconds,
            wide,
        }
    })
}

fn spectrum_column(path: &Path) -> Vec<f64> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect()
}

fn out_file(p: &Plates, name: &str) -> PathBuf {
    p.dir.path().join(&p.cfg.outputs.dir).join(name)
}

fn dense_oracle_equivalence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(ROD, dir.path());
    let start = Instant::now();
    let bundle = load_bundle(&cfg).unwrap();
    let sys = &bundle.system;
    let grid = TimeGrid::new(cfg.time.n_t, cfg.time.dt).unwrap();
    let f = assemble_f(sys, &grid).unwrap();
    let calibrated = calibrate(&cfg, &bundle).unwrap();
    let noise = NoiseModel::new(cfg.noise.sigma, f.rows()).unwrap();
    let oracle = dense_oracle_posterior(&f.to_dense(), &noise, &calibrated.prior).unwrap();
    let tt = TtForwardMap::new(sys, &grid, cfg.tt.options());
    let opts = cfg.eig.options();
    let mut worst = 0.0f64;
    let mut ranks = Vec::new();
    for form in [Formulation::PriorInner, Formulation::MassInner] {
        for (backend, map) in [(Backend::Direct, &f as &dyn ParameterToObservable), (Backend::Tensor, &tt)] {
            let s = misfit_eigenpairs(map, &calibrated.prior, &noise, form, backend, &opts).unwrap();
            ranks.push(s.eigen_rank());
            let v = posterior_variance(&s, &calibrated.prior, &calibrated.diag, form).unwrap();
            for k in 0..sys.n_x {
                worst = worst.max((v.values[k] - oracle[(k, k)]).abs() / oracle[(k, k)]);
            }
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    check(
        sys.n_x <= 60 && worst <= ORACLE_REL_TOL && seconds < ORACLE_SECONDS,
        format!(
            "n_x = {}, requested r = {}, used r = {ranks:?}, max rel diff {worst:.2e} (tol {ORACLE_REL_TOL:e}), {seconds:.1} s",
            sys.n_x, opts.rank
        ),
    )
}

fn spectral_agreement() -> Outcome {
    let p = plates();
    let direct = spectrum_column(&out_file(p, "spectrum_direct.csv"));
    let tensor = spectrum_column(&out_file(p, "spectrum_tensor.csv"));
    let l1 = direct[0];
    let mut worst = 0.0f64;
    let mut compared = 0;
    for (a, b) in direct.iter().zip(&tensor).take(SPECTRUM_RANK) {
        if *a >= SPECTRUM_FLOOR * l1 {
            worst = worst.max((a - b).abs() / a.abs());
            compared += 1;
        }
    }
    check(
        direct.len() == SPECTRUM_RANK
            && tensor.len() == SPECTRUM_RANK
            && worst <= SPECTRUM_REL_TOL
            && p.tensor_seconds < SPECTRUM_SECONDS,
        format!(
            "n_x = {}, {compared} eigenvalues above {SPECTRUM_FLOOR:e}·λ1, max rel diff {worst:.2e} (tol {SPECTRUM_REL_TOL:e}), \
             λ1/λ30 = {:.1e}, tensor run {:.1} s",
            p.bundle.system.n_x,
            l1 / direct[SPECTRUM_RANK - 1],
            p.tensor_seconds
        ),
    )
}

fn variance_agreement() -> Outcome {
    let p = plates();
    let c = commands::compare(
        &out_file(p, "variance_direct.csv"),
        &out_file(p, "variance_tensor.csv"),
        Some(&out_file(p, "variance_difference.csv")),
    )
    .unwrap();
    let tt = p.tensor.tt.unwrap();
    check(
        c.stats.max_abs_diff <= VARIANCE_ABS_TOL && p.cfg.tt.tol == 1e-8 && p.cfg.eig.tol == 1e-10,
        format!(
            "max_abs_diff {:.2e} K² (tol {VARIANCE_ABS_TOL:e}), mean {:.2e}, AMEn solves {} unconverged {}",
            c.stats.max_abs_diff, c.stats.mean_abs_diff, tt.solves, tt.unconverged
        ),
    )
}

fn prior_calibration() -> Outcome {
    let p = plates();
    let sys = &p.bundle.system;
    let materials = p.bundle.materials.as_ref().unwrap();
    let diag = prior_diagonal(&p.calibrated.prior);
    let target = p.cfg.prior.target_mean_variance;
    let mut worst = 0.0f64;
    let mut beta_exact = true;
    for (k, part) in p.calibrated.prior.parts.iter().enumerate() {
        let nodes = &diag[sys.part_offsets[k]..sys.part_offsets[k + 1]];
        let mean = nodes.iter().sum::<f64>() / nodes.len() as f64;
        worst = worst.max((mean - target).abs() / target);
        let m = materials[k];
        beta_exact &= part.beta == m.rho * m.cp / (p.cfg.prior.tau_prior * m.lambda);
    }
    check(
        worst <= CALIBRATION_REL_TOL && beta_exact && target == 3.0,
        format!("max rel deviation of the per-part mean from {target} K²: {worst:.2e}, β exact: {beta_exact}"),
    )
}

fn adjoint_consistency() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = StdRng::seed_from_u64(7);
    let dir = tempfile::tempdir().unwrap();
    let rod = load_bundle(&config(ROD, dir.path())).unwrap();
    let rod_grid = TimeGrid::new(20, 30.0).unwrap();
    let rod_f = assemble_f(&rod.system, &rod_grid).unwrap();
    let p = plates();
    for (sys, f) in [(&rod.system, &rod_f), (&p.bundle.system, &p.f)] {
        let m_lu = SparseLu::new(&sys.m_unit).unwrap();
        for _ in 0..ADJOINT_PAIRS {
            let v: Vec<f64> = (0..f.cols()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..f.rows()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fv = f.matvec(&v).unwrap();
            // ⟨v, M⁻¹Fᵀw⟩_M
            let z = m_lu.solve(&f.rmatvec(&w).unwrap());
            let rhs = dot(&v, &sys.m_unit.apply(&z));
            worst = worst.max((dot(&fv, &w) - rhs).abs() / (norm(&fv) * norm(&w)));
        }
    }
    check(
        worst <= ADJOINT_TOL,
        format!("{} random pairs on two systems, max |⟨Fv,w⟩ − ⟨v,M⁻¹Fᵀw⟩_M| / ‖Fv‖‖w‖ = {worst:.2e}", 2 * ADJOINT_PAIRS),
    )
}

fn sensitivity_oracle() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let text = ROD.replace("elements = [29]", "elements = [24]");
    let bundle = load_bundle(&config(&text, dir.path())).unwrap();
    let sys = &bundle.system;
    let grid = TimeGrid::new(20, 30.0).unwrap();
    let f = assemble_f(sys, &grid).unwrap().to_dense();
    let mut worst = 0.0f64;
    for k in 0..sys.n_x {
        let mut e = vec![0.0; sys.n_x];
        e[k] = 1.0;
        let reference = observable_map(sys, &grid, &e, &InputSignal::Zero).unwrap();
        let column: Vec<f64> = f.column(k).iter().copied().collect();
        worst = worst.max(rel_diff(&column, &reference));
    }
    check(
        sys.n_x <= 50 && worst <= SENSITIVITY_REL_TOL,
        format!("n_x = {}, max column rel diff {worst:.2e} (tol {SENSITIVITY_REL_TOL:e})", sys.n_x),
    )
}

fn spectrum_and_data_never_hurts() -> Outcome {
    let mut cases: Vec<SpectrumCase> = Vec::new();
    let p = plates();
    for (label, report) in [("plates direct", &p.direct), ("plates tensor", &p.tensor)] {
        let values = spectrum_column(&out_file(p, &format!("spectrum_{}.csv", report.method)));
        let (_, post) = read_field_csv(&out_file(p, &format!("variance_{}.csv", report.method))).unwrap();
        cases.push((label.into(), values, report.eig.tol, post, p.calibrated.diag.clone()));
    }
    let wide = posterior_variance(&p.wide, &p.calibrated.prior, &p.calibrated.diag, Formulation::PriorInner).unwrap();
    cases.push(("plates direct r = 40".into(), p.wide.eigenvalues.clone(), p.cfg.eig.tol, wide.values, p.calibrated.diag.clone()));

    let dir = tempfile::tempdir().unwrap();
    let cfg = config(ROD, dir.path());
    for method in [Method::Direct, Method::Tensor] {
        let out = commands::posterior(&cfg, method).unwrap();
        let d = dir.path().join("out");
        let values = spectrum_column(&d.join(format!("spectrum_{}.csv", method.name())));
        let (_, post) = read_field_csv(&d.join(format!("variance_{}.csv", method.name()))).unwrap();
        let (_, prior) = read_field_csv(&d.join("prior_variance.csv")).unwrap();
        cases.push((format!("rod {}", method.name()), values, out.report.eig.tol, post, prior));
    }

    let mut failures = Vec::new();
    let mut worst_excess = f64::NEG_INFINITY;
    for (label, values, tol, post, prior) in &cases {
        let l1 = values.first().copied().unwrap_or(0.0);
        if values.windows(2).any(|w| w[0] < w[1]) {
            failures.push(format!("{label}: unsorted"));
        }
        if values.iter().any(|&l| l < -tol * l1) {
            failures.push(format!("{label}: eigenvalue below −tol·λ1"));
        }
        for (v, p0) in post.iter().zip(prior) {
            worst_excess = worst_excess.max(v - p0);
            if *v > p0 + PRIOR_SLACK || *v < 0.0 {
                failures.push(format!("{label}: variance {v} vs prior {p0}"));
                break;
            }
        }
    }
    check(
        failures.is_empty(),
        format!("{} runs, max (posterior − prior) = {worst_excess:.2e} K² {}", cases.len(), failures.join("; ")),
    )
}

fn tt_solver_correctness() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let text = PLATES
        .replace("elements = [31, 30]", "elements = [6, 6]")
        .replace("n_t = 40", "n_t = 30");
    let bundle = load_bundle(&config(&text, dir.path())).unwrap();
    let sys = &bundle.system;
    let grid = TimeGrid::new(30, 60.0).unwrap();
    let map = TtForwardMap::new(sys, &grid, AmenOptions::default());
    let mut rng = StdRng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for smooth in [false, true] {
        let x0: Vec<f64> = (0..sys.n_x)
            .map(|k| if smooth { 300.0 + 0.01 * k as f64 } else { rng.random_range(-1.0..1.0) })
            .collect();
        let sol = map.trajectory(&x0).unwrap();
        let reference = simulate(sys, &grid, &x0, &InputSignal::Zero).unwrap();
        let tt: Vec<f64> = (0..grid.n_points()).flat_map(|s| sol.x.time_slice(s)).collect();
        worst = worst.max(rel_diff(&tt, &reference.stacked_states()));
    }

    // op_apply against an independently built Kronecker sum
    let tiny = ROD.replace("elements = [29]", "elements = [1]");
    let small = load_bundle(&config(&tiny, dir.path())).unwrap();
    let small_sys = &small.system;
    let small_grid = TimeGrid::new(2, 60.0).unwrap();
    let op = KroneckerOperator::all_at_once(small_sys, &small_grid);
    let mut dense = DMatrix::zeros(small_grid.n_points() * small_sys.n_x, small_grid.n_points() * small_sys.n_x);
    for term in &op.terms {
        dense += term.temporal.to_dense().kronecker(&term.spatial.to_dense());
    }
    let mut op_worst = 0.0f64;
    for _ in 0..5 {
        let x = TtVector::new(
            DMatrix::from_fn(small_grid.n_points(), 2, |_, _| rng.random_range(-1.0..1.0)),
            DMatrix::from_fn(small_sys.n_x, 2, |_, _| rng.random_range(-1.0..1.0)),
        )
        .unwrap();
        let got = op_apply(&op, &x).unwrap().contract();
        let want = &dense * DVector::from_vec(x.contract());
        op_worst = op_worst.max(rel_diff(&got, want.as_slice()));
    }
    check(
        sys.n_x <= 100 && worst <= TRAJECTORY_REL_TOL && small_sys.n_x <= 4 && op_worst <= 1e-14,
        format!(
            "trajectory n_x = {}: max rel diff {worst:.2e} (tol {TRAJECTORY_REL_TOL:e}); op_apply n_x = {}, n_t = 2: \
             max rel diff {op_worst:.1e}",
            sys.n_x, small_sys.n_x
        ),
    )
}

fn rank_truncation() -> Outcome {
    let p = plates();
    let prior = &p.calibrated.prior;
    let diag = &p.calibrated.diag;
    let variance = |r: usize| posterior_variance(&p.wide.truncated(r), prior, diag, Formulation::PriorInner).unwrap().values;
    let diffs: Vec<f64> = TRUNCATION_PAIRS
        .iter()
        .map(|&(lo, hi)| {
            let (a, b) = (variance(lo), variance(hi));
            a.iter().zip(&b).map(|(x, y)| (x - y).abs() / y).fold(0.0, f64::max)
        })
        .collect();
    let monotone = diffs.windows(2).all(|w| w[1] <= w[0] + TRUNCATION_SLACK);
    let text: Vec<String> = TRUNCATION_PAIRS
        .iter()
        .zip(&diffs)
        .map(|((lo, hi), d)| format!("r = {lo} vs {hi}: {d:.2e}"))
        .collect();
    check(monotone && p.wide.eigen_rank() == 40, format!("max rel variance diff {}", text.join(", ")))
}

fn benchmark_report() -> Outcome {
    let p = plates();
    let sys = &p.bundle.system;
    let expected = 8 * p.grid.n_points() * sys.n_y * sys.n_x;
    let mut problems = Vec::new();
    for r in [&p.direct, &p.tensor] {
        let t = r.timings;
        let phases = [t.prior_variance, t.sensitivity, t.eigenproblem, t.posterior_variance, r.total_seconds];
        if phases.iter().any(|v| !v.is_finite() || *v < 0.0) {
            problems.push(format!("{}: bad timings {phases:?}", r.method));
        }
        if r.peak_memory_bytes.is_none() {
            problems.push(format!("{}: no peak memory", r.method));
        }
        let json = std::fs::read_to_string(out_file(p, &format!("report_{}.json", r.method))).unwrap();
        let parsed: RunReport = serde_json::from_str(&json).unwrap();
        if &parsed != r {
            problems.push(format!("{}: report file differs", r.method));
        }
    }
    let table = render_table(&[&p.direct, &p.tensor]);
    if !TABLE_ROWS.iter().all(|row| table.contains(row)) {
        problems.push("table rows missing".into());
    }
    let footprint = p.direct.f_memory_bytes;
    if footprint != Some(expected) {
        problems.push(format!("F footprint {footprint:?} != {expected}"));
    }
    if p.tensor.f_memory_bytes.is_some() {
        problems.push("tensor run reports a dense F".into());
    }
    println!("{}", table.trim_end().lines().map(|l| format!("    {l}")).collect::<Vec<_>>().join("\n"));
    check(
        problems.is_empty(),
        format!("F footprint {} bytes = 8·(n_t+1)·n_y·n_x {}", expected, problems.join("; ")),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("dense-oracle equivalence", dense_oracle_equivalence),
        ("direct/tensor spectral agreement", spectral_agreement),
        ("variance-field agreement", variance_agreement),
        ("prior calibration", prior_calibration),
        ("adjoint consistency", adjoint_consistency),
        ("sensitivity oracle", sensitivity_oracle),
        ("monotone spectrum, data never hurts", spectrum_and_data_never_hurts),
        ("TT solver correctness", tt_solver_correctness),
        ("rank-truncation sanity", rank_truncation),
        ("benchmark report", benchmark_report),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let id = (k + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id:>2} {name} ({secs:.1} s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id:>2} {name} ({secs:.1} s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
