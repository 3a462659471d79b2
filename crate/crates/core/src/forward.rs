//! Implicit-Euler time integration and the affine parameter-to-observable map.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};
use crate::factor::SparseLu;
use crate::femkit::StateSpaceSystem;
use crate::sparse::{axpy, CsrMatrix};

/// Equidistant time grid `t_s = s·dt`, `s = 0..=n_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub n_t: usize,
    pub dt: f64,
}

impl TimeGrid {
    /// `n_t = 0` is accepted and describes observation of the initial state only.
    pub fn new(n_t: usize, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Validation(format!("time step must be positive, got {dt}")));
        }
        Ok(Self { n_t, dt })
    }

    pub fn final_time(&self) -> f64 {
        self.n_t as f64 * self.dt
    }

    pub fn time(&self, s: usize) -> f64 {
        s as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_t).map(|s| self.time(s)).collect()
    }

    /// Number of time points, `n_t + 1`.
    pub fn n_points(&self) -> usize {
        self.n_t + 1
    }
}

/// Input signal sampled at the step end points.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSignal {
    Zero,
    Constant(Vec<f64>),
    /// One input vector per time point `s = 0..=n_t`.
    Sampled(Vec<Vec<f64>>),
}

impl InputSignal {
    fn check(&self, m: usize, grid: &TimeGrid) -> Result<()> {
        match self {
            InputSignal::Zero => Ok(()),
            InputSignal::Constant(u) => check_len("input vector", m, u.len()),
            InputSignal::Sampled(us) => {
                check_len("input samples", grid.n_points(), us.len())?;
                us.iter().try_for_each(|u| check_len("input vector", m, u.len()))
            }
        }
    }

    /// `u_s`, or `None` for a vanishing input.
    pub fn at(&self, s: usize) -> Option<&[f64]> {
        match self {
            InputSignal::Zero => None,
            InputSignal::Constant(u) => Some(u),
            InputSignal::Sampled(us) => Some(&us[s]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

impl Trajectory {
    /// Outputs stacked time-major, `(y_0, y_1, …, y_{n_t})`.
    pub fn stacked_outputs(&self) -> Vec<f64> {
        self.outputs.iter().flatten().copied().collect()
    }

    pub fn stacked_states(&self) -> Vec<f64> {
        self.states.iter().flatten().copied().collect()
    }
}

/// Factorization of `𝕄 + τ𝕂`, reused for every step.
#[derive(Debug, Clone)]
pub struct ImplicitEuler<'a> {
    sys: &'a StateSpaceSystem,
    tau: f64,
    lu: SparseLu<f64>,
}

impl<'a> ImplicitEuler<'a> {
    pub fn new(sys: &'a StateSpaceSystem, grid: &TimeGrid) -> Result<Self> {
        let step = sys.m_phys.linear_combination(1.0, &sys.k_phys, grid.dt);
        Ok(Self {
            sys,
            tau: grid.dt,
            lu: SparseLu::new(&step)?,
        })
    }

    /// Solves `(𝕄 + τ𝕂)x = 𝕄x_prev + τNu`.
    pub fn step(&self, x_prev: &[f64], u: Option<&[f64]>) -> Vec<f64> {
        let mut rhs = self.sys.m_phys.apply(x_prev);
        if let Some(u) = u {
            axpy(self.tau, &self.sys.n.apply(u), &mut rhs);
        }
        self.lu.solve_in_place(&mut rhs);
        rhs
    }

    pub fn factorization(&self) -> &SparseLu<f64> {
        &self.lu
    }
}

fn check_problem(sys: &StateSpaceSystem, grid: &TimeGrid, x0: &[f64], u: &InputSignal) -> Result<()> {
    check_len("initial state", sys.n_x, x0.len())?;
    u.check(sys.m, grid)
}

/// Integrates `𝕄ẋ = −𝕂x + Nu` with the implicit Euler scheme.
pub fn simulate(sys: &StateSpaceSystem, grid: &TimeGrid, x0: &[f64], u: &InputSignal) -> Result<Trajectory> {
    check_problem(sys, grid, x0, u)?;
    let stepper = ImplicitEuler::new(sys, grid)?;
    let mut states = Vec::with_capacity(grid.n_points());
    states.push(x0.to_vec());
    for s in 1..=grid.n_t {
        let next = stepper.step(&states[s - 1], u.at(s));
        states.push(next);
    }
    let outputs = states.iter().map(|x| sys.c.apply(x)).collect();
    Ok(Trajectory { states, outputs })
}

/// Stacked observations `f(x0) = (y(t_0), …, y(t_{n_t}))`.
pub fn observable_map(sys: &StateSpaceSystem, grid: &TimeGrid, x0: &[f64], u: &InputSignal) -> Result<Vec<f64>> {
    Ok(simulate(sys, grid, x0, u)?.stacked_outputs())
}

/// Observation offset `f0 = f(0)` caused by the inputs alone.
pub fn observation_offset(sys: &StateSpaceSystem, grid: &TimeGrid, u: &InputSignal) -> Result<Vec<f64>> {
    observable_map(sys, grid, &vec![0.0; sys.n_x], u)
}

/// Energy `xᵀ W x` for a symmetric weight matrix.
pub fn weighted_norm_sq(w: &CsrMatrix, x: &[f64]) -> f64 {
    crate::sparse::dot(x, &w.apply(x))
}
