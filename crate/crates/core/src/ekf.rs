//! Extended Kalman filter baseline.
//!
//! The state is the vector of cell densities (LWR) or stacked `(rho, u)`
//! cells (ARZ). One prediction is one output step of the matching solver;
//! its Jacobian comes from forward differences of that step map.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{Field, Grid, ObservationSet};
use crate::error::{invalid, Error, Result};
use crate::physics::{Flux, GreenshieldsArz, ThreeParamFd};
use crate::solvers::{ArzStepper, LwrStepper, SolverConfig, SolverDiagnostics};

/// Filter settings. Defaults are tuning choices, not calibrated values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EkfConfig {
    pub process_noise_std: f64,
    pub observation_noise_std: f64,
    pub initial_covariance_scale: f64,
    pub jacobian_fd_step: f64,
    /// Also assimilate observed speeds (ARZ only).
    pub observe_speed: bool,
    pub solver: SolverConfig,
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self {
            process_noise_std: 1e-3,
            observation_noise_std: 1e-2,
            initial_covariance_scale: 0.1,
            jacobian_fd_step: 1e-6,
            observe_speed: false,
            solver: SolverConfig::default(),
        }
    }
}

impl EkfConfig {
    pub fn validate(&self) -> Result<()> {
        let all =
            [self.process_noise_std, self.observation_noise_std, self.initial_covariance_scale, self.jacobian_fd_step];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("EKF noise levels and steps must be positive: {self:?}")));
        }
        self.solver.validate()
    }
}

/// A discrete-time state map `x_{j+1} = f(x_j)`.
pub trait TransitionModel {
    fn dim(&self) -> usize;
    fn step(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// One output step of the LWR solver.
pub struct LwrTransition<F: Flux> {
    pub stepper: LwrStepper<F>,
    pub nx: usize,
    pub dt: f64,
}

impl<F: Flux> TransitionModel for LwrTransition<F> {
    fn dim(&self) -> usize {
        self.nx
    }

    fn step(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = x.to_vec();
        self.stepper.advance(&mut out, self.dt, &mut SolverDiagnostics::default())?;
        Ok(out)
    }
}

/// One output step of the ARZ solver on the stacked state `[rho; u]`.
pub struct ArzTransition {
    pub stepper: ArzStepper,
    pub nx: usize,
    pub dt: f64,
}

impl TransitionModel for ArzTransition {
    fn dim(&self) -> usize {
        2 * self.nx
    }

    fn step(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (mut rho, mut u) = (x[..self.nx].to_vec(), x[self.nx..].to_vec());
        self.stepper.advance(&mut rho, &mut u, self.dt, &mut SolverDiagnostics::default())?;
        rho.extend(u);
        Ok(rho)
    }
}

/// Observations grouped by output step as `(state index, value)` pairs.
pub type ObservationSchedule = Vec<Vec<(usize, f64)>>;

/// Maps observations to the nearest cell and time step. Speeds go to rows
/// `nx + i` when `with_speed` is set.
pub fn schedule_observations(obs: &ObservationSet, grid: &Grid, with_speed: bool) -> Result<ObservationSchedule> {
    if with_speed && obs.u.is_none() {
        return Err(invalid("speed assimilation requested but observations carry no speeds"));
    }
    let mut sched = vec![Vec::new(); grid.nt];
    for (k, p) in obs.points.iter().enumerate() {
        let (i, j) = (grid.nearest_cell(p.x), grid.nearest_step(p.t));
        sched[j].push((i, obs.rho[k]));
        if with_speed {
            sched[j].push((grid.nx + i, obs.u.as_ref().expect("checked")[k]));
        }
    }
    Ok(sched)
}

/// Filter output: the state estimate at every step and `trace(P)` after
/// each update.
#[derive(Clone, Debug, PartialEq)]
pub struct EkfResult {
    pub rho: Field,
    pub u: Option<Field>,
    pub covariance_traces: Vec<f64>,
}

fn jacobian(model: &dyn TransitionModel, x: &[f64], fx: &[f64], h: f64) -> Result<DMatrix<f64>> {
    let n = x.len();
    let mut jac = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    for k in 0..n {
        xp[k] = x[k] + h;
        let f = model.step(&xp)?;
        xp[k] = x[k];
        for i in 0..n {
            jac[(i, k)] = (f[i] - fx[i]) / h;
        }
    }
    Ok(jac)
}

/// Runs the predict/update recursion from `x0` and returns the estimate at
/// each step as rows of an `nt x dim` matrix, plus covariance traces.
pub fn ekf_filter(
    model: &dyn TransitionModel,
    x0: &[f64],
    schedule: &ObservationSchedule,
    config: &EkfConfig,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    config.validate()?;
    let n = model.dim();
    if x0.len() != n {
        return Err(invalid(format!("initial state has length {}, model expects {n}", x0.len())));
    }
    let q = config.process_noise_std.powi(2);
    let r = config.observation_noise_std.powi(2);
    let mut x = DVector::from_column_slice(x0);
    let mut p = DMatrix::identity(n, n) * config.initial_covariance_scale;
    let mut states = Vec::with_capacity(schedule.len());
    let mut traces = Vec::with_capacity(schedule.len());
    for (step, obs) in schedule.iter().enumerate() {
        if step > 0 {
            let fx = model.step(x.as_slice())?;
            let f = jacobian(model, x.as_slice(), &fx, config.jacobian_fd_step)?;
            p = &f * &p * f.transpose();
            for i in 0..n {
                p[(i, i)] += q;
            }
            x = DVector::from_vec(fx);
        }
        if !obs.is_empty() {
            let m = obs.len();
            let idx: Vec<usize> = obs.iter().map(|&(i, _)| i).collect();
            let innovation = DVector::from_iterator(m, obs.iter().map(|&(i, z)| z - x[i]));
            // P H^T selects columns; H P H^T selects the matching block
            let pht = DMatrix::from_fn(n, m, |a, b| p[(a, idx[b])]);
            let mut s = DMatrix::from_fn(m, m, |a, b| p[(idx[a], idx[b])]);
            for a in 0..m {
                s[(a, a)] += r;
            }
            let s_inv = match s.clone().cholesky() {
                Some(c) => c.inverse(),
                None => s.try_inverse().ok_or(Error::Divergence { step })?,
            };
            let k = &pht * s_inv;
            x += &k * innovation;
            p -= &k * pht.transpose();
            p = (&p + p.transpose()) * 0.5;
        }
        if x.iter().chain(p.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step });
        }
        traces.push(p.trace());
        states.push(x.as_slice().to_vec());
    }
    Ok((states, traces))
}

/// Model choice for [`ekf_run`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EkfModel {
    Lwr3(ThreeParamFd),
    Arz(GreenshieldsArz),
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// `ekf_run(model, params, observations, grid, config)` on a ring road.
///
/// The initial state is uniform at the mean of the observations of the first
/// observed step (speed: mean observed speed, else the equilibrium speed).
pub fn ekf_run(model: EkfModel, observations: &ObservationSet, grid: &Grid, config: &EkfConfig) -> Result<EkfResult> {
    config.validate()?;
    let nx = grid.nx;
    let to_field = |states: &[Vec<f64>], offset: usize| {
        Field::new(*grid, ndarray::Array2::from_shape_fn((nx, grid.nt), |(i, j)| states[j][offset + i]))
    };
    match model {
        EkfModel::Lwr3(fd) => {
            fd.validate()?;
            let schedule = schedule_observations(observations, grid, false)?;
            let rho0 = initial_mean(&schedule, |i| i < nx).unwrap_or(0.0);
            let stepper = LwrStepper::new(fd, fd.epsilon, grid.dx(), true, config.solver)?;
            let tr = LwrTransition { stepper, nx, dt: grid.dt() };
            let (states, traces) = ekf_filter(&tr, &vec![rho0; nx], &schedule, config)?;
            Ok(EkfResult { rho: to_field(&states, 0)?, u: None, covariance_traces: traces })
        }
        EkfModel::Arz(params) => {
            let schedule = schedule_observations(observations, grid, config.observe_speed)?;
            let rho0 = initial_mean(&schedule, |i| i < nx).unwrap_or(0.0);
            let u0 = initial_mean(&schedule, |i| i >= nx).unwrap_or_else(|| params.u_eq(rho0));
            let stepper = ArzStepper::new(params, grid.dx(), true, config.solver)?;
            let tr = ArzTransition { stepper, nx, dt: grid.dt() };
            let mut x0 = vec![rho0; nx];
            x0.extend(vec![u0; nx]);
            let (states, traces) = ekf_filter(&tr, &x0, &schedule, config)?;
            Ok(EkfResult { rho: to_field(&states, 0)?, u: Some(to_field(&states, nx)?), covariance_traces: traces })
        }
    }
}

fn initial_mean(schedule: &ObservationSchedule, rows: impl Fn(usize) -> bool) -> Option<f64> {
    schedule.iter().find_map(|obs| mean(obs.iter().filter(|(i, _)| rows(*i)).map(|&(_, z)| z)))
}
