//! Finite-volume ground-truth generators on a road segment.
//!
//! The LWR solver uses Godunov (demand-supply) fluxes with explicit central
//! diffusion written in flux form; the ARZ solver uses HLL fluxes on
//! `(rho, y = rho (u + h(rho)))` followed by a semi-implicit relaxation
//! update. Both sub-step each output interval to respect the CFL bound.
//! Output sample `j` is the state at `t_j = (j + 1/2) dt`.

use serde::{Deserialize, Serialize};

use crate::domain::{Field, Grid};
use crate::error::{invalid, Error, Result};
use crate::physics::{Flux, GreenshieldsArz, ThreeParamFd};

/// Density below which an ARZ state counts as vacuum.
pub const RHO_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub cfl_safety: f64,
    pub max_substeps: usize,
    pub critical_density_tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { cfl_safety: 0.9, max_substeps: 1000, critical_density_tolerance: 1e-12 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return Err(Error::Config(format!("cfl_safety must lie in (0, 1], got {}", self.cfl_safety)));
        }
        if self.max_substeps == 0 {
            return Err(Error::Config("max_substeps must be positive".into()));
        }
        if !(self.critical_density_tolerance > 0.0) {
            return Err(Error::Config("critical_density_tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Counters accumulated during a solve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub substeps: usize,
    pub max_substeps_per_output: usize,
    pub clamped_inputs: u64,
    pub vacuum_cells: u64,
}

/// Argmax of the flux on `[0, rho_max]` by golden-section search; endpoints
/// win when they are at least as large as the interior candidate.
pub fn critical_density<F: Flux>(flux: &F, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.0, flux.rho_max());
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let (mut fc, mut fd) = (flux.flux(c), flux.flux(d));
    while hi - lo > tol {
        if fc >= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = flux.flux(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = flux.flux(d);
        }
    }
    let mid = 0.5 * (lo + hi);
    let fm = flux.flux(mid);
    let (f0, f1) = (flux.flux(0.0), flux.flux(flux.rho_max()));
    if f0 >= fm && f0 >= f1 {
        0.0
    } else if f1 >= fm {
        flux.rho_max()
    } else {
        mid
    }
}

/// Demand-supply interface flux `min(D(rho_left), S(rho_right))`. Inputs
/// outside `[0, rho_max]` are clamped and counted in `clamps`.
pub fn godunov_flux<F: Flux>(rho_left: f64, rho_right: f64, flux: &F, rho_cr: f64, clamps: &mut u64) -> f64 {
    let rm = flux.rho_max();
    let mut clamp = |v: f64| {
        if (0.0..=rm).contains(&v) {
            v
        } else {
            *clamps += 1;
            v.clamp(0.0, rm)
        }
    };
    let (l, r) = (clamp(rho_left), clamp(rho_right));
    let demand = flux.flux(l.min(rho_cr));
    let supply = flux.flux(r.max(rho_cr));
    demand.min(supply)
}

fn neighbours(i: usize, n: usize, periodic: bool) -> (usize, usize) {
    let left = if i == 0 {
        if periodic {
            n - 1
        } else {
            0
        }
    } else {
        i - 1
    };
    let right = if i + 1 == n {
        if periodic {
            0
        } else {
            n - 1
        }
    } else {
        i + 1
    };
    (left, right)
}

fn substep_count(duration: f64, dt_max: f64, config: &SolverConfig, bound: &str) -> Result<usize> {
    let k = (duration / dt_max * (1.0 - 1e-12)).ceil().max(1.0);
    if k > config.max_substeps as f64 {
        return Err(Error::Config(format!(
            "{bound} CFL bound needs {k} substeps per output step, above max_substeps = {}",
            config.max_substeps
        )));
    }
    Ok(k as usize)
}

/// One-cell-width Godunov + diffusion stepper for the LWR equation.
#[derive(Clone, Debug)]
pub struct LwrStepper<F: Flux> {
    flux: F,
    epsilon: f64,
    dx: f64,
    periodic: bool,
    rho_cr: f64,
    max_speed: f64,
    config: SolverConfig,
}

impl<F: Flux> LwrStepper<F> {
    pub fn new(flux: F, epsilon: f64, dx: f64, periodic: bool, config: SolverConfig) -> Result<Self> {
        config.validate()?;
        if !(epsilon >= 0.0 && dx > 0.0) {
            return Err(invalid("need epsilon >= 0 and dx > 0"));
        }
        let rho_cr = critical_density(&flux, config.critical_density_tolerance);
        let samples = 1024;
        let max_speed = (0..=samples)
            .map(|k| flux.flux_prime(flux.rho_max() * k as f64 / samples as f64).abs())
            .fold(0.0, f64::max);
        Ok(Self { flux, epsilon, dx, periodic, rho_cr, max_speed, config })
    }

    pub fn rho_cr(&self) -> f64 {
        self.rho_cr
    }

    /// Largest stable internal step, `cfl / (max|Q'| / dx + 2 eps / dx^2)`.
    /// This implies both `dt <= cfl dx / max|Q'|` and
    /// `dt <= cfl dx^2 / (2 eps)`; either bound alone is not enough for the
    /// combined explicit update.
    pub fn dt_max(&self) -> f64 {
        let rate = self.max_speed / self.dx + 2.0 * self.epsilon / (self.dx * self.dx);
        if rate > 0.0 {
            self.config.cfl_safety / rate
        } else {
            f64::INFINITY
        }
    }

    fn bound_name(&self) -> &'static str {
        if 2.0 * self.epsilon / self.dx > self.max_speed {
            "diffusive (dt <= dx^2 / (2 eps))"
        } else {
            "advective (dt <= dx / max|Q'|)"
        }
    }

    fn substep(&self, rho: &mut [f64], fluxes: &mut [f64], dt: f64, clamps: &mut u64) {
        let n = rho.len();
        // fluxes[i] sits on the interface between cells i and i + 1
        for i in 0..n {
            let (_, r) = neighbours(i, n, self.periodic);
            let mut f = godunov_flux(rho[i], rho[r], &self.flux, self.rho_cr, clamps);
            if self.epsilon > 0.0 {
                f -= self.epsilon * (rho[r] - rho[i]) / self.dx;
            }
            fluxes[i] = f;
        }
        if !self.periodic {
            // transmissive boundaries: outer interfaces carry the boundary cells' flux
            fluxes[n - 1] = self.flux.flux(rho[n - 1].clamp(0.0, self.flux.rho_max()));
        }
        let c = dt / self.dx;
        for i in 0..n {
            let left_flux = if i == 0 {
                if self.periodic {
                    fluxes[n - 1]
                } else {
                    self.flux.flux(rho[0].clamp(0.0, self.flux.rho_max()))
                }
            } else {
                fluxes[i - 1]
            };
            rho[i] -= c * (fluxes[i] - left_flux);
        }
    }

    /// Advances `rho` by `duration`.
    pub fn advance(&self, rho: &mut [f64], duration: f64, diag: &mut SolverDiagnostics) -> Result<()> {
        let k = substep_count(duration, self.dt_max(), &self.config, self.bound_name())?;
        let dt = duration / k as f64;
        let mut fluxes = vec![0.0; rho.len()];
        for _ in 0..k {
            self.substep(rho, &mut fluxes, dt, &mut diag.clamped_inputs);
        }
        diag.substeps += k;
        diag.max_substeps_per_output = diag.max_substeps_per_output.max(k);
        Ok(())
    }
}

/// Runs `advance` for every output sample, starting from the initial state
/// at `t = 0`.
fn march<S>(
    grid: &Grid,
    state: &mut S,
    mut advance: impl FnMut(&mut S, f64) -> Result<()>,
    mut record: impl FnMut(&S, usize),
) -> Result<()> {
    let dt = grid.dt();
    for j in 0..grid.nt {
        advance(state, if j == 0 { 0.5 * dt } else { dt })?;
        record(state, j);
    }
    Ok(())
}

/// LWR solve with an arbitrary flux.
pub fn solve_lwr_with<F: Flux>(
    grid: &Grid,
    initial: impl Fn(f64) -> f64,
    flux: F,
    epsilon: f64,
    periodic: bool,
    config: &SolverConfig,
) -> Result<(Field, SolverDiagnostics)> {
    let stepper = LwrStepper::new(flux, epsilon, grid.dx(), periodic, *config)?;
    let mut rho: Vec<f64> = (0..grid.nx).map(|i| initial(grid.x_at(i))).collect();
    let mut values = ndarray::Array2::zeros((grid.nx, grid.nt));
    let mut diag = SolverDiagnostics::default();
    march(
        grid,
        &mut rho,
        |r, d| stepper.advance(r, d, &mut diag),
        |r, j| values.column_mut(j).assign(&ndarray::ArrayView1::from(&r[..])),
    )?;
    Ok((Field::new(*grid, values)?, diag))
}

/// `solve_lwr(grid, initial_density_fn, fd, periodic)` for the
/// three-parameter flux with diffusion `fd.epsilon`.
pub fn solve_lwr(
    grid: &Grid,
    initial: impl Fn(f64) -> f64,
    fd: &ThreeParamFd,
    periodic: bool,
    config: &SolverConfig,
) -> Result<(Field, SolverDiagnostics)> {
    fd.validate()?;
    solve_lwr_with(grid, initial, *fd, fd.epsilon, periodic, config)
}

/// HLL + relaxation stepper for Greenshields ARZ.
#[derive(Clone, Debug)]
pub struct ArzStepper {
    params: GreenshieldsArz,
    dx: f64,
    periodic: bool,
    config: SolverConfig,
}

struct Cell {
    rho: f64,
    y: f64,
    u: f64,
}

impl ArzStepper {
    pub fn new(params: GreenshieldsArz, dx: f64, periodic: bool, config: SolverConfig) -> Result<Self> {
        params.validate()?;
        config.validate()?;
        if !(dx > 0.0) {
            return Err(invalid("dx must be positive"));
        }
        Ok(Self { params, dx, periodic, config })
    }

    fn cell(&self, rho: f64, u: f64) -> Cell {
        Cell { rho, y: rho * (u + self.params.h(rho)), u }
    }

    /// Characteristic speeds `(u - rho h'(rho), u)`.
    fn speeds(&self, c: &Cell) -> (f64, f64) {
        (c.u - self.params.u_max * c.rho / self.params.rho_max, c.u)
    }

    fn hll(&self, l: &Cell, r: &Cell) -> (f64, f64) {
        let (l1, l2) = self.speeds(l);
        let (r1, r2) = self.speeds(r);
        let sl = l1.min(r1);
        let sr = l2.max(r2);
        let fl = (l.rho * l.u, l.y * l.u);
        let fr = (r.rho * r.u, r.y * r.u);
        if sl >= 0.0 {
            fl
        } else if sr <= 0.0 {
            fr
        } else {
            let w = 1.0 / (sr - sl);
            (
                (sr * fl.0 - sl * fr.0 + sl * sr * (r.rho - l.rho)) * w,
                (sr * fl.1 - sl * fr.1 + sl * sr * (r.y - l.y)) * w,
            )
        }
    }

    /// Wave-speed bound used for the time step: at least `u_max`, so the
    /// substep count does not change under small state perturbations.
    fn speed_bound(&self, rho: &[f64], u: &[f64]) -> f64 {
        rho.iter().zip(u).fold(self.params.u_max, |m, (&r, &v)| {
            let (a, b) = self.speeds(&Cell { rho: r, y: 0.0, u: v });
            m.max(a.abs()).max(b.abs())
        })
    }

    fn substep(&self, rho: &mut [f64], u: &mut [f64], dt: f64, vacuum: &mut u64) {
        let n = rho.len();
        let cells: Vec<Cell> = (0..n).map(|i| self.cell(rho[i], u[i])).collect();
        let fluxes: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let (_, r) = neighbours(i, n, self.periodic);
                self.hll(&cells[i], &cells[r])
            })
            .collect();
        let c = dt / self.dx;
        let k = dt / self.params.tau;
        for i in 0..n {
            let fl = if i == 0 {
                if self.periodic {
                    fluxes[n - 1]
                } else {
                    let b = &cells[0];
                    (b.rho * b.u, b.y * b.u)
                }
            } else {
                fluxes[i - 1]
            };
            let fr = if i + 1 == n && !self.periodic {
                let b = &cells[n - 1];
                (b.rho * b.u, b.y * b.u)
            } else {
                fluxes[i]
            };
            let mut r = cells[i].rho - c * (fr.0 - fl.0);
            let y = cells[i].y - c * (fr.1 - fl.1);
            let mut v = if r < RHO_FLOOR {
                *vacuum += 1;
                r = RHO_FLOOR;
                self.params.u_eq(r)
            } else {
                y / r - self.params.h(r)
            };
            v = (v + k * self.params.u_eq(r)) / (1.0 + k);
            rho[i] = r;
            u[i] = v;
        }
    }

    /// Advances `(rho, u)` by `duration`.
    pub fn advance(&self, rho: &mut [f64], u: &mut [f64], duration: f64, diag: &mut SolverDiagnostics) -> Result<()> {
        let dt_max = self.config.cfl_safety * self.dx / self.speed_bound(rho, u);
        let k = substep_count(duration, dt_max, &self.config, "advective (dt <= dx / max|lambda|)")?;
        let dt = duration / k as f64;
        for _ in 0..k {
            self.substep(rho, u, dt, &mut diag.vacuum_cells);
        }
        diag.substeps += k;
        diag.max_substeps_per_output = diag.max_substeps_per_output.max(k);
        Ok(())
    }
}

/// `solve_arz(grid, initial_rho_fn, initial_u_fn, params, periodic)`.
pub fn solve_arz(
    grid: &Grid,
    initial_rho: impl Fn(f64) -> f64,
    initial_u: impl Fn(f64) -> f64,
    params: &GreenshieldsArz,
    periodic: bool,
    config: &SolverConfig,
) -> Result<(Field, Field, SolverDiagnostics)> {
    let stepper = ArzStepper::new(*params, grid.dx(), periodic, *config)?;
    let mut state: (Vec<f64>, Vec<f64>) = (
        (0..grid.nx).map(|i| initial_rho(grid.x_at(i))).collect(),
        (0..grid.nx).map(|i| initial_u(grid.x_at(i))).collect(),
    );
    let mut rv = ndarray::Array2::zeros((grid.nx, grid.nt));
    let mut uv = ndarray::Array2::zeros((grid.nx, grid.nt));
    let mut diag = SolverDiagnostics::default();
    march(
        grid,
        &mut state,
        |(r, u), d| stepper.advance(r, u, d, &mut diag),
        |(r, u), j| {
            rv.column_mut(j).assign(&ndarray::ArrayView1::from(&r[..]));
            uv.column_mut(j).assign(&ndarray::ArrayView1::from(&u[..]));
        },
    )?;
    Ok((Field::new(*grid, rv)?, Field::new(*grid, uv)?, diag))
}

/// Initial density `0.1 + 0.8 exp(-25 (x - 0.5)^2)` of the benchmark runs.
pub fn bump_density(x: f64) -> f64 {
    0.1 + 0.8 * (-25.0 * (x - 0.5) * (x - 0.5)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{GreenshieldsFd, LinearFlux};

    fn truth() -> ThreeParamFd {
        ThreeParamFd::new(5.0, 0.2, 0.1, 1.0, 0.005).unwrap()
    }

    fn arz() -> GreenshieldsArz {
        GreenshieldsArz::new(1.13, 1.02, 0.02).unwrap()
    }

    #[test]
    fn critical_density_examples() {
        let g = GreenshieldsFd { rho_max: 1.3, u_max: 0.8 };
        // comparisons near a flat maximum resolve the argmax to ~sqrt(machine eps)
        assert!((critical_density(&g, 1e-12) - 0.65).abs() < 1e-6);
        // closed form of Q'(rho) = 0: y / sqrt(1 + y^2) = (b - a) / delta
        let fd = truth();
        let k = (fd.b() - fd.a()) / fd.delta;
        let oracle = fd.rho_max * (fd.p + k / (1.0 - k * k).sqrt() / fd.delta);
        assert!((critical_density(&fd, 1e-12) - oracle).abs() < 1e-6);
        assert!((oracle - 0.3289148474649294).abs() < 1e-12);
        let falling = LinearFlux { speed: -1.0, rho_max: 1.0 };
        assert_eq!(critical_density(&falling, 1e-12), 0.0);
    }

    #[test]
    fn godunov_flux_examples() {
        let fd = truth();
        let rc = critical_density(&fd, 1e-12);
        let mut clamps = 0;
        for rho in [0.05, 0.2, 0.5, 0.95] {
            assert_eq!(godunov_flux(rho, rho, &fd, rc, &mut clamps), fd.flux(rho));
        }
        assert!(godunov_flux(0.0, 0.6, &fd, rc, &mut clamps).abs() < 1e-16);
        assert!(godunov_flux(0.4, 1.0, &fd, rc, &mut clamps).abs() < 1e-16);
        assert_eq!(clamps, 0);
        godunov_flux(-0.1, 1.2, &fd, rc, &mut clamps);
        assert_eq!(clamps, 2);
    }

    #[test]
    fn initial_condition_values() {
        assert_eq!(bump_density(0.5), 0.9);
        assert!((bump_density(0.0) - 0.10154436330898217).abs() < 1e-15);
    }

    #[test]
    fn uniform_state_is_fixed() {
        let grid = Grid::new(1.0, 1.0, 40, 50).unwrap();
        let (rho, _) = solve_lwr(&grid, |_| 0.37, &truth(), true, &SolverConfig::default()).unwrap();
        assert!(rho.values().iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    fn mass(f: &Field, j: usize) -> f64 {
        f.values().column(j).sum() * f.grid().dx()
    }

    #[test]
    fn lwr_conserves_mass_and_stays_bounded() {
        let grid = Grid::new(1.0, 3.0, 240, 960).unwrap();
        let fd = truth();
        let (rho, diag) = solve_lwr(&grid, bump_density, &fd, true, &SolverConfig::default()).unwrap();
        let m0: f64 = (0..240).map(|i| bump_density(grid.x_at(i))).sum::<f64>() * grid.dx();
        for j in 0..grid.nt {
            assert!((mass(&rho, j) - m0).abs() / m0 <= 1e-12);
        }
        assert_eq!(diag.clamped_inputs, 0);
        assert_eq!(diag.max_substeps_per_output, 3);
        // without diffusion the scheme is monotone
        let inviscid = ThreeParamFd { epsilon: 0.0, ..fd };
        let (rho, _) = solve_lwr(&grid, bump_density, &inviscid, true, &SolverConfig::default()).unwrap();
        let lo = bump_density(0.0);
        assert!(rho.values().iter().all(|&v| v >= lo - 1e-12 && v <= 0.9 + 1e-12));
    }

    #[test]
    fn substep_limit_is_a_config_error() {
        let grid = Grid::new(1.0, 3.0, 240, 960).unwrap();
        let config = SolverConfig { max_substeps: 1, ..Default::default() };
        match solve_lwr(&grid, bump_density, &truth(), true, &config) {
            Err(Error::Config(msg)) => assert!(msg.contains("diffusive"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn arz_equilibrium_is_fixed() {
        let p = arz();
        let grid = Grid::new(1.0, 0.5, 30, 20).unwrap();
        let c = 0.45;
        let (rho, u, _) = solve_arz(&grid, |_| c, |_| p.u_eq(c), &p, true, &SolverConfig::default()).unwrap();
        assert!(rho.values().iter().all(|v| (v - c).abs() < 1e-10));
        assert!(u.values().iter().all(|v| (v - p.u_eq(c)).abs() < 1e-10));
    }

    #[test]
    fn arz_benchmark_run() {
        let p = arz();
        let grid = Grid::new(1.0, 3.0, 240, 960).unwrap();
        let (rho, u, diag) = solve_arz(&grid, bump_density, |_| 0.5, &p, true, &SolverConfig::default()).unwrap();
        let m0: f64 = (0..240).map(|i| bump_density(grid.x_at(i))).sum::<f64>() * grid.dx();
        for j in 0..grid.nt {
            assert!((mass(&rho, j) - m0).abs() / m0 <= 1e-12);
        }
        assert_eq!(diag.vacuum_cells, 0);
        assert!(u.values().iter().all(|&v| (0.0..=p.u_max * 1.05).contains(&v)));
    }

    #[test]
    fn first_order_self_convergence() {
        let fd = truth();
        let run = |nx: usize| {
            let grid = Grid::new(1.0, 3.0, nx, 4).unwrap();
            let (rho, _) = solve_lwr(&grid, bump_density, &fd, true, &SolverConfig::default()).unwrap();
            rho.values().column(3).to_vec()
        };
        let coarsen = |v: Vec<f64>| v.chunks(2).map(|c| 0.5 * (c[0] + c[1])).collect::<Vec<_>>();
        let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        let (a, b, c) = (run(60), run(120), run(240));
        let e1 = l1(&a, &coarsen(b.clone()));
        let e2 = l1(&b, &coarsen(c));
        let ratio = e1 / e2;
        assert!((1.6..=2.4).contains(&ratio), "ratio {ratio}");
    }
}
