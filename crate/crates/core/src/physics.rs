//! Fundamental diagrams, flux functions, and PDE residuals of network
//! outputs.
//!
//! Residuals are assembled on a [`Tape`] so they can enter a loss and be
//! differentiated with respect to both the network weights and the physics
//! parameters. `(Q(rho))_x` is expanded as `Q'(rho) rho_x` with the analytic
//! `Q'`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{JetLayout, Tape, Var};
use crate::domain::{points_array, DomainPoint};
use crate::error::{invalid, Error, Result};
use crate::neural::{forward_jet, jet_input, MlpParams, MlpVars};

/// A flux `Q(rho)` on `[0, rho_max]`.
pub trait Flux {
    fn flux(&self, rho: f64) -> f64;
    fn flux_prime(&self, rho: f64) -> f64;
    fn rho_max(&self) -> f64;
}

/// Three-parameter flux with diffusion coefficient `epsilon`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreeParamFd {
    pub delta: f64,
    pub p: f64,
    pub sigma: f64,
    pub rho_max: f64,
    pub epsilon: f64,
}

impl ThreeParamFd {
    pub fn new(delta: f64, p: f64, sigma: f64, rho_max: f64, epsilon: f64) -> Result<Self> {
        let fd = Self { delta, p, sigma, rho_max, epsilon };
        fd.validate()?;
        Ok(fd)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.delta, self.p, self.sigma, self.rho_max, self.epsilon];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(invalid("flux parameters must be finite"));
        }
        if !(self.delta > 0.0 && self.sigma > 0.0 && self.rho_max > 0.0 && self.epsilon >= 0.0) {
            return Err(invalid(format!("invalid three-parameter flux {self:?}")));
        }
        Ok(())
    }

    pub fn a(&self) -> f64 {
        (1.0 + (self.delta * self.p).powi(2)).sqrt()
    }

    pub fn b(&self) -> f64 {
        (1.0 + (self.delta * (1.0 - self.p)).powi(2)).sqrt()
    }

    pub fn y(&self, rho: f64) -> f64 {
        self.delta * (rho / self.rho_max - self.p)
    }
}

impl Flux for ThreeParamFd {
    fn flux(&self, rho: f64) -> f64 {
        let y = self.y(rho);
        let (a, b) = (self.a(), self.b());
        self.sigma * (a + (b - a) * rho / self.rho_max - (1.0 + y * y).sqrt())
    }

    fn flux_prime(&self, rho: f64) -> f64 {
        let y = self.y(rho);
        self.sigma * ((self.b() - self.a()) - self.delta * y / (1.0 + y * y).sqrt()) / self.rho_max
    }

    fn rho_max(&self) -> f64 {
        self.rho_max
    }
}

/// `flux_three_param(rho, fd)`.
pub fn flux_three_param(rho: f64, fd: &ThreeParamFd) -> f64 {
    fd.flux(rho)
}

/// Greenshields flux `rho * u_max * (1 - rho / rho_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GreenshieldsFd {
    pub rho_max: f64,
    pub u_max: f64,
}

impl Flux for GreenshieldsFd {
    fn flux(&self, rho: f64) -> f64 {
        rho * self.u_max * (1.0 - rho / self.rho_max)
    }

    fn flux_prime(&self, rho: f64) -> f64 {
        self.u_max * (1.0 - 2.0 * rho / self.rho_max)
    }

    fn rho_max(&self) -> f64 {
        self.rho_max
    }
}

/// Linear flux `speed * rho` (pure advection).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearFlux {
    pub speed: f64,
    pub rho_max: f64,
}

impl Flux for LinearFlux {
    fn flux(&self, rho: f64) -> f64 {
        self.speed * rho
    }

    fn flux_prime(&self, _rho: f64) -> f64 {
        self.speed
    }

    fn rho_max(&self) -> f64 {
        self.rho_max
    }
}

/// Greenshields speed law with ARZ relaxation time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GreenshieldsArz {
    pub rho_max: f64,
    pub u_max: f64,
    pub tau: f64,
}

impl GreenshieldsArz {
    pub fn new(rho_max: f64, u_max: f64, tau: f64) -> Result<Self> {
        let p = Self { rho_max, u_max, tau };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.rho_max, self.u_max, self.tau];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(invalid(format!("ARZ parameters must be positive, got {self:?}")));
        }
        Ok(())
    }

    /// Equilibrium speed `U_eq(rho)`.
    pub fn u_eq(&self, rho: f64) -> f64 {
        self.u_max * (1.0 - rho / self.rho_max)
    }

    /// Hesitation `h(rho) = U_eq(0) - U_eq(rho)`.
    pub fn h(&self, rho: f64) -> f64 {
        self.u_max * rho / self.rho_max
    }

    pub fn h_prime(&self) -> f64 {
        self.u_max / self.rho_max
    }

    pub fn equilibrium_flux(&self) -> GreenshieldsFd {
        GreenshieldsFd { rho_max: self.rho_max, u_max: self.u_max }
    }
}

/// `speed_greenshields(rho, params)`.
pub fn speed_greenshields(rho: f64, params: &GreenshieldsArz) -> f64 {
    params.u_eq(rho)
}

/// Residuals at one point; `r_u` only for two-equation models.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualValue {
    pub r_rho: f64,
    pub r_u: Option<f64>,
}

/// The physics a residual is built from, with its parameters `lambda`.
///
/// Trainable coordinates: `[delta, p, sigma, rho_max, ln epsilon]` for
/// `lwr3`, `[rho_max, u_max, ln tau]` for `arz`, and the surrogate's weights
/// for `fdl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PhysicsModel {
    Lwr3(ThreeParamFd),
    Arz(GreenshieldsArz),
    Fdl { surrogate: MlpParams },
}

/// Smallest log-coordinate used for a zero diffusion coefficient.
const LN_ZERO: f64 = -700.0;

fn ln_pos(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        LN_ZERO
    }
}

impl PhysicsModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Lwr3(fd) => fd.validate(),
            Self::Arz(p) => p.validate(),
            Self::Fdl { surrogate } => {
                surrogate.validate()?;
                if surrogate.input_width() != 1 || surrogate.output_width() != 1 {
                    return Err(invalid("flux surrogate must map one density to one flow"));
                }
                Ok(())
            }
        }
    }

    /// Number of state outputs the network must provide.
    pub fn state_width(&self) -> usize {
        match self {
            Self::Arz(_) => 2,
            _ => 1,
        }
    }

    pub fn needs_second_derivative(&self) -> bool {
        matches!(self, Self::Lwr3(_))
    }

    pub fn lambda(&self) -> Vec<f64> {
        match self {
            Self::Lwr3(fd) => vec![fd.delta, fd.p, fd.sigma, fd.rho_max, ln_pos(fd.epsilon)],
            Self::Arz(p) => vec![p.rho_max, p.u_max, p.tau.ln()],
            Self::Fdl { surrogate } => surrogate.flatten(),
        }
    }

    pub fn lambda_shapes(&self) -> Vec<(usize, usize)> {
        match self {
            Self::Fdl { surrogate } => surrogate.param_shapes(),
            _ => vec![(1, 1); self.lambda().len()],
        }
    }

    pub fn with_lambda(&self, lambda: &[f64]) -> Result<Self> {
        if lambda.len() != self.lambda().len() {
            return Err(invalid(format!("expected {} physics parameters, got {}", self.lambda().len(), lambda.len())));
        }
        let out = match self {
            Self::Lwr3(_) => Self::Lwr3(ThreeParamFd {
                delta: lambda[0],
                p: lambda[1],
                sigma: lambda[2],
                rho_max: lambda[3],
                epsilon: if lambda[4] <= LN_ZERO { 0.0 } else { lambda[4].exp() },
            }),
            Self::Arz(_) => Self::Arz(GreenshieldsArz { rho_max: lambda[0], u_max: lambda[1], tau: lambda[2].exp() }),
            Self::Fdl { surrogate } => Self::Fdl { surrogate: surrogate.with_flat(lambda)? },
        };
        Ok(out)
    }

    /// Named physical parameter values (not log-coordinates).
    pub fn named_values(&self) -> Vec<(&'static str, f64)> {
        match self {
            Self::Lwr3(fd) => vec![
                ("delta", fd.delta),
                ("p", fd.p),
                ("sigma", fd.sigma),
                ("rho_max", fd.rho_max),
                ("epsilon", fd.epsilon),
            ],
            Self::Arz(p) => vec![("rho_max", p.rho_max), ("u_max", p.u_max), ("tau", p.tau)],
            Self::Fdl { .. } => Vec::new(),
        }
    }
}

/// Physics parameters placed on a tape.
#[derive(Clone)]
pub enum PhysicsVars<'t> {
    Lwr3 { delta: Var<'t>, p: Var<'t>, sigma: Var<'t>, rho_max: Var<'t>, epsilon: Var<'t> },
    Arz { rho_max: Var<'t>, u_max: Var<'t>, tau: Var<'t> },
    Fdl { surrogate: MlpParams, vars: MlpVars<'t> },
}

impl<'t> PhysicsVars<'t> {
    /// Parameters as tape constants.
    pub fn constants(tape: &'t Tape, model: &PhysicsModel) -> Self {
        match model {
            PhysicsModel::Fdl { surrogate } => {
                Self::Fdl { surrogate: surrogate.clone(), vars: MlpVars::constants(tape, surrogate) }
            }
            _ => {
                let leaves: Vec<Var<'t>> = model.lambda().into_iter().map(|v| tape.scalar(v)).collect();
                Self::from_leaves(model, &leaves)
            }
        }
    }

    /// Parameters from trainable leaves laid out as [`PhysicsModel::lambda_shapes`].
    pub fn from_leaves(model: &PhysicsModel, leaves: &[Var<'t>]) -> Self {
        match model {
            PhysicsModel::Lwr3(_) => Self::Lwr3 {
                delta: leaves[0],
                p: leaves[1],
                sigma: leaves[2],
                rho_max: leaves[3],
                epsilon: leaves[4].exp(),
            },
            PhysicsModel::Arz(_) => Self::Arz { rho_max: leaves[0], u_max: leaves[1], tau: leaves[2].exp() },
            PhysicsModel::Fdl { surrogate } => Self::Fdl {
                surrogate: surrogate.clone(),
                vars: MlpVars { layers: leaves.chunks(2).map(|c| (c[0], c[1])).collect() },
            },
        }
    }
}

/// Network outputs and their input derivatives for a batch of points.
#[derive(Clone)]
pub struct StateJet<'t> {
    pub n: usize,
    pub rho: Var<'t>,
    pub rho_x: Var<'t>,
    pub rho_t: Var<'t>,
    pub rho_xx: Option<Var<'t>>,
    pub u: Option<Var<'t>>,
    pub u_x: Option<Var<'t>>,
    pub u_t: Option<Var<'t>>,
}

fn column_blocks<'t>(out: Var<'t>, layout: JetLayout, c: usize) -> (Var<'t>, Var<'t>, Var<'t>, Option<Var<'t>>) {
    let v = out.slice(layout.value_rows(), c..c + 1);
    let dx = out.slice(layout.dir_rows(0), c..c + 1);
    let dt = out.slice(layout.dir_rows(1), c..c + 1);
    let dxx = layout.second.then(|| out.slice(layout.second_rows(), c..c + 1));
    (v, dx, dt, dxx)
}

/// Evaluates `net` (columns 0 and 1 of `inputs` are `x` and `t`) with
/// derivatives in `x` and `t`, plus `rho_xx` when `second` is set. Speed
/// comes from `net_u` if given, otherwise from output column 1 of `net` if
/// it has one.
pub fn state_jet<'t>(
    tape: &'t Tape,
    net: &MlpParams,
    vars: &MlpVars<'t>,
    net_u: Option<(&MlpParams, &MlpVars<'t>)>,
    inputs: &Array2<f64>,
    second: bool,
) -> StateJet<'t> {
    let (inp, layout) = jet_input(tape, net, inputs, &[0, 1], second);
    let out = forward_jet(net, vars, inp, layout);
    let (rho, rho_x, rho_t, rho_xx) = column_blocks(out, layout, 0);
    let (u, u_x, u_t) = match net_u {
        Some((nu, vu)) => {
            let (inp, lu) = jet_input(tape, nu, inputs, &[0, 1], false);
            let out_u = forward_jet(nu, vu, inp, lu);
            let (u, ux, ut, _) = column_blocks(out_u, lu, 0);
            (Some(u), Some(ux), Some(ut))
        }
        None if net.output_width() >= 2 => {
            let (u, ux, ut, _) = column_blocks(out, layout, 1);
            (Some(u), Some(ux), Some(ut))
        }
        None => (None, None, None),
    };
    StateJet { n: inputs.nrows(), rho, rho_x, rho_t, rho_xx, u, u_x, u_t }
}

/// Analytic `Q'(rho)` of the three-parameter flux on the tape.
fn three_param_prime<'t>(rho: Var<'t>, delta: Var<'t>, p: Var<'t>, sigma: Var<'t>, rho_max: Var<'t>) -> Var<'t> {
    let a = (1.0 + (delta * p).square()).sqrt();
    let b = (1.0 + (delta * (1.0 - p)).square()).sqrt();
    let y = delta * (rho / rho_max - p);
    let slope = (b - a) - delta * y / (1.0 + y.square()).sqrt();
    sigma * slope / rho_max
}

/// Flux derivative of a scalar surrogate `q = s(rho)` via a one-direction jet.
fn surrogate_prime<'t>(tape: &'t Tape, surrogate: &MlpParams, vars: &MlpVars<'t>, rho: Var<'t>) -> Var<'t> {
    let n = rho.dim().0;
    let (value, scale) = match &surrogate.input_bounds {
        Some(b) => {
            let s = 2.0 / (b[0][1] - b[0][0]);
            ((rho - b[0][0]).scale(s).offset(-1.0), s)
        }
        None => (rho, 1.0),
    };
    let seed = tape.constant(Array2::from_elem((n, 1), scale));
    let layout = JetLayout { n, dirs: 1, second: false };
    let out = forward_jet(surrogate, vars, Var::vconcat(&[value, seed]), layout);
    out.rows(layout.dir_rows(0))
}

/// Residual columns (`n x 1` each): `[r_rho]` or `[r_rho, r_u]`.
pub fn residual_vars<'t>(tape: &'t Tape, physics: &PhysicsVars<'t>, s: &StateJet<'t>) -> Result<Vec<Var<'t>>> {
    match physics {
        PhysicsVars::Lwr3 { delta, p, sigma, rho_max, epsilon } => {
            let rho_xx = s.rho_xx.ok_or_else(|| invalid("three-parameter residual needs rho_xx"))?;
            let qp = three_param_prime(s.rho, *delta, *p, *sigma, *rho_max);
            Ok(vec![s.rho_t + qp * s.rho_x - *epsilon * rho_xx])
        }
        PhysicsVars::Arz { rho_max, u_max, tau } => {
            let (u, u_x, u_t) = match (s.u, s.u_x, s.u_t) {
                (Some(u), Some(ux), Some(ut)) => (u, ux, ut),
                _ => return Err(invalid("ARZ residual needs a speed output")),
            };
            let hp = *u_max / *rho_max;
            let u_eq = *u_max * (1.0 - s.rho / *rho_max);
            let r_rho = s.rho_t + s.rho_x * u + s.rho * u_x;
            let r_u = u_t + hp * s.rho_t + u * (u_x + hp * s.rho_x) - (u_eq - u) / *tau;
            Ok(vec![r_rho, r_u])
        }
        PhysicsVars::Fdl { surrogate, vars } => {
            let qp = surrogate_prime(tape, surrogate, vars, s.rho);
            Ok(vec![s.rho_t + qp * s.rho_x])
        }
    }
}

/// Residuals of `model` for the state network(s) at each point.
pub fn residual_batch(
    model: &PhysicsModel,
    net: &MlpParams,
    net_u: Option<&MlpParams>,
    points: &[DomainPoint],
) -> Result<Vec<ResidualValue>> {
    model.validate()?;
    if net.input_width() != 2 || net_u.is_some_and(|n| n.input_width() != 2) {
        return Err(invalid("state networks must take inputs (x, t)"));
    }
    let tape = Tape::new();
    let vars = MlpVars::constants(&tape, net);
    let vars_u = net_u.map(|n| MlpVars::constants(&tape, n));
    let pair = net_u.zip(vars_u.as_ref());
    let s = state_jet(&tape, net, &vars, pair, &points_array(points), model.needs_second_derivative());
    let physics = PhysicsVars::constants(&tape, model);
    let r = residual_vars(&tape, &physics, &s)?;
    if let Some((node, op)) = tape.first_non_finite() {
        return Err(Error::NumericOverflow { node, op });
    }
    let r_rho = r[0].to_vec();
    let r_u = r.get(1).map(|v| v.to_vec());
    Ok((0..points.len()).map(|i| ResidualValue { r_rho: r_rho[i], r_u: r_u.as_ref().map(|v| v[i]) }).collect())
}

/// `residual_lwr3(net, fd, point)`.
pub fn residual_lwr3(net: &MlpParams, fd: &ThreeParamFd, point: DomainPoint) -> Result<ResidualValue> {
    Ok(residual_batch(&PhysicsModel::Lwr3(*fd), net, None, &[point])?[0])
}

/// `residual_arz(net_rho, net_u, params, point)`; with `net_u = None` the
/// speed is output column 1 of `net_rho`.
pub fn residual_arz(
    net_rho: &MlpParams,
    net_u: Option<&MlpParams>,
    params: &GreenshieldsArz,
    point: DomainPoint,
) -> Result<ResidualValue> {
    Ok(residual_batch(&PhysicsModel::Arz(*params), net_rho, net_u, &[point])?[0])
}

/// `residual_lwr_fdl(net, surrogate, point)`.
pub fn residual_lwr_fdl(net: &MlpParams, surrogate: &MlpParams, point: DomainPoint) -> Result<ResidualValue> {
    let model = PhysicsModel::Fdl { surrogate: surrogate.clone() };
    Ok(residual_batch(&model, net, None, &[point])?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradient, value_and_grad, ParamLayout};
    use crate::neural::{mlp_forward, mlp_new, Activation, Init, OutputActivation};
    use proptest::prelude::*;

    fn truth() -> ThreeParamFd {
        ThreeParamFd::new(5.0, 0.2, 0.1, 1.0, 0.005).unwrap()
    }

    fn arz() -> GreenshieldsArz {
        GreenshieldsArz::new(1.13, 1.02, 0.02).unwrap()
    }

    #[test]
    fn flux_example_value() {
        let fd = ThreeParamFd { delta: 5.0, p: 2.0, sigma: 1.0, rho_max: 1.0, epsilon: 0.0 };
        // sqrt(101) + (sqrt(26) - sqrt(101)) / 2 - sqrt(1 + 7.5^2)
        let expected = 0.00807459214605899;
        assert!((flux_three_param(0.5, &fd) - expected).abs() < 1e-14);
        assert!((expected - 0.008076_f64).abs() < 2e-6);
    }

    #[test]
    fn speed_examples() {
        let p = arz();
        assert_eq!(speed_greenshields(0.0, &p), 1.02);
        assert_eq!(speed_greenshields(1.13, &p), 0.0);
        assert!((speed_greenshields(0.565, &p) - 0.51).abs() < 1e-15);
        assert_eq!(p.h(1.13), 1.02);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(ThreeParamFd::new(0.0, 0.2, 0.1, 1.0, 0.0).is_err());
        assert!(ThreeParamFd::new(5.0, 0.2, 0.1, 1.0, -1e-3).is_err());
        assert!(GreenshieldsArz::new(1.0, 1.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn flux_vanishes_at_endpoints(delta in 0.1f64..20.0, p in -1.0f64..2.0, sigma in 0.01f64..5.0, rho_max in 0.1f64..5.0) {
            let fd = ThreeParamFd::new(delta, p, sigma, rho_max, 0.0).unwrap();
            let scale = sigma * (fd.a() + fd.b());
            prop_assert!(fd.flux(0.0).abs() <= 1e-14 * scale);
            prop_assert!(fd.flux(rho_max).abs() <= 1e-14 * scale);
        }

        #[test]
        fn flux_prime_matches_differences(frac in 0.01f64..0.99, delta in 0.5f64..10.0, p in 0.05f64..0.95, sigma in 0.05f64..2.0) {
            let fd = ThreeParamFd::new(delta, p, sigma, 1.0, 0.0).unwrap();
            let h = 1e-6;
            let fdiff = (fd.flux(frac + h) - fd.flux(frac - h)) / (2.0 * h);
            prop_assert!((fd.flux_prime(frac) - fdiff).abs() <= 1e-8);
        }
    }

    fn tanh_net(widths: &[usize], seed: u64) -> MlpParams {
        mlp_new(widths, Activation::Tanh, OutputActivation::Identity, Init::XavierUniform, seed).unwrap()
    }

    fn eval(net: &MlpParams, x: f64, t: f64, c: usize) -> f64 {
        mlp_forward(net, &[x, t]).unwrap()[c]
    }

    #[test]
    fn constant_net_has_zero_residual() {
        let mut net = mlp_new(&[2, 5, 1], Activation::Tanh, OutputActivation::Identity, Init::Zeros, 0).unwrap();
        net.biases[1][0] = 0.4;
        let r = residual_lwr3(&net, &truth(), DomainPoint::new(0.3, 1.2)).unwrap();
        assert_eq!(r.r_rho, 0.0);
        assert_eq!(r.r_u, None);
    }

    #[test]
    fn linear_net_at_critical_density() {
        let fd = ThreeParamFd { epsilon: 0.0, ..truth() };
        // Q'(rho*) = 0  <=>  y / sqrt(1 + y^2) = (b - a) / delta
        let k = (fd.b() - fd.a()) / fd.delta;
        let y = k / (1.0 - k * k).sqrt();
        let rho_star = fd.rho_max * (fd.p + y / fd.delta);
        assert!(fd.flux_prime(rho_star).abs() < 1e-14);
        let (x0, t0, wx, wt) = (0.4, 1.0, 0.3, -0.07);
        let mut net = mlp_new(&[2, 1], Activation::Tanh, OutputActivation::Identity, Init::Zeros, 0).unwrap();
        net.set_flat(&[wx, wt, rho_star - wx * x0 - wt * t0]).unwrap();
        let r = residual_lwr3(&net, &fd, DomainPoint::new(x0, t0)).unwrap();
        assert!((r.r_rho - wt).abs() < 1e-14);
    }

    #[test]
    fn lwr3_residual_matches_difference_oracle() {
        let fd = truth();
        for seed in 0..5 {
            let net = tanh_net(&[2, 12, 12, 1], seed);
            let (x, t, h) = (0.37, 0.81, 1e-4);
            let f = |x, t| eval(&net, x, t, 0);
            let rho = f(x, t);
            let rx = (f(x + h, t) - f(x - h, t)) / (2.0 * h);
            let rt = (f(x, t + h) - f(x, t - h)) / (2.0 * h);
            let rxx = (f(x + h, t) - 2.0 * rho + f(x - h, t)) / (h * h);
            let oracle = rt + fd.flux_prime(rho) * rx - fd.epsilon * rxx;
            let r = residual_lwr3(&net, &fd, DomainPoint::new(x, t)).unwrap().r_rho;
            assert!((r - oracle).abs() <= 1e-5 * oracle.abs().max(1e-3), "seed {seed}: {r} vs {oracle}");
        }
    }

    #[test]
    fn arz_equilibrium_state_has_zero_residual() {
        let p = arz();
        let c = 0.4;
        let mut net = mlp_new(&[2, 3, 2], Activation::Tanh, OutputActivation::Identity, Init::Zeros, 0).unwrap();
        net.biases[1] = vec![c, p.u_eq(c)];
        let r = residual_arz(&net, None, &p, DomainPoint::new(0.2, 0.9)).unwrap();
        assert_eq!(r.r_rho, 0.0);
        assert!(r.r_u.unwrap().abs() < 1e-12);
    }

    #[test]
    fn arz_residual_matches_difference_oracle() {
        let p = arz();
        for seed in 0..5 {
            let net_rho = tanh_net(&[2, 10, 10, 1], seed);
            let net_u = tanh_net(&[2, 10, 10, 1], seed + 100);
            let (x, t, h) = (0.61, 2.2, 1e-5);
            let d = |net: &MlpParams| {
                let f = |x, t| eval(net, x, t, 0);
                (f(x, t), (f(x + h, t) - f(x - h, t)) / (2.0 * h), (f(x, t + h) - f(x, t - h)) / (2.0 * h))
            };
            let (rho, rx, rt) = d(&net_rho);
            let (u, ux, ut) = d(&net_u);
            let hp = p.h_prime();
            let o_rho = rt + rx * u + rho * ux;
            let o_u = ut + hp * rt + u * (ux + hp * rx) - (p.u_eq(rho) - u) / p.tau;
            let r = residual_arz(&net_rho, Some(&net_u), &p, DomainPoint::new(x, t)).unwrap();
            assert!((r.r_rho - o_rho).abs() <= 1e-5 * o_rho.abs().max(1e-3));
            let ru = r.r_u.unwrap();
            assert!((ru - o_u).abs() <= 1e-5 * o_u.abs().max(1e-3), "{ru} vs {o_u}");
        }
    }

    #[test]
    fn shared_net_equals_separate_nets() {
        let p = arz();
        let shared = tanh_net(&[2, 6, 2], 3);
        let split = |c: usize| {
            let mut n = mlp_new(&[2, 6, 1], Activation::Tanh, OutputActivation::Identity, Init::Zeros, 0).unwrap();
            n.weights[0] = shared.weights[0].clone();
            n.biases[0] = shared.biases[0].clone();
            n.weights[1] = (0..6).map(|k| shared.weights[1][2 * k + c]).collect();
            n.biases[1] = vec![shared.biases[1][c]];
            n
        };
        let pt = DomainPoint::new(0.3, 0.4);
        let a = residual_arz(&shared, None, &p, pt).unwrap();
        let b = residual_arz(&split(0), Some(&split(1)), &p, pt).unwrap();
        assert!((a.r_rho - b.r_rho).abs() < 1e-14);
        assert!((a.r_u.unwrap() - b.r_u.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn arz_needs_speed() {
        let net = tanh_net(&[2, 4, 1], 0);
        assert!(residual_arz(&net, None, &arz(), DomainPoint::new(0.1, 0.1)).is_err());
    }

    #[test]
    fn fdl_zero_and_linear_surrogates() {
        let net = tanh_net(&[2, 8, 1], 7);
        let pt = DomainPoint::new(0.45, 1.7);
        let h = 1e-5;
        let rx = (eval(&net, pt.x + h, pt.t, 0) - eval(&net, pt.x - h, pt.t, 0)) / (2.0 * h);
        let rt = (eval(&net, pt.x, pt.t + h, 0) - eval(&net, pt.x, pt.t - h, 0)) / (2.0 * h);

        let zero = mlp_new(&[1, 4, 1], Activation::Tanh, OutputActivation::Identity, Init::Zeros, 0).unwrap();
        let r = residual_lwr_fdl(&net, &zero, pt).unwrap().r_rho;
        assert!((r - rt).abs() < 1e-8);

        let v = 0.6;
        let mut linear = mlp_new(&[1, 1], Activation::Tanh, OutputActivation::Identity, Init::Zeros, 0)
            .unwrap()
            .with_input_bounds(vec![[0.0, 1.0]])
            .unwrap();
        // normalised input is 2 rho - 1, so weight v / 2 gives slope v
        linear.set_flat(&[v / 2.0, 0.0]).unwrap();
        let r = residual_lwr_fdl(&net, &linear, pt).unwrap().r_rho;
        assert!((r - (rt + v * rx)).abs() < 1e-8);
    }

    #[test]
    fn lambda_round_trip() {
        let m = PhysicsModel::Lwr3(truth());
        let back = m.with_lambda(&m.lambda()).unwrap();
        match back {
            PhysicsModel::Lwr3(fd) => {
                assert!((fd.epsilon - 0.005).abs() < 1e-17);
                assert_eq!(fd.delta, 5.0);
            }
            _ => unreachable!(),
        }
        let zero_eps = PhysicsModel::Lwr3(ThreeParamFd { epsilon: 0.0, ..truth() });
        assert_eq!(zero_eps.with_lambda(&zero_eps.lambda()).unwrap(), zero_eps);
        let a = PhysicsModel::Arz(arz());
        assert_eq!(a.lambda().len(), 3);
        assert!(a.with_lambda(&[1.0]).is_err());
    }

    fn physics_gradient_check(model: PhysicsModel, net: MlpParams) {
        let points: Vec<DomainPoint> =
            (0..7).map(|k| DomainPoint::new(0.1 + 0.12 * k as f64, 0.2 + 0.3 * k as f64)).collect();
        let inputs = points_array(&points);
        let layout = ParamLayout::new(model.lambda_shapes());
        let f = |lam: &[f64]| {
            value_and_grad(&layout, lam, |tape, leaves| {
                let vars = MlpVars::constants(tape, &net);
                let s = state_jet(tape, &net, &vars, None, &inputs, model.needs_second_derivative());
                let phys = PhysicsVars::from_leaves(&model, leaves);
                let r = residual_vars(tape, &phys, &s)?;
                let mut loss = r[0].square().mean();
                for extra in &r[1..] {
                    loss = loss + extra.square().mean();
                }
                Ok((loss, ()))
            })
            .map(|(v, g, _)| (v, g))
        };
        let err = check_gradient(f, &model.lambda(), 1e-6).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn gradients_wrt_physics_parameters() {
        physics_gradient_check(PhysicsModel::Lwr3(truth()), tanh_net(&[2, 8, 8, 1], 1));
        physics_gradient_check(PhysicsModel::Arz(arz()), tanh_net(&[2, 8, 8, 2], 2));
        let surrogate = tanh_net(&[1, 5, 1], 3).with_input_bounds(vec![[0.0, 1.0]]).unwrap();
        physics_gradient_check(PhysicsModel::Fdl { surrogate }, tanh_net(&[2, 8, 1], 4));
    }
}
