//! Composite PIDL loss and the two-phase (Adam, then L-BFGS) trainer.
//!
//! The loss is `alpha L_o + beta L_c + gamma L_b`: data misfit over the
//! observations, squared PDE residual over the collocation points, and the
//! periodic mismatch `f(0, t) - f(L, t)` over the boundary times. Terms with
//! zero weight or an empty point set are skipped, so a zero weight is exactly
//! equivalent to leaving the term out.

mod optim;

pub use optim::{adam_step, adam_update, lbfgs_minimize, AdamParams, AdamState, LbfgsConfig, LbfgsResult, OptimStatus};

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{value_and_grad, ParamLayout, Tape, Var};
use crate::domain::{points_array, BoundaryCollocationSet, CollocationSet, DomainPoint, Field, Grid, ObservationSet};
use crate::error::{invalid, Error, Result};
use crate::metrics::rel_error_values;
use crate::neural::{forward_values, mlp_forward_batch, value_input, MlpParams, MlpVars};
use crate::physics::{residual_vars, state_jet, PhysicsModel, PhysicsVars};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 100.0, beta: 100.0, gamma: 100.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub adam_iterations: usize,
    pub adam: AdamParams,
    pub lbfgs: LbfgsConfig,
    /// Append the physics parameters to the trainable vector.
    pub identify_physics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam_iterations: 1000,
            adam: AdamParams::default(),
            lbfgs: LbfgsConfig::default(),
            identify_physics: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps >= 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        if self.lbfgs.memory == 0 || !(self.lbfgs.tolerance >= 0.0) {
            return Err(Error::Config("L-BFGS needs memory >= 1 and tolerance >= 0".into()));
        }
        Ok(())
    }
}

/// Loss value and its components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub data: f64,
    pub physics: f64,
    pub boundary: f64,
}

/// Everything the loss needs besides the trainable parameters.
#[derive(Clone, Copy)]
pub struct PidlProblem<'a> {
    /// Initial (or fixed) physics parameters; `None` only when the physics
    /// term is unused.
    pub physics: Option<&'a PhysicsModel>,
    /// Known parameters for the relative-error table.
    pub truth: Option<&'a PhysicsModel>,
    pub observations: &'a ObservationSet,
    pub collocation: &'a CollocationSet,
    pub boundary: &'a BoundaryCollocationSet,
    pub weights: LossWeights,
    pub road_length: f64,
}

/// Point sets converted to matrices once per training run.
struct Prepared {
    obs_inputs: Array2<f64>,
    obs_rho: Array2<f64>,
    obs_u: Option<Array2<f64>>,
    colloc_inputs: Array2<f64>,
    boundary_inputs: Array2<f64>,
    n_boundary: usize,
}

impl Prepared {
    fn new(p: &PidlProblem<'_>) -> Self {
        let o = p.observations;
        let col = |v: &[f64]| Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("column");
        let nb = p.boundary.len();
        let boundary_inputs = Array2::from_shape_fn((2 * nb, 2), |(i, j)| match j {
            0 if i < nb => 0.0,
            0 => p.road_length,
            _ => p.boundary.times[i % nb],
        });
        Self {
            obs_inputs: points_array(&o.points),
            obs_rho: col(&o.rho),
            obs_u: o.u.as_deref().map(col),
            colloc_inputs: points_array(&p.collocation.points),
            boundary_inputs,
            n_boundary: nb,
        }
    }
}

fn check_problem(net: &MlpParams, p: &PidlProblem<'_>) -> Result<()> {
    net.validate()?;
    p.weights.validate()?;
    if net.input_width() != 2 {
        return Err(invalid("the state network must take inputs (x, t)"));
    }
    if p.weights.beta > 0.0 && !p.collocation.is_empty() {
        let physics = p.physics.ok_or_else(|| invalid("physics term requested without a physics model"))?;
        physics.validate()?;
        if net.output_width() < physics.state_width() {
            return Err(invalid(format!(
                "physics needs {} state outputs, network has {}",
                physics.state_width(),
                net.output_width()
            )));
        }
    }
    Ok(())
}

/// Records the loss on `tape` given the network leaves and (optionally) the
/// physics leaves.
fn build_loss<'t>(
    tape: &'t Tape,
    net: &MlpParams,
    vars: &MlpVars<'t>,
    physics: Option<PhysicsVars<'t>>,
    problem: &PidlProblem<'_>,
    data: &Prepared,
) -> Result<(Var<'t>, [Option<Var<'t>>; 3])> {
    let w = problem.weights;
    let mut total = tape.scalar(0.0);
    let mut parts = [None, None, None];

    if w.alpha > 0.0 && data.obs_inputs.nrows() > 0 {
        let out = forward_values(net, vars, value_input(tape, net, &data.obs_inputs));
        let n = data.obs_inputs.nrows();
        let mut l = (out.slice(0..n, 0..1) - tape.constant(data.obs_rho.clone())).square().mean();
        if let (Some(u), true) = (&data.obs_u, net.output_width() >= 2) {
            l = l + (out.slice(0..n, 1..2) - tape.constant(u.clone())).square().mean();
        }
        total = total + l * w.alpha;
        parts[0] = Some(l);
    }
    if w.beta > 0.0 && data.colloc_inputs.nrows() > 0 {
        let model = problem.physics.expect("checked");
        let physics = physics.unwrap_or_else(|| PhysicsVars::constants(tape, model));
        let s = state_jet(tape, net, vars, None, &data.colloc_inputs, model.needs_second_derivative());
        let r = residual_vars(tape, &physics, &s)?;
        let mut l = r[0].square().mean();
        for extra in &r[1..] {
            l = l + extra.square().mean();
        }
        total = total + l * w.beta;
        parts[1] = Some(l);
    }
    if w.gamma > 0.0 && data.n_boundary > 0 {
        let nb = data.n_boundary;
        let out = forward_values(net, vars, value_input(tape, net, &data.boundary_inputs));
        let width = net.output_width().min(problem.physics.map_or(1, |p| p.state_width()).max(1));
        let diff = out.slice(0..nb, 0..width) - out.slice(nb..2 * nb, 0..width);
        let l = diff.square().sum().scale(1.0 / nb as f64);
        total = total + l * w.gamma;
        parts[2] = Some(l);
    }
    Ok((total, parts))
}

fn terms_of(total: &Var<'_>, parts: &[Option<Var<'_>>; 3]) -> LossTerms {
    let v = |p: &Option<Var<'_>>| p.as_ref().map_or(0.0, |v| v.scalar());
    LossTerms { total: total.scalar(), data: v(&parts[0]), physics: v(&parts[1]), boundary: v(&parts[2]) }
}

/// `loss_deterministic(net, physics, O, C, C_B, weights)`.
pub fn loss_deterministic(net: &MlpParams, problem: &PidlProblem<'_>) -> Result<LossTerms> {
    check_problem(net, problem)?;
    let data = Prepared::new(problem);
    let tape = Tape::new();
    let vars = MlpVars::constants(&tape, net);
    let (total, parts) = build_loss(&tape, net, &vars, None, problem, &data)?;
    let terms = terms_of(&total, &parts);
    if !terms.total.is_finite() {
        let (node, op) = tape.first_non_finite().unwrap_or((total.id(), "loss"));
        return Err(Error::NumericOverflow { node, op });
    }
    Ok(terms)
}

/// Trainable layout: network tensors, then physics tensors when identifying.
fn layout_for(net: &MlpParams, problem: &PidlProblem<'_>, identify: bool) -> Result<(ParamLayout, Vec<f64>)> {
    let mut layout = ParamLayout::new(net.param_shapes());
    let mut flat = net.flatten();
    if identify {
        let physics = problem.physics.ok_or_else(|| invalid("identification needs a physics model"))?;
        layout.extend(physics.lambda_shapes());
        flat.extend(physics.lambda());
    }
    Ok((layout, flat))
}

/// Loss and gradient with respect to `[theta, lambda?]`.
pub fn loss_and_grad(
    net: &MlpParams,
    problem: &PidlProblem<'_>,
    identify: bool,
    flat: &[f64],
) -> Result<(LossTerms, Vec<f64>)> {
    check_problem(net, problem)?;
    let data = Prepared::new(problem);
    let (layout, _) = layout_for(net, problem, identify)?;
    let (_, g, terms) = evaluate(&layout, flat, net, problem, &data, identify)?;
    Ok((terms, g))
}

fn evaluate(
    layout: &ParamLayout,
    flat: &[f64],
    net: &MlpParams,
    problem: &PidlProblem<'_>,
    data: &Prepared,
    identify: bool,
) -> Result<(f64, Vec<f64>, LossTerms)> {
    let n_net = net.param_shapes().len();
    value_and_grad(layout, flat, |tape, leaves| {
        let vars = MlpVars { layers: leaves[..n_net].chunks(2).map(|c| (c[0], c[1])).collect() };
        let physics = if identify {
            Some(PhysicsVars::from_leaves(problem.physics.expect("checked"), &leaves[n_net..]))
        } else {
            None
        };
        let (total, parts) = build_loss(tape, net, &vars, physics, problem, data)?;
        let terms = terms_of(&total, &parts);
        Ok((total, terms))
    })
}

/// Loss traces of both phases.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub adam: Vec<LossTerms>,
    pub lbfgs: Vec<LossTerms>,
}

/// Serializable training summary. Wall-clock time is kept out of the JSON so
/// identical runs give identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: LossTrace,
    pub final_loss: LossTerms,
    pub lambda_star: BTreeMap<String, f64>,
    pub re_table: BTreeMap<String, f64>,
    pub adam_iterations: usize,
    pub lbfgs_iterations: usize,
    pub lbfgs_evaluations: usize,
    pub status: OptimStatus,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Trained network and physics together with the report.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: MlpParams,
    pub physics: Option<PhysicsModel>,
    pub report: TrainReport,
}

/// `train_pidl(net0, lambda0, O, C, C_B, weights, config)`: Adam for
/// `adam_iterations`, then L-BFGS on the same variables.
pub fn train_pidl(net0: &MlpParams, problem: &PidlProblem<'_>, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    check_problem(net0, problem)?;
    let started = Instant::now();
    let identify = config.identify_physics && problem.physics.is_some();
    let data = Prepared::new(problem);
    let (layout, mut x) = layout_for(net0, problem, identify)?;
    let eval = |x: &[f64]| evaluate(&layout, x, net0, problem, &data, identify);

    let mut trace = LossTrace::default();
    let mut status = None;
    let mut adam = AdamState::new(x.len());
    for _ in 0..config.adam_iterations {
        match eval(&x) {
            Ok((_, g, terms)) => {
                trace.adam.push(terms);
                adam_update(&mut x, &g, &mut adam, &config.adam);
            }
            Err(e @ Error::NumericOverflow { .. }) => {
                status = Some(OptimStatus::Aborted(format!("adam: {e}")));
                break;
            }
            Err(e) => return Err(e),
        }
    }

    let (mut lbfgs_iterations, mut lbfgs_evaluations) = (0, 0);
    let status = match status {
        Some(s) => s,
        None if config.lbfgs.max_iterations == 0 => OptimStatus::MaxIterations,
        None => match lbfgs_minimize(eval, &x, &config.lbfgs) {
            Ok(r) => {
                x = r.params;
                trace.lbfgs = r.trace;
                lbfgs_iterations = r.iterations;
                lbfgs_evaluations = r.evaluations;
                r.status
            }
            Err(e @ Error::NumericOverflow { .. }) => OptimStatus::Aborted(format!("lbfgs: {e}")),
            Err(e) => return Err(e),
        },
    };

    let n_theta = net0.n_params();
    let net = net0.with_flat(&x[..n_theta])?;
    let physics = match problem.physics {
        Some(p) if identify => Some(p.with_lambda(&x[n_theta..])?),
        Some(p) => Some(p.clone()),
        None => None,
    };
    let final_loss = match eval(&x) {
        Ok((_, _, t)) => t,
        Err(Error::NumericOverflow { .. }) => LossTerms { total: f64::NAN, ..Default::default() },
        Err(e) => return Err(e),
    };
    let lambda_star: BTreeMap<String, f64> =
        physics.iter().flat_map(|p| p.named_values()).map(|(k, v)| (k.to_string(), v)).collect();
    let mut re_table = BTreeMap::new();
    if let Some(truth) = problem.truth {
        for (k, v) in truth.named_values() {
            if let Some(est) = lambda_star.get(k) {
                if v != 0.0 {
                    re_table.insert(k.to_string(), ((est - v) / v).abs());
                }
            }
        }
    }
    let report = TrainReport {
        adam_iterations: trace.adam.len(),
        losses: trace,
        final_loss,
        lambda_star,
        re_table,
        lbfgs_iterations,
        lbfgs_evaluations,
        status,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { net, physics, report })
}

/// `train_nn_baseline(net0, O, config)`: the data term alone.
pub fn train_nn_baseline(
    net0: &MlpParams,
    observations: &ObservationSet,
    alpha: f64,
    road_length: f64,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let (c, b) = (CollocationSet::default(), BoundaryCollocationSet::default());
    let problem = PidlProblem {
        physics: None,
        truth: None,
        observations,
        collocation: &c,
        boundary: &b,
        weights: LossWeights { alpha, beta: 0.0, gamma: 0.0 },
        road_length,
    };
    train_pidl(net0, &problem, &TrainConfig { identify_physics: false, ..*config })
}

/// Network outputs on every grid node; column `c` becomes one field.
pub fn predict_fields(net: &MlpParams, grid: &Grid) -> Result<Vec<Field>> {
    let points = grid.points();
    let out = mlp_forward_batch(net, &points_array(&points))?;
    (0..net.output_width())
        .map(|c| {
            let values = Array2::from_shape_fn((grid.nx, grid.nt), |(i, j)| out[[i * grid.nt + j, c]]);
            Field::new(*grid, values)
        })
        .collect()
}

/// Relative error of output column `c` at `points` against `truth`.
pub fn validation_error(net: &MlpParams, points: &[DomainPoint], truth: &[f64], c: usize) -> Result<f64> {
    let out = mlp_forward_batch(net, &points_array(points))?;
    rel_error_values(&out.column(c).to_vec(), truth)
}

/// One `(beta, gamma)` candidate of [`grid_search`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearchEntry {
    pub beta: f64,
    pub gamma: f64,
    pub validation_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub entries: Vec<GridSearchEntry>,
    pub best: GridSearchEntry,
}

/// Candidate values for `beta` and `gamma`.
pub const WEIGHT_GRID: [f64; 6] = [1.0, 10.0, 50.0, 100.0, 150.0, 200.0];

/// Trains one model per `(beta, gamma)` pair with `alpha` fixed and keeps the
/// pair with the lowest `validate(net)` score (ties keep the earlier pair).
pub fn grid_search(
    net0: &MlpParams,
    problem: &PidlProblem<'_>,
    config: &TrainConfig,
    betas: &[f64],
    gammas: &[f64],
    mut validate: impl FnMut(&MlpParams) -> Result<f64>,
) -> Result<GridSearchResult> {
    let mut entries = Vec::new();
    for &beta in betas {
        for &gamma in gammas {
            let p = PidlProblem { weights: LossWeights { beta, gamma, ..problem.weights }, ..*problem };
            let outcome = train_pidl(net0, &p, config)?;
            entries.push(GridSearchEntry { beta, gamma, validation_error: validate(&outcome.net)? });
        }
    }
    let best = entries
        .iter()
        .fold(None::<&GridSearchEntry>, |b, e| match b {
            Some(b) if b.validation_error <= e.validation_error => Some(b),
            _ => Some(e),
        })
        .ok_or_else(|| invalid("grid search needs at least one candidate"))?
        .clone();
    Ok(GridSearchResult { entries, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradient;
    use crate::neural::{mlp_new, Activation, Init, OutputActivation};
    use crate::physics::ThreeParamFd;

    fn fd() -> PhysicsModel {
        PhysicsModel::Lwr3(ThreeParamFd::new(5.0, 0.2, 0.1, 1.0, 0.005).unwrap())
    }

    fn net(seed: u64) -> MlpParams {
        mlp_new(&[2, 6, 6, 1], Activation::Tanh, OutputActivation::Identity, Init::XavierUniform, seed)
            .unwrap()
            .with_input_bounds(vec![[0.0, 1.0], [0.0, 3.0]])
            .unwrap()
    }

    fn sets() -> (ObservationSet, CollocationSet, BoundaryCollocationSet) {
        let pts = vec![DomainPoint::new(0.1, 0.5), DomainPoint::new(0.9, 2.0), DomainPoint::new(0.5, 1.0)];
        let obs = ObservationSet::new(pts, vec![0.3, 0.5, 0.4], None).unwrap();
        let c = CollocationSet { points: (0..6).map(|k| DomainPoint::new(0.15 * k as f64, 0.4 * k as f64)).collect() };
        let b = BoundaryCollocationSet { times: vec![0.5, 1.5, 2.5] };
        (obs, c, b)
    }

    fn problem<'a>(
        physics: &'a PhysicsModel,
        s: &'a (ObservationSet, CollocationSet, BoundaryCollocationSet),
        weights: LossWeights,
    ) -> PidlProblem<'a> {
        PidlProblem {
            physics: Some(physics),
            truth: Some(physics),
            observations: &s.0,
            collocation: &s.1,
            boundary: &s.2,
            weights,
            road_length: 1.0,
        }
    }

    #[test]
    fn two_observation_data_term() {
        let zero = mlp_new(&[2, 3, 1], Activation::Tanh, OutputActivation::Identity, Init::Zeros, 0).unwrap();
        let obs =
            ObservationSet::new(vec![DomainPoint::new(0.2, 0.1), DomainPoint::new(0.7, 0.3)], vec![0.3, 0.5], None)
                .unwrap();
        let (c, b) = (CollocationSet::default(), BoundaryCollocationSet::default());
        let p = PidlProblem {
            physics: None,
            truth: None,
            observations: &obs,
            collocation: &c,
            boundary: &b,
            weights: LossWeights { alpha: 1.0, beta: 0.0, gamma: 0.0 },
            road_length: 1.0,
        };
        let t = loss_deterministic(&zero, &p).unwrap();
        assert!((t.data - 0.17).abs() < 1e-15);
        assert_eq!(t.total, t.data);
    }

    #[test]
    fn constant_net_matching_constant_data_has_zero_loss() {
        let mut c = mlp_new(&[2, 3, 1], Activation::Tanh, OutputActivation::Identity, Init::Zeros, 0).unwrap();
        c.biases[1][0] = 0.4;
        let physics = fd();
        let mut s = sets();
        s.0.rho = vec![0.4; 3];
        let t = loss_deterministic(&c, &problem(&physics, &s, LossWeights::default())).unwrap();
        assert_eq!((t.total, t.data, t.physics, t.boundary), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn zero_weights_give_zero_and_decomposition_holds() {
        let physics = fd();
        let s = sets();
        let n = net(1);
        let zero = LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0 };
        assert_eq!(loss_deterministic(&n, &problem(&physics, &s, zero)).unwrap().total, 0.0);
        let w = LossWeights { alpha: 100.0, beta: 10.0, gamma: 50.0 };
        let t = loss_deterministic(&n, &problem(&physics, &s, w)).unwrap();
        let sum = w.alpha * t.data + w.beta * t.physics + w.gamma * t.boundary;
        assert!((t.total - sum).abs() <= 1e-14 * t.total);
        assert!(t.data > 0.0 && t.physics > 0.0 && t.boundary > 0.0);
    }

    #[test]
    fn gradient_matches_differences() {
        let physics = fd();
        let s = sets();
        let n = net(2);
        let p = problem(&physics, &s, LossWeights { alpha: 1.0, beta: 1.0, gamma: 1.0 });
        for identify in [false, true] {
            let (_, x0) = layout_for(&n, &p, identify).unwrap();
            let err =
                check_gradient(|x: &[f64]| loss_and_grad(&n, &p, identify, x).map(|(t, g)| (t.total, g)), &x0, 1e-6)
                    .unwrap();
            assert!(err < 1e-5, "identify={identify}: {err}");
        }
    }

    fn quick(adam: usize, lbfgs: usize) -> TrainConfig {
        TrainConfig {
            adam_iterations: adam,
            lbfgs: LbfgsConfig { max_iterations: lbfgs, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn self_fit_regression() {
        let teacher = net(5);
        let pts: Vec<DomainPoint> =
            (0..40).map(|k| DomainPoint::new((k % 8) as f64 / 8.0, (k / 8) as f64 * 0.6)).collect();
        let vals = mlp_forward_batch(&teacher, &points_array(&pts)).unwrap().column(0).to_vec();
        let obs = ObservationSet::new(pts, vals, None).unwrap();
        let out = train_nn_baseline(&net(6), &obs, 1.0, 1.0, &quick(200, 2000)).unwrap();
        assert!(out.report.final_loss.data <= 1e-6, "{:?}", out.report.final_loss);
    }

    #[test]
    fn baseline_equals_pidl_with_data_weight_only() {
        let physics = fd();
        let s = sets();
        let w = LossWeights { alpha: 100.0, beta: 0.0, gamma: 0.0 };
        let cfg = quick(20, 10);
        let a = train_pidl(&net(3), &problem(&physics, &s, w), &cfg).unwrap();
        let b = train_nn_baseline(&net(3), &s.0, 100.0, 1.0, &cfg).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.report.losses, b.report.losses);
    }

    #[test]
    fn empty_observations_leave_parameters_unchanged() {
        let n = net(4);
        let out = train_nn_baseline(&n, &ObservationSet::empty(), 100.0, 1.0, &quick(5, 5)).unwrap();
        assert_eq!(out.net, n);
        assert_eq!(out.report.final_loss.total, 0.0);
    }

    #[test]
    fn adam_is_scale_invariant() {
        let physics = fd();
        let s = sets();
        let cfg = TrainConfig {
            adam_iterations: 50,
            adam: AdamParams { eps: 0.0, ..Default::default() },
            lbfgs: LbfgsConfig { max_iterations: 0, ..Default::default() },
            ..Default::default()
        };
        let w = LossWeights { alpha: 1.0, beta: 2.0, gamma: 0.5 };
        let scaled = LossWeights { alpha: 7.0, beta: 14.0, gamma: 3.5 };
        let a = train_pidl(&net(8), &problem(&physics, &s, w), &cfg).unwrap();
        let b = train_pidl(&net(8), &problem(&physics, &s, scaled), &cfg).unwrap();
        for (x, y) in a.net.flatten().iter().zip(b.net.flatten()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn identical_runs_give_identical_reports() {
        let physics = fd();
        let s = sets();
        let cfg = TrainConfig { identify_physics: true, ..quick(15, 10) };
        let a = train_pidl(&net(9), &problem(&physics, &s, LossWeights::default()), &cfg).unwrap();
        let b = train_pidl(&net(9), &problem(&physics, &s, LossWeights::default()), &cfg).unwrap();
        assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
        assert_eq!(a.report.losses.adam.len(), 15);
        assert_eq!(a.report.losses.lbfgs.len(), a.report.lbfgs_iterations);
        assert!(a.report.re_table.contains_key("rho_max"));
    }

    #[test]
    fn grid_search_picks_lowest_score() {
        let physics = fd();
        let s = sets();
        let mut calls = 0;
        let r = grid_search(
            &net(1),
            &problem(&physics, &s, LossWeights::default()),
            &quick(2, 0),
            &[1.0, 10.0],
            &[1.0],
            |_| {
                calls += 1;
                Ok(if calls == 2 { 0.1 } else { 0.5 })
            },
        )
        .unwrap();
        assert_eq!(r.entries.len(), 2);
        assert_eq!((r.best.beta, r.best.gamma), (10.0, 1.0));
    }
}
