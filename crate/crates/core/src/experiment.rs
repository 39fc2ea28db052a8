//! End-to-end pipeline stages driven by an [`ExperimentConfig`].

use crate::config::{ExperimentConfig, InitialDensity, InitialSpeed, LearnerPhysics, Stage};
use crate::domain::{
    collocation_count, sample_boundary, sample_collocation, sample_loop_detectors, BoundaryCollocationSet,
    CollocationSet, Field, Grid, ObservationSet,
};
use crate::ekf::{ekf_run, EkfModel, EkfResult};
use crate::error::{invalid, Result};
use crate::gan::{
    default_discriminator, default_generator, discriminator_width, predict_distribution, train_gan, GanOutcome,
    GanPhysics, GanVariant, StochasticPhysics, UqSampleSet,
};
use crate::metrics::{field_metrics, MetricReport, DEFAULT_BINS};
use crate::neural::{mlp_new, uniform_layers, Activation, Init, MlpParams, OutputActivation};
use crate::physics::{Flux, PhysicsModel};
use crate::solvers::{bump_density, solve_arz, solve_lwr, SolverDiagnostics};
use crate::training::{predict_fields, train_nn_baseline, train_pidl, PidlProblem, TrainOutcome};
use crate::trajectory::{probe_observations, synthetic_trajectories};

/// Simulated ground truth. `u` is present for ARZ only.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub rho: Field,
    pub u: Option<Field>,
    pub diagnostics: SolverDiagnostics,
}

/// Equilibrium speed `Q(rho) / rho` of an LWR density field.
pub fn lwr_speed(rho: &Field, flux: &impl Flux) -> Result<Field> {
    let values = rho.values().mapv(|r| if r > 1e-12 { flux.flux(r) / r } else { flux.flux_prime(0.0) });
    Field::new(*rho.grid(), values)
}

/// `generate`: solve the truth model on the configured grid.
pub fn generate(cfg: &ExperimentConfig) -> Result<GroundTruth> {
    let l = cfg.grid.road_length;
    let rho0 = |x: f64| match cfg.initial_density {
        InitialDensity::Bump => bump_density(x / l),
        InitialDensity::Constant { value } => value,
    };
    match &cfg.truth {
        PhysicsModel::Lwr3(fd) => {
            let (rho, diagnostics) = solve_lwr(&cfg.grid, rho0, fd, cfg.periodic, &cfg.solver)?;
            Ok(GroundTruth { rho, u: None, diagnostics })
        }
        PhysicsModel::Arz(p) => {
            let u0 = |x: f64| match cfg.initial_speed {
                InitialSpeed::Equilibrium => p.u_eq(rho0(x)),
                InitialSpeed::Constant { value } => value,
            };
            let (rho, u, diagnostics) = solve_arz(&cfg.grid, rho0, u0, p, cfg.periodic, &cfg.solver)?;
            Ok(GroundTruth { rho, u: Some(u), diagnostics })
        }
        PhysicsModel::Fdl { .. } => Err(invalid("a surrogate flux cannot generate data")),
    }
}

/// Observation, collocation and boundary sets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingData {
    pub observations: ObservationSet,
    pub collocation: CollocationSet,
    pub boundary: BoundaryCollocationSet,
}

/// `sample`: loop detectors (plus probes when enabled), collocation points
/// and boundary times.
pub fn sample(cfg: &ExperimentConfig, truth: &GroundTruth) -> Result<TrainingData> {
    let s = &cfg.sensors;
    let speed = truth.u.as_ref().filter(|_| s.observe_speed);
    let mut observations =
        sample_loop_detectors(&truth.rho, speed, s.detectors, s.noise_std, cfg.stage_seed(Stage::Sensors))?;
    if s.probe_ratio > 0.0 {
        let u = match (&truth.u, &cfg.truth) {
            (Some(u), _) => u.clone(),
            (None, PhysicsModel::Lwr3(fd)) => lwr_speed(&truth.rho, fd)?,
            _ => return Err(invalid("no speed field for probe vehicles")),
        };
        let trajectories = synthetic_trajectories(&truth.rho, &u, s.probe_vehicles, 4, 1.0, 1.0)?;
        let mut probes = probe_observations(&trajectories, s.probe_ratio, cfg.stage_seed(Stage::Probes), &truth.rho)?;
        if speed.is_none() {
            probes.u = None;
        }
        observations = observations.merged(&probes);
    }
    let c = &cfg.collocation;
    let n_c = c.count.unwrap_or_else(|| collocation_count(&cfg.grid, c.rate));
    let collocation = sample_collocation(&cfg.grid, n_c, c.strategy, cfg.stage_seed(Stage::Collocation))?;
    let boundary = if cfg.periodic {
        sample_boundary(&cfg.grid, c.boundary_points, c.boundary_placement, cfg.stage_seed(Stage::Boundary))
    } else {
        BoundaryCollocationSet::default()
    };
    Ok(TrainingData { observations, collocation, boundary })
}

fn domain_bounds(grid: &Grid) -> Vec<[f64; 2]> {
    vec![[0.0, grid.road_length], [0.0, grid.horizon]]
}

/// Freshly initialised state network for the configured model.
pub fn initial_network(cfg: &ExperimentConfig) -> Result<MlpParams> {
    let n = &cfg.network;
    let sizes = uniform_layers(2, n.hidden, n.depth, cfg.truth.state_width());
    mlp_new(&sizes, n.activation, OutputActivation::Identity, Init::XavierUniform, cfg.stage_seed(Stage::Network))?
        .with_input_bounds(domain_bounds(&cfg.grid))
}

/// Starting physics of the learner.
pub fn learner_physics(cfg: &ExperimentConfig) -> Result<PhysicsModel> {
    Ok(match &cfg.learner {
        LearnerPhysics::Truth => cfg.truth.clone(),
        LearnerPhysics::Initial { model } => model.clone(),
        LearnerPhysics::Surrogate { hidden, depth } => {
            let rho_max = match &cfg.truth {
                PhysicsModel::Lwr3(fd) => fd.rho_max,
                _ => return Err(invalid("surrogate learner needs an lwr3 truth")),
            };
            let sizes = uniform_layers(1, *hidden, *depth, 1);
            let surrogate = mlp_new(
                &sizes,
                Activation::Tanh,
                OutputActivation::Identity,
                Init::XavierUniform,
                cfg.stage_seed(Stage::Network) ^ 1,
            )?
            .with_input_bounds(vec![[0.0, rho_max]])?;
            PhysicsModel::Fdl { surrogate }
        }
    })
}

/// `train`: PIDL with the configured weights.
pub fn train(cfg: &ExperimentConfig, data: &TrainingData) -> Result<TrainOutcome> {
    let physics = learner_physics(cfg)?;
    let truth = (!matches!(physics, PhysicsModel::Fdl { .. })).then_some(&cfg.truth);
    let problem = PidlProblem {
        physics: Some(&physics),
        truth,
        observations: &data.observations,
        collocation: &data.collocation,
        boundary: &data.boundary,
        weights: cfg.weights,
        road_length: cfg.grid.road_length,
    };
    train_pidl(&initial_network(cfg)?, &problem, &cfg.training)
}

/// Pure data-driven network with the same budget and data weight.
pub fn train_baseline(cfg: &ExperimentConfig, data: &TrainingData) -> Result<TrainOutcome> {
    train_nn_baseline(
        &initial_network(cfg)?,
        &data.observations,
        cfg.weights.alpha,
        cfg.grid.road_length,
        &cfg.training,
    )
}

/// Density and (for two-output networks) speed on the data grid.
pub fn predict(cfg: &ExperimentConfig, net: &MlpParams) -> Result<(Field, Option<Field>)> {
    let mut fields = predict_fields(net, &cfg.grid)?.into_iter();
    let rho = fields.next().ok_or_else(|| invalid("network has no outputs"))?;
    Ok((rho, fields.next()))
}

/// `ekf`: the filter with the true model parameters.
pub fn run_ekf(cfg: &ExperimentConfig, observations: &ObservationSet) -> Result<EkfResult> {
    let model = match &cfg.truth {
        PhysicsModel::Lwr3(fd) => EkfModel::Lwr3(*fd),
        PhysicsModel::Arz(p) => EkfModel::Arz(*p),
        PhysicsModel::Fdl { .. } => return Err(invalid("the filter needs a closed-form model")),
    };
    ekf_run(model, observations, &cfg.grid, &cfg.ekf)
}

/// `gan-train`: trains the configured variant and draws predictions on the
/// UQ grid.
pub fn run_gan(cfg: &ExperimentConfig, data: &TrainingData) -> Result<(GanOutcome, UqSampleSet)> {
    let g = &cfg.gan;
    let physics = match g.variant {
        GanVariant::MeanGan => {
            let spec = cfg.stochastic.as_ref().ok_or_else(|| invalid("mean-gan needs a stochastic spec"))?;
            GanPhysics::Stochastic(StochasticPhysics::new(learner_physics(cfg)?, spec.std.clone(), spec.n_k)?)
        }
        _ => GanPhysics::Fixed(learner_physics(cfg)?),
    };
    let outputs = cfg.truth.state_width();
    let gen0 = default_generator(&cfg.grid, g.latent_dim, outputs, cfg.stage_seed(Stage::Gan))?;
    let use_speed = data.observations.u.is_some() && outputs >= 2;
    let disc0 = default_discriminator(
        &cfg.grid,
        discriminator_width(use_speed, g.variant),
        cfg.stage_seed(Stage::Discriminator),
    )?;
    let outcome = train_gan(
        &gen0,
        &disc0,
        &physics,
        &data.observations,
        &data.collocation,
        &data.boundary,
        cfg.grid.road_length,
        g,
    )?;
    let grid = cfg.uq_grid.unwrap_or(cfg.grid);
    let samples = predict_distribution(&outcome.generator, &grid, g.n_mc, cfg.stage_seed(Stage::Prediction))?;
    Ok((outcome, samples))
}

/// `evaluate`: metrics of predicted fields against the truth.
pub fn evaluate(pred_rho: &Field, pred_u: Option<&Field>, truth: &GroundTruth) -> Result<MetricReport> {
    let (pu, tu) = match (pred_u, truth.u.as_ref()) {
        (Some(p), Some(t)) => (Some(p), Some(t)),
        _ => (None, None),
    };
    field_metrics(pred_rho, &truth.rho, pu, tu, DEFAULT_BINS)
}
