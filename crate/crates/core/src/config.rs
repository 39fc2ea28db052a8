//! Experiment configuration and its content hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{BoundaryPlacement, CollocationStrategy, Grid};
use crate::ekf::EkfConfig;
use crate::error::{Error, Result};
use crate::gan::GanConfig;
use crate::neural::Activation;
use crate::physics::PhysicsModel;
use crate::solvers::SolverConfig;
use crate::training::{LossWeights, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum InitialDensity {
    /// `0.1 + 0.8 exp(-25 (x/L - 0.5)^2)`.
    #[default]
    Bump,
    Constant {
        value: f64,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum InitialSpeed {
    /// The equilibrium speed of the initial density.
    #[default]
    Equilibrium,
    Constant {
        value: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    pub detectors: usize,
    /// Standard deviation of additive Gaussian noise on observed values.
    pub noise_std: f64,
    /// Record speeds as well as densities (ignored without a speed field).
    pub observe_speed: bool,
    /// Fraction of synthetic vehicles used as probes; 0 disables probes.
    pub probe_ratio: f64,
    pub probe_vehicles: usize,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self { detectors: 5, noise_std: 0.0, observe_speed: true, probe_ratio: 0.0, probe_vehicles: 100 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollocationConfig {
    /// Collocation points per grid node; ignored when `count` is set.
    pub rate: f64,
    pub count: Option<usize>,
    pub strategy: CollocationStrategy,
    pub boundary_points: usize,
    pub boundary_placement: BoundaryPlacement,
}

impl Default for CollocationConfig {
    fn default() -> Self {
        Self {
            rate: 0.02,
            count: None,
            strategy: CollocationStrategy::UniformRandom,
            boundary_points: 100,
            boundary_placement: BoundaryPlacement::Even,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub hidden: usize,
    pub depth: usize,
    pub activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { hidden: 20, depth: 8, activation: Activation::Tanh }
    }
}

/// Physics used by the learner when it differs from the data generator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum LearnerPhysics {
    /// The generating model.
    #[default]
    Truth,
    /// A given starting point, for example a perturbed guess to identify.
    Initial { model: PhysicsModel },
    /// A surrogate flux network `[1, hidden x depth, 1]`.
    Surrogate { hidden: usize, depth: usize },
}

/// Gaussian spread of the physics parameters for Mean-GAN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StochasticSpec {
    pub std: Vec<f64>,
    pub n_k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Model that generates the ground truth.
    pub truth: PhysicsModel,
    pub grid: Grid,
    #[serde(default = "yes")]
    pub periodic: bool,
    #[serde(default)]
    pub initial_density: InitialDensity,
    #[serde(default)]
    pub initial_speed: InitialSpeed,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub sensors: SensorConfig,
    #[serde(default)]
    pub collocation: CollocationConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub learner: LearnerPhysics,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub gan: GanConfig,
    #[serde(default)]
    pub stochastic: Option<StochasticSpec>,
    /// Grid for Monte-Carlo predictions; the data grid when absent.
    #[serde(default)]
    pub uq_grid: Option<Grid>,
    #[serde(default)]
    pub ekf: EkfConfig,
    #[serde(default)]
    pub seed: u64,
    /// Where the CLI writes outputs; not part of the hash.
    #[serde(default)]
    pub output_dir: Option<String>,
}

fn yes() -> bool {
    true
}

/// Pipeline stages with their own random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Sensors = 1,
    Collocation = 2,
    Boundary = 3,
    Network = 4,
    Gan = 5,
    Probes = 6,
    Prediction = 7,
    Discriminator = 8,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.truth.validate().map_err(|e| Error::Config(format!("truth: {e}")))?;
        if matches!(self.truth, PhysicsModel::Fdl { .. }) {
            return bad("truth must be lwr3 or arz".into());
        }
        Grid::new(self.grid.road_length, self.grid.horizon, self.grid.nx, self.grid.nt)
            .map_err(|e| Error::Config(format!("grid: {e}")))?;
        if self.sensors.detectors == 0 {
            return bad("sensors.detectors must be positive".into());
        }
        if !(self.sensors.noise_std >= 0.0) || !(0.0..=1.0).contains(&self.sensors.probe_ratio) {
            return bad("sensors: noise_std must be >= 0 and probe_ratio in [0, 1]".into());
        }
        if !(self.collocation.rate >= 0.0) {
            return bad("collocation.rate must be non-negative".into());
        }
        if self.network.hidden == 0 {
            return bad("network.hidden must be positive".into());
        }
        if let LearnerPhysics::Initial { model } = &self.learner {
            model.validate().map_err(|e| Error::Config(format!("learner: {e}")))?;
            if std::mem::discriminant(model) != std::mem::discriminant(&self.truth) {
                return bad("learner model must be of the same kind as the truth".into());
            }
        }
        if let LearnerPhysics::Surrogate { hidden, .. } = self.learner {
            if hidden == 0 || !matches!(self.truth, PhysicsModel::Lwr3(_)) {
                return bad("a surrogate learner needs hidden > 0 and an lwr3 truth".into());
            }
        }
        self.weights.validate()?;
        self.training.validate()?;
        self.gan.validate()?;
        self.ekf.validate()?;
        if let Some(g) = &self.uq_grid {
            Grid::new(g.road_length, g.horizon, g.nx, g.nt).map_err(|e| Error::Config(format!("uq_grid: {e}")))?;
        }
        if let Some(s) = &self.stochastic {
            if s.n_k == 0 || s.std.iter().any(|v| !(*v >= 0.0)) {
                return bad("stochastic: n_k must be positive and std non-negative".into());
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of every field except `output_dir`.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
        }
        let canonical = serde_json::to_string(&v)?;
        Ok(Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Seed of one pipeline stage, derived from the master seed.
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stage as u64)
    }
}
