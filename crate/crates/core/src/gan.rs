//! GAN-based uncertainty quantification: PI-GAN, PID-GAN, Mean-GAN and
//! PI-GAN-FDL.
//!
//! The generator maps `(x, t, z)` to the state; `z` is appended to the
//! coordinates. The discriminator sees `(x, t, state[, feature])`.
//!
//! Sign convention: the discriminator loss is
//! `-E[ln D(x, t, s_gen)] - E[ln(1 - D(x, t, s_obs))]`, so `D` is trained to
//! be high on *generated* samples and low on observed ones. The generator's
//! data term is accordingly `mean D(x, t, s_gen)`, which it minimises. This is
//! the reverse of the usual GAN labelling and is kept on purpose.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{value_and_grad, ParamLayout, Tape, Var};
use crate::domain::{BoundaryCollocationSet, CollocationSet, DomainPoint, Field, Grid, ObservationSet};
use crate::error::{invalid, Error, Result};
use crate::neural::{
    forward_values, mlp_forward_batch, mlp_new, Activation, Init, MlpParams, MlpVars, OutputActivation,
};
use crate::physics::{residual_vars, state_jet, PhysicsModel, PhysicsVars, StateJet};
use crate::training::{adam_update, AdamParams, AdamState, OptimStatus};

/// Clamp applied to discriminator outputs before taking logs.
pub const D_CLAMP: f64 = 1e-7;

/// Default generator widths after the `(x, t, z)` input.
pub const GENERATOR_HIDDEN: [usize; 7] = [20, 40, 60, 80, 60, 40, 20];
/// Default discriminator widths after the input.
pub const DISCRIMINATOR_HIDDEN: [usize; 9] = [20, 20, 40, 60, 80, 60, 40, 20, 20];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GanVariant {
    PiGan,
    PidGan,
    MeanGan,
    PiGanFdl,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub latent_dim: usize,
    pub iterations: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    /// Data weight; the physics weight is `1 - alpha`.
    pub alpha: f64,
    pub gamma: f64,
    pub n_mc: usize,
    pub seed: u64,
    pub variant: GanVariant,
    /// Observations per step; all of them when the set is smaller.
    pub observation_batch: usize,
    pub collocation_batch: usize,
    pub boundary_batch: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            latent_dim: 1,
            iterations: 5000,
            lr_generator: 1e-3,
            lr_discriminator: 1e-3,
            alpha: 0.5,
            gamma: 1.0,
            n_mc: 100,
            seed: 0,
            variant: GanVariant::PiGan,
            observation_batch: 256,
            collocation_batch: 256,
            boundary_batch: 64,
        }
    }
}

impl GanConfig {
    pub fn beta(&self) -> f64 {
        1.0 - self.alpha
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config("gamma must be non-negative".into()));
        }
        if self.latent_dim == 0
            || self.n_mc == 0
            || self.observation_batch == 0
            || self.collocation_batch == 0
            || self.boundary_batch == 0
        {
            return Err(Error::Config("GAN counts must be positive".into()));
        }
        if !(self.lr_generator > 0.0 && self.lr_discriminator > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Independent Gaussians over the entries of [`PhysicsModel::lambda`], with
/// `n_k` draws per residual evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StochasticPhysics {
    pub mean: PhysicsModel,
    pub std: Vec<f64>,
    pub n_k: usize,
}

impl StochasticPhysics {
    pub fn new(mean: PhysicsModel, std: Vec<f64>, n_k: usize) -> Result<Self> {
        let s = Self { mean, std, n_k };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.mean.validate()?;
        if self.std.len() != self.mean.lambda().len() {
            return Err(invalid("one standard deviation per physics parameter is required"));
        }
        if self.std.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(invalid("standard deviations must be non-negative"));
        }
        if self.n_k == 0 {
            return Err(invalid("at least one parameter draw is required"));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<PhysicsModel> {
        let lambda: Vec<f64> = self
            .mean
            .lambda()
            .iter()
            .zip(&self.std)
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.mean.with_lambda(&lambda)
    }
}

/// Physics supplied to [`train_gan`].
#[derive(Clone, Debug, PartialEq)]
pub enum GanPhysics {
    Fixed(PhysicsModel),
    Stochastic(StochasticPhysics),
}

impl GanPhysics {
    fn model(&self) -> &PhysicsModel {
        match self {
            Self::Fixed(m) => m,
            Self::Stochastic(s) => &s.mean,
        }
    }
}

/// Default generator `[2 + latent_dim, 20, 40, 60, 80, 60, 40, 20, outputs]`
/// with relu hidden layers; `x` and `t` are normalised by the domain and `z`
/// passes through unchanged.
pub fn default_generator(grid: &Grid, latent_dim: usize, outputs: usize, seed: u64) -> Result<MlpParams> {
    let mut sizes = vec![2 + latent_dim];
    sizes.extend(GENERATOR_HIDDEN);
    sizes.push(outputs);
    let mut bounds = vec![[0.0, grid.road_length], [0.0, grid.horizon]];
    bounds.extend(std::iter::repeat_n([-1.0, 1.0], latent_dim));
    mlp_new(&sizes, Activation::Relu, OutputActivation::Identity, Init::XavierUniform, seed)?.with_input_bounds(bounds)
}

/// Default discriminator `[inputs, 20, 20, 40, 60, 80, 60, 40, 20, 20, 1]`
/// with relu hidden layers and a sigmoid head.
pub fn default_discriminator(grid: &Grid, inputs: usize, seed: u64) -> Result<MlpParams> {
    let mut sizes = vec![inputs];
    sizes.extend(DISCRIMINATOR_HIDDEN);
    sizes.push(1);
    let mut bounds = vec![[0.0, grid.road_length], [0.0, grid.horizon]];
    bounds.extend(std::iter::repeat_n([-1.0, 1.0], inputs.saturating_sub(2)));
    mlp_new(&sizes, Activation::Relu, OutputActivation::Sigmoid, Init::XavierUniform, seed)?.with_input_bounds(bounds)
}

/// Discriminator input width for the given data and variant.
pub fn discriminator_width(observed_speed: bool, variant: GanVariant) -> usize {
    2 + 1 + usize::from(observed_speed) + usize::from(variant == GanVariant::PidGan)
}

/// `generator_forward(gen, point, z)`: the state at `(x, t)` for latent `z`.
pub fn generator_forward(gen: &MlpParams, point: DomainPoint, z: &[f64]) -> Result<Vec<f64>> {
    let mut input = vec![point.x, point.t];
    input.extend_from_slice(z);
    crate::neural::mlp_forward(gen, &input)
}

/// `exp(-|r|^2)`, the residual feature appended to PID-GAN discriminator
/// inputs.
pub fn pid_feature(residual_sq: f64) -> f64 {
    (-residual_sq).exp()
}

/// Physics term from residual draws `draws[k][i]` (draw `k`, point `i`).
/// With `averaged` the draws are averaged before squaring (Mean-GAN);
/// otherwise each draw's squares are averaged.
pub fn physics_term(draws: &[Vec<f64>], averaged: bool) -> f64 {
    let Some(n) = draws.first().map(Vec::len) else { return 0.0 };
    if n == 0 {
        return 0.0;
    }
    let k = draws.len() as f64;
    if averaged {
        (0..n).map(|i| (draws.iter().map(|d| d[i]).sum::<f64>() / k).powi(2)).sum::<f64>() / n as f64
    } else {
        draws.iter().map(|d| d.iter().map(|r| r * r).sum::<f64>() / n as f64).sum::<f64>() / k
    }
}

/// Adversarial loss terms from discriminator outputs on generated and observed samples.
pub fn discriminator_loss_values(d_fake: &[f64], d_real: &[f64]) -> f64 {
    let clamp = |d: f64| d.clamp(D_CLAMP, 1.0 - D_CLAMP);
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().map(|&d| f(clamp(d))).sum::<f64>() / v.len() as f64
        }
    };
    -mean(d_fake, &|d| d.ln()) - mean(d_real, &|d| (1.0 - d).ln())
}

/// `discriminator_loss(disc, real, fake)` on raw discriminator input rows.
pub fn discriminator_loss(disc: &MlpParams, real: &Array2<f64>, fake: &Array2<f64>) -> Result<f64> {
    let eval = |a: &Array2<f64>| -> Result<Vec<f64>> {
        if a.nrows() == 0 {
            return Ok(Vec::new());
        }
        Ok(mlp_forward_batch(disc, a)?.column(0).to_vec())
    };
    Ok(discriminator_loss_values(&eval(fake)?, &eval(real)?))
}

/// Applies the network's input normalisation to a tape value.
fn normalize_var<'t>(tape: &'t Tape, net: &MlpParams, raw: Var<'t>) -> Var<'t> {
    let Some(bounds) = &net.input_bounds else { return raw };
    let (n, w) = raw.dim();
    let scale = Array2::from_shape_fn((w, w), |(i, j)| if i == j { net.input_scale(i) } else { 0.0 });
    let offset = Array2::from_shape_fn((1, w), |(_, j)| -bounds[j][0] * net.input_scale(j) - 1.0);
    raw.matmul(tape.constant(scale)).add_bias(tape.constant(offset), n)
}

/// Sum over components of squared residuals, one row per point.
fn residual_sq<'t>(r: &[Var<'t>]) -> Var<'t> {
    let mut acc = r[0].square();
    for extra in &r[1..] {
        acc = acc + extra.square();
    }
    acc
}

/// Training batches drawn for one iteration.
struct Batch {
    /// `(x, t)` of the sampled observations.
    obs_xt: Array2<f64>,
    /// Observed state columns (`rho`, then `u` when present).
    obs_state: Array2<f64>,
    /// `(x, t, z)` at the observation points.
    obs_xtz: Array2<f64>,
    colloc_xtz: Array2<f64>,
    /// Rows `0..nb` at `x = 0`, rows `nb..2nb` at `x = L`, same `t` and `z`.
    boundary_xtz: Array2<f64>,
}

/// Sampled indices (with replacement), or all of them when `n <= size`.
fn pick(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Vec<usize> {
    if n <= size {
        (0..n).collect()
    } else {
        (0..size).map(|_| rng.random_range(0..n)).collect()
    }
}

fn with_latent(rng: &mut ChaCha8Rng, xt: &[(f64, f64)], latent: usize) -> Array2<f64> {
    let mut a = Array2::zeros((xt.len(), 2 + latent));
    for (i, &(x, t)) in xt.iter().enumerate() {
        a[[i, 0]] = x;
        a[[i, 1]] = t;
        for k in 0..latent {
            a[[i, 2 + k]] = rng.sample(StandardNormal);
        }
    }
    a
}

struct Data<'a> {
    obs: &'a ObservationSet,
    colloc: &'a CollocationSet,
    boundary: &'a BoundaryCollocationSet,
    road_length: f64,
    use_speed: bool,
}

impl Data<'_> {
    fn state_cols(&self) -> usize {
        1 + usize::from(self.use_speed)
    }

    fn batch(&self, rng: &mut ChaCha8Rng, cfg: &GanConfig) -> Batch {
        let oi = pick(rng, self.obs.len(), cfg.observation_batch);
        let xt: Vec<(f64, f64)> = oi.iter().map(|&i| (self.obs.points[i].x, self.obs.points[i].t)).collect();
        let obs_xt = Array2::from_shape_fn((oi.len(), 2), |(r, c)| if c == 0 { xt[r].0 } else { xt[r].1 });
        let obs_state = Array2::from_shape_fn((oi.len(), self.state_cols()), |(r, c)| match c {
            0 => self.obs.rho[oi[r]],
            _ => self.obs.u.as_ref().expect("speed observed")[oi[r]],
        });
        let obs_xtz = with_latent(rng, &xt, cfg.latent_dim);
        let ci = pick(rng, self.colloc.len(), cfg.collocation_batch);
        let cxt: Vec<(f64, f64)> = ci.iter().map(|&i| (self.colloc.points[i].x, self.colloc.points[i].t)).collect();
        let colloc_xtz = with_latent(rng, &cxt, cfg.latent_dim);
        let bi = pick(rng, self.boundary.len(), cfg.boundary_batch);
        let bxt: Vec<(f64, f64)> = bi.iter().map(|&i| (0.0, self.boundary.times[i])).collect();
        let left = with_latent(rng, &bxt, cfg.latent_dim);
        let mut right = left.clone();
        right.column_mut(0).fill(self.road_length);
        let boundary_xtz = ndarray::concatenate![ndarray::Axis(0), left, right];
        Batch { obs_xt, obs_state, obs_xtz, colloc_xtz, boundary_xtz }
    }
}

/// Discriminator input rows for generated samples at the observation batch,
/// as a tape value that depends on `gvars` (and `physics` for PID-GAN).
fn fake_input<'t>(
    tape: &'t Tape,
    gen: &MlpParams,
    gvars: &MlpVars<'t>,
    physics: Option<&PhysicsVars<'t>>,
    model: &PhysicsModel,
    data: &Data<'_>,
    batch: &Batch,
) -> Result<Var<'t>> {
    let n = batch.obs_xtz.nrows();
    let xt = tape.constant(batch.obs_xt.clone());
    let k = data.state_cols();
    let mut parts = vec![xt];
    match physics {
        Some(p) => {
            let s = state_jet(tape, gen, gvars, None, &batch.obs_xtz, model.needs_second_derivative());
            parts.push(s.rho);
            if k == 2 {
                parts.push(s.u.ok_or_else(|| invalid("generator has no speed output"))?);
            }
            let r = residual_vars(tape, p, &s)?;
            parts.push((-residual_sq(&r)).exp());
        }
        None => {
            let input = crate::neural::value_input(tape, gen, &batch.obs_xtz);
            let out = forward_values(gen, gvars, input);
            parts.push(out.slice(0..n, 0..k));
        }
    }
    Ok(Var::hconcat(&parts))
}

fn real_input(batch: &Batch, pid: bool) -> Array2<f64> {
    let n = batch.obs_xt.nrows();
    let mut cols = vec![batch.obs_xt.view(), batch.obs_state.view()];
    let ones = Array2::ones((n, 1));
    if pid {
        cols.push(ones.view());
    }
    ndarray::concatenate(ndarray::Axis(1), &cols).expect("same rows")
}

/// Per-iteration losses and the final status.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanTrace {
    pub generator: Vec<f64>,
    pub discriminator: Vec<f64>,
    pub status: Option<OptimStatus>,
}

#[derive(Clone, Debug)]
pub struct GanOutcome {
    pub generator: MlpParams,
    pub discriminator: MlpParams,
    /// The learned surrogate for PI-GAN-FDL, the input physics otherwise.
    pub physics: PhysicsModel,
    pub trace: GanTrace,
}

fn check_setup(
    gen: &MlpParams,
    disc: &MlpParams,
    physics: &GanPhysics,
    data: &Data<'_>,
    cfg: &GanConfig,
) -> Result<()> {
    cfg.validate()?;
    gen.validate()?;
    disc.validate()?;
    let model = physics.model();
    model.validate()?;
    if let GanPhysics::Stochastic(s) = physics {
        s.validate()?;
    }
    match (cfg.variant, physics, model) {
        (GanVariant::MeanGan, GanPhysics::Stochastic(_), _) => {}
        (GanVariant::MeanGan, _, _) => return Err(invalid("mean-gan needs stochastic physics")),
        (_, GanPhysics::Stochastic(_), _) => return Err(invalid("stochastic physics is only used by mean-gan")),
        (GanVariant::PiGanFdl, _, PhysicsModel::Fdl { .. }) => {}
        (GanVariant::PiGanFdl, _, _) => return Err(invalid("pi-gan-fdl needs a surrogate flux")),
        (_, _, PhysicsModel::Fdl { .. }) => return Err(invalid("a surrogate flux needs the pi-gan-fdl variant")),
        _ => {}
    }
    if gen.input_width() != 2 + cfg.latent_dim {
        return Err(invalid(format!("generator input must be 2 + latent_dim = {}", 2 + cfg.latent_dim)));
    }
    if gen.output_width() < model.state_width() || gen.output_width() < data.state_cols() {
        return Err(invalid("generator has too few state outputs"));
    }
    let want = discriminator_width(data.use_speed, cfg.variant);
    if disc.input_width() != want {
        return Err(invalid(format!("discriminator input width must be {want}, got {}", disc.input_width())));
    }
    if disc.output_activation != OutputActivation::Sigmoid || disc.output_width() != 1 {
        return Err(invalid("discriminator needs a single sigmoid output"));
    }
    Ok(())
}

/// `train_gan(gen0, disc0, physics, O, C, C_B, config)`: per iteration one
/// Adam step on the generator, then one on the discriminator.
pub fn train_gan(
    gen0: &MlpParams,
    disc0: &MlpParams,
    physics: &GanPhysics,
    obs: &ObservationSet,
    colloc: &CollocationSet,
    boundary: &BoundaryCollocationSet,
    road_length: f64,
    cfg: &GanConfig,
) -> Result<GanOutcome> {
    let data = Data { obs, colloc, boundary, road_length, use_speed: obs.u.is_some() && gen0.output_width() >= 2 };
    check_setup(gen0, disc0, physics, &data, cfg)?;
    let model = physics.model().clone();
    let fdl = cfg.variant == GanVariant::PiGanFdl;
    let pid = cfg.variant == GanVariant::PidGan;
    let (alpha, beta, gamma) = (cfg.alpha, cfg.beta(), cfg.gamma);
    let n_gen = gen0.param_shapes().len();

    let mut g_layout = ParamLayout::new(gen0.param_shapes());
    let mut gx = gen0.flatten();
    if fdl {
        g_layout.extend(model.lambda_shapes());
        gx.extend(model.lambda());
    }
    let d_layout = ParamLayout::new(disc0.param_shapes());
    let mut dx = disc0.flatten();
    let n_theta = gen0.n_params();

    let g_adam = AdamParams { lr: cfg.lr_generator, ..Default::default() };
    let d_adam = AdamParams { lr: cfg.lr_discriminator, ..Default::default() };
    let (mut g_state, mut d_state) = (AdamState::new(gx.len()), AdamState::new(dx.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = GanTrace::default();

    for _ in 0..cfg.iterations {
        // Generator step.
        let batch = data.batch(&mut rng, cfg);
        let draws: Vec<PhysicsModel> = match physics {
            GanPhysics::Stochastic(s) => (0..s.n_k).map(|_| s.sample(&mut rng)).collect::<Result<_>>()?,
            GanPhysics::Fixed(_) => Vec::new(),
        };
        let disc = disc0.with_flat(&dx)?;
        let step = value_and_grad(&g_layout, &gx, |tape, leaves| {
            let gvars = MlpVars { layers: leaves[..n_gen].chunks(2).map(|c| (c[0], c[1])).collect() };
            let pvars = if fdl {
                PhysicsVars::from_leaves(&model, &leaves[n_gen..])
            } else {
                PhysicsVars::constants(tape, &model)
            };
            let dvars = MlpVars::constants(tape, &disc);
            let mut total = tape.scalar(0.0);
            if alpha > 0.0 && batch.obs_xt.nrows() > 0 {
                let fake = fake_input(tape, gen0, &gvars, pid.then_some(&pvars), &model, &data, &batch)?;
                let d = forward_values(&disc, &dvars, normalize_var(tape, &disc, fake));
                total = total + d.mean() * alpha;
            }
            if beta > 0.0 && !pid && batch.colloc_xtz.nrows() > 0 {
                let s: StateJet<'_> =
                    state_jet(tape, gen0, &gvars, None, &batch.colloc_xtz, model.needs_second_derivative());
                let lc = if draws.is_empty() {
                    residual_sq(&residual_vars(tape, &pvars, &s)?).mean()
                } else {
                    let mut sums: Option<Vec<Var<'_>>> = None;
                    for m in &draws {
                        let r = residual_vars(tape, &PhysicsVars::constants(tape, m), &s)?;
                        sums = Some(match sums {
                            None => r,
                            Some(acc) => acc.into_iter().zip(r).map(|(a, b)| a + b).collect(),
                        });
                    }
                    let k = draws.len() as f64;
                    let means: Vec<Var<'_>> = sums.expect("n_k >= 1").into_iter().map(|v| v.scale(1.0 / k)).collect();
                    residual_sq(&means).mean()
                };
                total = total + lc * beta;
            }
            if gamma > 0.0 && batch.boundary_xtz.nrows() > 0 {
                let nb = batch.boundary_xtz.nrows() / 2;
                let width = model.state_width();
                let out = forward_values(gen0, &gvars, crate::neural::value_input(tape, gen0, &batch.boundary_xtz));
                let diff = out.slice(0..nb, 0..width) - out.slice(nb..2 * nb, 0..width);
                total = total + diff.square().sum().scale(gamma / nb as f64);
            }
            Ok((total, ()))
        });
        let g_loss = match step {
            Ok((v, g, ())) => {
                adam_update(&mut gx, &g, &mut g_state, &g_adam);
                v
            }
            Err(e @ Error::NumericOverflow { .. }) => {
                trace.status = Some(OptimStatus::Aborted(format!("generator: {e}")));
                break;
            }
            Err(e) => return Err(e),
        };
        trace.generator.push(g_loss);

        // Discriminator step with the updated generator.
        let batch = data.batch(&mut rng, cfg);
        let gen = gen0.with_flat(&gx[..n_theta])?;
        let model_now = if fdl { model.with_lambda(&gx[n_theta..])? } else { model.clone() };
        let real = real_input(&batch, pid);
        let step = value_and_grad(&d_layout, &dx, |tape, leaves| {
            if batch.obs_xt.nrows() == 0 {
                return Ok((tape.scalar(0.0), ()));
            }
            let gvars = MlpVars::constants(tape, &gen);
            let pvars = PhysicsVars::constants(tape, &model_now);
            let fake = fake_input(tape, &gen, &gvars, pid.then_some(&pvars), &model_now, &data, &batch)?;
            let dvars = MlpVars { layers: leaves.chunks(2).map(|c| (c[0], c[1])).collect() };
            let d_fake = forward_values(disc0, &dvars, normalize_var(tape, disc0, fake)).clamp(D_CLAMP, 1.0 - D_CLAMP);
            let d_real = forward_values(disc0, &dvars, crate::neural::value_input(tape, disc0, &real))
                .clamp(D_CLAMP, 1.0 - D_CLAMP);
            let loss = -(d_fake.ln().mean()) - (1.0 - d_real).ln().mean();
            Ok((loss, ()))
        });
        match step {
            Ok((v, g, ())) => {
                adam_update(&mut dx, &g, &mut d_state, &d_adam);
                trace.discriminator.push(v);
            }
            Err(e @ Error::NumericOverflow { .. }) => {
                trace.status = Some(OptimStatus::Aborted(format!("discriminator: {e}")));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if trace.status.is_none() {
        trace.status = Some(OptimStatus::MaxIterations);
    }
    let generator = gen0.with_flat(&gx[..n_theta])?;
    let physics = if fdl { model.with_lambda(&gx[n_theta..])? } else { model };
    Ok(GanOutcome { generator, discriminator: disc0.with_flat(&dx)?, physics, trace })
}

/// Monte-Carlo state draws on every node of a grid.
///
/// `rho` (and `u`) hold one row per grid node in [`Grid::points`] order and
/// one column per draw.
#[derive(Clone, Debug, PartialEq)]
pub struct UqSampleSet {
    pub grid: Grid,
    pub points: Vec<DomainPoint>,
    pub rho: Array2<f64>,
    pub u: Option<Array2<f64>>,
}

fn row_stat(a: &Array2<f64>, f: impl Fn(ndarray::ArrayView1<'_, f64>) -> f64) -> Array1<f64> {
    a.rows().into_iter().map(f).collect()
}

fn mean_of(r: ndarray::ArrayView1<'_, f64>) -> f64 {
    r.sum() / r.len() as f64
}

fn std_of(r: ndarray::ArrayView1<'_, f64>) -> f64 {
    if r.len() < 2 {
        return 0.0;
    }
    let m = mean_of(r);
    (r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (r.len() - 1) as f64).sqrt()
}

impl UqSampleSet {
    pub fn new(grid: Grid, rho: Array2<f64>, u: Option<Array2<f64>>) -> Result<Self> {
        let points = grid.points();
        if rho.nrows() != points.len() || rho.ncols() == 0 {
            return Err(invalid(format!("need {} rows of draws, got {}", points.len(), rho.nrows())));
        }
        if u.as_ref().is_some_and(|u| u.dim() != rho.dim()) {
            return Err(invalid("speed draws must match density draws"));
        }
        Ok(Self { grid, points, rho, u })
    }

    pub fn n_mc(&self) -> usize {
        self.rho.ncols()
    }

    fn field(&self, v: Array1<f64>) -> Result<Field> {
        let values = v.into_shape_with_order((self.grid.nx, self.grid.nt)).map_err(|e| invalid(e.to_string()))?;
        Field::new(self.grid, values)
    }

    pub fn mean_rho(&self) -> Result<Field> {
        self.field(row_stat(&self.rho, mean_of))
    }

    pub fn std_rho(&self) -> Result<Field> {
        self.field(row_stat(&self.rho, std_of))
    }

    pub fn mean_u(&self) -> Result<Option<Field>> {
        self.u.as_ref().map(|u| self.field(row_stat(u, mean_of))).transpose()
    }

    pub fn std_u(&self) -> Result<Option<Field>> {
        self.u.as_ref().map(|u| self.field(row_stat(u, std_of))).transpose()
    }

    /// `field` evaluated at this set's grid nodes (bilinear in cell centres).
    pub fn restrict(&self, field: &Field) -> Result<Field> {
        if field.grid() == &self.grid {
            return Ok(field.clone());
        }
        let (g, o) = (field.grid(), &self.grid);
        if (g.road_length - o.road_length).abs() > 1e-12 * g.road_length
            || (g.horizon - o.horizon).abs() > 1e-12 * g.horizon
        {
            return Err(invalid("fields cover different domains"));
        }
        Field::from_fn(self.grid, |x, t| field.sample(x, t))
    }

    /// CSV with header `x,t,mean_rho,std_rho,mean_u,std_u`; speed columns are
    /// empty without speed draws.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["x", "t", "mean_rho", "std_rho", "mean_u", "std_u"])?;
        let (mr, sr) = (row_stat(&self.rho, mean_of), row_stat(&self.rho, std_of));
        let u = self.u.as_ref().map(|u| (row_stat(u, mean_of), row_stat(u, std_of)));
        for (k, p) in self.points.iter().enumerate() {
            let (mu, su) = match &u {
                Some((m, s)) => (m[k].to_string(), s[k].to_string()),
                None => (String::new(), String::new()),
            };
            w.write_record([p.x.to_string(), p.t.to_string(), mr[k].to_string(), sr[k].to_string(), mu, su])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Reads the summary columns back as `(x, t, mean_rho, std_rho, mean_u?, std_u?)`.
    pub fn read_summary<R: Read>(reader: R) -> Result<Vec<[Option<f64>; 6]>> {
        let mut r = csv::Reader::from_reader(reader);
        let mut out = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let mut row = [None; 6];
            for (k, cell) in rec.iter().enumerate().take(6) {
                if !cell.is_empty() {
                    row[k] = Some(cell.parse().map_err(|e| Error::Parse { line: line + 2, message: format!("{e}") })?);
                }
            }
            out.push(row);
        }
        Ok(out)
    }
}

/// `predict_distribution(gen, grid, n_mc, seed)`: `n_mc` latent draws at each
/// grid node. Node `k` uses stream `k` of the seeded generator, so results do
/// not depend on evaluation order.
pub fn predict_distribution(gen: &MlpParams, grid: &Grid, n_mc: usize, seed: u64) -> Result<UqSampleSet> {
    if n_mc < 2 {
        return Err(invalid("at least two draws per point are required"));
    }
    let latent =
        gen.input_width().checked_sub(2).filter(|&l| l > 0).ok_or_else(|| invalid("generator has no latent input"))?;
    let points = grid.points();
    let mut rho = Array2::zeros((points.len(), n_mc));
    let mut u = (gen.output_width() >= 2).then(|| Array2::zeros((points.len(), n_mc)));
    const CHUNK: usize = 64;
    for start in (0..points.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(points.len());
        let mut input = Array2::zeros(((end - start) * n_mc, 2 + latent));
        for (k, p) in points.iter().enumerate().take(end).skip(start) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            for j in 0..n_mc {
                let r = (k - start) * n_mc + j;
                input[[r, 0]] = p.x;
                input[[r, 1]] = p.t;
                for l in 0..latent {
                    input[[r, 2 + l]] = rng.sample(StandardNormal);
                }
            }
        }
        let out = mlp_forward_batch(gen, &input)?;
        for k in start..end {
            for j in 0..n_mc {
                let r = (k - start) * n_mc + j;
                rho[[k, j]] = out[[r, 0]];
                if let Some(u) = u.as_mut() {
                    u[[k, j]] = out[[r, 1]];
                }
            }
        }
    }
    UqSampleSet::new(*grid, rho, u)
}
