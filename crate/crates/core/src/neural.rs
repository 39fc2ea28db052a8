//! Feedforward multilayer perceptrons: the density/speed approximator, the
//! fundamental-diagram learner, and the GAN generator and discriminator.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{JetLayout, Tape, Var};
use crate::error::{invalid, Result};

/// Negative-side slope of [`Activation::LeakyRelu`].
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
    LeakyRelu,
}

/// tanh via exp away from zero; libm tanh near zero where 1 - 2/(e^2z + 1) cancels.
pub fn tanh(z: f64) -> f64 {
    let a = z.abs();
    if a < 0.5 {
        z.tanh()
    } else {
        (1.0 - 2.0 / ((2.0 * a).exp() + 1.0)).copysign(z)
    }
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => tanh(z),
            Activation::Relu => {
                if z >= 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if z >= 0.0 {
                    z
                } else {
                    LEAKY_SLOPE * z
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputActivation {
    #[default]
    Identity,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    XavierUniform,
    Zeros,
}

/// Weights and biases of a dense network.
///
/// Layer `l` maps width `layer_sizes[l]` to `layer_sizes[l + 1]` as
/// `y = x W + b`, with `W` stored row-major as `fan_in x fan_out`. Hidden
/// layers use `activation`; the last layer uses `output_activation`.
/// `input_bounds`, when present, affinely maps each input interval onto
/// `[-1, 1]` before the first layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpParams {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub output_activation: OutputActivation,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_bounds: Option<Vec<[f64; 2]>>,
}

/// `mlp_new`: Xavier-uniform weights (bound `sqrt(6 / (fan_in + fan_out))`),
/// zero biases.
pub fn mlp_new(
    layer_sizes: &[usize],
    activation: Activation,
    output_activation: OutputActivation,
    init: Init,
    seed: u64,
) -> Result<MlpParams> {
    if layer_sizes.len() < 2 {
        return Err(invalid("a network needs at least an input and an output layer"));
    }
    if layer_sizes.contains(&0) {
        return Err(invalid(format!("layer widths must be positive: {layer_sizes:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for w in layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let layer = match init {
            Init::XavierUniform => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::Zeros => vec![0.0; fan_in * fan_out],
        };
        weights.push(layer);
        biases.push(vec![0.0; fan_out]);
    }
    Ok(MlpParams {
        layer_sizes: layer_sizes.to_vec(),
        activation,
        output_activation,
        weights,
        biases,
        input_bounds: None,
    })
}

/// Layer widths `[input, hidden x depth, output]`.
pub fn uniform_layers(input: usize, hidden: usize, depth: usize, output: usize) -> Vec<usize> {
    let mut v = vec![input];
    v.extend(std::iter::repeat_n(hidden, depth));
    v.push(output);
    v
}

impl MlpParams {
    pub fn with_input_bounds(mut self, bounds: Vec<[f64; 2]>) -> Result<Self> {
        if bounds.len() != self.input_width() {
            return Err(invalid("one bound pair per input is required"));
        }
        if bounds.iter().any(|b| !(b[1] > b[0])) {
            return Err(invalid("input bounds must satisfy lo < hi"));
        }
        self.input_bounds = Some(bounds);
        Ok(self)
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_sizes.last().expect("non-empty")
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(invalid("invalid layer sizes"));
        }
        if self.weights.len() != self.n_layers() || self.biases.len() != self.n_layers() {
            return Err(invalid("layer count mismatch"));
        }
        for (l, w) in self.layer_sizes.windows(2).enumerate() {
            if self.weights[l].len() != w[0] * w[1] || self.biases[l].len() != w[1] {
                return Err(invalid(format!("layer {l} has inconsistent dimensions")));
            }
        }
        if self.weights.iter().chain(&self.biases).flatten().any(|v| !v.is_finite()) {
            return Err(invalid("parameters must be finite"));
        }
        if let Some(b) = &self.input_bounds {
            if b.len() != self.input_width() {
                return Err(invalid("input bounds length mismatch"));
            }
        }
        Ok(())
    }

    pub fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.layer_sizes[l], self.layer_sizes[l + 1]), &self.weights[l])
            .expect("validated shape")
    }

    pub fn bias(&self, l: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((1, self.layer_sizes[l + 1]), &self.biases[l]).expect("validated shape")
    }

    /// Parameters flattened layer by layer as `[W_0, b_0, W_1, b_1, ...]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in 0..self.n_layers() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(invalid(format!("expected {} parameters, got {}", self.n_params(), flat.len())));
        }
        let mut k = 0;
        for l in 0..self.n_layers() {
            let nw = self.weights[l].len();
            self.weights[l].copy_from_slice(&flat[k..k + nw]);
            k += nw;
            let nb = self.biases[l].len();
            self.biases[l].copy_from_slice(&flat[k..k + nb]);
            k += nb;
        }
        Ok(())
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.set_flat(flat)?;
        Ok(out)
    }

    /// Shapes of the flattened parameter tensors, in [`MlpParams::flatten`] order.
    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.layer_sizes.windows(2).flat_map(|w| [(w[0], w[1]), (1, w[1])]).collect()
    }

    fn normalize_inputs(&self, inputs: &Array2<f64>) -> Array2<f64> {
        let mut a = inputs.clone();
        if let Some(bounds) = &self.input_bounds {
            for (j, b) in bounds.iter().enumerate() {
                let scale = 2.0 / (b[1] - b[0]);
                a.column_mut(j).mapv_inplace(|v| (v - b[0]) * scale - 1.0);
            }
        }
        a
    }

    /// Derivative of normalised input `j` with respect to the raw input.
    pub fn input_scale(&self, j: usize) -> f64 {
        match &self.input_bounds {
            Some(b) => 2.0 / (b[j][1] - b[j][0]),
            None => 1.0,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Plain forward pass of a batch (`n x input_width`).
pub fn mlp_forward_batch(params: &MlpParams, inputs: &Array2<f64>) -> Result<Array2<f64>> {
    if inputs.ncols() != params.input_width() {
        return Err(invalid(format!(
            "input width {} does not match network input {}",
            inputs.ncols(),
            params.input_width()
        )));
    }
    let mut a = params.normalize_inputs(inputs);
    let last = params.n_layers() - 1;
    for l in 0..=last {
        let mut z = a.dot(&params.weight(l));
        z += &params.bias(l);
        if l < last {
            z.mapv_inplace(|v| params.activation.apply(v));
        } else if params.output_activation == OutputActivation::Sigmoid {
            z.mapv_inplace(crate::autodiff::sigmoid);
        }
        a = z;
    }
    Ok(a)
}

/// `mlp_forward` on a single input vector.
pub fn mlp_forward(params: &MlpParams, input: &[f64]) -> Result<Vec<f64>> {
    let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).map_err(|e| invalid(e.to_string()))?;
    Ok(mlp_forward_batch(params, &x)?.into_raw_vec_and_offset().0)
}

/// Network parameters placed on a tape.
#[derive(Clone)]
pub struct MlpVars<'t> {
    pub layers: Vec<(Var<'t>, Var<'t>)>,
}

impl<'t> MlpVars<'t> {
    /// Parameters as differentiable leaves.
    pub fn params(tape: &'t Tape, net: &MlpParams) -> Self {
        Self::place(tape, net, true)
    }

    /// Parameters as constants.
    pub fn constants(tape: &'t Tape, net: &MlpParams) -> Self {
        Self::place(tape, net, false)
    }

    fn place(tape: &'t Tape, net: &MlpParams, grad: bool) -> Self {
        let layers = (0..net.n_layers())
            .map(|l| {
                let (w, b) = (net.weight(l).to_owned(), net.bias(l).to_owned());
                if grad {
                    (tape.param(w), tape.param(b))
                } else {
                    (tape.constant(w), tape.constant(b))
                }
            })
            .collect();
        Self { layers }
    }

    /// Leaves in [`MlpParams::flatten`] order.
    pub fn leaves(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Builds the stacked jet input for raw coordinates `inputs` (`n x width`),
/// seeding direction `d` on input column `seed_cols[d]`. The value block is
/// normalised with the network's input bounds; derivative blocks carry the
/// normalisation scale.
pub fn jet_input<'t>(
    tape: &'t Tape,
    net: &MlpParams,
    inputs: &Array2<f64>,
    seed_cols: &[usize],
    second: bool,
) -> (Var<'t>, JetLayout) {
    let n = inputs.nrows();
    let width = inputs.ncols();
    let layout = JetLayout { n, dirs: seed_cols.len(), second };
    let mut stacked = Array2::zeros((layout.rows(), width));
    stacked.slice_mut(ndarray::s![0..n, ..]).assign(&net.normalize_inputs(inputs));
    for (d, &c) in seed_cols.iter().enumerate() {
        let r = layout.dir_rows(d);
        stacked.slice_mut(ndarray::s![r, c..c + 1]).fill(net.input_scale(c));
    }
    (tape.constant(stacked), layout)
}

/// Forward pass of a stacked jet batch; returns `(channels * n) x output_width`.
/// The output activation must be the identity unless only values are tracked.
pub fn forward_jet<'t>(net: &MlpParams, vars: &MlpVars<'t>, input: Var<'t>, layout: JetLayout) -> Var<'t> {
    let last = vars.layers.len() - 1;
    let mut a = input;
    for (l, &(w, b)) in vars.layers.iter().enumerate() {
        let z = a.matmul(w).add_bias(b, layout.n);
        a = if l < last {
            z.jet_activation(layout, net.activation)
        } else {
            match net.output_activation {
                OutputActivation::Identity => z,
                OutputActivation::Sigmoid => {
                    assert_eq!(layout.channels(), 1, "sigmoid output supports values only");
                    z.sigmoid()
                }
            }
        };
    }
    a
}

/// Value-only forward pass on the tape (`n x output_width`).
pub fn forward_values<'t>(net: &MlpParams, vars: &MlpVars<'t>, inputs: Var<'t>) -> Var<'t> {
    let n = inputs.dim().0;
    forward_jet(net, vars, inputs, JetLayout::value_only(n))
}

/// Normalised raw inputs as a tape constant, for [`forward_values`].
pub fn value_input<'t>(tape: &'t Tape, net: &MlpParams, inputs: &Array2<f64>) -> Var<'t> {
    tape.constant(net.normalize_inputs(inputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn tanh_matches_libm() {
        for i in -4000..=4000 {
            let z = i as f64 * 0.005 + 1e-4;
            let (a, b) = (tanh(z), z.tanh());
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.abs().max(1e-300), "{z}");
        }
        assert_eq!(tanh(800.0), 1.0);
        assert_eq!(tanh(-800.0), -1.0);
        assert!(tanh(f64::NAN).is_nan());
    }

    #[test]
    fn punn_parameter_count() {
        let layers = uniform_layers(2, 20, 8, 1);
        assert_eq!(layers, vec![2, 20, 20, 20, 20, 20, 20, 20, 20, 1]);
        let net = mlp_new(&layers, Activation::Tanh, OutputActivation::Identity, Init::XavierUniform, 0).unwrap();
        // 2*20+20 + 7*(20*20+20) + 20+1, counted independently
        let independent: usize =
            [(2, 20), (20, 20), (20, 20), (20, 20), (20, 20), (20, 20), (20, 20), (20, 20), (20, 1)]
                .iter()
                .map(|(i, o)| i * o + o)
                .sum();
        assert_eq!(independent, 3_021);
        assert_eq!(net.n_params(), 3_021);
        assert_eq!(net.flatten().len(), 3_021);
    }

    #[test]
    fn generator_architecture() {
        let net = mlp_new(
            &[3, 20, 40, 60, 80, 60, 40, 20, 2],
            Activation::Relu,
            OutputActivation::Identity,
            Init::XavierUniform,
            1,
        )
        .unwrap();
        assert_eq!(net.output_width(), 2);
        assert_eq!(mlp_forward(&net, &[0.1, 0.2, 0.3]).unwrap().len(), 2);
    }

    #[test]
    fn xavier_bounds_and_zero_bias() {
        let net = mlp_new(&[4, 6], Activation::Tanh, OutputActivation::Identity, Init::XavierUniform, 5).unwrap();
        let bound = (6.0f64 / 10.0).sqrt();
        assert!(net.weights[0].iter().all(|w| w.abs() <= bound));
        assert!(net.biases[0].iter().all(|&b| b == 0.0));
        let again = mlp_new(&[4, 6], Activation::Tanh, OutputActivation::Identity, Init::XavierUniform, 5).unwrap();
        assert_eq!(net, again);
    }

    #[test]
    fn invalid_widths_rejected() {
        assert!(mlp_new(&[3], Activation::Tanh, OutputActivation::Identity, Init::Zeros, 0).is_err());
        assert!(mlp_new(&[3, 0, 1], Activation::Tanh, OutputActivation::Identity, Init::Zeros, 0).is_err());
        let net = mlp_new(&[2, 1], Activation::Tanh, OutputActivation::Identity, Init::Zeros, 0).unwrap();
        assert!(mlp_forward(&net, &[1.0]).is_err());
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = mlp_new(&[2, 5, 5, 1], Activation::Tanh, OutputActivation::Identity, Init::Zeros, 0).unwrap();
        assert_eq!(mlp_forward(&net, &[0.3, -2.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn single_affine_layer() {
        let mut net = mlp_new(&[1, 1], Activation::Tanh, OutputActivation::Identity, Init::Zeros, 0).unwrap();
        net.set_flat(&[2.5, -0.75]).unwrap();
        assert_eq!(mlp_forward(&net, &[3.0]).unwrap(), vec![2.5 * 3.0 - 0.75]);
    }

    #[test]
    fn golden_output() {
        // Recorded from the first verified run; guards the init stream and forward order.
        let net = mlp_new(&[2, 3, 1], Activation::Tanh, OutputActivation::Identity, Init::XavierUniform, 42).unwrap();
        let y = mlp_forward(&net, &[0.25, -0.5]).unwrap()[0];
        assert_eq!(y.to_bits(), GOLDEN_BITS, "got {y:e}");
    }
    const GOLDEN_BITS: u64 = 4603306043160360667;

    #[test]
    fn odd_symmetry_without_biases() {
        let net = mlp_new(&[1, 7, 7, 1], Activation::Tanh, OutputActivation::Identity, Init::XavierUniform, 9).unwrap();
        for x in [0.1, 0.7, 2.3] {
            let a = mlp_forward(&net, &[x]).unwrap()[0];
            let b = mlp_forward(&net, &[-x]).unwrap()[0];
            assert!((a + b).abs() < 1e-15);
        }
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let net = mlp_new(&[2, 3, 1], Activation::Relu, OutputActivation::Sigmoid, Init::XavierUniform, 3)
            .unwrap()
            .with_input_bounds(vec![[0.0, 1.0], [0.0, 3.0]])
            .unwrap();
        let back = MlpParams::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(back, net);
        let bad = r#"{"layer_sizes":[1,1],"activation":"tanh","weights":[[1.0]],"biases":[[0.0]],"extra":1}"#;
        assert!(MlpParams::from_json(bad).is_err());
    }

    #[test]
    fn tape_values_match_plain_forward() {
        let net = mlp_new(
            &uniform_layers(2, 20, 8, 1),
            Activation::Tanh,
            OutputActivation::Identity,
            Init::XavierUniform,
            11,
        )
        .unwrap()
        .with_input_bounds(vec![[0.0, 1.0], [0.0, 3.0]])
        .unwrap();
        let pts = array![[0.1, 0.2], [0.5, 2.9], [0.99, 1.3]];
        let plain = mlp_forward_batch(&net, &pts).unwrap();
        let tape = Tape::new();
        let vars = MlpVars::constants(&tape, &net);
        let (inp, layout) = jet_input(&tape, &net, &pts, &[0, 1], true);
        let out = forward_jet(&net, &vars, inp, layout);
        let values = out.rows(layout.value_rows());
        assert_eq!(*values.value(), plain);
    }
}
