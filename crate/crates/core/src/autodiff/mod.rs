//! Differentiation engine.
//!
//! Input derivatives (`d/dx`, `d/dt`, `d^2/dx^2`) are carried forward through
//! the network as stacked jets; parameter gradients come from a reverse sweep
//! over a tape whose nodes include those jet channels, so losses built from
//! `rho_xx` can be differentiated with respect to the weights without
//! replaying a tape on a tape.

mod tape;

pub(crate) use tape::sigmoid;
pub use tape::{Gradients, JetLayout, Tape, Var};

use ndarray::Array2;

use crate::domain::DomainPoint;
use crate::error::{invalid, Error, Result};
use crate::neural::{forward_jet, jet_input, MlpParams, MlpVars};

/// Shapes of the tensors a flat parameter vector is cut into.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamLayout {
    shapes: Vec<(usize, usize)>,
}

impl ParamLayout {
    pub fn new(shapes: Vec<(usize, usize)>) -> Self {
        Self { shapes }
    }

    pub fn push(&mut self, shape: (usize, usize)) {
        self.shapes.push(shape);
    }

    pub fn extend(&mut self, shapes: impl IntoIterator<Item = (usize, usize)>) {
        self.shapes.extend(shapes);
    }

    pub fn len(&self) -> usize {
        self.shapes.iter().map(|(r, c)| r * c).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    fn split(&self, flat: &[f64]) -> Vec<Array2<f64>> {
        let mut k = 0;
        self.shapes
            .iter()
            .map(|&(r, c)| {
                let a = Array2::from_shape_vec((r, c), flat[k..k + r * c].to_vec()).expect("layout shape");
                k += r * c;
                a
            })
            .collect()
    }
}

/// Records `build` on a fresh tape with the flat parameters as leaves and
/// returns the loss value, its gradient (same length as `flat`), and any
/// auxiliary output of the builder.
pub fn value_and_grad<A, F>(layout: &ParamLayout, flat: &[f64], build: F) -> Result<(f64, Vec<f64>, A)>
where
    F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Result<(Var<'t>, A)>,
{
    if flat.len() != layout.len() {
        return Err(invalid(format!("parameter vector has length {}, layout expects {}", flat.len(), layout.len())));
    }
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = layout.split(flat).into_iter().map(|a| tape.param(a)).collect();
    let (loss, aux) = build(&tape, &leaves)?;
    let value = loss.scalar();
    if !value.is_finite() {
        let (node, op) = tape.first_non_finite().unwrap_or((loss.id(), "loss"));
        return Err(Error::NumericOverflow { node, op });
    }
    let grads = tape.backward(loss);
    let mut g = Vec::with_capacity(flat.len());
    for leaf in &leaves {
        g.extend(grads.wrt(*leaf).iter().copied());
    }
    Ok((value, g, aux))
}

/// Gradient of a scalar loss built from the flat parameter vector.
pub fn grad_params<F>(layout: &ParamLayout, flat: &[f64], build: F) -> Result<Vec<f64>>
where
    F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    value_and_grad(layout, flat, |t, v| build(t, v).map(|l| (l, ()))).map(|(_, g, _)| g)
}

/// Worst coordinate-wise relative error between the analytic gradient and
/// central differences with step `h`; the denominator is
/// `max(|analytic|, |numeric|, 1e-8)`. Zero parameters give zero.
pub fn check_gradient<F>(mut f: F, params: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(h > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    if params.is_empty() {
        return Ok(0.0);
    }
    let (_, analytic) = f(params)?;
    let mut x = params.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..params.len() {
        x[k] = params[k] + h;
        let up = f(&x)?.0;
        x[k] = params[k] - h;
        let down = f(&x)?.0;
        x[k] = params[k];
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[k].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[k] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Network output and its input derivatives at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffResult {
    pub value: f64,
    pub d_dx: f64,
    pub d_dt: f64,
    pub d2_dx2: f64,
}

/// Output and input derivatives of a network with inputs `(x, t)`, one
/// [`DiffResult`] per output column, for each point.
pub fn eval_input_derivs_batch(net: &MlpParams, points: &[DomainPoint]) -> Result<Vec<Vec<DiffResult>>> {
    if net.input_width() != 2 {
        return Err(invalid("input derivatives need a network with inputs (x, t)"));
    }
    let inputs = Array2::from_shape_fn((points.len(), 2), |(i, j)| if j == 0 { points[i].x } else { points[i].t });
    let tape = Tape::new();
    let vars = MlpVars::constants(&tape, net);
    let (inp, layout) = jet_input(&tape, net, &inputs, &[0, 1], true);
    let out = forward_jet(net, &vars, inp, layout);
    if let Some((node, op)) = tape.first_non_finite() {
        return Err(Error::NumericOverflow { node, op });
    }
    let v = out.value();
    let n = points.len();
    Ok((0..n)
        .map(|i| {
            (0..net.output_width())
                .map(|c| DiffResult {
                    value: v[[i, c]],
                    d_dx: v[[n + i, c]],
                    d_dt: v[[2 * n + i, c]],
                    d2_dx2: v[[3 * n + i, c]],
                })
                .collect()
        })
        .collect())
}

/// `eval_with_input_derivs`: derivatives for every output of the network at
/// a single point.
pub fn eval_with_input_derivs(net: &MlpParams, point: DomainPoint) -> Result<Vec<DiffResult>> {
    Ok(eval_input_derivs_batch(net, &[point])?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{mlp_forward, mlp_new, uniform_layers, Activation, Init, OutputActivation};

    #[test]
    fn linear_neuron() {
        let mut net = mlp_new(&[2, 1], Activation::Tanh, OutputActivation::Identity, Init::Zeros, 0).unwrap();
        net.set_flat(&[0.7, -1.3, 0.2]).unwrap();
        let d = eval_with_input_derivs(&net, DomainPoint::new(0.4, 1.1)).unwrap()[0];
        assert_eq!((d.d_dx, d.d_dt, d.d2_dx2), (0.7, -1.3, 0.0));
        assert!((d.value - (0.7 * 0.4 - 1.3 * 1.1 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn tanh_at_origin() {
        // [2, 1, 1]: hidden tanh(x), output identity copy
        let mut net = mlp_new(&[2, 1, 1], Activation::Tanh, OutputActivation::Identity, Init::Zeros, 0).unwrap();
        net.set_flat(&[1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let d = eval_with_input_derivs(&net, DomainPoint::new(0.0, 0.5)).unwrap()[0];
        assert_eq!(d.value, 0.0);
        assert_eq!(d.d_dx, 1.0);
        assert_eq!(d.d2_dx2, 0.0);
        assert_eq!(d.d_dt, 0.0);
    }

    #[test]
    fn deep_net_matches_finite_differences() {
        let net =
            mlp_new(&uniform_layers(2, 20, 8, 1), Activation::Tanh, OutputActivation::Identity, Init::XavierUniform, 4)
                .unwrap();
        let f = |x: f64, t: f64| mlp_forward(&net, &[x, t]).unwrap()[0];
        let h = 1e-4;
        for &(x, t) in &[(0.3, 0.7), (-0.5, 1.2), (0.9, -0.4)] {
            let d = eval_with_input_derivs(&net, DomainPoint::new(x, t)).unwrap()[0];
            let fx = (f(x + h, t) - f(x - h, t)) / (2.0 * h);
            let ft = (f(x, t + h) - f(x, t - h)) / (2.0 * h);
            let fxx = (f(x + h, t) - 2.0 * f(x, t) + f(x - h, t)) / (h * h);
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
            assert!(rel(d.d_dx, fx) < 1e-6, "dx {} vs {}", d.d_dx, fx);
            assert!(rel(d.d_dt, ft) < 1e-6, "dt {} vs {}", d.d_dt, ft);
            assert!((d.d2_dx2 - fxx).abs() < 1e-5 * (1.0 + fxx.abs()), "dxx {} vs {}", d.d2_dx2, fxx);
        }
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let p = vec![0.5, -1.5, 2.0, 0.25];
        let layout = ParamLayout::new(vec![(1, 4)]);
        let g = grad_params(&layout, &p, |_, v| Ok(v[0].square().sum() * 0.5)).unwrap();
        assert_eq!(g, p);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let layout = ParamLayout::new(vec![(1, 3)]);
        assert!(grad_params(&layout, &[1.0], |_, v| Ok(v[0].sum())).is_err());
    }

    #[test]
    fn check_gradient_on_quadratic() {
        let a = [1.0, -2.0, 0.5];
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let v = x.iter().zip(&a).map(|(xi, ai)| 0.5 * (xi - ai) * (xi - ai) * 3.0).sum();
            Ok((v, x.iter().zip(&a).map(|(xi, ai)| 3.0 * (xi - ai)).collect()))
        };
        assert!(check_gradient(f, &[0.3, 0.1, -0.7], 1e-3).unwrap() <= 1e-9);
        assert_eq!(check_gradient(f, &[], 1e-3).unwrap(), 0.0);
        assert!(check_gradient(f, &[0.0], 0.0).is_err());
    }

    #[test]
    fn linearity_of_derivatives() {
        let f = mlp_new(&[2, 6, 1], Activation::Tanh, OutputActivation::Identity, Init::XavierUniform, 1).unwrap();
        let g = mlp_new(&[2, 6, 1], Activation::Tanh, OutputActivation::Identity, Init::XavierUniform, 2).unwrap();
        // a*f + b*g as one network: concatenate hidden units, scale output weights.
        let (a, b) = (0.7, -1.9);
        let mut combo = mlp_new(&[2, 12, 1], Activation::Tanh, OutputActivation::Identity, Init::Zeros, 0).unwrap();
        for r in 0..2 {
            for c in 0..6 {
                combo.weights[0][r * 12 + c] = f.weights[0][r * 6 + c];
                combo.weights[0][r * 12 + 6 + c] = g.weights[0][r * 6 + c];
            }
        }
        for c in 0..6 {
            combo.weights[1][c] = a * f.weights[1][c];
            combo.weights[1][6 + c] = b * g.weights[1][c];
        }
        let p = DomainPoint::new(0.35, 0.8);
        let (df, dg, dc) = (
            eval_with_input_derivs(&f, p).unwrap()[0],
            eval_with_input_derivs(&g, p).unwrap()[0],
            eval_with_input_derivs(&combo, p).unwrap()[0],
        );
        assert!((dc.d_dx - (a * df.d_dx + b * dg.d_dx)).abs() < 1e-14);
        assert!((dc.d_dt - (a * df.d_dt + b * dg.d_dt)).abs() < 1e-14);
        assert!((dc.d2_dx2 - (a * df.d2_dx2 + b * dg.d2_dx2)).abs() < 1e-14);
    }

    #[test]
    fn swapped_inputs_swap_derivatives() {
        let f = mlp_new(&[2, 5, 5, 1], Activation::Tanh, OutputActivation::Identity, Init::XavierUniform, 8).unwrap();
        let mut swapped = f.clone();
        for c in 0..5 {
            swapped.weights[0][c] = f.weights[0][5 + c];
            swapped.weights[0][5 + c] = f.weights[0][c];
        }
        let a = eval_with_input_derivs(&f, DomainPoint::new(0.2, 0.9)).unwrap()[0];
        let b = eval_with_input_derivs(&swapped, DomainPoint::new(0.9, 0.2)).unwrap()[0];
        assert_eq!(a.value, b.value);
        assert_eq!(a.d_dx, b.d_dt);
        assert_eq!(a.d_dt, b.d_dx);
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let f = mlp_new(&[2, 9, 9, 2], Activation::Tanh, OutputActivation::Identity, Init::XavierUniform, 3).unwrap();
        let p = DomainPoint::new(0.12, 2.5);
        assert_eq!(eval_with_input_derivs(&f, p).unwrap(), eval_with_input_derivs(&f, p).unwrap());
    }
}
