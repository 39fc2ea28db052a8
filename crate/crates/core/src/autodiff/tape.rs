use std::cell::{Ref, RefCell};
use std::ops::{Add, Div, Mul, Neg, Range, Sub};

use ndarray::{s, Array2, Axis, Zip};

use crate::neural::Activation;

/// Row-block layout of a batch of forward-mode jets.
///
/// A jet batch of `n` points is stored as one `(channels * n) x width` matrix:
/// block 0 holds values, blocks `1..=dirs` hold first derivatives along each
/// seeded direction, and (when `second` is set) the last block holds the
/// second derivative along direction 0. Stacking the channels lets a dense
/// layer act on every channel with a single matrix product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JetLayout {
    pub n: usize,
    pub dirs: usize,
    pub second: bool,
}

impl JetLayout {
    pub fn value_only(n: usize) -> Self {
        Self { n, dirs: 0, second: false }
    }

    pub fn channels(&self) -> usize {
        1 + self.dirs + usize::from(self.second)
    }

    pub fn rows(&self) -> usize {
        self.channels() * self.n
    }

    pub fn value_rows(&self) -> Range<usize> {
        0..self.n
    }

    pub fn dir_rows(&self, d: usize) -> Range<usize> {
        assert!(d < self.dirs, "direction {d} not seeded");
        (1 + d) * self.n..(2 + d) * self.n
    }

    pub fn second_rows(&self) -> Range<usize> {
        assert!(self.second, "second derivative not tracked");
        (1 + self.dirs) * self.n..(2 + self.dirs) * self.n
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Min(usize, usize),
    Max(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Square(usize),
    Powf(usize, f64),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Sum(usize),
    Mean(usize),
    MatMul(usize, usize),
    AddBias { x: usize, bias: usize, rows: usize },
    Slice { src: usize, r0: usize, c0: usize },
    HConcat(Vec<usize>),
    VConcat(Vec<usize>),
    Jet { z: usize, layout: JetLayout, act: Activation },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Min(..) => "min",
            Op::Max(..) => "max",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(_) => "offset",
            Op::Square(_) => "square",
            Op::Powf(..) => "powf",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Sqrt(_) => "sqrt",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky-relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MatMul(..) => "matmul",
            Op::AddBias { .. } => "add-bias",
            Op::Slice { .. } => "slice",
            Op::HConcat(_) => "hconcat",
            Op::VConcat(_) => "vconcat",
            Op::Jet { .. } => "jet-activation",
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape over dense matrices.
///
/// Nodes are appended in evaluation order, so the node list is always
/// topologically sorted; the reverse sweep visits it back to front.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn param_scalar(&self, value: f64) -> Var<'_> {
        self.param(Array2::from_elem((1, 1), value))
    }

    /// First node (in recording order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .find(|(_, n)| n.value.iter().any(|v| !v.is_finite()))
            .map(|(i, n)| (i, n.op.name()))
    }

    fn unary(&self, a: Var<'_>, op: Op, f: impl Fn(f64) -> f64) -> Var<'_> {
        let (value, g) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.id];
            (n.value.mapv(f), n.needs_grad)
        };
        self.push(value, op, g)
    }

    fn binary(&self, a: Var<'_>, b: Var<'_>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'_> {
        let (value, g) = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.id], &nodes[b.id]);
            (broadcast_zip(&x.value, &y.value, f), x.needs_grad || y.needs_grad)
        };
        self.push(value, op, g)
    }

    /// Reverse sweep from a scalar root; returns adjoints for every node.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            let val = |k: usize| &nodes[k].value;
            let wants = |k: usize| nodes[k].needs_grad;
            let mut acc = |k: usize, d: Array2<f64>| accumulate(&mut grads[k], d);
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if wants(*a) {
                        acc(*a, reduce_to(&g, val(*a).dim()));
                    }
                    if wants(*b) {
                        acc(*b, reduce_to(&g, val(*b).dim()));
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        acc(*a, reduce_to(&g, val(*a).dim()));
                    }
                    if wants(*b) {
                        acc(*b, reduce_to(&g.mapv(|v| -v), val(*b).dim()));
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        acc(*a, reduce_to(&broadcast_zip(&g, val(*b), |g, y| g * y), val(*a).dim()));
                    }
                    if wants(*b) {
                        acc(*b, reduce_to(&broadcast_zip(&g, val(*a), |g, x| g * x), val(*b).dim()));
                    }
                }
                Op::Div(a, b) => {
                    if wants(*a) {
                        acc(*a, reduce_to(&broadcast_zip(&g, val(*b), |g, y| g / y), val(*a).dim()));
                    }
                    if wants(*b) {
                        // d(a/b)/db = -out / b
                        let t = broadcast_zip(&node.value, val(*b), |o, y| -o / y);
                        acc(*b, reduce_to(&(&g * &t), val(*b).dim()));
                    }
                }
                Op::Min(a, b) | Op::Max(a, b) => {
                    let take_a = |x: f64, y: f64| match node.op {
                        Op::Min(..) => x <= y,
                        _ => x >= y,
                    };
                    let mask_a = broadcast_zip(val(*a), val(*b), |x, y| f64::from(u8::from(take_a(x, y))));
                    if wants(*a) {
                        acc(*a, reduce_to(&(&g * &mask_a), val(*a).dim()));
                    }
                    if wants(*b) {
                        acc(*b, reduce_to(&(&g * &mask_a.mapv(|m| 1.0 - m)), val(*b).dim()));
                    }
                }
                Op::Neg(a) => acc(*a, g.mapv(|v| -v)),
                Op::Scale(a, c) => acc(*a, g.mapv(|v| v * c)),
                Op::Offset(a) => acc(*a, g),
                Op::Square(a) => acc(*a, Zip::from(&g).and(val(*a)).map_collect(|g, x| 2.0 * x * g)),
                Op::Powf(a, p) => acc(*a, Zip::from(&g).and(val(*a)).map_collect(|g, x| g * p * x.powf(p - 1.0))),
                Op::Tanh(a) => acc(*a, Zip::from(&g).and(&node.value).map_collect(|g, y| g * (1.0 - y * y))),
                Op::Exp(a) => acc(*a, &g * &node.value),
                Op::Ln(a) => acc(*a, Zip::from(&g).and(val(*a)).map_collect(|g, x| g / x)),
                Op::Sqrt(a) => acc(*a, Zip::from(&g).and(&node.value).map_collect(|g, y| 0.5 * g / y)),
                Op::Relu(a) => acc(*a, Zip::from(&g).and(val(*a)).map_collect(|g, x| if *x >= 0.0 { *g } else { 0.0 })),
                Op::LeakyRelu(a, slope) => {
                    acc(*a, Zip::from(&g).and(val(*a)).map_collect(|g, x| if *x >= 0.0 { *g } else { g * slope }))
                }
                Op::Sigmoid(a) => acc(*a, Zip::from(&g).and(&node.value).map_collect(|g, y| g * y * (1.0 - y))),
                Op::Sum(a) => acc(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
                Op::Mean(a) => {
                    let n = val(*a).len() as f64;
                    acc(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]] / n))
                }
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        acc(*a, g.dot(&val(*b).t()));
                    }
                    if wants(*b) {
                        acc(*b, val(*a).t().dot(&g));
                    }
                }
                Op::AddBias { x, bias, rows } => {
                    if wants(*bias) {
                        let gb = g.slice(s![..*rows, ..]).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(*bias, gb);
                    }
                    if wants(*x) {
                        acc(*x, g);
                    }
                }
                Op::Slice { src, r0, c0 } => {
                    let mut full = Array2::zeros(val(*src).dim());
                    let (r, c) = g.dim();
                    full.slice_mut(s![*r0..r0 + r, *c0..c0 + c]).assign(&g);
                    acc(*src, full);
                }
                Op::HConcat(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        if wants(p) {
                            acc(p, g.slice(s![.., c0..c0 + w]).to_owned());
                        }
                        c0 += w;
                    }
                }
                Op::VConcat(parts) => {
                    let mut r0 = 0;
                    for &p in parts {
                        let h = val(p).nrows();
                        if wants(p) {
                            acc(p, g.slice(s![r0..r0 + h, ..]).to_owned());
                        }
                        r0 += h;
                    }
                }
                Op::Jet { z, layout, act } => acc(*z, jet_backward(val(*z), &node.value, &g, *layout, *act)),
            }
        }
        Gradients { grads }
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Adjoint of `v`; zeros if the root does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Array2<f64> {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Array2::zeros(v.tape.nodes.borrow()[v.id].value.dim()),
        }
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, d: Array2<f64>) {
    match slot {
        Some(s) => *s += &d,
        None => *slot = Some(d),
    }
}

fn broadcast_zip(a: &Array2<f64>, b: &Array2<f64>, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    if a.dim() == b.dim() {
        Zip::from(a).and(b).map_collect(|&x, &y| f(x, y))
    } else if a.dim() == (1, 1) {
        let x = a[[0, 0]];
        b.mapv(|y| f(x, y))
    } else if b.dim() == (1, 1) {
        let y = b[[0, 0]];
        a.mapv(|x| f(x, y))
    } else {
        panic!("incompatible shapes {:?} and {:?}", a.dim(), b.dim());
    }
}

fn reduce_to(g: &Array2<f64>, dim: (usize, usize)) -> Array2<f64> {
    if g.dim() == dim {
        g.clone()
    } else {
        debug_assert_eq!(dim, (1, 1));
        Array2::from_elem((1, 1), g.sum())
    }
}

/// `(h', h'', h''')` of tanh in terms of `h = tanh(z)`.
#[inline]
fn tanh_derivs(h: f64) -> (f64, f64, f64) {
    let s1 = 1.0 - h * h;
    (s1, -2.0 * h * s1, -2.0 * s1 * s1 + 4.0 * h * h * s1)
}

/// Activation derivatives `(h, h', h'', h''')` at pre-activation `z`.
#[inline]
fn act_derivs(act: Activation, z: f64) -> (f64, f64, f64, f64) {
    match act {
        Activation::Tanh => {
            let h = crate::neural::tanh(z);
            let (s1, s2, s3) = tanh_derivs(h);
            (h, s1, s2, s3)
        }
        // Right derivative at exactly zero.
        Activation::Relu => {
            if z >= 0.0 {
                (z, 1.0, 0.0, 0.0)
            } else {
                (0.0, 0.0, 0.0, 0.0)
            }
        }
        Activation::LeakyRelu => {
            let slope = crate::neural::LEAKY_SLOPE;
            if z >= 0.0 {
                (z, 1.0, 0.0, 0.0)
            } else {
                (slope * z, slope, 0.0, 0.0)
            }
        }
    }
}

fn jet_forward(z: &Array2<f64>, layout: JetLayout, act: Activation) -> Array2<f64> {
    let width = z.ncols();
    let block = layout.n * width;
    let zs = z.as_slice().expect("jet input must be contiguous");
    let mut out = vec![0.0; zs.len()];
    let (dirs, second) = (layout.dirs, layout.second);
    for k in 0..block {
        let (h, s1, s2, _) = act_derivs(act, zs[k]);
        out[k] = h;
        for d in 0..dirs {
            let o = (1 + d) * block + k;
            out[o] = s1 * zs[o];
        }
        if second {
            let z1 = zs[block + k];
            let o = (1 + dirs) * block + k;
            out[o] = s2 * z1 * z1 + s1 * zs[o];
        }
    }
    Array2::from_shape_vec(z.dim(), out).expect("shape preserved")
}

/// Backward through [`jet_forward`]; `y` is its output, whose value block
/// already holds `tanh(z)`.
fn jet_backward(z: &Array2<f64>, y: &Array2<f64>, g: &Array2<f64>, layout: JetLayout, act: Activation) -> Array2<f64> {
    let width = z.ncols();
    let block = layout.n * width;
    let zs = z.as_slice().expect("jet input must be contiguous");
    let ys = y.as_slice().expect("jet output is contiguous");
    let gs = g.as_standard_layout();
    let gs = gs.as_slice().expect("contiguous");
    let mut out = vec![0.0; zs.len()];
    let (dirs, second) = (layout.dirs, layout.second);
    for k in 0..block {
        let (s1, s2, s3) = match act {
            Activation::Tanh => tanh_derivs(ys[k]),
            _ => {
                let (_, s1, s2, s3) = act_derivs(act, zs[k]);
                (s1, s2, s3)
            }
        };
        let mut g0 = gs[k] * s1;
        for d in 0..dirs {
            let o = (1 + d) * block + k;
            g0 += gs[o] * s2 * zs[o];
            out[o] = gs[o] * s1;
        }
        if second {
            let o = (1 + dirs) * block + k;
            let z1 = zs[block + k];
            let gss = gs[o];
            g0 += gss * (s3 * z1 * z1 + s2 * zs[o]);
            out[block + k] += gss * 2.0 * s2 * z1;
            out[o] = gss * s1;
        }
        out[k] = g0;
    }
    Array2::from_shape_vec(z.dim(), out).expect("shape preserved")
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Array2<f64>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.value().dim()
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1), "not a scalar node");
        v[[0, 0]]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.value().iter().copied().collect()
    }

    pub fn square(self) -> Var<'t> {
        self.tape.unary(self, Op::Square(self.id), |x| x * x)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.tape.unary(self, Op::Powf(self.id, p), |x| x.powf(p))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self, Op::Tanh(self.id), crate::neural::tanh)
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self, Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self, Op::Ln(self.id), f64::ln)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.tape.unary(self, Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.unary(self, Op::Relu(self.id), |x| if x >= 0.0 { x } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.tape.unary(self, Op::LeakyRelu(self.id, slope), |x| if x >= 0.0 { x } else { slope * x })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self, Op::Sigmoid(self.id), sigmoid)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self, Op::Scale(self.id, c), |x| x * c)
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.tape.unary(self, Op::Offset(self.id), |x| x + c)
    }

    pub fn min(self, other: Var<'t>) -> Var<'t> {
        self.tape.binary(self, other, Op::Min(self.id, other.id), f64::min)
    }

    pub fn max(self, other: Var<'t>) -> Var<'t> {
        self.tape.binary(self, other, Op::Max(self.id, other.id), f64::max)
    }

    /// Clamp into `[lo, hi]`; the gradient vanishes where clamped.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let lo = self.tape.scalar(lo);
        let hi = self.tape.scalar(hi);
        self.max(lo).min(hi)
    }

    pub fn sum(self) -> Var<'t> {
        let (v, g) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.value.sum(), n.needs_grad)
        };
        self.tape.push(Array2::from_elem((1, 1), v), Op::Sum(self.id), g)
    }

    /// Mean over all entries; an empty node has mean 0.
    pub fn mean(self) -> Var<'t> {
        let (v, g) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let m = if n.value.is_empty() { 0.0 } else { n.value.sum() / n.value.len() as f64 };
            (m, n.needs_grad)
        };
        self.tape.push(Array2::from_elem((1, 1), v), Op::Mean(self.id), g)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (v, g) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            (a.value.dot(&b.value), a.needs_grad || b.needs_grad)
        };
        self.tape.push(v, Op::MatMul(self.id, other.id), g)
    }

    /// Adds a `1 x k` bias to the first `rows` rows (the value block of a jet).
    pub fn add_bias(self, bias: Var<'t>, rows: usize) -> Var<'t> {
        let (v, g) = {
            let nodes = self.tape.nodes.borrow();
            let (x, b) = (&nodes[self.id], &nodes[bias.id]);
            let mut v = x.value.clone();
            let mut head = v.slice_mut(s![..rows, ..]);
            head += &b.value;
            (v, x.needs_grad || b.needs_grad)
        };
        self.tape.push(v, Op::AddBias { x: self.id, bias: bias.id, rows }, g)
    }

    pub fn slice(self, rows: Range<usize>, cols: Range<usize>) -> Var<'t> {
        let (v, g) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.value.slice(s![rows.clone(), cols.clone()]).to_owned(), n.needs_grad)
        };
        self.tape.push(v, Op::Slice { src: self.id, r0: rows.start, c0: cols.start }, g)
    }

    pub fn rows(self, rows: Range<usize>) -> Var<'t> {
        let c = self.dim().1;
        self.slice(rows, 0..c)
    }

    pub fn col(self, j: usize) -> Var<'t> {
        let r = self.dim().0;
        self.slice(0..r, j..j + 1)
    }

    pub fn hconcat(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let (v, g) = {
            let nodes = tape.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.id].value.view()).collect();
            let v = ndarray::concatenate(Axis(1), &views).expect("row counts must match");
            (v, parts.iter().any(|p| nodes[p.id].needs_grad))
        };
        tape.push(v, Op::HConcat(parts.iter().map(|p| p.id).collect()), g)
    }

    pub fn vconcat(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let (v, g) = {
            let nodes = tape.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.id].value.view()).collect();
            let v = ndarray::concatenate(Axis(0), &views).expect("column counts must match");
            (v, parts.iter().any(|p| nodes[p.id].needs_grad))
        };
        tape.push(v, Op::VConcat(parts.iter().map(|p| p.id).collect()), g)
    }

    /// Applies a hidden-layer activation to a stacked jet batch, propagating
    /// first derivatives along every seeded direction and the second
    /// derivative along direction 0.
    pub fn jet_activation(self, layout: JetLayout, act: Activation) -> Var<'t> {
        let (v, g) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            assert_eq!(n.value.nrows(), layout.rows(), "jet layout does not match node rows");
            (jet_forward(&n.value, layout, act), n.needs_grad)
        };
        self.tape.push(v, Op::Jet { z: self.id, layout, act }, g)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self, rhs, Op::Add(self.id, rhs.id), |x, y| x + y)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self, rhs, Op::Sub(self.id, rhs.id), |x, y| x - y)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self, rhs, Op::Mul(self.id, rhs.id), |x, y| x * y)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self, rhs, Op::Div(self.id, rhs.id), |x, y| x / y)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(self, Op::Neg(self.id), |x| -x)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.offset(rhs)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.offset(-rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs.offset(self)
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        (-rhs).offset(self)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs.scale(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check(f: impl for<'a> Fn(&'a Tape, Var<'a>) -> Var<'a> + Copy, x0: Array2<f64>) {
        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let y = f(&tape, x).sum();
        let g = tape.backward(y).wrt(x);
        let h = 1e-6;
        for idx in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
                xp[[r, c]] += delta;
                let t = Tape::new();
                let v = t.param(xp);
                f(&t, v).sum().scalar()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g.as_slice().unwrap()[idx];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "idx {idx}: fd {fd} vs ad {an}");
        }
    }

    #[test]
    fn elementwise_gradients() {
        let x0 = array![[0.3, -0.7], [1.2, 0.4]];
        fd_check(|_, x| x.tanh() * x.exp(), x0.clone());
        fd_check(|_, x| (x.square() + 1.0).sqrt().ln(), x0.clone());
        fd_check(|_, x| x.sigmoid() / (x.square() + 2.0), x0.clone());
        fd_check(|_, x| x.relu() + x.leaky_relu(0.1) * 3.0, x0.clone());
        fd_check(|t, x| x.min(t.scalar(0.35)) + x.max(t.scalar(0.35)).powf(3.0), x0.clone());
        fd_check(|_, x| 2.0 - x.mean() * x, x0);
    }

    #[test]
    fn matrix_gradients() {
        let a0 = array![[0.1, 0.2, -0.3], [0.5, -0.4, 0.9]];
        fd_check(
            |t, a| {
                let w = t.constant(array![[1.0, -2.0], [0.5, 0.25], [3.0, 1.0]]);
                let b = t.constant(array![[0.1, -0.1]]);
                a.matmul(w).add_bias(b, 1).tanh().col(1).square()
            },
            a0.clone(),
        );
        fd_check(|_, a| Var::hconcat(&[a.col(2), a.rows(0..1).slice(0..1, 0..2).sum() * a.col(0)]).exp(), a0);
    }

    #[test]
    fn relu_right_derivative_at_zero() {
        let tape = Tape::new();
        let x = tape.param(array![[0.0]]);
        let y = x.relu().sum();
        assert_eq!(tape.backward(y).wrt(x)[[0, 0]], 1.0);
        let tape = Tape::new();
        let x = tape.param(array![[0.0]]);
        let y = x.leaky_relu(0.1).sum();
        assert_eq!(tape.backward(y).wrt(x)[[0, 0]], 1.0);
    }

    #[test]
    fn scalar_broadcast_reduces() {
        let tape = Tape::new();
        let s = tape.param_scalar(2.0);
        let v = tape.constant(array![[1.0], [2.0], [3.0]]);
        let y = (v * s).sum();
        assert_eq!(y.scalar(), 12.0);
        assert_eq!(tape.backward(y).wrt(s)[[0, 0]], 6.0);
    }

    #[test]
    fn non_finite_node_is_located() {
        let tape = Tape::new();
        let x = tape.param(array![[-1.0]]);
        let y = x.ln().exp();
        assert!(!y.scalar().is_finite());
        assert_eq!(tape.first_non_finite(), Some((1, "ln")));
    }

    #[test]
    fn jet_activation_matches_composed_ops() {
        // Compare the fused jet node against the same formulas built from primitives.
        let layout = JetLayout { n: 2, dirs: 2, second: true };
        let z0 =
            array![[0.3, -0.2], [0.8, 0.1], [1.0, -0.5], [0.2, 0.7], [-0.4, 0.3], [0.6, 0.9], [0.05, -0.6], [0.4, 0.2]];
        let weights =
            array![[0.7, -1.1], [0.3, 0.9], [-0.5, 0.2], [1.3, 0.4], [0.8, -0.7], [0.1, 0.6], [-0.9, 0.5], [0.35, 1.2]];
        let t1 = Tape::new();
        let z = t1.param(z0.clone());
        let w = t1.constant(weights.clone());
        let loss = (z.jet_activation(layout, Activation::Tanh) * w).sum();
        let g1 = t1.backward(loss).wrt(z);
        let v1 = loss.scalar();

        let t2 = Tape::new();
        let z = t2.param(z0);
        let w = t2.constant(weights);
        let blk = |c: usize| z.rows(c * 2..(c + 1) * 2);
        let h = blk(0).tanh();
        let s1 = 1.0 - h.square();
        let s2 = (h * s1) * -2.0;
        let out = Var::vconcat(&[h, s1 * blk(1), s1 * blk(2), s2 * blk(1).square() + s1 * blk(3)]);
        let loss2 = (out * w).sum();
        let g2 = t2.backward(loss2).wrt(z);
        assert!((v1 - loss2.scalar()).abs() < 1e-14);
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((a - b).abs() < 1e-13, "{a} vs {b}");
        }
    }
}
