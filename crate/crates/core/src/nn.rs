//! Small dense building blocks shared by the probes and their optimiser.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

/// Named, flat access to every parameter tensor of a model, in a fixed order.
pub trait Tensors {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));
}

pub fn flatten<T: Tensors + ?Sized>(t: &T) -> Vec<f64> {
    let mut out = Vec::new();
    t.visit(&mut |_, _, data| out.extend_from_slice(data));
    out
}

pub fn unflatten<T: Tensors + ?Sized>(t: &mut T, values: &[f64]) {
    let mut at = 0;
    t.visit_mut(&mut |_, data| {
        data.copy_from_slice(&values[at..at + data.len()]);
        at += data.len();
    });
    assert_eq!(at, values.len(), "unflatten: length mismatch");
}

pub fn zero<T: Tensors + ?Sized>(t: &mut T) {
    t.visit_mut(&mut |_, data| data.fill(0.0));
}

pub fn scale<T: Tensors + ?Sized>(t: &mut T, factor: f64) {
    t.visit_mut(&mut |_, data| data.iter_mut().for_each(|v| *v *= factor));
}

pub fn add_into<T: Tensors + ?Sized>(acc: &mut T, other: &T) {
    let flat = flatten(other);
    let mut at = 0;
    acc.visit_mut(&mut |_, data| {
        for v in data.iter_mut() {
            *v += flat[at];
            at += 1;
        }
    });
}

pub fn all_finite<T: Tensors + ?Sized>(t: &T) -> bool {
    let mut ok = true;
    t.visit(&mut |_, _, data| ok &= data.iter().all(|v| v.is_finite()));
    ok
}

pub fn slice_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are kept in standard layout")
}

pub fn slice<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are kept in standard layout")
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<T: Tensors + ?Sized>(&mut self, params: &mut T, grads: &T) {
        let g = flatten(grads);
        if self.m.is_empty() {
            self.m = vec![0.0; g.len()];
            self.v = vec![0.0; g.len()];
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut at = 0;
        params.visit_mut(&mut |_, data| {
            for p in data.iter_mut() {
                let gi = g[at];
                m[at] = b1 * m[at] + (1.0 - b1) * gi;
                v[at] = b2 * v[at] + (1.0 - b2) * gi * gi;
                let mh = m[at] / c1;
                let vh = v[at] / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
                at += 1;
            }
        });
    }
}

/// Uniform(−bound, bound) matrix.
pub fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Array2<f64> {
    if bound == 0.0 {
        return Array2::zeros((rows, cols));
    }
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

pub fn uniform_vector(len: usize, bound: f64, rng: &mut impl Rng) -> Array1<f64> {
    uniform_matrix(1, len, bound, rng).remove_axis(Axis(0))
}

/// Fully connected layer `y = W x + b`, `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Linear {
        Linear {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    /// Default initialisation: uniform in ±1/√input for weights and biases.
    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Linear {
        let bound = 1.0 / (input as f64).sqrt();
        Linear {
            weight: uniform_matrix(output, input, bound, rng),
            bias: uniform_vector(output, bound, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Rows of `x` are inputs.
    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `∂/∂x`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &dy.t().dot(&x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&format!("{prefix}.weight"), self.weight.shape(), slice(&self.weight));
        f(&format!("{prefix}.bias"), self.bias.shape(), slice(&self.bias));
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.weight"), slice_mut(&mut self.weight));
        f(&format!("{prefix}.bias"), slice_mut(&mut self.bias));
    }
}

/// Inverted dropout mask: entries are 0 or 1/(1−rate).
pub fn dropout_mask(shape: (usize, usize), rate: f64, rng: &mut impl Rng) -> Array2<f64> {
    if rate <= 0.0 {
        return Array2::ones(shape);
    }
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < rate { 0.0 } else { keep })
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// `dy` masked by where the pre-activation was positive.
pub fn relu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    out.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}
