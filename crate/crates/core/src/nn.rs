//! Small reverse-mode building blocks shared by the backbone and the
//! recommender.
//!
//! Every model keeps all of its parameters in one flat `Vec<f64>`; layers
//! only hold offsets into it. Gradients live in a buffer of the same length,
//! which keeps the optimizer, the parameter container and finite-difference
//! checks independent of the architecture.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Allocates consecutive parameter ranges.
#[derive(Debug, Default)]
pub struct ParamAllocator {
    len: usize,
}

impl ParamAllocator {
    pub fn dense(&mut self, input: usize, output: usize, activation: Activation) -> Dense {
        let weights = self.len;
        self.len += input * output;
        let bias = self.len;
        self.len += output;
        Dense { input, output, activation, weights, bias }
    }

    pub fn lstm(&mut self, input: usize, hidden: usize) -> LstmCell {
        let weights = self.len;
        self.len += 4 * hidden * (input + hidden);
        let bias = self.len;
        self.len += 4 * hidden;
        LstmCell { input, hidden, weights, bias }
    }

    pub fn raw(&mut self, n: usize) -> usize {
        let at = self.len;
        self.len += n;
        at
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// A fully connected layer `act(W x + b)` with `W` stored row-major
/// (`output` rows of `input` values).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
    pub weights: usize,
    pub bias: usize,
}

impl Dense {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.weights..self.weights + self.input * self.output
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.bias..self.bias + self.output
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input);
        let w = &params[self.weight_range()];
        let b = &params[self.bias_range()];
        (0..self.output)
            .map(|o| {
                let row = &w[o * self.input..(o + 1) * self.input];
                let z = b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
                self.activation.apply(z)
            })
            .collect()
    }

    /// Accumulates parameter gradients given the layer input `x`, its output
    /// `y` and the gradient `dy` w.r.t. the output; returns the gradient
    /// w.r.t. `x`.
    pub fn backward(&self, params: &[f64], x: &[f64], y: &[f64], dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let w = &params[self.weight_range()];
        let mut dx = vec![0.0; self.input];
        for o in 0..self.output {
            let dz = dy[o] * self.activation.derivative_from_output(y[o]);
            if dz == 0.0 {
                continue;
            }
            grad[self.bias + o] += dz;
            let base = self.weights + o * self.input;
            let row = &w[o * self.input..(o + 1) * self.input];
            for i in 0..self.input {
                grad[base + i] += dz * x[i];
                dx[i] += dz * row[i];
            }
        }
        dx
    }

    /// Glorot-normal weights, zero bias.
    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        let std = (2.0 / (self.input + self.output) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        for p in &mut params[self.weight_range()] {
            *p = normal.sample(rng);
        }
        for p in &mut params[self.bias_range()] {
            *p = 0.0;
        }
    }
}

/// Standard LSTM cell; gates are stacked `[input, forget, cell, output]`
/// over the concatenation `[x; h_prev]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmCell {
    pub input: usize,
    pub hidden: usize,
    pub weights: usize,
    pub bias: usize,
}

/// Values saved by [`LstmCell::step`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LstmStep {
    pub xh: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

impl LstmCell {
    fn cols(&self) -> usize {
        self.input + self.hidden
    }

    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.weights..self.weights + 4 * self.hidden * self.cols()
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.bias..self.bias + 4 * self.hidden
    }

    pub fn step(&self, params: &[f64], x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> LstmStep {
        let h = self.hidden;
        let cols = self.cols();
        let mut xh = Vec::with_capacity(cols);
        xh.extend_from_slice(x);
        xh.extend_from_slice(h_prev);
        let w = &params[self.weight_range()];
        let b = &params[self.bias_range()];
        let z: Vec<f64> = (0..4 * h)
            .map(|r| b[r] + w[r * cols..(r + 1) * cols].iter().zip(&xh).map(|(a, c)| a * c).sum::<f64>())
            .collect();
        let i: Vec<f64> = z[..h].iter().map(|v| sigmoid(*v)).collect();
        let f: Vec<f64> = z[h..2 * h].iter().map(|v| sigmoid(*v)).collect();
        let g: Vec<f64> = z[2 * h..3 * h].iter().map(|v| v.tanh()).collect();
        let o: Vec<f64> = z[3 * h..].iter().map(|v| sigmoid(*v)).collect();
        let c: Vec<f64> = (0..h).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
        let hv: Vec<f64> = (0..h).map(|j| o[j] * c[j].tanh()).collect();
        LstmStep { xh, i, f, g, o, c_prev: c_prev.to_vec(), c, h: hv }
    }

    /// Backpropagates one step. `dh` and `dc` are the gradients flowing into
    /// this step's hidden and cell state; returns `(dx, dh_prev, dc_prev)`.
    pub fn step_backward(
        &self,
        params: &[f64],
        s: &LstmStep,
        dh: &[f64],
        dc: &[f64],
        grad: &mut [f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = self.hidden;
        let cols = self.cols();
        let mut dz = vec![0.0; 4 * h];
        let mut dc_prev = vec![0.0; h];
        for j in 0..h {
            let tc = s.c[j].tanh();
            let d_o = dh[j] * tc;
            let d_c = dc[j] + dh[j] * s.o[j] * (1.0 - tc * tc);
            let d_i = d_c * s.g[j];
            let d_g = d_c * s.i[j];
            let d_f = d_c * s.c_prev[j];
            dc_prev[j] = d_c * s.f[j];
            dz[j] = d_i * s.i[j] * (1.0 - s.i[j]);
            dz[h + j] = d_f * s.f[j] * (1.0 - s.f[j]);
            dz[2 * h + j] = d_g * (1.0 - s.g[j] * s.g[j]);
            dz[3 * h + j] = d_o * s.o[j] * (1.0 - s.o[j]);
        }
        let w = &params[self.weight_range()];
        let mut dxh = vec![0.0; cols];
        for (r, &d) in dz.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad[self.bias + r] += d;
            let base = self.weights + r * cols;
            let row = &w[r * cols..(r + 1) * cols];
            for k in 0..cols {
                grad[base + k] += d * s.xh[k];
                dxh[k] += d * row[k];
            }
        }
        let dh_prev = dxh.split_off(self.input);
        (dxh, dh_prev, dc_prev)
    }

    /// Glorot-normal weights, zero bias except the forget gate at 1.
    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        let std = (2.0 / (self.cols() + self.hidden) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        for p in &mut params[self.weight_range()] {
            *p = normal.sample(rng);
        }
        let b = self.bias;
        for j in 0..4 * self.hidden {
            params[b + j] = if (self.hidden..2 * self.hidden).contains(&j) { 1.0 } else { 0.0 };
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Central finite-difference gradient of `f` at `params`.
pub fn numeric_gradient<F: Fn(&[f64]) -> f64>(f: F, params: &[f64], h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Denominator floor for gradient checks. Central differences at h = 1e-5
/// carry roughly 1e-10 of cancellation noise, so relative error below this
/// magnitude is not measurable.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Largest relative error `|a - n| / max(|a|, |n|, floor)` between an
/// analytic and a numeric gradient.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_gradient_matches_finite_differences() {
        let mut alloc = ParamAllocator::default();
        let l1 = alloc.dense(3, 4, Activation::Tanh);
        let l2 = alloc.dense(4, 2, Activation::Sigmoid);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = vec![0.0; alloc.len()];
        l1.init(&mut p, &mut rng);
        l2.init(&mut p, &mut rng);
        p[l1.bias] = 0.3;
        let x = [0.2, -0.7, 1.1];
        let loss = |p: &[f64]| {
            let h = l1.forward(p, &x);
            let y = l2.forward(p, &h);
            y[0] * 2.0 - y[1] * y[1]
        };
        let h = l1.forward(&p, &x);
        let y = l2.forward(&p, &h);
        let mut g = vec![0.0; p.len()];
        let dh = l2.backward(&p, &h, &y, &[2.0, -2.0 * y[1]], &mut g);
        l1.backward(&p, &x, &h, &dh, &mut g);
        let n = numeric_gradient(loss, &p, 1e-5);
        assert!(max_relative_error(&g, &n, 1e-6) < 1e-6);
    }

    #[test]
    fn lstm_gradient_matches_finite_differences() {
        let mut alloc = ParamAllocator::default();
        let cell = alloc.lstm(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = vec![0.0; alloc.len()];
        cell.init(&mut p, &mut rng);
        let xs = [[0.5, -0.1, 0.3], [0.0, 0.9, -0.4]];
        let run = |p: &[f64]| {
            let mut h = vec![0.0; 2];
            let mut c = vec![0.0; 2];
            let mut steps = Vec::new();
            for x in &xs {
                let s = cell.step(p, x, &h, &c);
                h = s.h.clone();
                c = s.c.clone();
                steps.push(s);
            }
            steps
        };
        let loss = |p: &[f64]| {
            let s = run(p);
            s[1].h[0] + 0.5 * s[1].h[1] * s[1].h[1]
        };
        let steps = run(&p);
        let mut g = vec![0.0; p.len()];
        let mut dh = vec![1.0, steps[1].h[1]];
        let mut dc = vec![0.0; 2];
        for s in steps.iter().rev() {
            let (_, dhp, dcp) = cell.step_backward(&p, s, &dh, &dc, &mut g);
            dh = dhp;
            dc = dcp;
        }
        let n = numeric_gradient(loss, &p, 1e-5);
        assert!(max_relative_error(&g, &n, 1e-6) < 1e-6);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut adam = Adam::new(2, 0.1);
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[1.0, -1.0]);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn softmax_is_normalized() {
        let s = softmax(&[1000.0, 999.0, -5.0]);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
    }
}
