//! Layers with hand-written backward passes. Gradients live in a value of the
//! same type as the layer (`zeros_like`), so optimizers and checkpoints can
//! walk parameters and gradients in lockstep through [`Params`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Matrix};

/// Named parameter traversal in a fixed order.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, _, v| v.fill(0.0));
        z
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, v| n += v.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, _, v| out.extend_from_slice(v));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn uniform(rng: &mut impl Rng, bound: f64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Position-wise affine map (a 1x1 temporal convolution): `y = x W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, input: usize, output: usize) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: Matrix::from_vec(input, output, uniform(rng, bound, input * output)),
            bias: uniform(rng, bound, output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.cols(), self.input_dim(), "linear input width");
        let mut out = Matrix::zeros(x.rows(), self.output_dim());
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&self.bias);
        }
        gemm_nn(
            x.rows(),
            x.cols(),
            self.output_dim(),
            x.as_slice(),
            self.weight.as_slice(),
            out.as_mut_slice(),
            1.0,
        );
        out
    }

    /// Accumulate parameter gradients into `grad` and return `dL/dx`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Linear) -> Matrix {
        let (t, n_in, n_out) = (x.rows(), self.input_dim(), self.output_dim());
        gemm_tn(t, n_in, n_out, x.as_slice(), dy.as_slice(), grad.weight.as_mut_slice(), 1.0);
        for r in 0..t {
            for (g, d) in grad.bias.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        let mut dx = Matrix::zeros(t, n_in);
        gemm_nt(t, n_out, n_in, dy.as_slice(), self.weight.as_slice(), dx.as_mut_slice(), 0.0);
        dx
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "weight"), &[self.input_dim(), self.output_dim()], self.weight.as_slice());
        f(&join(prefix, "bias"), &[self.bias.len()], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let shape = [self.input_dim(), self.output_dim()];
        f(&join(prefix, "weight"), &shape, self.weight.as_mut_slice());
        f(&join(prefix, "bias"), &[self.bias.len()], &mut self.bias);
    }
}

/// Centered dilated temporal convolution with zero padding; output length
/// equals input length. Tap `j` reads frame `t + (j - (k-1)/2) * dilation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DilatedConv {
    /// `k` stacked `in x out` blocks, shape `(k * in) x out`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub kernel_size: usize,
    pub dilation: usize,
}

impl DilatedConv {
    pub fn new(rng: &mut impl Rng, channels_in: usize, channels_out: usize, kernel_size: usize, dilation: usize) -> Self {
        assert!(kernel_size % 2 == 1, "kernel size must be odd");
        let fan_in = channels_in * kernel_size;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Matrix::from_vec(fan_in, channels_out, uniform(rng, bound, fan_in * channels_out)),
            bias: uniform(rng, bound, channels_out),
            kernel_size,
            dilation,
        }
    }

    pub fn channels_in(&self) -> usize {
        self.weight.rows() / self.kernel_size
    }

    pub fn channels_out(&self) -> usize {
        self.weight.cols()
    }

    fn tap(&self, j: usize) -> &[f64] {
        let block = self.channels_in() * self.channels_out();
        &self.weight.as_slice()[j * block..(j + 1) * block]
    }

    /// For tap `j` over `t` frames: the output rows and matching input rows.
    fn tap_ranges(&self, j: usize, t: usize) -> Option<((usize, usize), (usize, usize))> {
        let half = (self.kernel_size - 1) / 2;
        let offset = (j as isize - half as isize) * self.dilation as isize;
        let out_start = (-offset).max(0) as usize;
        let out_end = (t as isize - offset).min(t as isize);
        if out_end <= out_start as isize {
            return None;
        }
        let out_end = out_end as usize;
        let in_start = (out_start as isize + offset) as usize;
        Some(((out_start, out_end), (in_start, in_start + out_end - out_start)))
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let (t, cin, cout) = (x.rows(), self.channels_in(), self.channels_out());
        assert_eq!(x.cols(), cin, "conv input width");
        let mut out = Matrix::zeros(t, cout);
        for r in 0..t {
            out.row_mut(r).copy_from_slice(&self.bias);
        }
        for j in 0..self.kernel_size {
            if let Some(((o0, o1), (i0, i1))) = self.tap_ranges(j, t) {
                let n = o1 - o0;
                gemm_nn(n, cin, cout, x.row_block(i0, i1), self.tap(j), out.row_block_mut(o0, o1), 1.0);
            }
        }
        out
    }

    pub fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut DilatedConv) -> Matrix {
        let (t, cin, cout) = (x.rows(), self.channels_in(), self.channels_out());
        let block = cin * cout;
        let mut dx = Matrix::zeros(t, cin);
        for r in 0..t {
            for (g, d) in grad.bias.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        for j in 0..self.kernel_size {
            if let Some(((o0, o1), (i0, i1))) = self.tap_ranges(j, t) {
                let n = o1 - o0;
                let gw = &mut grad.weight.as_mut_slice()[j * block..(j + 1) * block];
                gemm_tn(n, cin, cout, x.row_block(i0, i1), dy.row_block(o0, o1), gw, 1.0);
                gemm_nt(n, cout, cin, dy.row_block(o0, o1), self.tap(j), dx.row_block_mut(i0, i1), 1.0);
            }
        }
        dx
    }
}

impl Params for DilatedConv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let shape = [self.kernel_size, self.channels_in(), self.channels_out()];
        f(&join(prefix, "weight"), &shape, self.weight.as_slice());
        f(&join(prefix, "bias"), &[self.bias.len()], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let shape = [self.kernel_size, self.channels_in(), self.channels_out()];
        f(&join(prefix, "weight"), &shape, self.weight.as_mut_slice());
        f(&join(prefix, "bias"), &[self.bias.len()], &mut self.bias);
    }
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// `dL/dx` for `y = relu(x)`.
pub fn relu_backward(x: &Matrix, dy: &Matrix) -> Matrix {
    let data = x
        .as_slice()
        .iter()
        .zip(dy.as_slice())
        .map(|(&xi, &g)| if xi > 0.0 { g } else { 0.0 })
        .collect();
    Matrix::from_vec(x.rows(), x.cols(), data)
}
