//! Kernelized self-attention over a stage feature.
//!
//! Query, key and value are all projections of the same `T x D` feature and
//! no positional encoding is added anywhere. Similarity is
//! `sim(q, k) = theta(q) . theta(k)` with `theta(x) = elu(x) + 1`, which is
//! strictly positive, so the row normalizer never vanishes.
//!
//! [`linear_attention`] factors the key/value sums out of the per-query loop
//! and costs `O(T D^2)`; [`quadratic_attention_reference`] materializes the
//! `T x T` similarity matrix and costs `O(T^2 D)`. Both compute the same
//! function and both have exact backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, uniform, Params};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, softmax_rows, Matrix};

/// Added to every normalizer to survive underflow on long sequences.
pub const DENOMINATOR_EPS: f64 = 1e-9;

/// `elu(x) + 1` with `alpha = 1`.
#[inline]
pub fn theta(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

#[inline]
fn theta_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Elementwise `elu(x) + 1`; every output entry is strictly positive.
pub fn feature_map(x: &Matrix) -> Matrix {
    x.map(theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionKernel {
    Linear,
    Quadratic,
}

/// Projection matrices for one attention block, each `D x D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w_query: Matrix,
    pub w_key: Matrix,
    pub w_value: Matrix,
}

impl AttentionParams {
    pub fn new(rng: &mut impl Rng, dim: usize) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let mut m = || Matrix::from_vec(dim, dim, uniform(rng, bound, dim * dim));
        Self {
            w_query: m(),
            w_key: m(),
            w_value: m(),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_query.rows()
    }
}

impl Params for AttentionParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let s = [self.dim(), self.dim()];
        f(&join(prefix, "w_query"), &s, self.w_query.as_slice());
        f(&join(prefix, "w_key"), &s, self.w_key.as_slice());
        f(&join(prefix, "w_value"), &s, self.w_value.as_slice());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let s = [self.dim(), self.dim()];
        f(&join(prefix, "w_query"), &s, self.w_query.as_mut_slice());
        f(&join(prefix, "w_key"), &s, self.w_key.as_mut_slice());
        f(&join(prefix, "w_value"), &s, self.w_value.as_mut_slice());
    }
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    kernel: AttentionKernel,
    input: Matrix,
    query: Matrix,
    key: Matrix,
    value: Matrix,
    phi_q: Matrix,
    phi_k: Matrix,
    output: Matrix,
    denom: Vec<f64>,
    /// `sum_j theta(K_j) V_j^T`, linear kernel only.
    kv: Option<Matrix>,
    /// Row-normalized similarity matrix, quadratic kernel only.
    weights: Option<Matrix>,
}

impl AttentionTrace {
    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

fn check_shapes(f: &Matrix, p: &AttentionParams) -> Result<()> {
    if f.rows() == 0 {
        return Err(Error::shape("attention input", "T >= 1", 0));
    }
    let d = p.dim();
    for (name, w) in [("w_key", &p.w_key), ("w_value", &p.w_value)] {
        if w.shape() != (d, d) {
            return Err(Error::shape("attention params", format!("{d}x{d}"), format!("{name} {:?}", w.shape())));
        }
    }
    if f.cols() != d {
        return Err(Error::shape("attention input width", d, f.cols()));
    }
    Ok(())
}

/// `O(T)` attention: the key/value summaries are built once and reused by
/// every query.
pub fn linear_attention(f: &Matrix, p: &AttentionParams) -> Result<Matrix> {
    Ok(attention_forward(f, p, AttentionKernel::Linear)?.output)
}

/// Reference attention with an explicit `T x T` similarity matrix.
pub fn quadratic_attention_reference(f: &Matrix, p: &AttentionParams) -> Result<Matrix> {
    Ok(attention_forward(f, p, AttentionKernel::Quadratic)?.output)
}

/// Scaled dot-product softmax attention, `softmax(Q K^T / sqrt(d)) V`.
/// Forward only; kept for comparison against the kernelized forms.
pub fn softmax_attention(f: &Matrix, p: &AttentionParams) -> Result<Matrix> {
    check_shapes(f, p)?;
    let (t, d) = f.shape();
    let q = f.matmul(&p.w_query);
    let k = f.matmul(&p.w_key);
    let v = f.matmul(&p.w_value);
    let mut scores = Matrix::zeros(t, t);
    gemm_nt(t, d, t, q.as_slice(), k.as_slice(), scores.as_mut_slice(), 0.0);
    let scale = 1.0 / (d as f64).sqrt();
    let weights = softmax_rows(&scores.map(|s| s * scale));
    Ok(weights.matmul(&v))
}

pub fn attention_forward(f: &Matrix, p: &AttentionParams, kernel: AttentionKernel) -> Result<AttentionTrace> {
    check_shapes(f, p)?;
    let (t, d) = f.shape();
    let query = f.matmul(&p.w_query);
    let key = f.matmul(&p.w_key);
    let value = f.matmul(&p.w_value);
    let phi_q = feature_map(&query);
    let phi_k = feature_map(&key);
    let mut output = Matrix::zeros(t, d);
    let mut denom = vec![0.0; t];
    let (kv, weights) = match kernel {
        AttentionKernel::Linear => {
            // kv = phi_k^T V (d x d), z = column sums of phi_k.
            let mut kv = Matrix::zeros(d, d);
            gemm_tn(t, d, d, phi_k.as_slice(), value.as_slice(), kv.as_mut_slice(), 0.0);
            let mut z = vec![0.0; d];
            for r in 0..t {
                for (zi, v) in z.iter_mut().zip(phi_k.row(r)) {
                    *zi += v;
                }
            }
            gemm_nn(t, d, d, phi_q.as_slice(), kv.as_slice(), output.as_mut_slice(), 0.0);
            for i in 0..t {
                let den: f64 = phi_q.row(i).iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() + DENOMINATOR_EPS;
                denom[i] = den;
                for o in output.row_mut(i) {
                    *o /= den;
                }
            }
            (Some(kv), None)
        }
        AttentionKernel::Quadratic => {
            let mut sim = Matrix::zeros(t, t);
            gemm_nt(t, d, t, phi_q.as_slice(), phi_k.as_slice(), sim.as_mut_slice(), 0.0);
            for i in 0..t {
                let row = sim.row_mut(i);
                let den = row.iter().sum::<f64>() + DENOMINATOR_EPS;
                denom[i] = den;
                for a in row.iter_mut() {
                    *a /= den;
                }
            }
            gemm_nn(t, t, d, sim.as_slice(), value.as_slice(), output.as_mut_slice(), 0.0);
            (None, Some(sim))
        }
    };
    Ok(AttentionTrace {
        kernel,
        input: f.clone(),
        query,
        key,
        value,
        phi_q,
        phi_k,
        output,
        denom,
        kv,
        weights,
    })
}

/// Accumulate projection gradients into `grad` and return `dL/dF`.
pub fn attention_backward(p: &AttentionParams, trace: &AttentionTrace, d_out: &Matrix, grad: &mut AttentionParams) -> Matrix {
    let (t, d) = trace.input.shape();
    assert_eq!(d_out.shape(), (t, d), "attention gradient shape");
    let mut d_phi_q = Matrix::zeros(t, d);
    let mut d_phi_k = Matrix::zeros(t, d);
    let mut d_value = Matrix::zeros(t, d);

    // g_i . out_i, shared by both kernels through the normalizer.
    let g_dot_out: Vec<f64> = (0..t)
        .map(|i| d_out.row(i).iter().zip(trace.output.row(i)).map(|(a, b)| a * b).sum())
        .collect();

    match trace.kernel {
        AttentionKernel::Linear => {
            let kv = trace.kv.as_ref().expect("linear trace carries kv");
            // num_i = phi_q_i kv, den_i = phi_q_i . z, out_i = num_i / den_i.
            let mut d_num = d_out.clone();
            let mut d_den = vec![0.0; t];
            for i in 0..t {
                let den = trace.denom[i];
                for v in d_num.row_mut(i) {
                    *v /= den;
                }
                d_den[i] = -g_dot_out[i] / den;
            }
            // d_phi_q = d_num kv^T + d_den z^T
            gemm_nt(t, d, d, d_num.as_slice(), kv.as_slice(), d_phi_q.as_mut_slice(), 0.0);
            let mut z = vec![0.0; d];
            for r in 0..t {
                for (zi, v) in z.iter_mut().zip(trace.phi_k.row(r)) {
                    *zi += v;
                }
            }
            for i in 0..t {
                for (g, zc) in d_phi_q.row_mut(i).iter_mut().zip(&z) {
                    *g += d_den[i] * zc;
                }
            }
            // d_kv = phi_q^T d_num, d_z = phi_q^T d_den
            let mut d_kv = Matrix::zeros(d, d);
            gemm_tn(t, d, d, trace.phi_q.as_slice(), d_num.as_slice(), d_kv.as_mut_slice(), 0.0);
            let mut d_z = vec![0.0; d];
            for i in 0..t {
                for (g, q) in d_z.iter_mut().zip(trace.phi_q.row(i)) {
                    *g += d_den[i] * q;
                }
            }
            // kv = phi_k^T V: d_phi_k = V d_kv^T, d_V = phi_k d_kv; plus d_z on every row.
            gemm_nt(t, d, d, trace.value.as_slice(), d_kv.as_slice(), d_phi_k.as_mut_slice(), 0.0);
            for j in 0..t {
                for (g, dz) in d_phi_k.row_mut(j).iter_mut().zip(&d_z) {
                    *g += dz;
                }
            }
            gemm_nn(t, d, d, trace.phi_k.as_slice(), d_kv.as_slice(), d_value.as_mut_slice(), 0.0);
        }
        AttentionKernel::Quadratic => {
            let w = trace.weights.as_ref().expect("quadratic trace carries weights");
            // out = W V with W = A / den (row-wise).
            gemm_tn(t, t, d, w.as_slice(), d_out.as_slice(), d_value.as_mut_slice(), 0.0);
            // dA_ij = (g_i . v_j - g_i . out_i) / den_i
            let mut d_sim = Matrix::zeros(t, t);
            gemm_nt(t, d, t, d_out.as_slice(), trace.value.as_slice(), d_sim.as_mut_slice(), 0.0);
            for i in 0..t {
                let den = trace.denom[i];
                let go = g_dot_out[i];
                for v in d_sim.row_mut(i) {
                    *v = (*v - go) / den;
                }
            }
            gemm_nn(t, t, d, d_sim.as_slice(), trace.phi_k.as_slice(), d_phi_q.as_mut_slice(), 0.0);
            gemm_tn(t, t, d, d_sim.as_slice(), trace.phi_q.as_slice(), d_phi_k.as_mut_slice(), 0.0);
        }
    }

    let d_query = chain_theta(&trace.query, &d_phi_q);
    let d_key = chain_theta(&trace.key, &d_phi_k);
    let f = trace.input.as_slice();
    gemm_tn(t, d, d, f, d_query.as_slice(), grad.w_query.as_mut_slice(), 1.0);
    gemm_tn(t, d, d, f, d_key.as_slice(), grad.w_key.as_mut_slice(), 1.0);
    gemm_tn(t, d, d, f, d_value.as_slice(), grad.w_value.as_mut_slice(), 1.0);

    let mut d_in = Matrix::zeros(t, d);
    gemm_nt(t, d, d, d_query.as_slice(), p.w_query.as_slice(), d_in.as_mut_slice(), 1.0);
    gemm_nt(t, d, d, d_key.as_slice(), p.w_key.as_slice(), d_in.as_mut_slice(), 1.0);
    gemm_nt(t, d, d, d_value.as_slice(), p.w_value.as_slice(), d_in.as_mut_slice(), 1.0);
    d_in
}

fn chain_theta(pre: &Matrix, upstream: &Matrix) -> Matrix {
    let data = pre
        .as_slice()
        .iter()
        .zip(upstream.as_slice())
        .map(|(&x, &g)| g * theta_grad(x))
        .collect();
    Matrix::from_vec(pre.rows(), pre.cols(), data)
}
