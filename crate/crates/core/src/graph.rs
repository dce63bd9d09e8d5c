//! Operation abstraction over which the toy models are written once.
//!
//! `Ops` is the small vocabulary of array operations the models and the
//! adaptation objective are composed from. The forward-only engine
//! instantiates it with [`Eager`] (plain tensors in, plain tensors out).
//! A reverse-mode implementation lives in a separate crate and implements
//! the same trait, which guarantees its gradients refer to exactly the
//! computation the forward-only path runs.

use crate::error::Result;
use crate::tensor::{self, Tensor};

pub trait Ops {
    type V: Clone;

    /// A differentiable leaf (named model parameter).
    fn leaf(&mut self, name: &str, t: &Tensor) -> Self::V;
    /// A non-differentiable input (data, precomputed statistics).
    fn constant(&mut self, t: &Tensor) -> Self::V;
    /// Materialize the current value.
    fn value(&self, v: &Self::V) -> Tensor;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn conv2d(&mut self, x: &Self::V, w: &Self::V, stride: usize, pad: usize)
        -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: &Self::V, s: f64) -> Result<Self::V>;
    fn add_scalar(&mut self, a: &Self::V, s: f64) -> Result<Self::V>;
    fn add_bias_row(&mut self, x: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add_bias_chan(&mut self, x: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn layer_norm(
        &mut self,
        x: &Self::V,
        gamma: &Self::V,
        beta: &Self::V,
        eps: f64,
    ) -> Result<Self::V>;
    fn group_norm(
        &mut self,
        x: &Self::V,
        groups: usize,
        gamma: &Self::V,
        beta: &Self::V,
        eps: f64,
    ) -> Result<Self::V>;
    fn relu(&mut self, x: &Self::V) -> Result<Self::V>;
    fn gelu(&mut self, x: &Self::V) -> Result<Self::V>;
    fn softmax(&mut self, x: &Self::V) -> Result<Self::V>;
    fn log_softmax(&mut self, x: &Self::V) -> Result<Self::V>;
    fn transpose(&mut self, x: &Self::V) -> Result<Self::V>;
    fn reshape(&mut self, x: &Self::V, shape: Vec<usize>) -> Result<Self::V>;
    fn slice_cols(&mut self, x: &Self::V, from: usize, to: usize) -> Result<Self::V>;
    fn concat_cols(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn concat_rows(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn slice_rows(&mut self, x: &Self::V, from: usize, to: usize) -> Result<Self::V>;
    fn patchify(&mut self, x: &Self::V, p: usize) -> Result<Self::V>;
    fn mean_rows(&mut self, x: &Self::V) -> Result<Self::V>;
    fn global_avg_pool(&mut self, x: &Self::V) -> Result<Self::V>;
    fn sum_all(&mut self, x: &Self::V) -> Result<Self::V>;
    fn sqrt(&mut self, x: &Self::V) -> Result<Self::V>;
}

/// Plain-tensor instantiation: each op calls the corresponding kernel.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Ops for Eager {
    type V = Tensor;

    fn leaf(&mut self, _name: &str, t: &Tensor) -> Tensor {
        t.clone()
    }
    fn constant(&mut self, t: &Tensor) -> Tensor {
        t.clone()
    }
    fn value(&self, v: &Tensor) -> Tensor {
        v.clone()
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::matmul(a, b)
    }
    fn conv2d(&mut self, x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        tensor::conv2d(x, w, stride, pad)
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::add(a, b)
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::sub(a, b)
    }
    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::mul(a, b)
    }
    fn scale(&mut self, a: &Tensor, s: f64) -> Result<Tensor> {
        tensor::scale(a, s)
    }
    fn add_scalar(&mut self, a: &Tensor, s: f64) -> Result<Tensor> {
        tensor::add_scalar(a, s)
    }
    fn add_bias_row(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::add_bias_row(x, b)
    }
    fn add_bias_chan(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::add_bias_chan(x, b)
    }
    fn layer_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        tensor::layer_norm(x, gamma, beta, eps)
    }
    fn group_norm(
        &mut self,
        x: &Tensor,
        groups: usize,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        tensor::group_norm(x, groups, gamma, beta, eps)
    }
    fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        tensor::relu(x)
    }
    fn gelu(&mut self, x: &Tensor) -> Result<Tensor> {
        tensor::gelu(x)
    }
    fn softmax(&mut self, x: &Tensor) -> Result<Tensor> {
        tensor::softmax(x)
    }
    fn log_softmax(&mut self, x: &Tensor) -> Result<Tensor> {
        tensor::log_softmax(x)
    }
    fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        tensor::transpose2(x)
    }
    fn reshape(&mut self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        x.reshape(shape)
    }
    fn slice_cols(&mut self, x: &Tensor, from: usize, to: usize) -> Result<Tensor> {
        tensor::slice_cols(x, from, to)
    }
    fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        tensor::concat_cols(&refs)
    }
    fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        tensor::concat_rows(&refs)
    }
    fn slice_rows(&mut self, x: &Tensor, from: usize, to: usize) -> Result<Tensor> {
        tensor::slice_rows(x, from, to)
    }
    fn patchify(&mut self, x: &Tensor, p: usize) -> Result<Tensor> {
        tensor::patchify(x, p)
    }
    fn mean_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        tensor::mean_rows(x)
    }
    fn global_avg_pool(&mut self, x: &Tensor) -> Result<Tensor> {
        tensor::global_avg_pool(x)
    }
    fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        tensor::sum_all(x)
    }
    fn sqrt(&mut self, x: &Tensor) -> Result<Tensor> {
        tensor::sqrt_elem(x)
    }
}

/// Weights of one multi-head self-attention block, already lifted into the
/// op space.
pub struct AttentionWeights<V> {
    pub wq: V,
    pub bq: V,
    pub wk: V,
    pub bk: V,
    pub wv: V,
    pub bv: V,
    pub wo: V,
    pub bo: V,
}

/// Multi-head self-attention over one token matrix `[M×d]`.
///
/// `d` must divide by `heads`; scaling is `1/sqrt(d/heads)`.
pub fn multi_head_attention<O: Ops>(
    ops: &mut O,
    x: &O::V,
    w: &AttentionWeights<O::V>,
    heads: usize,
    d: usize,
) -> Result<O::V> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q0 = ops.matmul(x, &w.wq)?;
    let q = ops.add_bias_row(&q0, &w.bq)?;
    let k0 = ops.matmul(x, &w.wk)?;
    let k = ops.add_bias_row(&k0, &w.bk)?;
    let v0 = ops.matmul(x, &w.wv)?;
    let v = ops.add_bias_row(&v0, &w.bv)?;
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let qh = ops.slice_cols(&q, a, b)?;
        let kh = ops.slice_cols(&k, a, b)?;
        let vh = ops.slice_cols(&v, a, b)?;
        let kt = ops.transpose(&kh)?;
        let raw = ops.matmul(&qh, &kt)?;
        let scores = ops.scale(&raw, scale)?;
        let attn = ops.softmax(&scores)?;
        head_outputs.push(ops.matmul(&attn, &vh)?);
    }
    let merged = ops.concat_cols(&head_outputs)?;
    let proj = ops.matmul(&merged, &w.wo)?;
    ops.add_bias_row(&proj, &w.bo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;
    use rand::Rng;

    fn rand_tensor(seed: u64, shape: Vec<usize>) -> Tensor {
        let mut rng = seeded_rng(seed);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Scalar-loop attention oracle: no matmul helpers, just index math.
    fn attention_oracle(
        x: &Tensor,
        w: &AttentionWeights<Tensor>,
        heads: usize,
        d: usize,
    ) -> Vec<f64> {
        let m = x.shape()[0];
        let dh = d / heads;
        let lin = |inp: &[f64], wt: &Tensor, bias: &Tensor| -> Vec<f64> {
            let mut out = vec![0.0; m * d];
            for i in 0..m {
                for j in 0..d {
                    let mut s = bias.data()[j];
                    for p in 0..d {
                        s += inp[i * d + p] * wt.data()[p * d + j];
                    }
                    out[i * d + j] = s;
                }
            }
            out
        };
        let q = lin(x.data(), &w.wq, &w.bq);
        let k = lin(x.data(), &w.wk, &w.bk);
        let v = lin(x.data(), &w.wv, &w.bv);
        let mut merged = vec![0.0; m * d];
        for h in 0..heads {
            for i in 0..m {
                let mut scores = vec![0.0; m];
                for j in 0..m {
                    let mut s = 0.0;
                    for p in 0..dh {
                        s += q[i * d + h * dh + p] * k[j * d + h * dh + p];
                    }
                    scores[j] = s / (dh as f64).sqrt();
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for p in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..m {
                        acc += exps[j] / denom * v[j * d + h * dh + p];
                    }
                    merged[i * d + h * dh + p] = acc;
                }
            }
        }
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            for j in 0..d {
                let mut s = w.bo.data()[j];
                for p in 0..d {
                    s += merged[i * d + p] * w.wo.data()[p * d + j];
                }
                out[i * d + j] = s;
            }
        }
        out
    }

    #[test]
    fn attention_matches_scalar_oracle() {
        let (m, d, heads) = (5, 8, 2);
        for seed in 0..100u64 {
            let x = rand_tensor(seed, vec![m, d]);
            let w = AttentionWeights {
                wq: rand_tensor(seed + 10, vec![d, d]),
                bq: rand_tensor(seed + 11, vec![d]),
                wk: rand_tensor(seed + 12, vec![d, d]),
                bk: rand_tensor(seed + 13, vec![d]),
                wv: rand_tensor(seed + 14, vec![d, d]),
                bv: rand_tensor(seed + 15, vec![d]),
                wo: rand_tensor(seed + 16, vec![d, d]),
                bo: rand_tensor(seed + 17, vec![d]),
            };
            let got = multi_head_attention(&mut Eager, &x, &w, heads, d).unwrap();
            let want = attention_oracle(&x, &w, heads, d);
            for (g, e) in got.data().iter().zip(&want) {
                assert!((g - e).abs() <= 1e-10 * (1.0 + e.abs()), "{g} vs {e}");
            }
        }
    }
}
