//! Dense f64 tensor and the forward kernels the toy models need.
//!
//! Every kernel is a pure function returning a fresh tensor, and every
//! kernel checks its output for NaN/Inf: a non-finite value is an error,
//! never something that silently flows downstream. There is no gradient
//! machinery here.

use crate::error::{Error, Result};

/// Dense n-dimensional array of f64 in row-major order.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking that the shape matches the data length.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Input(format!("zero dimension in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.data[0]
    }

    /// (rows, cols) of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: vec![0, 0],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// (n, c, h, w) of a rank-4 tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: vec![0, 0, 0, 0],
            });
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn checked(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Elementwise and structural kernels
// ---------------------------------------------------------------------------

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape.clone(), data)?.checked("add")
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Tensor::new(a.shape.clone(), data)?.checked("sub")
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape.clone(), data)?.checked("mul")
}

pub fn scale(a: &Tensor, s: f64) -> Result<Tensor> {
    let data = a.data.iter().map(|x| x * s).collect();
    Tensor::new(a.shape.clone(), data)?.checked("scale")
}

pub fn add_scalar(a: &Tensor, s: f64) -> Result<Tensor> {
    let data = a.data.iter().map(|x| x + s).collect();
    Tensor::new(a.shape.clone(), data)?.checked("add_scalar")
}

pub fn sqrt_elem(a: &Tensor) -> Result<Tensor> {
    let data = a.data.iter().map(|x| x.sqrt()).collect();
    Tensor::new(a.shape.clone(), data)?.checked("sqrt")
}

pub fn sum_all(a: &Tensor) -> Result<Tensor> {
    Ok(Tensor::scalar(a.data.iter().sum::<f64>())).and_then(|t| t.checked("sum_all"))
}

/// `x[m×n] + b[n]` broadcast over rows.
pub fn add_bias_row(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2("add_bias_row")?;
    if b.shape != [n] {
        return Err(Error::ShapeMismatch {
            op: "add_bias_row",
            left: x.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut data = x.data.clone();
    for i in 0..m {
        for j in 0..n {
            data[i * n + j] += b.data[j];
        }
    }
    Tensor::new(x.shape.clone(), data)?.checked("add_bias_row")
}

/// `x[N×C×H×W] + b[C]` broadcast over samples and spatial positions.
pub fn add_bias_chan(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("add_bias_chan")?;
    if b.shape != [c] {
        return Err(Error::ShapeMismatch {
            op: "add_bias_chan",
            left: x.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut data = x.data.clone();
    let hw = h * w;
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for k in 0..hw {
                data[base + k] += b.data[ci];
            }
        }
    }
    Tensor::new(x.shape.clone(), data)?.checked("add_bias_chan")
}

pub fn transpose2(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2("transpose")?;
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = x.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], data)
}

/// Columns `[from, to)` of a matrix.
pub fn slice_cols(x: &Tensor, from: usize, to: usize) -> Result<Tensor> {
    let (m, n) = x.dims2("slice_cols")?;
    if from >= to || to > n {
        return Err(Error::Input(format!(
            "slice_cols [{from},{to}) out of range for {n} columns"
        )));
    }
    let w = to - from;
    let mut data = Vec::with_capacity(m * w);
    for i in 0..m {
        data.extend_from_slice(&x.data[i * n + from..i * n + to]);
    }
    Tensor::new(vec![m, w], data)
}

/// Rows `[from, to)` of a matrix.
pub fn slice_rows(x: &Tensor, from: usize, to: usize) -> Result<Tensor> {
    let (m, n) = x.dims2("slice_rows")?;
    if from >= to || to > m {
        return Err(Error::Input(format!(
            "slice_rows [{from},{to}) out of range for {m} rows"
        )));
    }
    Tensor::new(vec![to - from, n], x.data[from * n..to * n].to_vec())
}

/// Stack matrices with equal column counts on top of each other.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Input("concat_rows: empty input".into()));
    }
    let (_, n) = parts[0].dims2("concat_rows")?;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (m, pn) = p.dims2("concat_rows")?;
        if pn != n {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                left: parts[0].shape.clone(),
                right: p.shape.clone(),
            });
        }
        rows += m;
        data.extend_from_slice(&p.data);
    }
    Tensor::new(vec![rows, n], data)
}

/// Stack matrices with equal row counts side by side.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Input("concat_cols: empty input".into()));
    }
    let (m, _) = parts[0].dims2("concat_cols")?;
    let widths: Vec<usize> = parts
        .iter()
        .map(|p| p.dims2("concat_cols").map(|(pm, pn)| if pm == m { pn } else { usize::MAX }))
        .collect::<Result<_>>()?;
    if widths.contains(&usize::MAX) {
        return Err(Error::Input("concat_cols: row count mismatch".into()));
    }
    let total: usize = widths.iter().sum();
    let mut data = vec![0.0; m * total];
    let mut off = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        for i in 0..m {
            data[i * total + off..i * total + off + w]
                .copy_from_slice(&p.data[i * w..(i + 1) * w]);
        }
        off += w;
    }
    Tensor::new(vec![m, total], data)
}

/// Cut a `[C×H×W]` image into non-overlapping `p×p` patches, one row per
/// patch, channels-then-pixels within the row. `H` and `W` must divide by `p`.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    if x.shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            left: x.shape.clone(),
            right: vec![0, 0, 0],
        });
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    if h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!(
            "patchify: patch {p} does not divide {h}x{w}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let mut data = Vec::with_capacity(c * h * w);
    for pi in 0..gh {
        for pj in 0..gw {
            for ci in 0..c {
                for a in 0..p {
                    for b in 0..p {
                        data.push(x.data[ci * h * w + (pi * p + a) * w + (pj * p + b)]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, c * p * p], data)
}

/// Mean over rows: `[m×n] -> [n]`. Token mean for ViT features.
pub fn mean_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2("mean_rows")?;
    let mut out = vec![0.0; n];
    for i in 0..m {
        for j in 0..n {
            out[j] += x.data[i * n + j];
        }
    }
    for v in &mut out {
        *v /= m as f64;
    }
    Tensor::new(vec![n], out)?.checked("mean_rows")
}

/// Global average pool over spatial positions: `[N×C×H×W] -> [N×C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    let hw = (h * w) as f64;
    let mut out = vec![0.0; n * c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            out[ni * c + ci] = x.data[base..base + h * w].iter().sum::<f64>() / hw;
        }
    }
    Tensor::new(vec![n, c], out)?.checked("global_avg_pool")
}

// ---------------------------------------------------------------------------
// Matrix multiply and convolution
// ---------------------------------------------------------------------------

/// Standard matrix product `[m×k]·[k×n] -> [m×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)?.checked("matmul")
}

fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if kernel > padded {
        return Err(Error::Config(format!(
            "conv2d: kernel {kernel} exceeds padded input {padded}"
        )));
    }
    if (padded - kernel) % stride != 0 {
        return Err(Error::ShapeMismatch {
            op: "conv2d (non-integer output size)",
            left: vec![input, kernel],
            right: vec![stride, pad],
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// 2-D cross-correlation `[N×C×H×W] * [O×C×kh×kw] -> [N×O×H'×W']`.
///
/// Explicit loops; `conv2d_im2col` is the fast path and the two must agree.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4("conv2d")?;
    let (o, c2, kh, kw) = w.dims4("conv2d")?;
    if c != c2 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: x.shape.clone(),
            right: w.shape.clone(),
        });
    }
    if stride == 0 {
        return Err(Error::Config("conv2d: stride must be >= 1".into()));
    }
    let oh = conv_out_dim(h, kh, stride, pad)?;
    let ow = conv_out_dim(wd, kw, stride, pad)?;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for a in 0..kh {
                            let y = (i * stride + a) as isize - pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for b in 0..kw {
                                let xcol = (j * stride + b) as isize - pad as isize;
                                if xcol < 0 || xcol >= wd as isize {
                                    continue;
                                }
                                acc += x.data[((ni * c + ci) * h + y as usize) * wd
                                    + xcol as usize]
                                    * w.data[((oi * c2 + ci) * kh + a) * kw + b];
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out)?.checked("conv2d")
}

/// im2col + matmul realization of `conv2d`; same contract, used as the fast
/// path and cross-checked against the loop version in tests.
pub fn conv2d_im2col(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4("conv2d")?;
    let (o, c2, kh, kw) = w.dims4("conv2d")?;
    if c != c2 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: x.shape.clone(),
            right: w.shape.clone(),
        });
    }
    if stride == 0 {
        return Err(Error::Config("conv2d: stride must be >= 1".into()));
    }
    let oh = conv_out_dim(h, kh, stride, pad)?;
    let ow = conv_out_dim(wd, kw, stride, pad)?;
    let patch = c * kh * kw;
    let wmat = w.reshape(vec![o, patch])?;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        // columns: [oh*ow, patch]
        let mut cols = vec![0.0; oh * ow * patch];
        for i in 0..oh {
            for j in 0..ow {
                let row = i * ow + j;
                let mut idx = 0;
                for ci in 0..c {
                    for a in 0..kh {
                        let y = (i * stride + a) as isize - pad as isize;
                        for b in 0..kw {
                            let xcol = (j * stride + b) as isize - pad as isize;
                            let v = if y < 0 || y >= h as isize || xcol < 0 || xcol >= wd as isize
                            {
                                0.0
                            } else {
                                x.data[((ni * c + ci) * h + y as usize) * wd + xcol as usize]
                            };
                            cols[row * patch + idx] = v;
                            idx += 1;
                        }
                    }
                }
            }
        }
        let cols_t = Tensor::new(vec![oh * ow, patch], cols)?;
        let prod = matmul(&cols_t, &transpose2(&wmat)?)?; // [oh*ow, o]
        for row in 0..oh * ow {
            for oi in 0..o {
                out[(ni * o + oi) * oh * ow + row] = prod.data[row * o + oi];
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out)?.checked("conv2d")
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Layer normalization over the last dimension with affine parameters.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if gamma.shape != [d] || beta.shape != [d] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            left: vec![d],
            right: gamma.shape.clone(),
        });
    }
    let rows = x.numel() / d;
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            out[r * d + j] = (row[j] - mean) * inv * gamma.data[j] + beta.data[j];
        }
    }
    Tensor::new(x.shape.clone(), out)?.checked("layer_norm")
}

/// Group normalization over `[N×C×H×W]` with per-channel affine parameters.
pub fn group_norm(
    x: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("group_norm")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!(
            "group_norm: {c} channels not divisible by {groups} groups"
        )));
    }
    if gamma.shape != [c] || beta.shape != [c] {
        return Err(Error::ShapeMismatch {
            op: "group_norm",
            left: vec![c],
            right: gamma.shape.clone(),
        });
    }
    let cg = c / groups;
    let block = cg * h * w;
    let mut out = vec![0.0; x.numel()];
    for ni in 0..n {
        for g in 0..groups {
            let start = (ni * c + g * cg) * h * w;
            let slice = &x.data[start..start + block];
            let mean = slice.iter().sum::<f64>() / block as f64;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / block as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for ci in 0..cg {
                let ch = g * cg + ci;
                for k in 0..h * w {
                    let idx = start + ci * h * w + k;
                    out[idx] = (x.data[idx] - mean) * inv * gamma.data[ch] + beta.data[ch];
                }
            }
        }
    }
    Tensor::new(x.shape.clone(), out)?.checked("group_norm")
}

// ---------------------------------------------------------------------------
// Activations, softmax, entropy
// ---------------------------------------------------------------------------

pub fn relu(x: &Tensor) -> Result<Tensor> {
    let data = x.data.iter().map(|v| v.max(0.0)).collect();
    Tensor::new(x.shape.clone(), data)?.checked("relu")
}

/// tanh-approximated GELU, applied elementwise.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let data = x.data.iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::new(x.shape.clone(), data)?.checked("gelu")
}

pub fn gelu_scalar(v: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * v * (1.0 + (K * (v + 0.044715 * v * v * v)).tanh())
}

/// Numerically stable softmax over the last dimension; rows sum to 1.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let d = x.last_dim();
    let rows = x.numel() / d;
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..d {
            let e = (row[j] - m).exp();
            out[r * d + j] = e;
            sum += e;
        }
        for j in 0..d {
            out[r * d + j] /= sum;
        }
    }
    Tensor::new(x.shape.clone(), out)?.checked("softmax")
}

/// Stable log-softmax over the last dimension.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let d = x.last_dim();
    let rows = x.numel() / d;
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        for j in 0..d {
            out[r * d + j] = row[j] - lse;
        }
    }
    Tensor::new(x.shape.clone(), out)?.checked("log_softmax")
}

/// Shannon entropy (natural log) of each probability row, with `0·log 0 = 0`.
///
/// Rows must sum to 1 within 1e-9.
pub fn entropy(p: &Tensor) -> Result<Tensor> {
    let d = p.last_dim();
    let rows = p.numel() / d;
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let row = &p.data[r * d..(r + 1) * d];
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&v| v < 0.0) {
            return Err(Error::NotNormalized { row: r, sum });
        }
        out[r] = -row
            .iter()
            .map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 })
            .sum::<f64>();
    }
    let mut shape = p.shape()[..p.shape.len() - 1].to_vec();
    if shape.is_empty() {
        shape.push(1);
    }
    Tensor::new(shape, out)?.checked("entropy")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;
    use rand::Rng;

    fn rand_tensor(seed: u64, shape: Vec<usize>) -> Tensor {
        let mut rng = seeded_rng(seed);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!(
                (x - y).abs() <= tol * (1.0 + y.abs()),
                "{x} vs {y} beyond {tol}"
            );
        }
    }

    // -- matmul ---------------------------------------------------------

    #[test]
    fn matmul_identity() {
        let i = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap(), b);
    }

    #[test]
    fn matmul_hand_checked() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_against_triple_loop() {
        for seed in 0..100u64 {
            let a = rand_tensor(seed, vec![5, 7]);
            let b = rand_tensor(seed + 1000, vec![7, 3]);
            let got = matmul(&a, &b).unwrap();
            let mut want = vec![0.0; 15];
            for i in 0..5 {
                for j in 0..3 {
                    let mut s = 0.0;
                    for p in 0..7 {
                        s += a.data()[i * 7 + p] * b.data()[p * 3 + j];
                    }
                    want[i * 3 + j] = s;
                }
            }
            assert_close(&got, &Tensor::new(vec![5, 3], want).unwrap(), 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = rand_tensor(0, vec![2, 3]);
        let b = rand_tensor(1, vec![4, 2]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    // -- conv2d ---------------------------------------------------------

    #[test]
    fn conv2d_all_ones() {
        let x = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let w = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv2d_delta_kernel_is_identity() {
        let x = rand_tensor(3, vec![1, 1, 5, 5]);
        let mut w = Tensor::zeros(vec![1, 1, 3, 3]);
        w.data_mut()[4] = 1.0; // center
        let y = conv2d(&x, &w, 1, 1).unwrap();
        assert_close(&y, &x, 1e-15);
    }

    #[test]
    fn conv2d_matches_im2col() {
        for seed in 0..100u64 {
            let x = rand_tensor(seed, vec![2, 3, 8, 8]);
            let w = rand_tensor(seed + 5000, vec![4, 3, 3, 3]);
            let slow = conv2d(&x, &w, 1, 1).unwrap();
            let fast = conv2d_im2col(&x, &w, 1, 1).unwrap();
            assert_close(&fast, &slow, 1e-10);
            let slow2 = conv2d(&x, &w, 2, 1).unwrap();
            let fast2 = conv2d_im2col(&x, &w, 2, 1).unwrap();
            assert_close(&fast2, &slow2, 1e-10);
        }
    }

    #[test]
    fn conv2d_non_integer_output_is_error() {
        let x = Tensor::zeros(vec![1, 1, 5, 5]);
        let w = Tensor::zeros(vec![1, 1, 2, 2]);
        assert!(conv2d(&x, &w, 2, 0).is_err());
    }

    // -- layer_norm -----------------------------------------------------

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let x = Tensor::full(vec![4], 3.7);
        let g = Tensor::full(vec![4], 1.0);
        let b = Tensor::zeros(vec![4]);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        for v in y.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_point() {
        let x = Tensor::new(vec![2], vec![1.0, 3.0]).unwrap();
        let g = Tensor::full(vec![2], 1.0);
        let b = Tensor::zeros(vec![2]);
        let y = layer_norm(&x, &g, &b, 0.0).unwrap();
        assert_close(&y, &Tensor::new(vec![2], vec![-1.0, 1.0]).unwrap(), 1e-12);
    }

    #[test]
    fn layer_norm_against_scalar_loop() {
        for seed in 0..100u64 {
            let x = rand_tensor(seed, vec![4, 16]);
            let g = rand_tensor(seed + 1, vec![16]);
            let b = rand_tensor(seed + 2, vec![16]);
            let eps = 1e-5;
            let y = layer_norm(&x, &g, &b, eps).unwrap();
            for r in 0..4 {
                let row: Vec<f64> = x.data()[r * 16..(r + 1) * 16].to_vec();
                let mean = row.iter().sum::<f64>() / 16.0;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
                for j in 0..16 {
                    let want =
                        (row[j] - mean) / (var + eps).sqrt() * g.data()[j] + b.data()[j];
                    let got = y.data()[r * 16 + j];
                    assert!((want - got).abs() <= 1e-12 * (1.0 + want.abs()));
                }
            }
        }
    }

    #[test]
    fn layer_norm_dim_mismatch() {
        let x = rand_tensor(0, vec![2, 4]);
        let g = Tensor::full(vec![3], 1.0);
        let b = Tensor::zeros(vec![3]);
        assert!(layer_norm(&x, &g, &b, 1e-5).is_err());
    }

    #[test]
    fn norms_shift_invariant() {
        for seed in 0..20u64 {
            let x = rand_tensor(seed, vec![3, 8]);
            let shifted = add_scalar(&x, 17.25).unwrap();
            let g = Tensor::full(vec![8], 1.0);
            let b = Tensor::zeros(vec![8]);
            let y0 = layer_norm(&x, &g, &b, 1e-5).unwrap();
            let y1 = layer_norm(&shifted, &g, &b, 1e-5).unwrap();
            assert_close(&y1, &y0, 1e-9);

            let x4 = rand_tensor(seed + 400, vec![2, 4, 3, 3]);
            let s4 = add_scalar(&x4, -6.5).unwrap();
            let g4 = Tensor::full(vec![4], 1.0);
            let b4 = Tensor::zeros(vec![4]);
            let z0 = group_norm(&x4, 2, &g4, &b4, 1e-5).unwrap();
            let z1 = group_norm(&s4, 2, &g4, &b4, 1e-5).unwrap();
            assert_close(&z1, &z0, 1e-9);
        }
    }

    // -- group_norm -----------------------------------------------------

    #[test]
    fn group_norm_groups_eq_channels_is_instance_norm() {
        for seed in 0..50u64 {
            let x = rand_tensor(seed, vec![2, 4, 3, 3]);
            let g = rand_tensor(seed + 1, vec![4]);
            let b = rand_tensor(seed + 2, vec![4]);
            let eps = 1e-5;
            let y = group_norm(&x, 4, &g, &b, eps).unwrap();
            // per-channel oracle
            for ni in 0..2 {
                for c in 0..4 {
                    let base = (ni * 4 + c) * 9;
                    let ch: Vec<f64> = x.data()[base..base + 9].to_vec();
                    let mean = ch.iter().sum::<f64>() / 9.0;
                    let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
                    for k in 0..9 {
                        let want =
                            (ch[k] - mean) / (var + eps).sqrt() * g.data()[c] + b.data()[c];
                        let got = y.data()[base + k];
                        assert!((want - got).abs() <= 1e-12 * (1.0 + want.abs()));
                    }
                }
            }
        }
    }

    #[test]
    fn group_norm_constant_input_gives_beta() {
        let x = Tensor::full(vec![1, 4, 2, 2], 2.5);
        let g = Tensor::full(vec![4], 1.0);
        let b = Tensor::full(vec![4], 5.0);
        let y = group_norm(&x, 2, &g, &b, 1e-5).unwrap();
        for v in y.data() {
            assert!((v - 5.0).abs() < 1e-9);
        }
    }

    #[test]
    fn group_norm_single_group_matches_flat_layer_norm() {
        for seed in 0..50u64 {
            let x = rand_tensor(seed, vec![2, 4, 3, 3]);
            let g1 = Tensor::full(vec![4], 1.0);
            let b1 = Tensor::zeros(vec![4]);
            let eps = 1e-5;
            let y = group_norm(&x, 1, &g1, &b1, eps).unwrap();
            // flatten each sample to one row and layer_norm it
            let flat = x.reshape(vec![2, 36]).unwrap();
            let gf = Tensor::full(vec![36], 1.0);
            let bf = Tensor::zeros(vec![36]);
            let want = layer_norm(&flat, &gf, &bf, eps)
                .unwrap()
                .reshape(vec![2, 4, 3, 3])
                .unwrap();
            assert_close(&y, &want, 1e-12);
        }
    }

    #[test]
    fn group_norm_bad_group_count() {
        let x = Tensor::zeros(vec![1, 5, 2, 2]);
        let g = Tensor::full(vec![5], 1.0);
        let b = Tensor::zeros(vec![5]);
        assert!(matches!(
            group_norm(&x, 2, &g, &b, 1e-5),
            Err(Error::Config(_))
        ));
    }

    // -- softmax / entropy ----------------------------------------------

    #[test]
    fn softmax_symmetric_pair() {
        let y = softmax(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()).unwrap();
        assert_close(&y, &Tensor::new(vec![2], vec![0.5, 0.5]).unwrap(), 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        for seed in 0..100u64 {
            let x = rand_tensor(seed, vec![5, 9]);
            let y = softmax(&scale(&x, 10.0).unwrap()).unwrap();
            for r in 0..5 {
                let s: f64 = y.data()[r * 9..(r + 1) * 9].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn entropy_one_hot_is_zero() {
        let p = Tensor::new(vec![1, 4], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(entropy(&p).unwrap().data(), &[0.0]);
    }

    #[test]
    fn entropy_uniform_is_ln_c() {
        let p = Tensor::full(vec![1, 4], 0.25);
        let h = entropy(&p).unwrap().data()[0];
        assert!((h - 4.0_f64.ln()).abs() < 1e-12);
        assert!((h - 1.3862943611198906).abs() < 1e-12);
    }

    #[test]
    fn entropy_bounds_on_random_distributions() {
        for seed in 0..100u64 {
            let logits = rand_tensor(seed, vec![3, 6]);
            let p = softmax(&logits).unwrap();
            let h = entropy(&p).unwrap();
            for &v in h.data() {
                assert!(v >= -1e-12 && v <= 6.0_f64.ln() + 1e-12);
            }
        }
    }

    #[test]
    fn entropy_rejects_unnormalized() {
        let p = Tensor::new(vec![1, 2], vec![0.7, 0.7]).unwrap();
        assert!(matches!(entropy(&p), Err(Error::NotNormalized { .. })));
    }

    // -- activations / pooling against scalar loops ----------------------

    #[test]
    fn activations_match_scalar_loop() {
        for seed in 0..100u64 {
            let x = rand_tensor(seed, vec![4, 5]);
            let r = relu(&x).unwrap();
            let g = gelu(&x).unwrap();
            for (i, &v) in x.data().iter().enumerate() {
                assert_eq!(r.data()[i], if v > 0.0 { v } else { 0.0 });
                let k: f64 = 0.7978845608028654;
                let want = 0.5 * v * (1.0 + (k * (v + 0.044715 * v * v * v)).tanh());
                assert!((g.data()[i] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pooling_matches_scalar_loop() {
        for seed in 0..100u64 {
            let x = rand_tensor(seed, vec![2, 3, 4, 4]);
            let y = global_avg_pool(&x).unwrap();
            for n in 0..2 {
                for c in 0..3 {
                    let base = (n * 3 + c) * 16;
                    let want: f64 = x.data()[base..base + 16].iter().sum::<f64>() / 16.0;
                    assert!((y.data()[n * 3 + c] - want).abs() < 1e-12);
                }
            }
            let m = rand_tensor(seed + 7, vec![6, 5]);
            let tm = mean_rows(&m).unwrap();
            for j in 0..5 {
                let want: f64 = (0..6).map(|i| m.data()[i * 5 + j]).sum::<f64>() / 6.0;
                assert!((tm.data()[j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_is_surfaced() {
        let a = Tensor::new(vec![1], vec![1e308]).unwrap();
        let b = Tensor::new(vec![1], vec![1e308]).unwrap();
        assert!(matches!(add(&a, &b), Err(Error::NonFinite { .. })));
        let neg = Tensor::new(vec![1], vec![-1.0]).unwrap();
        assert!(matches!(sqrt_elem(&neg), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn structural_ops_roundtrip() {
        let x = rand_tensor(11, vec![4, 6]);
        let left = slice_cols(&x, 0, 3).unwrap();
        let right = slice_cols(&x, 3, 6).unwrap();
        let back = concat_cols(&[&left, &right]).unwrap();
        assert_eq!(back, x);

        let top = slice_rows(&x, 0, 1).unwrap();
        let rest = slice_rows(&x, 1, 4).unwrap();
        let back = concat_rows(&[&top, &rest]).unwrap();
        assert_eq!(back, x);

        let t = transpose2(&transpose2(&x).unwrap()).unwrap();
        assert_eq!(t, x);
    }

    #[test]
    fn patchify_layout() {
        // 1 channel 4x4, patch 2: four patches reading row-major within patch
        let x = Tensor::new(
            vec![1, 4, 4],
            (0..16).map(|v| v as f64).collect(),
        )
        .unwrap();
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p.data()[12..16], &[10.0, 11.0, 14.0, 15.0]);
    }
}
