//! Dense row-major f32 tensors and the forward/backward primitives the
//! encoder is built from: GEMM, softmax, GELU, layer normalization and the
//! row-wise KL divergence used by distillation.
//!
//! Everything here is pure and single-threaded; reduction order per output
//! element is fixed, so repeated runs on the same inputs are bit-identical.

use crate::error::{Error, Result};
use rand::Rng;

/// Dense 2-D/3-D numeric array; row-major f32 storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    /// Samples from N(0, std^2) with the caller's RNG.
    pub fn randn(shape: &[usize], std: f32, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| gaussian(rng) * std).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged rows".to_string()));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Ok(Self { shape: vec![r, c], data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when interpreted as a matrix (first dimension).
    pub fn rows(&self) -> usize {
        *self.shape.first().unwrap_or(&0)
    }

    /// Row length when interpreted as a matrix (product of trailing dims).
    pub fn cols(&self) -> usize {
        if self.shape.len() < 2 {
            0
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f32) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// self += c * other
    pub fn add_scaled(&mut self, other: &Tensor, c: f32) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if !self.is_matrix() {
            return Err(Error::shape("transpose expects a 2-D tensor".to_string()));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: vec![c, r], data: out })
    }

    /// Mean over rows; [r x c] -> [c].
    pub fn mean_rows(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0f32; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / r as f32;
        for o in out.iter_mut() {
            *o *= inv;
        }
        Tensor { shape: vec![c], data: out }
    }

    /// Column sums; [r x c] -> [c]. Used for bias gradients.
    pub fn col_sum(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0f32; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        Tensor { shape: vec![c], data: out }
    }

    /// Column slice copy [r x c] -> [r x (hi-lo)].
    pub fn col_slice(&self, lo: usize, hi: usize) -> Tensor {
        let r = self.rows();
        let mut data = Vec::with_capacity(r * (hi - lo));
        for i in 0..r {
            data.extend_from_slice(&self.row(i)[lo..hi]);
        }
        Tensor { shape: vec![r, hi - lo], data }
    }

    /// Writes `block` into columns [lo, lo+block.cols()) of self.
    pub fn set_col_slice(&mut self, lo: usize, block: &Tensor) {
        let bc = block.cols();
        for i in 0..block.rows() {
            let dst = self.row_mut(i);
            dst[lo..lo + bc].copy_from_slice(block.row(i));
        }
    }

    pub fn rms(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        let s: f64 = self.data.iter().map(|&v| (v as f64) * (v as f64)).sum();
        (s / self.data.len() as f64).sqrt() as f32
    }
}

// Box-Muller; two uniform draws per sample keeps the stream deterministic
// for a seeded RNG without rand_distr.
fn gaussian(rng: &mut impl Rng) -> f32 {
    let u1: f64 = loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.random();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

/// C = A[m x k] * B[k x n], f32 accumulation, fixed reduction order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.is_matrix() || !b.is_matrix() {
        return Err(Error::shape("matmul expects 2-D tensors".to_string()));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (kb, n) = (b.shape[0], b.shape[1]);
    if k != kb {
        return Err(Error::shape(format!("inner dims {} vs {}", k, kb)));
    }
    // Transposing B makes both operands unit-stride in the dot loop.
    let bt = b.transpose()?;
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot(arow, bt.row(j));
        }
    }
    Tensor::new(vec![m, n], out)
}

/// y = x * W^T + b with W stored [out x in] (one row per output feature).
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (r, c) = (x.rows(), x.cols());
    let (out_dim, in_dim) = (w.rows(), w.cols());
    if c != in_dim || b.len() != out_dim {
        return Err(Error::shape(format!(
            "linear: x[{}x{}], w[{}x{}], b[{}]",
            r,
            c,
            out_dim,
            in_dim,
            b.len()
        )));
    }
    let mut out = vec![0.0f32; r * out_dim];
    for i in 0..r {
        let xrow = x.row(i);
        let orow = &mut out[i * out_dim..(i + 1) * out_dim];
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot(xrow, w.row(j)) + b.data[j];
        }
    }
    Tensor::new(vec![r, out_dim], out)
}

/// Gradients of `linear`: (dx, dw, db) from upstream dy.
pub fn linear_backward(dy: &Tensor, x: &Tensor, w: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    // dx = dy * W ; dW = dy^T * x ; db = column sums of dy
    let dx = matmul(dy, w)?;
    let dw = matmul(&dy.transpose()?, x)?;
    let db = dy.col_sum();
    Ok((dx, dw, db))
}

/// dA = dC * B^T and dB = A^T * dC for C = A*B.
pub fn matmul_backward(dc: &Tensor, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let da = matmul(dc, &b.transpose()?)?;
    let db = matmul(&a.transpose()?, dc)?;
    Ok((da, db))
}

// Four partial sums, combined in a fixed order: deterministic and fast
// enough without reaching for intrinsics.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0f32;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        let row = x.row(i);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let orow = &mut out[i * c..(i + 1) * c];
        let mut sum = 0.0f32;
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
    Tensor { shape: x.shape.clone(), data: out }
}

/// dx for y = softmax_rows(x): dx = y .* (dy - rowsum(dy .* y)).
pub fn softmax_rows_backward(dy: &Tensor, y: &Tensor) -> Tensor {
    let (r, c) = (y.rows(), y.cols());
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        let yrow = y.row(i);
        let drow = dy.row(i);
        let s: f32 = yrow.iter().zip(drow).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &dv) in out[i * c..(i + 1) * c].iter_mut().zip(yrow).zip(drow) {
            *o = yv * (dv - s);
        }
    }
    Tensor { shape: y.shape.clone(), data: out }
}

/// Exact-erf GELU: x * Phi(x). erf evaluated in f64.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| {
        let v64 = v as f64;
        (v64 * 0.5 * (1.0 + libm::erf(v64 / std::f64::consts::SQRT_2))) as f32
    })
}

/// Analytic GELU derivative: Phi(x) + x * phi(x).
pub fn gelu_backward(dy: &Tensor, x: &Tensor) -> Tensor {
    let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let mut out = dy.clone();
    for (o, &v) in out.data.iter_mut().zip(&x.data) {
        let v64 = v as f64;
        let phi_cdf = 0.5 * (1.0 + libm::erf(v64 / std::f64::consts::SQRT_2));
        let phi_pdf = inv_sqrt_2pi * (-0.5 * v64 * v64).exp();
        *o *= (phi_cdf + v64 * phi_pdf) as f32;
    }
    out
}

/// Per-row layer normalization followed by the gamma/beta affine map.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let (r, c) = (x.rows(), x.cols());
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!(
            "layernorm: row width {} vs gamma {} / beta {}",
            c,
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        let row = x.row(i);
        let (mean, var) = mean_var(row);
        let inv_std = 1.0 / (var + eps).sqrt();
        for (j, (o, &v)) in out[i * c..(i + 1) * c].iter_mut().zip(row).enumerate() {
            *o = gamma.data[j] * ((v - mean) * inv_std) + beta.data[j];
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Gradients of `layernorm`: (dx, dgamma, dbeta).
pub fn layernorm_backward(
    dy: &Tensor,
    x: &Tensor,
    gamma: &Tensor,
    eps: f32,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (r, c) = (x.rows(), x.cols());
    let mut dx = vec![0.0f32; r * c];
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    let inv_n = 1.0 / c as f32;
    for i in 0..r {
        let xrow = x.row(i);
        let drow = dy.row(i);
        let (mean, var) = mean_var(xrow);
        let inv_std = 1.0 / (var + eps).sqrt();

        // dxhat, plus the two row reductions the LN Jacobian needs.
        let mut sum_dxhat = 0.0f32;
        let mut sum_dxhat_xhat = 0.0f32;
        for j in 0..c {
            let xhat = (xrow[j] - mean) * inv_std;
            let dxhat = drow[j] * gamma.data[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgamma[j] += drow[j] * xhat;
            dbeta[j] += drow[j];
        }
        for j in 0..c {
            let xhat = (xrow[j] - mean) * inv_std;
            let dxhat = drow[j] * gamma.data[j];
            dx[i * c + j] = inv_std * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
        }
    }
    Ok((
        Tensor::new(x.shape.clone(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

fn mean_var(row: &[f32]) -> (f32, f32) {
    let n = row.len() as f32;
    let mean = row.iter().sum::<f32>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n;
    (mean, var)
}

const KL_Q_FLOOR: f32 = 1e-12;

/// Mean over rows of sum_i p*ln(p/q). p=0 terms contribute 0; q is clamped
/// below at 1e-12. Errors if either input is not row-stochastic (1e-5).
pub fn kl_divergence_rows(p: &Tensor, q: &Tensor) -> Result<f32> {
    if p.shape() != q.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", p.shape(), q.shape())));
    }
    check_row_stochastic(p, "p")?;
    check_row_stochastic(q, "q")?;
    let (r, c) = (p.rows(), p.cols());
    let mut total = 0.0f64;
    for i in 0..r {
        let prow = p.row(i);
        let qrow = q.row(i);
        let mut row_kl = 0.0f64;
        for j in 0..c {
            let pv = prow[j] as f64;
            if pv > 0.0 {
                let qv = qrow[j].max(KL_Q_FLOOR) as f64;
                row_kl += pv * (pv / qv).ln();
            }
        }
        total += row_kl;
    }
    Ok((total / r as f64) as f32)
}

/// Gradient of `kl_divergence_rows` with respect to p:
/// (ln(p/q) + 1) / rows, with both arguments floored at 1e-12.
pub fn kl_divergence_rows_grad_p(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    if p.shape() != q.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", p.shape(), q.shape())));
    }
    let r = p.rows() as f32;
    let data = p
        .data
        .iter()
        .zip(&q.data)
        .map(|(&pv, &qv)| {
            let pc = pv.max(KL_Q_FLOOR);
            let qc = qv.max(KL_Q_FLOOR);
            ((pc / qc).ln() + 1.0) / r
        })
        .collect();
    Tensor::new(p.shape.clone(), data)
}

fn check_row_stochastic(t: &Tensor, name: &str) -> Result<()> {
    for i in 0..t.rows() {
        let s: f32 = t.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-5 {
            return Err(Error::contract(format!(
                "{} row {} sums to {}, expected 1 within 1e-5",
                name, i, s
            )));
        }
    }
    Ok(())
}
