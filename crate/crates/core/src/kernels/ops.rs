use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Lower clamp applied to the target probability before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// A probability distribution: non-negative entries summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("probability vector must be non-empty"));
        }
        if entries
            .iter()
            .any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0)
        {
            return Err(Error::invalid("probability entries must lie in [0, 1]"));
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self(entries))
    }

    /// One-hot distribution at `index`.
    pub fn one_hot(len: usize, index: usize) -> Result<Self> {
        if index >= len {
            return Err(Error::invalid(format!("index {index} out of range {len}")));
        }
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        Ok(Self(v))
    }

    pub fn uniform(len: usize) -> Result<Self> {
        Self::new(vec![1.0 / len as f64; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Lowest-index argmax.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Result<ProbVector> {
    if v.is_empty() {
        return Err(Error::invalid("softmax of empty vector"));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("non-finite softmax input at {i}")));
    }
    Ok(ProbVector(softmax_unchecked(v)))
}

pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    out
}

/// Row-wise softmax of a matrix.
pub(crate) fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let s = softmax_unchecked(m.row(r));
        out.row_mut(r).copy_from_slice(&s);
    }
    out
}

/// Vector-Jacobian product of softmax: `y * (dy - <dy, y>)`.
pub(crate) fn softmax_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let inner = dot(y, dy);
    y.iter().zip(dy).map(|(p, g)| p * (g - inner)).collect()
}

pub(crate) fn softmax_rows_backward(y: &Matrix, dy: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let g = softmax_backward(y.row(r), dy.row(r));
        out.row_mut(r).copy_from_slice(&g);
    }
    out
}

/// `x^T W (+ bias)`.
pub fn linear(x: &[f64], w: &Matrix, bias: Option<&[f64]>) -> Result<Vec<f64>> {
    if x.len() != w.rows() {
        return Err(Error::shape("linear", w.rows(), x.len()));
    }
    if let Some(b) = bias {
        if b.len() != w.cols() {
            return Err(Error::shape("linear bias", w.cols(), b.len()));
        }
    }
    let mut out = Matrix::row_vector(x).mm(w).into_data();
    if let Some(b) = bias {
        out.iter_mut().zip(b).for_each(|(o, b)| *o += b);
    }
    Ok(out)
}

/// `-ln p[label]` with `p[label]` clamped to [`PROB_FLOOR`].
pub fn cross_entropy(p: &ProbVector, label: usize) -> Result<f64> {
    let v = p
        .as_slice()
        .get(label)
        .ok_or_else(|| Error::invalid(format!("label {label} out of range {}", p.len())))?;
    Ok(-v.max(PROB_FLOOR).ln())
}

/// Cross-entropy on logits plus its gradient with respect to the logits.
pub(crate) fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let p = softmax_unchecked(logits);
    let loss = -p[label].max(PROB_FLOOR).ln();
    let mut grad = p.clone();
    grad[label] -= 1.0;
    (loss, grad, p)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044_715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Per-row standardization followed by `gain * xhat + offset`.
/// Returns the output and the normalized rows plus inverse std for the backward pass.
pub(crate) fn layer_norm(x: &Matrix, gain: &[f64], offset: &[f64]) -> (Matrix, Matrix, Vec<f64>) {
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat.set(r, j, h);
            out.set(r, j, gain[j] * h + offset[j]);
        }
    }
    (out, xhat, inv_std)
}

/// Returns `dx` and accumulates into `dgain`, `doffset`.
pub(crate) fn layer_norm_backward(
    xhat: &Matrix,
    inv_std: &[f64],
    gain: &[f64],
    dy: &Matrix,
    dgain: &mut [f64],
    doffset: &mut [f64],
) -> Matrix {
    let d = xhat.cols();
    let mut dx = Matrix::zeros(xhat.rows(), d);
    for r in 0..xhat.rows() {
        let xh = xhat.row(r);
        let g = dy.row(r);
        let mut dxhat = vec![0.0; d];
        for j in 0..d {
            dgain[j] += g[j] * xh[j];
            doffset[j] += g[j];
            dxhat[j] = g[j] * gain[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dot(&dxhat, xh) / d as f64;
        let row = dx.row_mut(r);
        for j in 0..d {
            row[j] = inv_std[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}
