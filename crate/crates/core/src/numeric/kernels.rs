//! Forward-only numeric kernels. The tape in [`super::tape`] reuses the
//! elementwise ones; the rest serve inference paths and test oracles.

use super::Array;
use crate::error::{Error, Result};

pub const CE_EPSILON: f64 = 1e-12;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    if z.is_empty() {
        return Vec::new();
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Binary cross-entropy of a probability against a 0/1 label. The
/// probability is clamped to `[ε, 1-ε]`.
pub fn cross_entropy(prob: f64, label: f64) -> f64 {
    let p = prob.clamp(CE_EPSILON, 1.0 - CE_EPSILON);
    -label * p.ln() - (1.0 - label) * (1.0 - p).ln()
}

/// Same loss computed from the logit, stable for large |z|.
pub fn bce_with_logit(z: f64, label: f64) -> f64 {
    z.max(0.0) - z * label + (-z.abs()).exp().ln_1p()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `m · x` for a row-major `rows × cols` matrix.
pub fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    (0..rows)
        .map(|r| dot(&m[r * cols..(r + 1) * cols], x))
        .collect()
}

/// `u' W v`.
pub fn bilinear(u: &[f64], w: &Array, v: &[f64]) -> Result<f64> {
    if w.shape().len() != 2 || w.rows() != u.len() || w.cols() != v.len() {
        return Err(Error::Shape {
            op: "bilinear",
            detail: format!("u[{}] W{:?} v[{}]", u.len(), w.shape(), v.len()),
        });
    }
    Ok(dot(u, &matvec(w.data(), w.rows(), w.cols(), v)))
}

/// Weights of one LSTM layer. Gate blocks are stacked in the order input,
/// forget, candidate, output: `w_x` is `4D × E`, `w_h` is `4D × D` and `b`
/// has `4D` entries.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights<'a> {
    pub w_x: &'a Array,
    pub w_h: &'a Array,
    pub b: &'a Array,
}

impl LstmWeights<'_> {
    pub fn hidden(&self) -> usize {
        self.w_h.cols()
    }

    pub fn input(&self) -> usize {
        self.w_x.cols()
    }

    fn check(&self) -> Result<()> {
        let d = self.hidden();
        if self.w_h.rows() != 4 * d || self.w_x.rows() != 4 * d || self.b.len() != 4 * d {
            return Err(Error::Shape {
                op: "lstm",
                detail: format!(
                    "w_x{:?} w_h{:?} b{:?}",
                    self.w_x.shape(),
                    self.w_h.shape(),
                    self.b.shape()
                ),
            });
        }
        Ok(())
    }
}

/// Runs the recurrence over `inputs` and returns the last hidden state.
/// An empty sequence encodes to the zero vector.
pub fn lstm_encode(w: &LstmWeights<'_>, inputs: &[&[f64]]) -> Result<Vec<f64>> {
    w.check()?;
    let (d, e) = (w.hidden(), w.input());
    let mut h = vec![0.0; d];
    let mut c = vec![0.0; d];
    if inputs.is_empty() {
        log::debug!("lstm_encode: empty sequence encoded as zero vector");
        return Ok(h);
    }
    for x in inputs {
        if x.len() != e {
            return Err(Error::Shape {
                op: "lstm",
                detail: format!("input of size {} for E = {e}", x.len()),
            });
        }
        let zx = matvec(w.w_x.data(), 4 * d, e, x);
        let zh = matvec(w.w_h.data(), 4 * d, d, &h);
        let b = w.b.data();
        for k in 0..d {
            let i = sigmoid(zx[k] + zh[k] + b[k]);
            let f = sigmoid(zx[d + k] + zh[d + k] + b[d + k]);
            let g = (zx[2 * d + k] + zh[2 * d + k] + b[2 * d + k]).tanh();
            let o = sigmoid(zx[3 * d + k] + zh[3 * d + k] + b[3 * d + k]);
            c[k] = f * c[k] + i * g;
            h[k] = o * c[k].tanh();
        }
    }
    Ok(h)
}
