//! Dense math kernels and probability utilities.
//!
//! Storage is `f32`; every reduction (inner products, softmax normaliser,
//! entropy sums, layer-norm moments) accumulates in `f64` with a fixed loop
//! order, so repeated calls on identical inputs are bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking a log in [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "buffer of length {} cannot back a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f32) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

fn shape_err(op: &str, a: &Matrix, b: &Matrix) -> Error {
    Error::Dimension(format!(
        "{op}: lhs is {}x{}, rhs is {}x{}",
        a.rows, a.cols, b.rows, b.cols
    ))
}

/// `a · b`.
///
/// Loop order is i-k-j with one `f64` accumulator row per output row; row `i`
/// of the result is bit-identical to `vec_mat(a.row(i), b)`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(shape_err("matmul", a, b));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let mut acc = vec![0f64; b.cols];
    for i in 0..a.rows {
        acc.iter_mut().for_each(|v| *v = 0.0);
        accumulate_row(a.row(i), b, &mut acc);
        for (o, v) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = *v as f32;
        }
    }
    Ok(out)
}

#[inline]
fn accumulate_row(x: &[f32], b: &Matrix, acc: &mut [f64]) {
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        let xk = xk as f64;
        for (a, &w) in acc.iter_mut().zip(b.row(k)) {
            *a += xk * w as f64;
        }
    }
}

/// Row vector times matrix: `x · m`.
pub fn vec_mat(x: &[f32], m: &Matrix) -> Result<Vec<f32>> {
    if x.len() != m.rows {
        return Err(Error::Dimension(format!(
            "vec_mat: vector has length {}, matrix is {}x{}",
            x.len(),
            m.rows,
            m.cols
        )));
    }
    let mut acc = vec![0f64; m.cols];
    accumulate_row(x, m, &mut acc);
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(shape_err("matmul_nt", a, b));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j)) as f32;
        }
    }
    Ok(out)
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(shape_err("matmul_tn", a, b));
    }
    let mut acc = vec![0f64; a.cols * b.cols];
    for r in 0..a.rows {
        let br = b.row(r);
        for (i, &ai) in a.row(r).iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let ai = ai as f64;
            let dst = &mut acc[i * b.cols..(i + 1) * b.cols];
            for (d, &bv) in dst.iter_mut().zip(br) {
                *d += ai * bv as f64;
            }
        }
    }
    Ok(Matrix {
        rows: a.cols,
        cols: b.cols,
        data: acc.into_iter().map(|v| v as f32).collect(),
    })
}

/// Inner product in `f64`, summed in four interleaved lanes.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in ca.by_ref().zip(cb.by_ref()) {
        for l in 0..4 {
            lanes[l] += x[l] as f64 * y[l] as f64;
        }
    }
    let mut tail = 0f64;
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x as f64 * y as f64;
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    probs: Vec<f32>,
}

impl ProbVector {
    /// Validates non-negativity and unit mass (within 1e-6).
    pub fn new(probs: Vec<f32>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Argument("probability vector is empty".into()));
        }
        if let Some(bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Argument(format!("probability {bad} outside [0, 1]")));
        }
        let mass: f64 = probs.iter().map(|&p| p as f64).sum();
        if (mass - 1.0).abs() > 1e-6 {
            return Err(Error::Argument(format!(
                "probabilities sum to {mass}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut probs = vec![0.0; len];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn uniform(len: usize) -> Self {
        Self {
            probs: vec![1.0 / len as f32; len],
        }
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    /// Largest and second-largest entries.
    pub fn top2(&self) -> (f32, f32) {
        let mut first = f32::NEG_INFINITY;
        let mut second = f32::NEG_INFINITY;
        for &p in &self.probs {
            if p > first {
                second = first;
                first = p;
            } else if p > second {
                second = p;
            }
        }
        (first, second)
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.probs
    }
}

/// Log-softmax evaluated entirely in `f64`.
pub fn log_softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &z| m.max(z as f64));
    let sum: f64 = logits.iter().map(|&z| (z as f64 - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter().map(|&z| z as f64 - lse).collect()
}

/// Softmax in `f64`, without the `ProbVector` wrapper.
pub fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &z| m.max(z as f64));
    let exps: Vec<f64> = logits.iter().map(|&z| (z as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f32]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::Argument("softmax of an empty vector".into()));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Argument("softmax input contains non-finite values".into()));
    }
    Ok(ProbVector {
        probs: softmax_f64(logits).into_iter().map(|p| p as f32).collect(),
    })
}

/// Shannon entropy in nats, with `0 · ln 0 = 0`.
pub fn entropy(p: &ProbVector) -> f64 {
    entropy_f64(p.probs.iter().map(|&x| x as f64))
}

pub(crate) fn entropy_f64(p: impl Iterator<Item = f64>) -> f64 {
    let h = p
        .filter(|&x| x > 0.0)
        .fold(0f64, |s, x| s - x * x.ln());
    h.max(0.0)
}

/// `−Σ teacherᵢ · log softmax(logits)ᵢ`, via log-sum-exp, with the softmax
/// clamped at [`PROB_FLOOR`] before the log.
pub fn cross_entropy(logits: &[f32], teacher: &ProbVector) -> Result<f64> {
    if logits.len() != teacher.len() {
        return Err(Error::Dimension(format!(
            "cross_entropy: {} logits vs {} teacher probabilities",
            logits.len(),
            teacher.len()
        )));
    }
    let floor = PROB_FLOOR.ln();
    Ok(log_softmax_f64(logits)
        .into_iter()
        .zip(teacher.as_slice())
        .fold(0f64, |s, (lp, &t)| s - t as f64 * lp.max(floor)))
}

/// `(x − mean) / sqrt(var + eps) ⊙ gain + bias`, population variance.
pub fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32], eps: f32) -> Result<Vec<f32>> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return Err(Error::Dimension(format!(
            "layer_norm: input {}, gain {}, bias {}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Argument("layer_norm of an empty vector".into()));
    }
    let (mean, rstd) = moments(x, eps);
    Ok(x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| (((v as f64 - mean) * rstd) as f32) * g + b)
        .collect())
}

/// Mean and reciprocal standard deviation, both in `f64`.
#[inline]
pub(crate) fn moments(x: &[f32], eps: f32) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, 1.0 / (var + eps as f64).sqrt())
}
