//! Dense numerical kernels shared by the rest of the crate.
//!
//! Storage is `f32`; every reduction accumulates in `f64` with a fixed loop
//! order so that results are bit-reproducible across runs and thread counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Length {
                op: "Matrix::from_vec",
                left: data.len(),
                right: rows * cols,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::from_vec"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Length {
                    op: "Matrix::from_rows",
                    left: r.len(),
                    right: cols,
                });
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }
}

/// Matrix product with `f64` accumulation in ascending inner-index order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let mut acc = vec![0.0f64; b.cols];
    for r in 0..a.rows {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..a.cols {
            let x = a.data[r * a.cols + k] as f64;
            let brow = b.row(k);
            for (s, &w) in acc.iter_mut().zip(brow) {
                *s += x * w as f64;
            }
        }
        for (o, s) in out.data[r * b.cols..(r + 1) * b.cols].iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
    Ok(out)
}

/// Row vector times matrix: `x · m`, where `x.len() == m.rows()`.
pub fn vec_mat(x: &[f32], m: &Matrix) -> Result<Vec<f32>> {
    Ok(vec_mat_f64(x, m)?.into_iter().map(|v| v as f32).collect())
}

pub(crate) fn vec_mat_f64(x: &[f32], m: &Matrix) -> Result<Vec<f64>> {
    if x.len() != m.rows {
        return Err(Error::Shape {
            op: "vec_mat",
            left: (1, x.len()),
            right: m.shape(),
        });
    }
    let mut acc = vec![0.0f64; m.cols];
    for (k, &xk) in x.iter().enumerate() {
        let xk = xk as f64;
        for (s, &w) in acc.iter_mut().zip(m.row(k)) {
            *s += xk * w as f64;
        }
    }
    Ok(acc)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Temperature softmax. `temperature == 0` yields a one-hot vector at the
/// first maximal entry.
pub fn softmax(v: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "softmax temperature must be finite and >= 0, got {temperature}"
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax"));
    }
    if temperature == 0.0 {
        let mut out = vec![0.0; v.len()];
        out[argmax_first(v)?] = 1.0;
        return Ok(out);
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| ((x - max) / temperature).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// RMS normalization `v_i * gain_i / sqrt(mean(v^2) + eps)`.
pub fn rms_norm(v: &[f32], gain: &[f32], eps: f64) -> Result<Vec<f32>> {
    if v.len() != gain.len() {
        return Err(Error::Length {
            op: "rms_norm",
            left: v.len(),
            right: gain.len(),
        });
    }
    if v.is_empty() {
        return Err(Error::Empty("rms_norm"));
    }
    if !(eps >= 0.0) {
        return Err(Error::invalid(format!("rms_norm eps must be >= 0, got {eps}")));
    }
    let ms = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / v.len() as f64;
    let denom = (ms + eps).sqrt();
    if denom == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    Ok(v.iter()
        .zip(gain)
        .map(|(&x, &g)| (x as f64 * g as f64 / denom) as f32)
        .collect())
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax_first<T: PartialOrd + Copy>(v: &[T]) -> Result<usize> {
    let mut it = v.iter().enumerate();
    let (mut best, mut best_v) = match it.next() {
        Some((i, &x)) => (i, x),
        None => return Err(Error::Empty("argmax_first")),
    };
    for (i, &x) in it {
        if x > best_v {
            best = i;
            best_v = x;
        }
    }
    Ok(best)
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(dim: usize, learning_rate: f64, weight_decay: f64) -> Self {
        AdamState {
            step: 0,
            first_moment: vec![0.0; dim],
            second_moment: vec![0.0; dim],
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
        }
    }

    /// One update. Weight decay is applied as `p -= lr * wd * p` before the
    /// bias-corrected Adam delta.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        let n = self.first_moment.len();
        for (len, what) in [(params.len(), "params"), (grads.len(), "grads")] {
            if len != n {
                return Err(Error::invalid(format!(
                    "adam_step: {what} length {len} does not match moment length {n}"
                )));
            }
        }
        if self.second_moment.len() != n {
            return Err(Error::Length {
                op: "adam_step",
                left: self.second_moment.len(),
                right: n,
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = self.learning_rate * self.weight_decay;
        for i in 0..n {
            let g = grads[i];
            let m = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            if decay != 0.0 {
                params[i] -= decay * params[i];
            }
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.step(params, grads)
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite_diff_grad: step must be > 0, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("finite_diff_grad"));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// FNV-1a over a purpose label, folded with an id. Used to derive named
/// stream ids.
pub fn stream_id(purpose: &str, id: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes().chain(id.to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Counter-based ChaCha8 generator addressed by `(seed, stream)`.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng {
            seed,
            stream,
            inner,
        }
    }

    pub fn named(seed: u64, purpose: &str, id: u64) -> Self {
        SeededRng::new(seed, stream_id(purpose, id))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn sign(&mut self) -> f64 {
        if self.inner.random::<bool>() {
            1.0
        } else {
            -1.0
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Draws an index from a probability vector by inverse CDF with a fixed
    /// summation order.
    pub fn categorical(&mut self, probs: &[f64]) -> Result<usize> {
        if probs.is_empty() {
            return Err(Error::Empty("categorical"));
        }
        let u = self.uniform();
        let mut cum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            cum += p;
            if u < cum {
                return Ok(i);
            }
        }
        // Rounding left the tail short of 1; fall back to the last
        // non-zero entry.
        Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1))
    }
}
