//! Dense vector/matrix primitives and the probabilistic kernels (softmax,
//! log-softmax, KL divergence) the rest of the crate is built from.
//!
//! All reductions run left to right so results are bit-stable for a given
//! input regardless of how callers schedule work.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A finite dense vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector<T>(Vec<T>);

impl<T: Scalar> Vector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![T::zero(); dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> T {
        norm(&self.0)
    }

    /// Returns the vector scaled to unit length.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == T::zero() {
            return Err(Error::ZeroNorm);
        }
        Ok(Self(self.0.iter().map(|&v| v / n).collect()))
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

impl<T> Deref for Vector<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> AsRef<[T]> for Vector<T> {
    fn as_ref(&self) -> &[T] {
        &self.0
    }
}

/// A probability vector: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbabilityVector<T>(Vec<T>);

impl<T: Scalar> ProbabilityVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("probability vector"));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        if values.iter().any(|&v| v < T::zero()) {
            return Err(Error::invalid("negative probability"));
        }
        let total = sum(&values);
        if (total - T::one()).abs() > sum_tolerance::<T>(values.len()) {
            return Err(Error::invalid(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self(values))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("probability vector"));
        }
        Ok(Self(vec![T::one() / T::of_usize(n); n]))
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

impl<T> Deref for ProbabilityVector<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

fn sum_tolerance<T: Scalar>(len: usize) -> T {
    let floor = T::of(1e-9);
    let scaled = T::epsilon() * T::of_usize(4 * len.max(1));
    if scaled > floor {
        scaled
    } else {
        floor
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `x · W` for a row vector `x` of length `rows`.
    pub fn left_mul(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|o| *o = T::zero());
        for (r, &xr) in x.iter().enumerate() {
            if xr == T::zero() {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += xr * w;
            }
        }
    }

    /// `W · y` for a column vector `y` of length `cols` (i.e. `y · Wᵀ`).
    pub fn right_mul(&self, y: &[T], out: &mut [T]) {
        debug_assert_eq!(y.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), y);
        }
    }

    /// `W += xᵀ · y` (rank-one update).
    pub fn add_outer(&mut self, x: &[T], y: &[T]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        for (r, &xr) in x.iter().enumerate() {
            if xr == T::zero() {
                continue;
            }
            for (w, &yc) in self.row_mut(r).iter_mut().zip(y) {
                *w += xr * yc;
            }
        }
    }
}

pub fn dot<T: Scalar>(u: &[T], v: &[T]) -> T {
    debug_assert_eq!(u.len(), v.len());
    let mut acc = T::zero();
    for (&a, &b) in u.iter().zip(v) {
        acc += a * b;
    }
    acc
}

pub fn sum<T: Scalar>(v: &[T]) -> T {
    let mut acc = T::zero();
    for &x in v {
        acc += x;
    }
    acc
}

pub fn norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// `dst += alpha * src`.
pub fn axpy<T: Scalar>(alpha: T, src: &[T], dst: &mut [T]) {
    debug_assert_eq!(src.len(), dst.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Index of the largest entry; the first one wins on ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Cosine similarity `u·v / (‖u‖‖v‖)`.
pub fn cosine<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::ZeroNorm);
    }
    let c = dot(u, v) / (nu * nv);
    // rounding can push |c| a hair past 1
    Ok(c.max(-T::one()).min(T::one()))
}

fn check_temperature<T: Scalar>(temperature: T) -> Result<()> {
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(())
}

/// Max-shifted log-softmax of `scores / temperature`.
pub fn log_softmax<T: Scalar>(scores: &[T], temperature: T) -> Result<Vec<T>> {
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    check_temperature(temperature)?;
    let scaled: Vec<T> = scores.iter().map(|&s| s / temperature).collect();
    let m = scaled.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for &s in &scaled {
        z += (s - m).exp();
    }
    let log_z = m + z.ln();
    Ok(scaled.into_iter().map(|s| s - log_z).collect())
}

/// Max-shifted softmax of `scores / temperature`.
pub fn softmax<T: Scalar>(scores: &[T], temperature: T) -> Result<ProbabilityVector<T>> {
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    check_temperature(temperature)?;
    if let Some(index) = scores.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let scaled: Vec<T> = scores.iter().map(|&s| s / temperature).collect();
    let m = scaled.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scaled.iter().map(|&s| (s - m).exp()).collect();
    let z = sum(&exps);
    Ok(ProbabilityVector(exps.into_iter().map(|e| e / z).collect()))
}

/// `KL(p ‖ q) = Σ p_i ln(p_i / q_i)` with `0 · ln(0/q) = 0`.
pub fn kl_divergence<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            actual: q.len(),
        });
    }
    let mut acc = T::zero();
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > T::zero() {
            acc += pi * (pi / qi).ln();
        }
    }
    // a sum of non-negative KL mass can only dip below zero through rounding
    Ok(acc.max(T::zero()))
}

/// KL computed from log-probabilities; same convention as [`kl_divergence`].
pub fn kl_from_logs<T: Scalar>(log_p: &[T], log_q: &[T]) -> T {
    let mut acc = T::zero();
    for (&lp, &lq) in log_p.iter().zip(log_q) {
        let p = lp.exp();
        if p > T::zero() {
            acc += p * (lp - lq);
        }
    }
    acc.max(T::zero())
}
