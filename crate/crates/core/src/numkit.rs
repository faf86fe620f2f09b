//! Dense numeric kernel: vectors, row-major matrices, affine maps, stable
//! softmax and a seeded, platform-independent RNG.
//!
//! Everything is `f64`. File formats may carry `f32`; those are widened on load.

use std::fmt;
use std::ops::Index;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense column vector with at least one entry, all finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("vector"));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite entry {} at index {pos}",
                values[pos]
            )));
        }
        Ok(Self(values))
    }

    /// Internal constructor for values produced by finite arithmetic on finite inputs.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty());
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "vector dimension must be positive");
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Index of the largest entry; ties go to the smallest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl Index<usize> for DenseVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for DenseVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<DenseVector> for Vec<f64> {
    fn from(v: DenseVector) -> Self {
        v.0
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Empty("matrix"));
        }
        if rows * cols != values.len() {
            return Err(Error::shape(
                "DenseMatrix::new",
                format!("{rows}x{cols}"),
                format!("{} values", values.len()),
            ));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("DenseMatrix::from_rows", "ragged rows", c));
        }
        Self::new(r, c, rows.concat())
    }

    pub(crate) fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut SeededRng) -> Self {
        let values = (0..rows * cols)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        Self { rows, cols, values }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    /// `Wᵀ y`, used when propagating a gradient back through an affine map.
    pub(crate) fn transpose_mul(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        out
    }

    /// `self += alpha · u vᵀ`.
    pub(crate) fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let s = alpha * ur;
            if s == 0.0 {
                continue;
            }
            for (w, &vc) in self.row_mut(r).iter_mut().zip(v) {
                *w += s * vc;
            }
        }
    }
}

impl fmt::Display for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// An affine layer `x ↦ Wx + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: DenseMatrix,
    pub bias: DenseVector,
}

impl Linear {
    pub fn new(weight: DenseMatrix, bias: DenseVector) -> Result<Self> {
        if weight.rows() != bias.dim() {
            return Err(Error::shape(
                "Linear::new",
                &weight,
                format!("bias of dim {}", bias.dim()),
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(outputs, inputs),
            bias: DenseVector::zeros(outputs),
        }
    }

    /// Fan-in scaled uniform weights `U(-1/√inputs, 1/√inputs)`, zero bias.
    pub fn init_uniform(outputs: usize, inputs: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: DenseMatrix::uniform(outputs, inputs, bound, rng),
            bias: DenseVector::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &DenseVector) -> Result<DenseVector> {
        affine(&self.weight, x, &self.bias)
    }
}

/// `Wx + b`.
pub fn affine(w: &DenseMatrix, x: &DenseVector, b: &DenseVector) -> Result<DenseVector> {
    if w.cols() != x.dim() {
        return Err(Error::shape("affine", w, format!("x of dim {}", x.dim())));
    }
    if w.rows() != b.dim() {
        return Err(Error::shape("affine", w, format!("b of dim {}", b.dim())));
    }
    let out = b
        .iter()
        .enumerate()
        .map(|(r, &br)| br + dot(w.row(r), x.as_slice()))
        .collect();
    Ok(DenseVector::from_raw(out))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log Σ exp(zᵢ)`, shifted by the maximum.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `exp(zᵢ − max z) / Σ exp(zⱼ − max z)`.
pub fn stable_softmax(z: &DenseVector) -> DenseVector {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    DenseVector::from_raw(out)
}

pub fn log_softmax(z: &DenseVector) -> DenseVector {
    let lse = log_sum_exp(z.as_slice());
    DenseVector::from_raw(z.iter().map(|v| v - lse).collect())
}

pub fn squared_distance(a: &DenseVector, b: &DenseVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("squared_distance", a.dim(), b.dim()));
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Smallest index of the maximal entry.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Deterministic RNG: ChaCha8 keyed by a 64-bit seed.
///
/// Substreams share the seed and differ in the ChaCha stream id, so an epoch
/// can get its own reproducible sequence independent of how many numbers
/// earlier epochs consumed.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fresh generator on stream `stream` of the same seed.
    pub fn substream(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self {
            seed: self.seed,
            inner,
        }
    }

    /// Uniform draw in `[low, high)`.
    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.inner.random::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.random::<f64>() < p
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self, mean: f64, std_dev: f64) -> f64 {
        let z: f64 = self.inner.sample(rand_distr::StandardNormal);
        mean + std_dev * z
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// `k` distinct indices from `0..pool_size`, in draw order.
pub fn sample_distinct(rng: &mut SeededRng, pool_size: usize, k: usize) -> Result<Vec<usize>> {
    if k > pool_size {
        return Err(Error::Capacity {
            requested: k,
            available: pool_size,
        });
    }
    Ok(index::sample(&mut rng.inner, pool_size, k).into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f64]) -> DenseVector {
        DenseVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn affine_examples() {
        let out = affine(&DenseMatrix::identity(2), &v(&[3.0, 4.0]), &v(&[0.0, 0.0])).unwrap();
        assert_eq!(out.as_slice(), &[3.0, 4.0]);

        let out = affine(&DenseMatrix::zeros(2, 2), &v(&[5.0, 7.0]), &v(&[1.0, -1.0])).unwrap();
        assert_eq!(out.as_slice(), &[1.0, -1.0]);

        let w = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let out = affine(&w, &v(&[1.0, 1.0]), &v(&[0.0, 1.0])).unwrap();
        assert_eq!(out.as_slice(), &[3.0, 8.0]);
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let err = affine(&DenseMatrix::zeros(2, 3), &v(&[1.0, 2.0]), &v(&[0.0, 0.0])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("dim 2"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let p = stable_softmax(&v(&[0.0; 4]));
        assert_eq!(p.as_slice(), &[0.25; 4]);

        let p = stable_softmax(&v(&[1000.0, 1000.0]));
        assert_eq!(p.as_slice(), &[0.5, 0.5]);

        // mpmath at 50 digits
        let p = stable_softmax(&v(&[1.0, 2.0, 3.0]));
        let expected = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_64,
            0.665_240_955_774_821_9,
        ];
        for (a, e) in p.iter().zip(expected) {
            assert!((a - e).abs() < 1e-15, "{a} vs {e}");
        }
    }

    #[test]
    fn empty_vector_rejected() {
        assert!(matches!(DenseVector::new(vec![]), Err(Error::Empty(_))));
        assert!(DenseVector::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn squared_distance_examples() {
        let a = v(&[0.3, -1.5, 2.0]);
        assert_eq!(squared_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(
            squared_distance(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(),
            2.0
        );
        assert_eq!(
            squared_distance(&v(&[1.0, 2.0, 3.0]), &v(&[4.0, 6.0, 3.0])).unwrap(),
            25.0
        );
        assert!(squared_distance(&v(&[1.0]), &v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn sample_distinct_examples() {
        let mut rng = SeededRng::new(3);
        assert!(sample_distinct(&mut rng, 5, 0).unwrap().is_empty());

        let mut all = sample_distinct(&mut rng, 3, 3).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2]);

        let a = sample_distinct(&mut SeededRng::new(42), 100, 4).unwrap();
        let b = sample_distinct(&mut SeededRng::new(42), 100, 4).unwrap();
        assert_eq!(a, b);

        assert!(matches!(
            sample_distinct(&mut rng, 2, 3),
            Err(Error::Capacity {
                requested: 3,
                available: 2
            })
        ));
    }

    #[test]
    fn substreams_are_independent_of_parent_consumption() {
        let mut parent = SeededRng::new(9);
        let before = parent.substream(4).next_u64();
        parent.next_u64();
        assert_eq!(before, parent.substream(4).next_u64());
        assert_ne!(before, parent.substream(5).next_u64());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }
}
