//! Dense linear algebra, activations, seeded randomness and the central
//! difference gradient oracle shared by every other module's tests.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
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

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "Matrix::from_vec",
                left: (rows, cols),
                right: (values.len(), 1),
            });
        }
        Ok(Self { rows, cols, values })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            values.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            values,
        }
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

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.values[c * self.rows + r] = self.values[r * self.cols + c];
            }
        }
        t
    }

    /// `self × other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.values[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.values[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.values[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `out = self · x`. Shapes are the caller's responsibility.
    #[inline]
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), x);
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                op: "matvec",
                left: self.shape(),
                right: (x.len(), 1),
            });
        }
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        Ok(out)
    }

    /// `out += selfᵀ · y`.
    #[inline]
    pub fn add_transpose_matvec(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
    }

    /// `self += a ⊗ b` (outer product).
    #[inline]
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            for (v, &bc) in self.row_mut(r).iter_mut().zip(b) {
                *v += ar * bc;
            }
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm `sqrt(Σ v_i²)`.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Logistic function, split on sign so neither branch overflows.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    x.tanh()
}

pub fn sigmoid_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = sigmoid(*x));
}

pub fn tanh_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.tanh());
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Sample (n − 1) standard deviation; `None` for fewer than two values.
pub fn sample_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values)?;
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    Some((ss / (values.len() - 1) as f64).sqrt())
}

/// Central-difference gradient `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h`.
pub fn finite_difference_gradient<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step size must be > 0, got {h}")));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                context: "finite_difference_gradient",
                index: i,
            });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Denominator floor for gradient checks. Central differences at h = 1e-5
/// carry ~1e-11 absolute noise on O(1) losses, so relative error is only
/// meaningful above ~1e-6; below the floor the comparison is absolute.
pub const GRADCHECK_FLOOR: f64 = 1e-5;

/// `|a − b| / max(|a|, |b|, floor)`.
///
/// The floor keeps coordinates whose true gradient is ~0 from dominating: there
/// the error is effectively absolute.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(floor);
    (a - b).abs() / scale
}

pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| relative_error(x, y, floor))
        .fold(0.0, f64::max)
}

/// Deterministic random stream.
///
/// Backed by ChaCha8 (the `rand_chacha` stream, seeded through
/// `SeedableRng::seed_from_u64`). Uniform doubles take the top 53 bits of a
/// `u64` draw; normals use the Box–Muller transform on two uniforms; integer
/// ranges use rejection sampling. Every derived draw is therefore a fixed
/// function of the ChaCha8 word stream.
#[derive(Debug, Clone)]
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

    /// Independent stream derived from the same seed. Used to give each
    /// consumer (split, resampler, init, dropout) its own sequence so that
    /// adding draws in one place never shifts another.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. Panics when `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Standard normal via Box–Muller (one of the pair is discarded).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Serde adapter for `f64` fields that may hold ±∞ or NaN, which JSON
/// cannot represent as numbers. Non-finite values are written as the strings
/// `"inf"`, `"-inf"` and `"nan"`.
pub mod serde_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("expected a number, got '{other}'"))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_core::RngCore;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn random_matrix(rng: &mut SeededRng, r: usize, c: usize) -> Matrix {
        let v = (0..r * c).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        Matrix::from_vec(r, c, v).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(a.matmul(&Matrix::identity(2)).unwrap(), a);
        let z = Matrix::from_rows(&[[0.0], [0.0]]);
        assert_eq!(a.matmul(&z).unwrap(), z);
        let b = Matrix::from_rows(&[[5.0], [6.0]]);
        let expected = Matrix::from_rows(&[[17.0], [39.0]]);
        assert_eq!(a.matmul(&b).unwrap(), expected);
        assert_eq!(naive_matmul(&a, &b), expected);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        match a.matmul(&b) {
            Err(Error::DimensionMismatch { left, right, .. }) => {
                assert_eq!(left, (2, 3));
                assert_eq!(right, (2, 3));
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SeededRng::new(5);
        for _ in 0..20 {
            let (r, k, c) = (1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(6));
            let a = random_matrix(&mut rng, r, k);
            let b = random_matrix(&mut rng, k, c);
            let fast = a.matmul(&b).unwrap();
            let slow = naive_matmul(&a, &b);
            assert!(max_relative_error(fast.as_slice(), slow.as_slice(), 1e-12) < 1e-12);
        }
    }

    #[test]
    fn matmul_is_associative() {
        let mut rng = SeededRng::new(11);
        for _ in 0..50 {
            let d: Vec<usize> = (0..4).map(|_| 1 + rng.below(7)).collect();
            let a = random_matrix(&mut rng, d[0], d[1]);
            let b = random_matrix(&mut rng, d[1], d[2]);
            let c = random_matrix(&mut rng, d[2], d[3]);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            assert!(max_relative_error(left.as_slice(), right.as_slice(), 1.0) < 1e-9);
        }
    }

    #[test]
    fn matvec_helpers_agree_with_matmul() {
        let mut rng = SeededRng::new(3);
        let w = random_matrix(&mut rng, 4, 3);
        let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let col = Matrix::from_vec(3, 1, x.clone()).unwrap();
        assert_eq!(w.matvec(&x).unwrap(), w.matmul(&col).unwrap().into_vec());

        let y: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let mut out = vec![0.0; 3];
        w.add_transpose_matvec(&y, &mut out);
        let expected = w.transpose().matvec(&y).unwrap();
        assert!(max_relative_error(&out, &expected, 1e-12) < 1e-12);
    }

    #[test]
    fn l2_norm_examples() {
        assert_eq!(l2_norm(&[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(l2_norm(&[3.0, 4.0]), 5.0);
        assert_eq!(l2_norm(&[1.0, 1.0, 1.0, 1.0]), 2.0);
    }

    #[test]
    fn activations() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(tanh(0.0), 0.0);
        for x in [-700.0, -30.0, -1.0, 0.3, 5.0, 700.0] {
            let s = sigmoid(x);
            assert!(s.is_finite() && (0.0..=1.0).contains(&s));
            assert!((sigmoid(-x) + sigmoid(x) - 1.0).abs() < 1e-15);
            assert!(tanh(x).abs() <= 1.0);
        }
        assert!(sigmoid(-700.0) > 0.0);
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_difference_gradient(|t| dot(t, t), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);

        let g = finite_difference_gradient(|_| 3.0, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-10));

        // σ'(0) = σ(0)(1 − σ(0)) = 0.25
        let g = finite_difference_gradient(|t| sigmoid(t[0]), &[0.0], 1e-5).unwrap();
        assert!((g[0] - 0.25).abs() < 1e-10);
    }

    #[test]
    fn finite_difference_reports_offending_coordinate() {
        let err = finite_difference_gradient(
            |t| if t[1] > 0.5 { f64::NAN } else { t[0] },
            &[0.0, 0.5],
            1e-3,
        )
        .unwrap_err();
        assert_eq!(
            err,
            Error::NonFinite {
                context: "finite_difference_gradient",
                index: 1
            }
        );
        assert!(finite_difference_gradient(|t| t[0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn rng_same_seed_same_stream() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = SeededRng::new(43);
        let mut a = SeededRng::new(42);
        assert!((0..100).any(|_| a.next_u64() != c.next_u64()));
    }

    #[test]
    fn rng_streams_are_pinned() {
        // ChaCha8 seeded through `seed_from_u64`. Changing these values breaks
        // reproducibility of every seeded run.
        let mut r = SeededRng::new(42);
        let first: Vec<u64> = (0..3).map(|_| r.next_u64()).collect();
        assert_eq!(first, vec![12578764544318200737, 17529487244874322312, 7886285670807131020]);
        let mut reference = ChaCha8Rng::seed_from_u64(42);
        assert_eq!(first[0], reference.next_u64());
        assert_eq!(SeededRng::new(42).fork(1).next_u64(), 13222472167927179408);
        assert_eq!(SeededRng::new(42).fork(2).next_u64(), 3387013202841124863);
        // Forks ignore how far the parent has advanced.
        assert_eq!(r.fork(1).next_u64(), 13222472167927179408);
    }

    #[test]
    fn rng_distributions_are_sane() {
        let mut r = SeededRng::new(7);
        let n = 20_000;
        let u: Vec<f64> = (0..n).map(|_| r.uniform()).collect();
        assert!(u.iter().all(|&x| (0.0..1.0).contains(&x)));
        assert!((mean(&u).unwrap() - 0.5).abs() < 0.01);
        let z: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        assert!(mean(&z).unwrap().abs() < 0.03);
        assert!((sample_std(&z).unwrap() - 1.0).abs() < 0.03);
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[r.below(5)] += 1;
        }
        assert!(counts.iter().all(|&c| (3600..4400).contains(&c)));
    }

    #[test]
    fn sample_statistics() {
        assert_eq!(mean(&[]), None);
        assert_eq!(sample_std(&[1.0]), None);
        assert!((sample_std(&[0.95, 0.96]).unwrap() - 0.007_071_067_811_865_481).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn sigmoid_symmetry(x in -700.0f64..700.0) {
            prop_assert!((sigmoid(-x) + sigmoid(x) - 1.0).abs() < 1e-15);
        }

        #[test]
        fn shuffle_is_a_permutation(seed in any::<u64>(), n in 0usize..64) {
            let mut v: Vec<usize> = (0..n).collect();
            SeededRng::new(seed).shuffle(&mut v);
            v.sort_unstable();
            prop_assert_eq!(v, (0..n).collect::<Vec<_>>());
        }
    }
}
