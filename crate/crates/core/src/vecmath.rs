//! Dense vectors, the smoothed normalization operator, and keyed random streams.

use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense real vector of fixed dimension.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Vector<S> {
    entries: Vec<S>,
}

impl<S: Scalar> Vector<S> {
    pub fn zeros(d: usize) -> Self {
        Vector {
            entries: vec![S::zero(); d],
        }
    }

    /// Builds a vector from raw entries, rejecting NaN and infinities.
    pub fn from_vec(entries: Vec<S>) -> Result<Self> {
        if let Some(pos) = entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite vector entry at position {pos}"
            )));
        }
        Ok(Vector { entries })
    }

    /// Builds a vector from `f64` literals.
    pub fn from_f64s(values: &[f64]) -> Result<Self> {
        Self::from_vec(values.iter().map(|&v| S::lit(v)).collect())
    }

    /// The `index`-th standard basis vector scaled by `scale`.
    pub fn basis(d: usize, index: usize, scale: S) -> Self {
        let mut v = Self::zeros(d);
        v.entries[index] = scale;
        v
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.entries
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.entries
    }

    pub fn into_vec(self) -> Vec<S> {
        self.entries
    }

    pub fn iter(&self) -> std::slice::Iter<'_, S> {
        self.entries.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|v| v.is_zero())
    }

    pub fn dot(&self, other: &Self) -> S {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch");
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn norm_squared(&self) -> S {
        self.entries.iter().map(|&v| v * v).sum()
    }

    /// Euclidean norm.
    pub fn norm(&self) -> S {
        self.norm_squared().sqrt()
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: S, x: &Self) {
        assert_eq!(self.dim(), x.dim(), "dimension mismatch");
        for (s, &xi) in self.entries.iter_mut().zip(&x.entries) {
            *s += a * xi;
        }
    }

    pub fn scale(&self, a: S) -> Self {
        self.map(|v| v * a)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Vector {
            entries: self.entries.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn distance(&self, other: &Self) -> S {
        (self - other).norm()
    }

    /// Arithmetic mean of a non-empty list of vectors.
    pub fn mean<'a>(vectors: impl IntoIterator<Item = &'a Self>) -> Option<Self> {
        let mut iter = vectors.into_iter();
        let mut acc = iter.next()?.clone();
        let mut count = 1usize;
        for v in iter {
            acc.axpy(S::one(), v);
            count += 1;
        }
        Some(acc.scale(S::one() / S::from_usize_lossy(count)))
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.entries.iter().map(|v| v.as_f64()).collect()
    }
}

impl<S> Index<usize> for Vector<S> {
    type Output = S;
    fn index(&self, i: usize) -> &S {
        &self.entries[i]
    }
}

impl<S> IndexMut<usize> for Vector<S> {
    fn index_mut(&mut self, i: usize) -> &mut S {
        &mut self.entries[i]
    }
}

impl<S: Scalar> Add for &Vector<S> {
    type Output = Vector<S>;
    fn add(self, rhs: &Vector<S>) -> Vector<S> {
        assert_eq!(self.dim(), rhs.dim(), "dimension mismatch");
        Vector {
            entries: self
                .entries
                .iter()
                .zip(&rhs.entries)
                .map(|(&a, &b)| a + b)
                .collect(),
        }
    }
}

impl<S: Scalar> Sub for &Vector<S> {
    type Output = Vector<S>;
    fn sub(self, rhs: &Vector<S>) -> Vector<S> {
        assert_eq!(self.dim(), rhs.dim(), "dimension mismatch");
        Vector {
            entries: self
                .entries
                .iter()
                .zip(&rhs.entries)
                .map(|(&a, &b)| a - b)
                .collect(),
        }
    }
}

impl<S: Scalar> Mul<S> for &Vector<S> {
    type Output = Vector<S>;
    fn mul(self, rhs: S) -> Vector<S> {
        self.scale(rhs)
    }
}

impl<S: Scalar> Neg for &Vector<S> {
    type Output = Vector<S>;
    fn neg(self) -> Vector<S> {
        self.map(|v| -v)
    }
}

/// Euclidean norm of `v`.
pub fn norm<S: Scalar>(v: &Vector<S>) -> S {
    v.norm()
}

/// Smoothed normalization `v / (alpha + ||v||)`.
///
/// The zero vector maps to zero for every `alpha >= 0`, including `alpha = 0`
/// where the quotient is otherwise `0/0`. The result always has norm at most
/// one, and strictly below one when `alpha > 0`.
pub fn smoothed_normalize<S: Scalar>(v: &Vector<S>, alpha: S) -> Result<Vector<S>> {
    if !alpha.is_finite() || alpha < S::zero() {
        return Err(Error::InvalidInput(format!(
            "normalization parameter must be finite and nonnegative, got {alpha}"
        )));
    }
    if !v.is_finite() {
        return Err(Error::InvalidInput(
            "cannot normalize a vector with non-finite entries".into(),
        ));
    }
    let n = v.norm();
    if n.is_zero() {
        return Ok(Vector::zeros(v.dim()));
    }
    let denom = alpha + n;
    Ok(v.map(|x| x / denom))
}

/// What a random stream is used for. Separate purposes never share draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Purpose {
    Participation,
    DpNoise,
    DataGen,
    Init,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Participation => 0x5041_5254,
            Purpose::DpNoise => 0x4450_4e53,
            Purpose::DataGen => 0x4441_5441,
            Purpose::Init => 0x494e_4954,
        }
    }
}

/// Root seed from which every keyed stream of a run is derived.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamSeed(pub u64);

impl StreamSeed {
    pub fn stream(self, round: u64, client: u64, purpose: Purpose) -> RngStream {
        RngStream::new(self.0, round, client, purpose)
    }
}

/// Deterministic random stream keyed by `(seed, round, client, purpose)`.
///
/// The key is the ChaCha20 seed itself, so two streams with different paths
/// are independent and evaluation order never changes a draw.
#[derive(Clone, Debug)]
pub struct RngStream {
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, round: u64, client: u64, purpose: Purpose) -> Self {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&purpose.tag().to_le_bytes());
        key[16..24].copy_from_slice(&round.to_le_bytes());
        key[24..32].copy_from_slice(&client.to_le_bytes());
        RngStream {
            rng: ChaCha20Rng::from_seed(key),
        }
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }
}

/// Vector of i.i.d. `N(0, sigma^2)` entries. `sigma = 0` yields zero without
/// consuming the stream.
pub fn gaussian_vector<S: Scalar>(stream: &mut RngStream, d: usize, sigma: S) -> Result<Vector<S>> {
    if d == 0 {
        return Err(Error::InvalidInput("dimension must be positive".into()));
    }
    if !sigma.is_finite() || sigma < S::zero() {
        return Err(Error::InvalidInput(format!(
            "noise scale must be finite and nonnegative, got {sigma}"
        )));
    }
    if sigma.is_zero() {
        return Ok(Vector::zeros(d));
    }
    let sigma = sigma.as_f64();
    let entries = (0..d)
        .map(|_| S::lit(sigma * stream.standard_normal()))
        .collect();
    Ok(Vector { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Vector<f64> {
        Vector::from_f64s(xs).unwrap()
    }

    #[test]
    fn norm_examples() {
        assert_eq!(norm(&v(&[3.0, 4.0])), 5.0);
        assert_eq!(norm(&Vector::<f64>::zeros(3)), 0.0);
        assert_eq!(norm(&v(&[1.0, 1.0, 1.0, 1.0])), 2.0);
    }

    #[test]
    fn normalize_examples() {
        let zero = smoothed_normalize(&Vector::<f64>::zeros(2), 1.0).unwrap();
        assert!(zero.is_zero());
        let unit = smoothed_normalize(&v(&[3.0, 4.0]), 0.0).unwrap();
        assert!((unit[0] - 0.6).abs() < 1e-15 && (unit[1] - 0.8).abs() < 1e-15);
        let smooth = smoothed_normalize(&v(&[3.0, 4.0]), 1.0).unwrap();
        assert!((smooth[0] - 0.5).abs() < 1e-15);
        assert!((smooth[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn normalize_zero_with_zero_alpha() {
        let out = smoothed_normalize(&Vector::<f64>::zeros(4), 0.0).unwrap();
        assert!(out.is_zero());
    }

    #[test]
    fn normalize_rejects_bad_inputs() {
        let bad = Vector {
            entries: vec![1.0, f64::NAN],
        };
        assert!(smoothed_normalize(&bad, 1.0).is_err());
        assert!(smoothed_normalize(&v(&[1.0]), -0.5).is_err());
        assert!(Vector::<f64>::from_vec(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn normalize_works_in_f32() {
        let x = Vector::<f32>::from_f64s(&[3.0, 4.0]).unwrap();
        let out = smoothed_normalize(&x, 1.0f32).unwrap();
        assert!((out[1] - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn gaussian_zero_sigma_and_bad_dim() {
        let mut s = RngStream::new(1, 0, 0, Purpose::DpNoise);
        assert!(gaussian_vector(&mut s, 3, 0.0f64).unwrap().is_zero());
        assert!(gaussian_vector(&mut s, 0, 1.0f64).is_err());
    }

    #[test]
    fn gaussian_is_deterministic_per_path() {
        let a = gaussian_vector(&mut RngStream::new(9, 3, 2, Purpose::DpNoise), 5, 1.0f64).unwrap();
        let b = gaussian_vector(&mut RngStream::new(9, 3, 2, Purpose::DpNoise), 5, 1.0f64).unwrap();
        let c = gaussian_vector(&mut RngStream::new(9, 3, 1, Purpose::DpNoise), 5, 1.0f64).unwrap();
        let d = gaussian_vector(&mut RngStream::new(9, 3, 2, Purpose::Participation), 5, 1.0f64).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn gaussian_empirical_variance() {
        // chi-square: sample variance of 1e5 unit normals has sd ~ sqrt(2/1e5) ~ 0.0045
        let mut s = RngStream::new(42, 0, 0, Purpose::DpNoise);
        let x = gaussian_vector(&mut s, 100_000, 1.0f64).unwrap();
        let n = x.dim() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 1.0).abs() < 0.03, "variance {var}");
        assert!(mean.abs() < 0.02);
    }

    #[test]
    fn mean_of_vectors() {
        let m = Vector::mean([&v(&[1.0, 2.0]), &v(&[3.0, 6.0])]).unwrap();
        assert_eq!(m, v(&[2.0, 4.0]));
        assert!(Vector::<f64>::mean(std::iter::empty()).is_none());
    }

    proptest! {
        #[test]
        fn normalized_norm_at_most_one(xs in prop::collection::vec(-1e6f64..1e6, 1..16), alpha in 0.0f64..10.0) {
            let x = v(&xs);
            let out = smoothed_normalize(&x, alpha).unwrap();
            prop_assert!(out.norm() <= 1.0 + 1e-12);
            if alpha > 0.0 && !x.is_zero() {
                let expected = x.norm() / (alpha + x.norm());
                prop_assert!((out.norm() - expected).abs() <= 1e-12);
                prop_assert!(out.norm() < 1.0);
            }
        }

        #[test]
        fn normalization_preserves_direction(xs in prop::collection::vec(-100f64..100.0, 1..8), alpha in 0.0f64..5.0, c in 0.01f64..100.0) {
            let x = v(&xs);
            prop_assume!(x.norm() > 1e-9);
            let out = smoothed_normalize(&x, alpha).unwrap();
            // nonnegative multiple of x
            let cos = out.dot(&x) / (out.norm() * x.norm());
            prop_assert!((cos - 1.0).abs() < 1e-12);
            let scaled = smoothed_normalize(&x.scale(c), alpha * c).unwrap();
            let cos2 = scaled.dot(&out) / (scaled.norm() * out.norm());
            prop_assert!((cos2 - 1.0).abs() < 1e-12);
        }
    }
}
