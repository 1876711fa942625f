//! Dense vector arithmetic and counter-based random streams.
//!
//! Every reduction in this module sums left to right in index order. Random streams are stateless values
//! keyed by `(root_seed, context)`; two streams with the same key always
//! produce the same sequence, regardless of which thread asks for it.

use std::ops::{Deref, Index};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense model/update vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelVector(Vec<f64>);

impl ModelVector {
    pub fn new(data: Vec<f64>) -> Self {
        ModelVector(data)
    }

    pub fn zeros(d: usize) -> Self {
        ModelVector(vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn check_dim(&self, other: &ModelVector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(())
    }

    /// `self - other`.
    pub fn sub(&self, other: &ModelVector) -> Result<ModelVector> {
        axpy(-1.0, other, self)
    }

    /// `self + other`.
    pub fn add(&self, other: &ModelVector) -> Result<ModelVector> {
        axpy(1.0, other, self)
    }

    pub fn scale(&self, a: f64) -> ModelVector {
        ModelVector(self.0.iter().map(|x| a * x).collect())
    }

    pub fn norm2_sq(&self) -> f64 {
        norm2_sq(self)
    }

    pub fn norm(&self) -> f64 {
        norm2_sq(self).sqrt()
    }

    pub fn norm1(&self) -> f64 {
        self.0.iter().fold(0.0, |acc, x| acc + x.abs())
    }

    pub fn dot(&self, other: &ModelVector) -> Result<f64> {
        self.check_dim(other)?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .fold(0.0, |acc, (a, b)| acc + a * b))
    }

    /// In-place `self += a * x`.
    pub fn axpy_in_place(&mut self, a: f64, x: &ModelVector) -> Result<()> {
        self.check_dim(x)?;
        for (yi, xi) in self.0.iter_mut().zip(&x.0) {
            *yi += a * xi;
        }
        Ok(())
    }

    /// Bitwise equality of every coordinate.
    pub fn bit_eq(&self, other: &ModelVector) -> bool {
        self.dim() == other.dim()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Deref for ModelVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl Index<usize> for ModelVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl From<Vec<f64>> for ModelVector {
    fn from(v: Vec<f64>) -> Self {
        ModelVector(v)
    }
}

/// Returns `a * x + y`.
pub fn axpy(a: f64, x: &ModelVector, y: &ModelVector) -> Result<ModelVector> {
    x.check_dim(y)?;
    Ok(ModelVector(
        x.0.iter().zip(&y.0).map(|(xi, yi)| a * xi + yi).collect(),
    ))
}

/// Sum of squares, accumulated left to right.
pub fn norm2_sq(x: &ModelVector) -> f64 {
    x.0.iter().fold(0.0, |acc, v| acc + v * v)
}

/// Arithmetic mean of equally sized vectors, summed in slice order.
pub fn mean<'a, I>(vectors: I, d: usize) -> Result<ModelVector>
where
    I: IntoIterator<Item = &'a ModelVector>,
{
    let mut acc = ModelVector::zeros(d);
    let mut n = 0usize;
    for v in vectors {
        acc.axpy_in_place(1.0, v)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::config("vectors", "mean of an empty set"));
    }
    let inv = 1.0 / n as f64;
    Ok(acc.scale(inv))
}

/// What a random stream is used for. Part of the stream key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Purpose {
    Minibatch,
    Participation,
    Init,
    TaskData,
    Partition,
    Probe,
    Dissimilarity,
    Noise,
    MonteCarlo,
    Fuzz,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Minibatch => 1,
            Purpose::Participation => 2,
            Purpose::Init => 3,
            Purpose::TaskData => 4,
            Purpose::Partition => 5,
            Purpose::Probe => 6,
            Purpose::Dissimilarity => 7,
            Purpose::Noise => 8,
            Purpose::MonteCarlo => 9,
            Purpose::Fuzz => 10,
        }
    }
}

/// Position of a draw inside an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamContext {
    pub round: u64,
    pub client: u64,
    pub step: u64,
    pub purpose: Purpose,
}

/// A replayable random stream: a pure function of `(root_seed, context)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RandomStream {
    pub root_seed: u64,
    pub context: StreamContext,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent root seed, e.g. for Monte-Carlo replicates.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ 0xC0FF_EE00_D15E_A5E5) ^ splitmix64(index))
}

impl RandomStream {
    pub fn new(root_seed: u64, purpose: Purpose) -> Self {
        RandomStream {
            root_seed,
            context: StreamContext {
                round: 0,
                client: 0,
                step: 0,
                purpose,
            },
        }
    }

    pub fn round(mut self, r: usize) -> Self {
        self.context.round = r as u64;
        self
    }

    pub fn client(mut self, k: usize) -> Self {
        self.context.client = k as u64;
        self
    }

    pub fn step(mut self, t: usize) -> Self {
        self.context.step = t as u64;
        self
    }

    pub fn purpose(mut self, p: Purpose) -> Self {
        self.context.purpose = p;
        self
    }

    pub fn with_seed(mut self, root_seed: u64) -> Self {
        self.root_seed = root_seed;
        self
    }

    fn stream_id(&self) -> u64 {
        let c = &self.context;
        let mut h = splitmix64(c.purpose.tag());
        for field in [c.round, c.client, c.step] {
            h = splitmix64(h ^ field);
        }
        h
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let mut s = self.root_seed;
        for chunk in key.chunks_exact_mut(8) {
            s = splitmix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream_id());
        rng
    }

    /// `n` standard-normal variates.
    pub fn draw_gaussian(&self, n: usize) -> Vec<f64> {
        let mut rng = self.rng();
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> ModelVector {
        ModelVector::new(x.to_vec())
    }

    #[test]
    fn axpy_examples() {
        assert_eq!(axpy(0.0, &v(&[1.0, 2.0]), &v(&[3.0, 4.0])).unwrap(), v(&[3.0, 4.0]));
        assert_eq!(axpy(1.0, &v(&[1.0, 2.0]), &v(&[0.0, 0.0])).unwrap(), v(&[1.0, 2.0]));
        assert_eq!(axpy(2.0, &v(&[1.0, -1.0]), &v(&[1.0, 1.0])).unwrap(), v(&[3.0, -1.0]));
    }

    #[test]
    fn axpy_leaves_inputs_untouched() {
        let x = v(&[1.0, 2.0]);
        let y = v(&[5.0, 6.0]);
        let _ = axpy(3.0, &x, &y).unwrap();
        assert_eq!(x, v(&[1.0, 2.0]));
        assert_eq!(y, v(&[5.0, 6.0]));
    }

    #[test]
    fn axpy_rejects_length_mismatch() {
        let err = axpy(1.0, &v(&[1.0]), &v(&[1.0, 2.0])).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn norm2_sq_examples() {
        assert_eq!(norm2_sq(&v(&[0.0, 0.0, 0.0])), 0.0);
        assert_eq!(norm2_sq(&v(&[3.0, 4.0])), 25.0);
        assert_eq!(norm2_sq(&v(&[1.0, 1.0, 1.0, 1.0])), 4.0);
    }

    #[test]
    fn same_key_same_sequence() {
        let s = RandomStream::new(42, Purpose::Minibatch).round(3).client(1).step(2);
        assert_eq!(s.draw_gaussian(64), s.draw_gaussian(64));
    }

    #[test]
    fn context_fields_all_matter() {
        let base = RandomStream::new(7, Purpose::Minibatch);
        let a = base.draw_gaussian(8);
        assert_ne!(a, base.round(1).draw_gaussian(8));
        assert_ne!(a, base.client(1).draw_gaussian(8));
        assert_ne!(a, base.step(1).draw_gaussian(8));
        assert_ne!(a, base.purpose(Purpose::Init).draw_gaussian(8));
        assert_ne!(a, base.with_seed(8).draw_gaussian(8));
    }

    #[test]
    fn distinct_clients_are_uncorrelated() {
        let n = 100_000;
        let a = RandomStream::new(1, Purpose::Minibatch).client(1).draw_gaussian(n);
        let b = RandomStream::new(1, Purpose::Minibatch).client(2).draw_gaussian(n);
        let (ma, mb) = (
            a.iter().sum::<f64>() / n as f64,
            b.iter().sum::<f64>() / n as f64,
        );
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (x, y) in a.iter().zip(&b) {
            cov += (x - ma) * (y - mb);
            va += (x - ma).powi(2);
            vb += (y - mb).powi(2);
        }
        let rho = cov / (va * vb).sqrt();
        assert!(rho.abs() < 0.05, "correlation {rho}");
    }

    #[test]
    fn gaussian_moments() {
        let n = 1_000_000;
        let x = RandomStream::new(2024, Purpose::Fuzz).draw_gaussian(n);
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!(mean.abs() < 4e-3, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-2, "variance {var}");
    }

    #[test]
    fn child_seeds_differ() {
        assert_ne!(child_seed(1, 0), child_seed(1, 1));
        assert_ne!(child_seed(1, 0), child_seed(2, 0));
        assert_eq!(child_seed(9, 4), child_seed(9, 4));
    }
}
