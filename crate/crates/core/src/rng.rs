//! Seeded randomness: xoshiro256++ seeded through splitmix64, Box–Muller normals.

use rand::{Rng, RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Tensor};

/// Deterministic generator. `SeededRng::new(seed)` expands the 64-bit seed to the
/// 256-bit xoshiro256++ state with splitmix64, so sequences are identical on every
/// platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: Xoshiro256PlusPlus,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Independent child stream, derived from this generator's next output.
    pub fn fork(&mut self) -> Self {
        Self::new(self.inner.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn int_range(&mut self, lo: i64, hi: i64) -> i64 {
        self.inner.random_range(lo..=hi)
    }

    /// Uniform index in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Standard normal via the Box–Muller transform; the second variate of each
    /// pair is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u keeps the logarithm argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

/// Tensor of i.i.d. standard normal entries.
pub fn sample_standard_normal<T: Scalar>(rng: &mut SeededRng, shape: &[usize]) -> Result<Tensor<T>> {
    if shape.is_empty() || numel(shape) == 0 {
        return Err(Error::invalid(format!(
            "cannot sample a tensor of degenerate shape {shape:?}"
        )));
    }
    let data = (0..numel(shape)).map(|_| T::from_f64(rng.normal())).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Normal entries scaled by `std`.
pub fn sample_normal<T: Scalar>(rng: &mut SeededRng, shape: &[usize], std: f64) -> Result<Tensor<T>> {
    Ok(sample_standard_normal::<T>(rng, shape)?.map(|v| v * T::from_f64(std)))
}
