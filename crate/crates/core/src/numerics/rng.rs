//! Deterministic random number generation.
//!
//! Every stochastic choice in the crate (initialization, batch sampling,
//! dropout masks) draws from a [`SeededRng`] so a run is a pure function of
//! its seed. The generator wraps ChaCha12 and derives all sample kinds from
//! its raw 64-bit stream, which keeps the stream independent of external
//! distribution crates: the same seed yields bit-identical samples on every
//! platform and in every build.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::scalar::{cast, Scalar};

use super::Tensor2D;

const INV_2_53: f64 = 1.0 / 9007199254740992.0; // 2^-53

/// A seeded, cloneable, stream-stable random number generator.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha12Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// The seed this generator was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent generator, advancing this one by one draw.
    ///
    /// The label separates forks taken at the same point in the stream, so
    /// e.g. task generation and training noise never share a sequence.
    pub fn fork(&mut self, label: u64) -> SeededRng {
        let s = self
            .inner
            .next_u64()
            .wrapping_add(label.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        SeededRng::new(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform sample in `[0, 1)` with 53 bits of precision.
    pub fn uniform<F: Scalar>(&mut self) -> F {
        cast((self.inner.next_u64() >> 11) as f64 * INV_2_53)
    }

    /// Uniform sample in `[lo, hi)`.
    pub fn uniform_in<F: Scalar>(&mut self, lo: f64, hi: f64) -> F {
        let u = (self.inner.next_u64() >> 11) as f64 * INV_2_53;
        cast(lo + u * (hi - lo))
    }

    /// Standard normal sample via Box-Muller, scaled to `std`.
    ///
    /// Consumes exactly two uniform draws per sample.
    pub fn normal<F: Scalar>(&mut self, std: f64) -> F {
        let u1: f64 = 1.0 - (self.inner.next_u64() >> 11) as f64 * INV_2_53; // (0, 1]
        let u2: f64 = (self.inner.next_u64() >> 11) as f64 * INV_2_53;
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        cast(z * std)
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "cannot sample an index from an empty range");
        (self.inner.next_u64() % n as u64) as usize
    }

    /// Tensor with i.i.d. normal entries of the given standard deviation.
    pub fn normal_tensor<F: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Tensor2D<F> {
        let data = (0..rows * cols).map(|_| self.normal(std)).collect();
        Tensor2D::from_vec(rows, cols, data).expect("generated buffer matches shape")
    }

    /// Tensor with i.i.d. uniform entries in `[lo, hi)`.
    pub fn uniform_tensor<F: Scalar>(
        &mut self,
        rows: usize,
        cols: usize,
        lo: f64,
        hi: f64,
    ) -> Tensor2D<F> {
        let data = (0..rows * cols).map(|_| self.uniform_in(lo, hi)).collect();
        Tensor2D::from_vec(rows, cols, data).expect("generated buffer matches shape")
    }
}
