//! Deterministic random number generator.
//!
//! SplitMix64 over a 64-bit counter: the same seed yields the same stream on
//! every run and platform (the integer path is exact; `uniform` only uses
//! integer arithmetic plus one exact float multiply).

use super::matrix::{Matrix, Scalar};

#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
    spare_normal: Option<f64>,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            state: seed,
            spare_normal: None,
        }
    }

    /// Independent stream derived from a base seed and a tag. Used for
    /// per-epoch shuffles and per-component initialization without
    /// coupling their consumption orders.
    pub fn stream(seed: u64, tag: u64) -> Self {
        Rng::new(mix(seed ^ tag.wrapping_mul(GOLDEN).wrapping_add(GOLDEN)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.uniform() * n as f64) as usize % n.max(1)
    }

    /// Standard normal via the polar method.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(v * f);
                return u * f;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, data: &mut [T]) {
        for i in (1..data.len()).rev() {
            let j = self.below(i + 1);
            data.swap(i, j);
        }
    }

    pub fn matrix_uniform<T: Scalar>(
        &mut self,
        rows: usize,
        cols: usize,
        lo: f64,
        hi: f64,
    ) -> Matrix<T> {
        let mut m = Matrix::zeros(rows, cols);
        for x in m.as_mut_slice() {
            *x = T::from_f64(self.uniform_in(lo, hi));
        }
        m
    }

    pub fn matrix_normal<T: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Matrix<T> {
        let mut m = Matrix::zeros(rows, cols);
        for x in m.as_mut_slice() {
            *x = T::from_f64(self.normal() * std);
        }
        m
    }
}
