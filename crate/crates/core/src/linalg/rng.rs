use alloc::vec::Vec;
use core::f64::consts::PI;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Purpose tags used as the last component of stream paths.
pub mod tag {
    pub const DATA: u64 = 1;
    pub const BASE_INIT: u64 = 2;
    pub const PRETRAIN: u64 = 3;
    pub const PARTITION: u64 = 4;
    pub const ADAPTER: u64 = 5;
    pub const LOCAL_TRAIN: u64 = 6;
    pub const PARTICIPATION: u64 = 7;
    pub const EVAL_SPLIT: u64 = 8;
}

/// Splittable deterministic random stream.
///
/// The ChaCha8 key is the SHA-256 of `(master_seed, path)`, so a stream is a
/// pure function of its coordinates: identical coordinates give identical
/// sequences on every platform, and any two distinct paths give unrelated
/// keystreams. Deriving a child never consumes from the parent.
#[derive(Clone, Debug)]
pub struct RngStream {
    master_seed: u64,
    path: Vec<u64>,
    core: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(master_seed: u64, path: &[u64]) -> Self {
        let mut h = Sha256::new();
        h.update(b"fedlora-rng/1");
        h.update(master_seed.to_le_bytes());
        h.update((path.len() as u64).to_le_bytes());
        for p in path {
            h.update(p.to_le_bytes());
        }
        let key: [u8; 32] = h.finalize().into();
        Self {
            master_seed,
            path: path.to_vec(),
            core: ChaCha8Rng::from_seed(key),
            spare_normal: None,
        }
    }

    /// Stream at `self.path ++ suffix`, independent of how much of `self`
    /// has been consumed.
    pub fn derive(&self, suffix: &[u64]) -> Self {
        let mut path = self.path.clone();
        path.extend_from_slice(suffix);
        Self::new(self.master_seed, &path)
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    pub fn next_u64(&mut self) -> u64 {
        self.core.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)`; `bound` must be positive.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "below() needs a positive bound");
        let bound = bound as u64;
        // rejection sampling keeps the draw exactly uniform
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % bound) as usize;
            }
        }
    }

    /// Standard normal draw (Box-Muller, pairs cached).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let radius = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * PI * u2;
        self.spare_normal = Some(radius * libm::sin(theta));
        radius * libm::cos(theta)
    }

    /// Bernoulli draw with success probability `p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_coordinates_same_sequence() {
        let mut a = RngStream::new(42, &[1, 2, 3]);
        let mut b = RngStream::new(42, &[1, 2, 3]);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derive_ignores_parent_consumption() {
        let mut parent = RngStream::new(5, &[7]);
        let before = parent.derive(&[1]).next_u64();
        parent.next_u64();
        parent.next_u64();
        assert_eq!(parent.derive(&[1]).next_u64(), before);
        assert_eq!(RngStream::new(5, &[7, 1]).next_u64(), before);
    }

    #[test]
    fn path_length_is_part_of_the_key() {
        assert_ne!(RngStream::new(1, &[0]).next_u64(), RngStream::new(1, &[0, 0]).next_u64());
        assert_ne!(RngStream::new(1, &[]).next_u64(), RngStream::new(2, &[]).next_u64());
    }

    #[test]
    fn below_stays_in_range() {
        let mut r = RngStream::new(3, &[]);
        let mut seen = [0usize; 7];
        for _ in 0..7000 {
            seen[r.below(7)] += 1;
        }
        assert!(seen.iter().all(|&c| c > 800 && c < 1200), "{seen:?}");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut v: Vec<usize> = (0..50).collect();
        RngStream::new(8, &[2]).shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
