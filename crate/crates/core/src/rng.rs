//! Counter-based Gaussian increments and seed splitting.
//!
//! The fine increment of step `j` is drawn from a ChaCha8 stream keyed by the
//! path seed with stream id `j`, so any step can be regenerated on its own and
//! coarser steps are exact sums of fine ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::field::SpectralField;
use crate::modes::Lattice;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `(root, tag, index)`: FNV-1a of the tag mixed into the root
/// by SplitMix64, then the index mixed in the same way.
pub fn split_seed(root: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(splitmix(root ^ h) ^ splitmix(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Brownian increments for every mode component on a uniform fine grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePath {
    pub seed: u64,
    pub base_dt: f64,
    pub n_max: usize,
}

impl NoisePath {
    pub fn new(seed: u64, base_dt: f64, n_max: usize) -> Result<Self> {
        if !(base_dt > 0.0) {
            return param("noise path time step must be positive");
        }
        Lattice::shared(n_max)?;
        Ok(NoisePath { seed, base_dt, n_max })
    }

    /// Increment of fine step `j`, variance `base_dt` per component.
    pub fn fine_increment(&self, j: u64) -> SpectralField {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(j);
        let sd = self.base_dt.sqrt();
        let mut f = SpectralField::zeros(self.n_max).expect("validated at construction");
        for c in f.coeffs_mut() {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            *c = [sd * a, sd * b];
        }
        f
    }

    /// Number of fine steps in one step of size `dt`.
    pub fn ratio(&self, dt: f64) -> Result<u64> {
        let r = (dt / self.base_dt).round();
        if r < 1.0 || ((dt / self.base_dt) - r).abs() > 1e-9 * r {
            return param(format!("dt={dt} is not a multiple of the path step {}", self.base_dt));
        }
        Ok(r as u64)
    }

    /// Increment over coarse step `n` made of `ratio` fine steps.
    pub fn increment(&self, n: u64, ratio: u64) -> SpectralField {
        let mut acc = self.fine_increment(n * ratio);
        for j in 1..ratio {
            acc += &self.fine_increment(n * ratio + j);
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_is_bit_identical() {
        let p = NoisePath::new(42, 1e-3, 2).unwrap();
        assert_eq!(p.fine_increment(17), p.fine_increment(17));
        assert_ne!(p.fine_increment(17), p.fine_increment(18));
        let q = NoisePath::new(43, 1e-3, 2).unwrap();
        assert_ne!(p.fine_increment(17), q.fine_increment(17));
    }

    #[test]
    fn coarse_increment_is_sum_of_fine() {
        let p = NoisePath::new(7, 0.01, 1).unwrap();
        let c = p.increment(3, 2);
        let s = &p.fine_increment(6) + &p.fine_increment(7);
        assert_eq!(c, s);
        assert_eq!(p.ratio(0.04).unwrap(), 4);
        assert!(p.ratio(0.015).is_err());
    }

    #[test]
    fn increments_have_variance_dt() {
        let dt = 0.01;
        let p = NoisePath::new(3, dt, 2).unwrap();
        let mut sum = 0.0;
        let mut n = 0usize;
        for j in 0..200 {
            for c in p.fine_increment(j).coeffs() {
                sum += c[0] * c[0] + c[1] * c[1];
                n += 2;
            }
        }
        let var = sum / n as f64;
        assert!((var / dt - 1.0).abs() < 0.03, "variance ratio {}", var / dt);
    }

    #[test]
    fn split_seeds_differ() {
        let a = split_seed(1, "simulate", 0);
        assert_ne!(a, split_seed(1, "simulate", 1));
        assert_ne!(a, split_seed(1, "coupled", 0));
        assert_ne!(a, split_seed(2, "simulate", 0));
        assert_eq!(a, split_seed(1, "simulate", 0));
    }
}
