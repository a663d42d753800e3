//! Dealiased FFT evaluation of the Galerkin convective term.
//!
//! The pairwise convolution in [`crate::nonlinearity`] costs `O(M²)` per call
//! and dominates long deterministic integrations at `N_max ≥ 5`. Here the
//! product `(u·∇)v` is formed on a uniform grid of `g ≥ 3N + 1` points per
//! axis, which is exactly large enough for no alias of a quadratic product to
//! land inside the output box, so the result equals the Galerkin term to
//! rounding.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{param, Result};
use crate::field::SpectralField;
use crate::modes::Lattice;
use crate::nonlinearity::normalization;
use crate::parallel;

pub struct GridConvolver {
    n_max: usize,
    g: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for GridConvolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GridConvolver").field("n_max", &self.n_max).field("g", &self.g).finish()
    }
}

impl GridConvolver {
    pub fn new(n_max: usize) -> Result<Self> {
        if n_max == 0 {
            return param("N_max must be at least 1");
        }
        let g = 3 * n_max + 1;
        let mut planner = FftPlanner::new();
        Ok(GridConvolver { n_max, g, forward: planner.plan_fft_forward(g), inverse: planner.plan_fft_inverse(g) })
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn grid_size(&self) -> usize {
        self.g
    }

    #[inline]
    fn wrap(&self, k: i32) -> usize {
        k.rem_euclid(self.g as i32) as usize
    }

    #[inline]
    fn slot(&self, k: [i32; 3]) -> usize {
        (self.wrap(k[0]) * self.g + self.wrap(k[1])) * self.g + self.wrap(k[2])
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let g = self.g;
        let fft = if inverse { &self.inverse } else { &self.forward };
        // last axis is contiguous
        fft.process(data);
        let mut line = vec![Complex64::new(0.0, 0.0); g];
        for stride in [g, g * g] {
            for base in 0..g * g * g {
                // visit each line once: its first element has zero index along the axis
                if (base / stride) % g != 0 {
                    continue;
                }
                for (j, z) in line.iter_mut().enumerate() {
                    *z = data[base + j * stride];
                }
                fft.process(&mut line);
                for (j, z) in line.iter().enumerate() {
                    data[base + j * stride] = *z;
                }
            }
        }
    }

    /// Grid values of component `b` of `u`, or of `∂_a u_b` when `deriv = Some(a)`.
    fn synthesize(&self, u: &SpectralField, b: usize, deriv: Option<usize>) -> Vec<f64> {
        let kappa = normalization();
        let lat = u.lattice();
        let mut spec = vec![Complex64::new(0.0, 0.0); self.g.pow(3)];
        for (i, c) in u.coeffs().iter().enumerate() {
            if c[0] == 0.0 && c[1] == 0.0 {
                continue;
            }
            let m = lat.mode(i);
            let k = m.k();
            let v = 0.5 * kappa * u.vector(i)[b];
            // cos(k·x) = (e^{ik·x} + e^{-ik·x})/2, sin(k·x) = (e^{ik·x} - e^{-ik·x})/2i
            let (mut plus, mut minus) = if m.is_positive() {
                (Complex64::new(v, 0.0), Complex64::new(v, 0.0))
            } else {
                (Complex64::new(0.0, -v), Complex64::new(0.0, v))
            };
            if let Some(a) = deriv {
                let ka = k[a] as f64;
                plus *= Complex64::new(0.0, ka);
                minus *= Complex64::new(0.0, -ka);
            }
            spec[self.slot(k)] += plus;
            spec[self.slot([-k[0], -k[1], -k[2]])] += minus;
        }
        self.transform(&mut spec, true);
        spec.into_iter().map(|z| z.re).collect()
    }

    /// `π_{n_out} B(u, v)`, equal to [`crate::nonlinearity::bilinear_term`] up to rounding.
    pub fn bilinear(&self, u: &SpectralField, v: &SpectralField, n_out: usize) -> Result<SpectralField> {
        if u.n_max() > self.n_max || v.n_max() > self.n_max {
            return param(format!(
                "fields of N_max {}/{} exceed the grid built for N_max={}",
                u.n_max(),
                v.n_max(),
                self.n_max
            ));
        }
        if n_out > self.n_max {
            return param(format!("N_out={n_out} exceeds the grid's N_max={}", self.n_max));
        }
        // 0..3: u_a, 3..12: ∂_a v_b at 3 + 3a + b
        let grids = parallel::map_indices(12, |j| {
            if j < 3 {
                self.synthesize(u, j, None)
            } else {
                let (a, b) = ((j - 3) / 3, (j - 3) % 3);
                self.synthesize(v, b, Some(a))
            }
        });
        let points = self.g.pow(3);
        let products = parallel::map_indices(3, |b| {
            let mut out: Vec<Complex64> = (0..points)
                .map(|p| {
                    let s = (0..3).map(|a| grids[a][p] * grids[3 + 3 * a + b][p]).sum::<f64>();
                    Complex64::new(s, 0.0)
                })
                .collect();
            self.transform(&mut out, false);
            out
        });
        let lat = Lattice::shared(n_out)?;
        // ∫ f κ cos(k·x) = κ (2π)³ Re f̂(k) with f̂ the grid average against e^{-ik·x}
        let scale = normalization() * (2.0 * PI).powi(3) / points as f64;
        let mut out = SpectralField::zeros_on(lat.clone());
        for (i, c) in out.coeffs_mut().iter_mut().enumerate() {
            let m = lat.mode(i);
            let s = self.slot(m.k());
            let pos = m.is_positive();
            let mut vec = [0.0; 3];
            for b in 0..3 {
                let z = products[b][s];
                vec[b] = scale * if pos { z.re } else { -z.im };
            }
            *c = lat.basis(i).components(&vec);
        }
        Ok(out)
    }

    pub fn convective(&self, u: &SpectralField, n_out: usize) -> Result<SpectralField> {
        self.bilinear(u, u, n_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nonlinearity::{bilinear_term, convective_term};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(n_max: usize, seed: u64) -> SpectralField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = SpectralField::zeros(n_max).unwrap();
        for c in f.coeffs_mut() {
            *c = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        }
        f
    }

    #[test]
    fn matches_pairwise_convolution() {
        for n in 1..=4 {
            let conv = GridConvolver::new(n).unwrap();
            let u = random_field(n, 10 + n as u64);
            let v = random_field(n, 20 + n as u64);
            for n_out in [1, n] {
                let exact = bilinear_term(&u, &v, n_out).unwrap();
                let fast = conv.bilinear(&u, &v, n_out).unwrap();
                let err = exact.max_abs_diff(&fast) / exact.max_abs();
                assert!(err < 1e-12, "N={n} n_out={n_out}: {err:e}");
            }
        }
    }

    #[test]
    fn coarse_field_on_fine_grid() {
        let conv = GridConvolver::new(4).unwrap();
        let u = random_field(2, 3);
        let exact = convective_term(&u, 2).unwrap();
        let fast = conv.convective(&u, 2).unwrap();
        assert!(exact.max_abs_diff(&fast) < 1e-12 * exact.max_abs());
        assert!(conv.convective(&random_field(5, 1), 3).is_err());
    }
}
