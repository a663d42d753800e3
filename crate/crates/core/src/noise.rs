//! Degenerate diagonal covariance, its low-mode completion, the smooth cutoff
//! profile and the drift of the cutoff equation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::field::{SobolevIndex, SpectralField};
use crate::modes::Lattice;
use crate::nonlinearity::convective_term;

// Degree-7 smoothstep S(x) = 35x⁴ − 84x⁵ + 70x⁶ − 20x⁷ and its derivatives.
fn smooth(x: f64) -> f64 {
    x * x * x * x * (35.0 + x * (-84.0 + x * (70.0 - 20.0 * x)))
}
fn smooth_d1(x: f64) -> f64 {
    140.0 * x * x * x * (1.0 - x).powi(3)
}
fn smooth_d2(x: f64) -> f64 {
    420.0 * x * x * (1.0 - x) * (1.0 - x) * (1.0 - 2.0 * x)
}
fn smooth_d3(x: f64) -> f64 {
    x * (840.0 + x * (-5040.0 + x * (8400.0 - 4200.0 * x)))
}

/// Smoothstep bridge from 0 at `s ≤ 0` to 1 at `s ≥ 1`.
pub fn smoothstep(s: f64) -> f64 {
    smooth(s.clamp(0.0, 1.0))
}

pub fn smoothstep_prime(s: f64) -> f64 {
    if s <= 0.0 || s >= 1.0 {
        0.0
    } else {
        smooth_d1(s)
    }
}

/// Cutoff profile: 1 on `[0,1]`, 0 on `[2,∞)`, C³ in between.
pub fn chi(r: f64) -> f64 {
    if r <= 1.0 {
        1.0
    } else if r >= 2.0 {
        0.0
    } else {
        1.0 - smooth(r - 1.0)
    }
}

pub fn chi_prime(r: f64) -> f64 {
    if r <= 1.0 || r >= 2.0 {
        0.0
    } else {
        -smooth_d1(r - 1.0)
    }
}

pub fn chi_second(r: f64) -> f64 {
    if r <= 1.0 || r >= 2.0 {
        0.0
    } else {
        -smooth_d2(r - 1.0)
    }
}

pub fn chi_third(r: f64) -> f64 {
    if r <= 1.0 || r >= 2.0 {
        0.0
    } else {
        -smooth_d3(r - 1.0)
    }
}

/// Diagonal covariance: `q` on the modes `|k|∞ > n0`, completion `q̄` on `|k|∞ ≤ n0`.
#[derive(Debug, Clone)]
pub struct NoiseSpec {
    lattice: Arc<Lattice>,
    n0: usize,
    alpha0: f64,
    q: Vec<[f64; 2]>,
    q_bar: Vec<[f64; 2]>,
}

impl NoiseSpec {
    /// `q_k = |k|^{-(2α₀+3/2)}` on high modes and `q̄_k = 1` on low modes.
    pub fn canonical(n_max: usize, n0: usize, alpha0: f64) -> Result<Self> {
        if n0 < 1 || n0 > n_max {
            return param(format!("need 1 <= N0 <= N_max, got N0={n0}, N_max={n_max}"));
        }
        if !(alpha0 > 0.5) {
            return param(format!("alpha0 must exceed 1/2, got {alpha0}"));
        }
        let lattice = Lattice::shared(n_max)?;
        let expo = -(2.0 * alpha0 + 1.5) / 2.0;
        let mut q = vec![[0.0; 2]; lattice.len()];
        let mut q_bar = vec![[0.0; 2]; lattice.len()];
        for i in 0..lattice.len() {
            if lattice.sup_norm(i) > n0 {
                let a = lattice.norm_sq(i).powf(expo);
                q[i] = [a, a];
            } else {
                q_bar[i] = [1.0, 1.0];
            }
        }
        Ok(NoiseSpec { lattice, n0, alpha0, q, q_bar })
    }

    /// Multiplies the high-mode amplitudes by `s > 0`.
    pub fn scale_high(mut self, s: f64) -> Result<Self> {
        if !(s > 0.0) {
            return param("noise scale must be positive");
        }
        for c in &mut self.q {
            c[0] *= s;
            c[1] *= s;
        }
        Ok(self)
    }

    /// Multiplies the completion amplitudes by `s > 0`.
    pub fn scale_low(mut self, s: f64) -> Result<Self> {
        if !(s > 0.0) {
            return param("noise scale must be positive");
        }
        for c in &mut self.q_bar {
            c[0] *= s;
            c[1] *= s;
        }
        Ok(self)
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        &self.lattice
    }

    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    pub fn n_max(&self) -> usize {
        self.lattice.n_max()
    }

    pub fn q(&self, i: usize) -> [f64; 2] {
        self.q[i]
    }

    pub fn q_bar(&self, i: usize) -> [f64; 2] {
        self.q_bar[i]
    }

    /// `Σ e_k q_k f_k`; annihilates `|k|∞ ≤ N₀`.
    pub fn apply_q(&self, f: &SpectralField) -> SpectralField {
        let mut out = f.clone();
        for (c, q) in out.coeffs_mut().iter_mut().zip(&self.q) {
            c[0] *= q[0];
            c[1] *= q[1];
        }
        out
    }

    /// Diagonal inverse on the forced modes.
    pub fn apply_q_inverse_high(&self, f: &SpectralField) -> Result<SpectralField> {
        let mut out = f.clone();
        for (i, c) in out.coeffs_mut().iter_mut().enumerate() {
            if self.q[i][0] == 0.0 || self.q[i][1] == 0.0 {
                if c[0] != 0.0 || c[1] != 0.0 {
                    return Err(Error::Domain(format!(
                        "Q is not invertible on mode {}",
                        self.lattice.mode(i)
                    )));
                }
                continue;
            }
            c[0] /= self.q[i][0];
            c[1] /= self.q[i][1];
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffSpec {
    pub rho: f64,
}

impl CutoffSpec {
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho > 0.0) {
            return param(format!("rho must be positive, got {rho}"));
        }
        Ok(CutoffSpec { rho })
    }
}

/// Which equation is integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dynamics {
    /// Nonlinearity switched off by `χ(|u|_W/3ρ)`, covariance `Q + (1−χ(|u|_W/ρ))Q̄`.
    Cutoff,
    /// Plain truncated equation with covariance `Q`.
    Plain,
}

/// Everything that defines the truncated cutoff/regularized equation.
#[derive(Debug, Clone)]
pub struct Model {
    pub noise: NoiseSpec,
    pub cutoff: CutoffSpec,
    /// Splitting level `N` of the low/high decomposition.
    pub n_low: usize,
    /// High-mode mollification `e^{−δ|k|²}`; zero disables it.
    pub delta: f64,
    pub dynamics: Dynamics,
    w_weights: Vec<f64>,
    mollifier: Vec<f64>,
}

impl Model {
    pub fn new(noise: NoiseSpec, cutoff: CutoffSpec, n_low: usize, delta: f64) -> Result<Self> {
        let lattice = noise.lattice().clone();
        if n_low < 1 || n_low > lattice.n_max() {
            return param(format!("need 1 <= N <= N_max, got N={n_low}, N_max={}", lattice.n_max()));
        }
        if !(delta >= 0.0) {
            return param("delta must be nonnegative");
        }
        let w_weights = SobolevIndex::w(noise.alpha0()).weights(&lattice);
        let mollifier = (0..lattice.len())
            .map(|i| if lattice.sup_norm(i) > n_low { (-lattice.norm_sq(i) * delta).exp() } else { 1.0 })
            .collect();
        Ok(Model { noise, cutoff, n_low, delta, dynamics: Dynamics::Cutoff, w_weights, mollifier })
    }

    /// Canonical noise, cutoff radius `rho`, splitting level `n_low`.
    pub fn canonical(n_max: usize, n0: usize, n_low: usize, alpha0: f64, rho: f64, delta: f64) -> Result<Self> {
        Model::new(NoiseSpec::canonical(n_max, n0, alpha0)?, CutoffSpec::new(rho)?, n_low, delta)
    }

    pub fn with_dynamics(mut self, dynamics: Dynamics) -> Self {
        self.dynamics = dynamics;
        self
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        self.noise.lattice()
    }

    pub fn n_max(&self) -> usize {
        self.lattice().n_max()
    }

    pub fn n0(&self) -> usize {
        self.noise.n0()
    }

    pub fn rho(&self) -> f64 {
        self.cutoff.rho
    }

    pub fn w_weights(&self) -> &[f64] {
        &self.w_weights
    }

    pub fn mollifier(&self) -> &[f64] {
        &self.mollifier
    }

    pub fn w_norm(&self, u: &SpectralField) -> f64 {
        u.weighted_norm(&self.w_weights)
    }

    pub fn w_inner(&self, u: &SpectralField, v: &SpectralField) -> f64 {
        u.weighted_inner(v, &self.w_weights)
    }

    /// Factor multiplying the nonlinearity at W-norm `r`.
    pub fn drift_factor(&self, w_norm: f64) -> f64 {
        match self.dynamics {
            Dynamics::Cutoff => chi(w_norm / (3.0 * self.cutoff.rho)),
            Dynamics::Plain => 1.0,
        }
    }

    /// Factor multiplying `Q̄` at W-norm `r`.
    pub fn low_noise_factor(&self, w_norm: f64) -> f64 {
        match self.dynamics {
            Dynamics::Cutoff => 1.0 - chi(w_norm / self.cutoff.rho),
            Dynamics::Plain => 0.0,
        }
    }

    /// Derivative of [`Model::drift_factor`] in the W-norm.
    pub fn drift_factor_prime(&self, w_norm: f64) -> f64 {
        match self.dynamics {
            Dynamics::Cutoff => chi_prime(w_norm / (3.0 * self.cutoff.rho)) / (3.0 * self.cutoff.rho),
            Dynamics::Plain => 0.0,
        }
    }

    /// Derivative of [`Model::low_noise_factor`] in the W-norm.
    pub fn low_noise_factor_prime(&self, w_norm: f64) -> f64 {
        match self.dynamics {
            Dynamics::Cutoff => -chi_prime(w_norm / self.cutoff.rho) / self.cutoff.rho,
            Dynamics::Plain => 0.0,
        }
    }

    /// `−e^{−δA_H} B(u,u) χ(|u|_W/3ρ)`.
    pub fn nonlinear_drift(&self, u: &SpectralField) -> Result<SpectralField> {
        let c = self.drift_factor(self.w_norm(u));
        let mut b = if c == 0.0 { SpectralField::zeros_on(self.lattice().clone()) } else { convective_term(u, self.n_max())? };
        for (v, m) in b.coeffs_mut().iter_mut().zip(&self.mollifier) {
            let f = -c * m;
            v[0] *= f;
            v[1] *= f;
        }
        Ok(b)
    }
}

/// Per-mode amplitudes of `Q(u) = Q + (1 − χ(|u|_W/ρ)) Q̄`.
pub fn state_covariance(u: &SpectralField, model: &Model) -> Vec<[f64; 2]> {
    let f = model.low_noise_factor(model.w_norm(u));
    (0..model.lattice().len())
        .map(|i| {
            let (q, qb) = (model.noise.q(i), model.noise.q_bar(i));
            [q[0] + f * qb[0], q[1] + f * qb[1]]
        })
        .collect()
}

/// `−Au − e^{−δA_H} B(u,u) χ(|u|_W/3ρ)`.
pub fn cutoff_drift(u: &SpectralField, model: &Model) -> Result<SpectralField> {
    let mut d = model.nonlinear_drift(u)?;
    let lat = model.lattice();
    for (i, (v, c)) in d.coeffs_mut().iter_mut().zip(u.coeffs()).enumerate() {
        let k2 = lat.norm_sq(i);
        v[0] -= k2 * c[0];
        v[1] -= k2 * c[1];
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(n_max: usize, seed: u64, amp: f64) -> SpectralField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = SpectralField::zeros(n_max).unwrap();
        for c in f.coeffs_mut() {
            *c = [amp * rng.random_range(-1.0..1.0), amp * rng.random_range(-1.0..1.0)];
        }
        f
    }

    fn scaled_to(u: &SpectralField, model: &Model, w: f64) -> SpectralField {
        u * (w / model.w_norm(u))
    }

    #[test]
    fn chi_examples() {
        assert_eq!(chi(0.5), 1.0);
        assert_eq!(chi(3.0), 0.0);
        assert_eq!(chi(1.0), 1.0);
        assert_eq!(chi(2.0), 0.0);
        let (r, h) = (1.5, 1e-4);
        assert!(((chi(r + h) - chi(r - h)) / (2.0 * h) - chi_prime(r)).abs() <= 1e-6);
    }

    #[test]
    fn chi_derivatives_are_consistent() {
        let h = 1e-5;
        for i in 1..40 {
            let r = 1.0 + i as f64 / 40.0;
            assert!(((chi_prime(r + h) - chi_prime(r - h)) / (2.0 * h) - chi_second(r)).abs() < 1e-6);
            assert!(((chi_second(r + h) - chi_second(r - h)) / (2.0 * h) - chi_third(r)).abs() < 1e-5);
            assert!(chi_prime(r) <= 0.0);
        }
    }

    #[test]
    fn q_annihilates_low_modes_and_inverts_on_high() {
        let spec = NoiseSpec::canonical(3, 1, 1.0).unwrap();
        let u = random_field(3, 4, 1.0);
        let low = u.project_window(1, crate::Part::Low).unwrap();
        assert_eq!(spec.apply_q(&low).max_abs(), 0.0);
        let high = u.project_window(1, crate::Part::High).unwrap();
        let back = spec.apply_q(&spec.apply_q_inverse_high(&high).unwrap());
        assert!(back.max_abs_diff(&high) <= 1e-13 * high.max_abs());
        assert!(matches!(spec.apply_q_inverse_high(&u), Err(Error::Domain(_))));
        let lat = spec.lattice().clone();
        for i in 0..lat.len() {
            if lat.sup_norm(i) > 1 {
                let w = lat.norm_sq(i).sqrt().powf(2.0 * 1.0 + 1.5) * spec.q(i)[0];
                assert!((w - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parameter_validation() {
        assert!(NoiseSpec::canonical(2, 1, 0.5).is_err());
        assert!(NoiseSpec::canonical(2, 3, 1.0).is_err());
        assert!(CutoffSpec::new(0.0).is_err());
        assert!(Model::canonical(2, 1, 3, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn covariance_regimes() {
        let model = Model::canonical(2, 1, 2, 1.0, 2.0, 0.0).unwrap();
        let lat = model.lattice().clone();
        let low: Vec<usize> = lat.low_indices(1);
        let z = SpectralField::zeros(2).unwrap();
        let a = state_covariance(&z, &model);
        assert!(low.iter().all(|&i| a[i] == [0.0, 0.0]));
        let u = random_field(2, 1, 1.0);
        let far = state_covariance(&scaled_to(&u, &model, 3.0 * model.rho()), &model);
        assert!(low.iter().all(|&i| far[i] == model.noise.q_bar(i)));
        let mid = state_covariance(&scaled_to(&u, &model, 1.5 * model.rho()), &model);
        let expect = 1.0 - chi(1.5);
        for &i in &low {
            assert!((mid[i][0] - expect).abs() < 1e-12);
            assert!(mid[i][0] > 0.0 && mid[i][0] < 1.0);
        }
    }

    #[test]
    fn drift_regimes() {
        let model = Model::canonical(2, 1, 1, 1.0, 0.5, 0.0).unwrap();
        let z = SpectralField::zeros(2).unwrap();
        assert_eq!(cutoff_drift(&z, &model).unwrap().max_abs(), 0.0);
        let u = random_field(2, 9, 1.0);
        let big = scaled_to(&u, &model, 6.0000001 * model.rho());
        let d = cutoff_drift(&big, &model).unwrap();
        let lat = model.lattice();
        for i in 0..lat.len() {
            for j in 0..2 {
                assert_eq!(d.coeffs()[i][j], -lat.norm_sq(i) * big.coeffs()[i][j]);
            }
        }
        // below 3ρ and δ = 0: the plain drift
        let small = scaled_to(&u, &model, 2.0 * model.rho());
        let d = cutoff_drift(&small, &model).unwrap();
        let b = convective_term(&small, 2).unwrap();
        let scale = b.max_abs() + small.max_abs() * 12.0;
        for i in 0..lat.len() {
            for j in 0..2 {
                let e = -lat.norm_sq(i) * small.coeffs()[i][j] - b.coeffs()[i][j];
                assert!((d.coeffs()[i][j] - e).abs() <= 1e-14 * scale);
            }
        }
    }

    #[test]
    fn mollifier_is_continuous_at_zero() {
        let u = random_field(3, 2, 0.05);
        let m0 = Model::canonical(3, 1, 1, 1.0, 10.0, 0.0).unwrap();
        let m1 = Model::canonical(3, 1, 1, 1.0, 10.0, 1e-8).unwrap();
        let a = cutoff_drift(&u, &m0).unwrap();
        let b = cutoff_drift(&u, &m1).unwrap();
        let rel = (&a - &b).sobolev_norm(SobolevIndex::H) / a.sobolev_norm(SobolevIndex::H);
        assert!(rel <= 1e-6);
    }
}
