//! Divergence-free velocity fields stored as two components per mode in the
//! mode's perpendicular frame, against the L²-normalized real Fourier basis.

use std::ops::{Add, AddAssign, Mul, Sub};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::modes::{Lattice, ModeIndex, Part, Vec3};

/// Sobolev exponent `α`; the mode weight in the squared norm is `|k|^{2α}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SobolevIndex(pub f64);

impl SobolevIndex {
    pub const H: SobolevIndex = SobolevIndex(0.0);
    pub const V1: SobolevIndex = SobolevIndex(1.0);

    /// The W space, `α = 2α₀ + 1/2`.
    pub fn w(alpha0: f64) -> Self {
        SobolevIndex(2.0 * alpha0 + 0.5)
    }

    /// The W̃ space, `α = 2α₀ + 3/4`.
    pub fn w_tilde(alpha0: f64) -> Self {
        SobolevIndex(2.0 * alpha0 + 0.75)
    }

    pub fn weight(&self, norm_sq: f64) -> f64 {
        norm_sq.powf(self.0)
    }

    pub fn weights(&self, lattice: &Lattice) -> Vec<f64> {
        (0..lattice.len()).map(|i| self.weight(lattice.norm_sq(i))).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SpectralField {
    lattice: Arc<Lattice>,
    coeffs: Vec<[f64; 2]>,
}

impl SpectralField {
    pub fn zeros(n_max: usize) -> Result<Self> {
        Ok(Self::zeros_on(Lattice::shared(n_max)?))
    }

    pub fn zeros_on(lattice: Arc<Lattice>) -> Self {
        let n = lattice.len();
        SpectralField { lattice, coeffs: vec![[0.0; 2]; n] }
    }

    pub fn from_coeffs(n_max: usize, coeffs: Vec<[f64; 2]>) -> Result<Self> {
        let lattice = Lattice::shared(n_max)?;
        if coeffs.len() != lattice.len() {
            return param(format!(
                "expected {} coefficient pairs for N_max={n_max}, got {}",
                lattice.len(),
                coeffs.len()
            ));
        }
        Ok(SpectralField { lattice, coeffs })
    }

    /// Field with a single nonzero coefficient.
    pub fn single_mode(n_max: usize, k: ModeIndex, c: [f64; 2]) -> Result<Self> {
        let mut f = Self::zeros(n_max)?;
        f.set(k, c)?;
        Ok(f)
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        &self.lattice
    }

    pub fn n_max(&self) -> usize {
        self.lattice.n_max()
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn coeffs(&self) -> &[[f64; 2]] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [[f64; 2]] {
        &mut self.coeffs
    }

    pub fn get(&self, k: ModeIndex) -> [f64; 2] {
        self.lattice.index_of(k.k()).map(|i| self.coeffs[i]).unwrap_or([0.0; 2])
    }

    pub fn set(&mut self, k: ModeIndex, c: [f64; 2]) -> Result<()> {
        match self.lattice.index_of(k.k()) {
            Some(i) => {
                self.coeffs[i] = c;
                Ok(())
            }
            None => param(format!("mode {k} outside truncation N_max={}", self.n_max())),
        }
    }

    /// R³ coefficient of mode `i`, perpendicular to the mode by construction.
    pub fn vector(&self, i: usize) -> Vec3 {
        self.lattice.basis(i).reconstruct(self.coeffs[i])
    }

    /// Flat view `[c¹₀, c²₀, c¹₁, ...]`.
    pub fn as_flat(&self) -> Vec<f64> {
        self.coeffs.iter().flat_map(|c| c.iter().copied()).collect()
    }

    pub fn from_flat(n_max: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return param("flat coefficient vector has odd length");
        }
        Self::from_coeffs(n_max, flat.chunks(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn sobolev_norm(&self, alpha: SobolevIndex) -> f64 {
        self.sobolev_norm_sq(alpha).sqrt()
    }

    pub fn sobolev_norm_sq(&self, alpha: SobolevIndex) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| alpha.weight(self.lattice.norm_sq(i)) * (c[0] * c[0] + c[1] * c[1]))
            .sum()
    }

    /// `Σ w_i ⟨u_i, v_i⟩` with precomputed per-mode weights.
    pub fn weighted_inner(&self, other: &SpectralField, weights: &[f64]) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .zip(weights)
            .map(|((a, b), w)| w * (a[0] * b[0] + a[1] * b[1]))
            .sum()
    }

    pub fn weighted_norm(&self, weights: &[f64]) -> f64 {
        self.weighted_inner(self, weights).sqrt()
    }

    pub fn inner(&self, other: &SpectralField, alpha: SobolevIndex) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .enumerate()
            .map(|(i, (a, b))| alpha.weight(self.lattice.norm_sq(i)) * (a[0] * b[0] + a[1] * b[1]))
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().flat_map(|c| c.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &SpectralField) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .flat_map(|(a, b)| [(a[0] - b[0]).abs(), (a[1] - b[1]).abs()])
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c[0].is_finite() && c[1].is_finite())
    }

    /// Low part keeps `|k|∞ ≤ n`, high part keeps the rest.
    pub fn project_window(&self, n: usize, part: Part) -> Result<SpectralField> {
        if n > self.n_max() {
            return param(format!("window N={n} exceeds N_max={}", self.n_max()));
        }
        let mut out = self.clone();
        for (i, c) in out.coeffs.iter_mut().enumerate() {
            let low = self.lattice.sup_norm(i) <= n;
            if low != (part == Part::Low) {
                *c = [0.0; 2];
            }
        }
        Ok(out)
    }

    /// Same field on another truncation; modes outside the new window are dropped.
    pub fn resize(&self, n_max: usize) -> Result<SpectralField> {
        let mut out = SpectralField::zeros(n_max)?;
        for (i, m) in self.lattice.modes().iter().enumerate() {
            if let Some(j) = out.lattice.index_of(m.k()) {
                out.coeffs[j] = self.coeffs[i];
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, s: f64) {
        for c in &mut self.coeffs {
            c[0] *= s;
            c[1] *= s;
        }
    }

    pub fn axpy(&mut self, a: f64, x: &SpectralField) {
        debug_assert_eq!(self.len(), x.len());
        for (c, d) in self.coeffs.iter_mut().zip(&x.coeffs) {
            c[0] += a * d[0];
            c[1] += a * d[1];
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = FieldJson {
            n_max: self.n_max(),
            coefficients: self
                .lattice
                .modes()
                .iter()
                .zip(&self.coeffs)
                .filter(|(_, c)| c[0] != 0.0 || c[1] != 0.0)
                .map(|(m, c)| ModeCoefficient { k: m.k(), c: *c })
                .collect(),
        };
        serde_json::to_string(&doc).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<SpectralField> {
        let doc: FieldJson =
            serde_json::from_str(s).map_err(|e| Error::Serialization(e.to_string()))?;
        let mut out = SpectralField::zeros(doc.n_max)?;
        for mc in doc.coefficients {
            out.set(ModeIndex::new(mc.k)?, mc.c)?;
        }
        Ok(out)
    }

    /// Little-endian float64, modes in lexicographic order, two per mode.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.coeffs.iter().flat_map(|c| c.iter()).flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<SpectralField> {
        if bytes.len() % 16 != 0 {
            return param("binary field length is not a multiple of 16 bytes");
        }
        let modes = bytes.len() / 16;
        let n_max = (1..=64)
            .find(|&n| crate::modes::low_count(n) == modes)
            .ok_or_else(|| Error::Parameter(format!("{modes} modes is not a full truncation window")))?;
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect();
        SpectralField::from_flat(n_max, &vals)
    }
}

impl PartialEq for SpectralField {
    fn eq(&self, other: &Self) -> bool {
        self.n_max() == other.n_max() && self.coeffs == other.coeffs
    }
}

#[derive(Serialize, Deserialize)]
struct ModeCoefficient {
    k: [i32; 3],
    c: [f64; 2],
}

#[derive(Serialize, Deserialize)]
struct FieldJson {
    n_max: usize,
    coefficients: Vec<ModeCoefficient>,
}

impl Add<&SpectralField> for &SpectralField {
    type Output = SpectralField;
    fn add(self, rhs: &SpectralField) -> SpectralField {
        let mut out = self.clone();
        out.axpy(1.0, rhs);
        out
    }
}

impl Sub<&SpectralField> for &SpectralField {
    type Output = SpectralField;
    fn sub(self, rhs: &SpectralField) -> SpectralField {
        let mut out = self.clone();
        out.axpy(-1.0, rhs);
        out
    }
}

impl Mul<f64> for &SpectralField {
    type Output = SpectralField;
    fn mul(self, s: f64) -> SpectralField {
        let mut out = self.clone();
        out.scale(s);
        out
    }
}

impl AddAssign<&SpectralField> for SpectralField {
    fn add_assign(&mut self, rhs: &SpectralField) {
        self.axpy(1.0, rhs);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modes::dot;
    use proptest::prelude::*;

    fn field_from(n_max: usize, vals: &[f64]) -> SpectralField {
        let mut f = SpectralField::zeros(n_max).unwrap();
        for (i, c) in f.coeffs_mut().iter_mut().enumerate() {
            *c = [vals[(2 * i) % vals.len()], vals[(2 * i + 1) % vals.len()]];
        }
        f
    }

    #[test]
    fn norm_examples() {
        let f = SpectralField::zeros(2).unwrap();
        assert_eq!(f.sobolev_norm(SobolevIndex::H), 0.0);
        let k = ModeIndex::new([1, 0, 0]).unwrap();
        let f = SpectralField::single_mode(2, k, [1.0, 0.0]).unwrap();
        assert_eq!(f.sobolev_norm(SobolevIndex(0.0)), 1.0);
        assert_eq!(f.sobolev_norm(SobolevIndex(1.0)), 1.0);
        let k = ModeIndex::new([2, 0, 0]).unwrap();
        let f = SpectralField::single_mode(2, k, [1.0, 0.0]).unwrap();
        assert!((f.sobolev_norm(SobolevIndex(1.0)) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn window_examples() {
        let f = field_from(3, &[0.3, -1.2, 0.7, 2.0, 0.1]);
        let lo = f.project_window(2, Part::Low).unwrap();
        let hi = f.project_window(2, Part::High).unwrap();
        assert_eq!(&lo + &hi, f);
        assert_eq!(lo.project_window(2, Part::Low).unwrap(), lo);
        let shell = f.project_window(2, Part::High).unwrap();
        assert_eq!(shell.project_window(2, Part::Low).unwrap().max_abs(), 0.0);
        assert!(f.project_window(4, Part::Low).is_err());
    }

    #[test]
    fn stored_coefficients_are_solenoidal() {
        let f = field_from(2, &[1.3, -0.4, 2.2]);
        for (i, m) in f.lattice().modes().iter().enumerate() {
            let v = f.vector(i);
            assert!(dot(&v, &m.as_vec3()).abs() <= 1e-14 * m.norm() * 3.0);
        }
    }

    #[test]
    fn json_and_binary_round_trip() {
        let f = field_from(2, &[0.25, -1.5, 3.0]);
        let g = SpectralField::from_json(&f.to_json().unwrap()).unwrap();
        assert_eq!(f, g);
        let h = SpectralField::from_le_bytes(&f.to_le_bytes()).unwrap();
        assert_eq!(f, h);
        assert!(SpectralField::from_le_bytes(&[0u8; 24]).is_err());
    }

    #[test]
    fn resize_preserves_shared_modes() {
        let f = field_from(2, &[1.0, 2.0, 3.0]);
        let g = f.resize(3).unwrap();
        assert_eq!(g.resize(2).unwrap(), f);
        assert_eq!(g.project_window(2, Part::High).unwrap().max_abs(), 0.0);
    }

    proptest! {
        #[test]
        fn parseval_split(vals in prop::collection::vec(-2.0f64..2.0, 8), n in 1usize..3, alpha in 0.0f64..3.0) {
            let f = field_from(3, &vals);
            let a = SobolevIndex(alpha);
            let lo = f.project_window(n, Part::Low).unwrap().sobolev_norm_sq(a);
            let hi = f.project_window(n, Part::High).unwrap().sobolev_norm_sq(a);
            let all = f.sobolev_norm_sq(a);
            prop_assert!((lo + hi - all).abs() <= 1e-12 * all.max(1.0));
        }
    }
}
