//! Fourier lattice of the 3-torus: mode indices, sign classes, truncation
//! windows and the perpendicular frames used to store divergence-free
//! coefficients.
//!
//! A mode `k` carries the real basis function `cos(k·x)` when `k` is in the
//! positive class and `sin(k·x)` otherwise.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{param, Result};

pub type Vec3 = [f64; 3];

#[inline]
pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm3(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SignClass {
    Positive,
    Negative,
}

impl SignClass {
    pub fn opposite(self) -> Self {
        match self {
            SignClass::Positive => SignClass::Negative,
            SignClass::Negative => SignClass::Positive,
        }
    }
}

/// Nonzero lattice point of Z³.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[i32; 3]", into = "[i32; 3]")]
pub struct ModeIndex([i32; 3]);

impl TryFrom<[i32; 3]> for ModeIndex {
    type Error = crate::Error;
    fn try_from(k: [i32; 3]) -> Result<Self> {
        ModeIndex::new(k)
    }
}

impl From<ModeIndex> for [i32; 3] {
    fn from(k: ModeIndex) -> Self {
        k.0
    }
}

impl fmt::Display for ModeIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.0[0], self.0[1], self.0[2])
    }
}

impl ModeIndex {
    pub fn new(k: [i32; 3]) -> Result<Self> {
        if k == [0, 0, 0] {
            return param("mode index must be nonzero");
        }
        Ok(ModeIndex(k))
    }

    /// Returns `None` for the origin.
    pub fn try_new(k: [i32; 3]) -> Option<Self> {
        (k != [0, 0, 0]).then_some(ModeIndex(k))
    }

    pub fn k(&self) -> [i32; 3] {
        self.0
    }

    pub fn sign_class(&self) -> SignClass {
        if is_positive(self.0) {
            SignClass::Positive
        } else {
            SignClass::Negative
        }
    }

    pub fn is_positive(&self) -> bool {
        is_positive(self.0)
    }

    pub fn neg(&self) -> Self {
        ModeIndex([-self.0[0], -self.0[1], -self.0[2]])
    }

    pub fn norm_sq(&self) -> i64 {
        self.0.iter().map(|&c| (c as i64) * (c as i64)).sum()
    }

    pub fn norm(&self) -> f64 {
        (self.norm_sq() as f64).sqrt()
    }

    pub fn sup_norm(&self) -> u32 {
        self.0.iter().map(|c| c.unsigned_abs()).max().unwrap_or(0)
    }

    pub fn as_vec3(&self) -> Vec3 {
        [self.0[0] as f64, self.0[1] as f64, self.0[2] as f64]
    }

    pub fn add(&self, other: &ModeIndex) -> Option<ModeIndex> {
        ModeIndex::try_new([
            self.0[0] + other.0[0],
            self.0[1] + other.0[1],
            self.0[2] + other.0[2],
        ])
    }

    pub fn sub(&self, other: &ModeIndex) -> Option<ModeIndex> {
        ModeIndex::try_new([
            self.0[0] - other.0[0],
            self.0[1] - other.0[1],
            self.0[2] - other.0[2],
        ])
    }

    pub fn in_low(&self, n: usize) -> bool {
        self.sup_norm() as usize <= n
    }
}

#[inline]
pub(crate) fn is_positive(k: [i32; 3]) -> bool {
    k[0] > 0 || (k[0] == 0 && (k[1] > 0 || (k[1] == 0 && k[2] > 0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    /// `0 < |k|∞ ≤ n`
    Low(usize),
    /// `n < |k|∞ ≤ n_max`
    High { n: usize, n_max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Part {
    Low,
    High,
}

/// Modes of a window in lexicographic order.
pub fn enumerate_modes(window: Window) -> Result<Vec<ModeIndex>> {
    let (lo, hi) = match window {
        Window::Low(n) => {
            if n < 1 {
                return param("truncation radius must be at least 1");
            }
            (0usize, n)
        }
        Window::High { n, n_max } => {
            if n < 1 || n > n_max {
                return param(format!("high window needs 1 <= N <= N_max, got N={n}, N_max={n_max}"));
            }
            (n, n_max)
        }
    };
    let r = hi as i32;
    let mut out = Vec::new();
    for a in -r..=r {
        for b in -r..=r {
            for c in -r..=r {
                let s = a.abs().max(b.abs()).max(c.abs()) as usize;
                if s > lo && s <= hi {
                    out.push(ModeIndex([a, b, c]));
                }
            }
        }
    }
    Ok(out)
}

/// Number of modes with `0 < |k|∞ ≤ n`.
pub fn low_count(n: usize) -> usize {
    (2 * n + 1).pow(3) - 1
}

/// Real dimension of the low-mode space.
pub fn low_dimension(n: usize) -> usize {
    2 * low_count(n)
}

/// Orthonormal frame of the plane perpendicular to a mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerpBasis {
    pub x1: Vec3,
    pub x2: Vec3,
}

impl PerpBasis {
    pub fn vector(&self, i: usize) -> &Vec3 {
        if i == 0 {
            &self.x1
        } else {
            &self.x2
        }
    }

    pub fn reconstruct(&self, c: [f64; 2]) -> Vec3 {
        [
            c[0] * self.x1[0] + c[1] * self.x2[0],
            c[0] * self.x1[1] + c[1] * self.x2[1],
            c[0] * self.x1[2] + c[1] * self.x2[2],
        ]
    }

    pub fn components(&self, v: &Vec3) -> [f64; 2] {
        [dot(&self.x1, v), dot(&self.x2, v)]
    }
}

/// Gram–Schmidt of the first standard vector not parallel to `k`, then `k̂ × x¹`.
pub fn perp_basis(k: &ModeIndex) -> PerpBasis {
    let kv = k.as_vec3();
    let kn = norm3(&kv);
    let khat = [kv[0] / kn, kv[1] / kn, kv[2] / kn];
    let mut x1 = [0.0; 3];
    for j in 0..3 {
        let mut e = [0.0; 3];
        e[j] = 1.0;
        if norm3(&cross(&e, &kv)) == 0.0 {
            continue;
        }
        let p = dot(&e, &khat);
        let v = [e[0] - p * khat[0], e[1] - p * khat[1], e[2] - p * khat[2]];
        let n = norm3(&v);
        x1 = [v[0] / n, v[1] / n, v[2] / n];
        break;
    }
    let x2 = cross(&khat, &x1);
    PerpBasis { x1, x2 }
}

/// `η − (k·η)/|k|² k`.
pub fn leray_project(k: &ModeIndex, eta: &Vec3) -> Vec3 {
    let kv = k.as_vec3();
    let s = dot(&kv, eta) / dot(&kv, &kv);
    [eta[0] - s * kv[0], eta[1] - s * kv[1], eta[2] - s * kv[2]]
}

/// Mode table of the window `0 < |k|∞ ≤ n_max`, shared between fields.
#[derive(Debug)]
pub struct Lattice {
    n_max: usize,
    modes: Vec<ModeIndex>,
    bases: Vec<PerpBasis>,
    norm_sq: Vec<f64>,
    sup: Vec<usize>,
}

impl Lattice {
    fn build(n_max: usize) -> Lattice {
        let modes = enumerate_modes(Window::Low(n_max)).expect("n_max >= 1");
        let bases = modes.iter().map(perp_basis).collect();
        let norm_sq = modes.iter().map(|m| m.norm_sq() as f64).collect();
        let sup = modes.iter().map(|m| m.sup_norm() as usize).collect();
        Lattice { n_max, modes, bases, norm_sq, sup }
    }

    /// Cached lattice for a truncation radius.
    pub fn shared(n_max: usize) -> Result<Arc<Lattice>> {
        if n_max < 1 {
            return param("N_max must be at least 1");
        }
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Lattice>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("lattice cache poisoned");
        Ok(guard
            .entry(n_max)
            .or_insert_with(|| Arc::new(Lattice::build(n_max)))
            .clone())
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn modes(&self) -> &[ModeIndex] {
        &self.modes
    }

    pub fn mode(&self, i: usize) -> ModeIndex {
        self.modes[i]
    }

    pub fn basis(&self, i: usize) -> &PerpBasis {
        &self.bases[i]
    }

    /// `|k|²` of mode `i`.
    pub fn norm_sq(&self, i: usize) -> f64 {
        self.norm_sq[i]
    }

    pub fn sup_norm(&self, i: usize) -> usize {
        self.sup[i]
    }

    /// Position in lexicographic order, or `None` outside the window.
    #[inline]
    pub fn index_of(&self, k: [i32; 3]) -> Option<usize> {
        let n = self.n_max as i32;
        if k[0].abs() > n || k[1].abs() > n || k[2].abs() > n || k == [0, 0, 0] {
            return None;
        }
        let side = 2 * n + 1;
        let raw = (((k[0] + n) * side + (k[1] + n)) * side + (k[2] + n)) as usize;
        let centre = ((n * side + n) * side + n) as usize;
        Some(if raw < centre { raw } else { raw - 1 })
    }

    /// Indices of the modes with `|k|∞ ≤ n`, in lexicographic order.
    pub fn low_indices(&self, n: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.sup[i] <= n).collect()
    }

    pub fn high_indices(&self, n: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.sup[i] > n).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn low_window_sizes() {
        assert_eq!(enumerate_modes(Window::Low(1)).unwrap().len(), 26);
        assert_eq!(enumerate_modes(Window::Low(2)).unwrap().len(), 124);
        assert_eq!(low_dimension(2), 248);
        assert!(enumerate_modes(Window::Low(0)).is_err());
        assert!(enumerate_modes(Window::High { n: 3, n_max: 2 }).is_err());
        let high = enumerate_modes(Window::High { n: 1, n_max: 2 }).unwrap();
        assert_eq!(high.len(), 124 - 26);
    }

    #[test]
    fn low_window_closed_under_negation() {
        let modes = enumerate_modes(Window::Low(2)).unwrap();
        for m in &modes {
            assert!(modes.contains(&m.neg()));
        }
    }

    #[test]
    fn perp_basis_examples() {
        let b = perp_basis(&ModeIndex::new([1, 0, 0]).unwrap());
        assert_eq!(b.x1[0], 0.0);
        assert_eq!(b.x2[0], 0.0);
        assert!((dot(&b.x1, &b.x2)).abs() <= 1e-14);
        let k = ModeIndex::new([1, 1, 1]).unwrap();
        let b = perp_basis(&k);
        assert!(dot(&b.x1, &k.as_vec3()).abs() <= 1e-14);
        assert!(dot(&b.x2, &k.as_vec3()).abs() <= 1e-14);
        let k = ModeIndex::new([2, -1, 3]).unwrap();
        let (a, c) = (perp_basis(&k), perp_basis(&k));
        for j in 0..3 {
            assert_eq!(a.x1[j].to_bits(), c.x1[j].to_bits());
            assert_eq!(a.x2[j].to_bits(), c.x2[j].to_bits());
        }
    }

    #[test]
    fn leray_examples() {
        let k = ModeIndex::new([1, 0, 0]).unwrap();
        assert_eq!(leray_project(&k, &[1.0, 1.0, 0.0]), [0.0, 1.0, 0.0]);
        let k = ModeIndex::new([1, 2, 2]).unwrap();
        let p = leray_project(&k, &[3.0, 0.0, 1.0]);
        let expect = [3.0 - 5.0 / 9.0, -10.0 / 9.0, 1.0 - 10.0 / 9.0];
        for j in 0..3 {
            assert!((p[j] - expect[j]).abs() < 1e-15);
        }
        assert!(dot(&p, &k.as_vec3()).abs() < 1e-14);
        let q = leray_project(&k, &k.as_vec3());
        assert!(norm3(&q) < 1e-15);
    }

    #[test]
    fn index_matches_enumeration() {
        for n in 1..=4 {
            let lat = Lattice::shared(n).unwrap();
            for (i, m) in lat.modes().iter().enumerate() {
                assert_eq!(lat.index_of(m.k()), Some(i));
            }
            assert_eq!(lat.index_of([0, 0, 0]), None);
            assert_eq!(lat.index_of([n as i32 + 1, 0, 0]), None);
        }
    }

    proptest! {
        #[test]
        fn sign_class_is_antisymmetric(a in -6i32..=6, b in -6i32..=6, c in -6i32..=6) {
            prop_assume!([a, b, c] != [0, 0, 0]);
            let k = ModeIndex::new([a, b, c]).unwrap();
            prop_assert_eq!(k.neg().sign_class(), k.sign_class().opposite());
        }

        #[test]
        fn perp_basis_orthonormal(a in -8i32..=8, b in -8i32..=8, c in -8i32..=8) {
            prop_assume!([a, b, c] != [0, 0, 0]);
            let k = ModeIndex::new([a, b, c]).unwrap();
            let p = perp_basis(&k);
            let kv = k.as_vec3();
            let kn = norm3(&kv);
            prop_assert!(dot(&p.x1, &kv).abs() / kn <= 1e-14);
            prop_assert!(dot(&p.x2, &kv).abs() / kn <= 1e-14);
            prop_assert!(dot(&p.x1, &p.x2).abs() <= 1e-14);
            prop_assert!((norm3(&p.x1) - 1.0).abs() <= 1e-14);
            prop_assert!((norm3(&p.x2) - 1.0).abs() <= 1e-14);
        }

        #[test]
        fn leray_is_idempotent(a in -5i32..=5, b in -5i32..=5, c in -5i32..=5,
                               x in -3.0f64..3.0, y in -3.0f64..3.0, z in -3.0f64..3.0) {
            prop_assume!([a, b, c] != [0, 0, 0]);
            let k = ModeIndex::new([a, b, c]).unwrap();
            let p = leray_project(&k, &[x, y, z]);
            let q = leray_project(&k, &p);
            for j in 0..3 {
                prop_assert!((p[j] - q[j]).abs() <= 1e-14);
            }
        }
    }
}
