//! The projected convective term `B(u, v) = P (u·∇) v` in mode coordinates.
//!
//! With raw trig modes, `∇e_m = m e_{-m}`, so an ordered pair contributes
//! `(u_l·m) e_l e_{-m} P u_m`. The product `e_l e_{-m}` is expanded with the
//! product-to-sum identities into half-weighted modes at `l − m` and `l + m`.
//! Coefficients live against the normalized basis `ê_k = κ e_k`,
//! `κ = sqrt(2 / (2π)³)`, so the raw-convention result is multiplied by `κ`
//! once on the way out. The grid oracle below confirms this constant.

use std::f64::consts::PI;

use crate::error::{param, Result};
use crate::field::SpectralField;
use crate::modes::{dot, is_positive, leray_project, perp_basis, Lattice, ModeIndex, Vec3};
use crate::parallel;

/// `κ = sqrt(2/(2π)³)`, the factor between raw trig modes and the normalized basis.
pub fn normalization() -> f64 {
    (2.0 / (2.0 * PI).powi(3)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Trig {
    Cos,
    Sin,
}

/// Expansion of `e_l · e_{-m}` as `Σ c_j e_{t_j}`; a `None` target is the
/// dropped mean mode.
#[inline]
pub(crate) fn product_expansion(l: [i32; 3], m: [i32; 3]) -> [(f64, Option<[i32; 3]>); 2] {
    let a = if is_positive(l) { Trig::Cos } else { Trig::Sin };
    let negm = [-m[0], -m[1], -m[2]];
    let b = if is_positive(negm) { Trig::Cos } else { Trig::Sin };
    // a·b with wavevectors l and −m: targets l−m (sum) and l+m (difference)
    let sum = [l[0] - m[0], l[1] - m[1], l[2] - m[2]];
    let diff = [l[0] + m[0], l[1] + m[1], l[2] + m[2]];
    let (cs, cd, kind) = match (a, b) {
        (Trig::Cos, Trig::Cos) => (0.5, 0.5, Trig::Cos),
        (Trig::Sin, Trig::Sin) => (-0.5, 0.5, Trig::Cos),
        (Trig::Sin, Trig::Cos) => (0.5, 0.5, Trig::Sin),
        (Trig::Cos, Trig::Sin) => (0.5, -0.5, Trig::Sin),
    };
    [to_basis(cs, kind, sum), to_basis(cd, kind, diff)]
}

#[inline]
fn to_basis(c: f64, kind: Trig, w: [i32; 3]) -> (f64, Option<[i32; 3]>) {
    if w == [0, 0, 0] {
        return (0.0, None);
    }
    let neg = [-w[0], -w[1], -w[2]];
    match kind {
        Trig::Cos => (c, Some(if is_positive(w) { w } else { neg })),
        Trig::Sin => {
            if is_positive(w) {
                (-c, Some(neg))
            } else {
                (c, Some(w))
            }
        }
    }
}

/// One emitted coefficient of an ordered pair interaction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Emission {
    pub target: ModeIndex,
    /// R³ coefficient, perpendicular to `target`.
    pub vector: Vec3,
    /// Components in the target's perpendicular frame.
    pub components: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairInteraction {
    pub l: ModeIndex,
    pub m: ModeIndex,
    pub emissions: Vec<Emission>,
}

/// `B(u_l ê_l, u_m ê_m)` in the normalized basis.
pub fn pair_interaction(l: ModeIndex, u_l: Vec3, m: ModeIndex, u_m: Vec3) -> Result<PairInteraction> {
    let tol = 1e-12;
    let (lv, mv) = (l.as_vec3(), m.as_vec3());
    let scale_l = l.norm() * dot(&u_l, &u_l).sqrt();
    let scale_m = m.norm() * dot(&u_m, &u_m).sqrt();
    if dot(&u_l, &lv).abs() > tol * scale_l.max(f64::MIN_POSITIVE)
        || dot(&u_m, &mv).abs() > tol * scale_m.max(f64::MIN_POSITIVE)
    {
        return param("pair coefficients must be perpendicular to their modes");
    }
    let s = dot(&u_l, &mv) * normalization();
    let mut emissions = Vec::with_capacity(2);
    for (c, t) in product_expansion(l.k(), m.k()) {
        let Some(t) = t else { continue };
        let target = ModeIndex::new(t)?;
        if s == 0.0 {
            continue;
        }
        let p = leray_project(&target, &u_m);
        let f = s * c;
        let vector = [f * p[0], f * p[1], f * p[2]];
        let components = perp_basis(&target).components(&vector);
        // merge when l−m and l+m name the same mode
        if let Some(e) = emissions.iter_mut().find(|e: &&mut Emission| e.target == target) {
            for j in 0..3 {
                e.vector[j] += vector[j];
            }
            e.components[0] += components[0];
            e.components[1] += components[1];
        } else {
            emissions.push(Emission { target, vector, components });
        }
    }
    Ok(PairInteraction { l, m, emissions })
}

struct Entry {
    k: [i32; 3],
    kv: Vec3,
    vec: Vec3,
}

fn nonzero_entries(u: &SpectralField) -> Vec<Entry> {
    let lat = u.lattice();
    u.coeffs()
        .iter()
        .enumerate()
        .filter(|(_, c)| c[0] != 0.0 || c[1] != 0.0)
        .map(|(i, _)| {
            let m = lat.mode(i);
            Entry { k: m.k(), kv: m.as_vec3(), vec: u.vector(i) }
        })
        .collect()
}

const CHUNK: usize = 8;

/// Galerkin-truncated `π_{n_out} B(u, v)`; the output lives on the lattice `n_out`.
pub fn bilinear_term(u: &SpectralField, v: &SpectralField, n_out: usize) -> Result<SpectralField> {
    let out_lat = Lattice::shared(n_out)?;
    let us = nonzero_entries(u);
    let vs = nonzero_entries(v);
    let kappa = normalization();
    let len = out_lat.len();
    let accumulate = |chunk: usize| -> Vec<[f64; 2]> {
        let mut acc = vec![[0.0; 2]; len];
        let lo = chunk * CHUNK;
        let hi = (lo + CHUNK).min(us.len());
        for ul in &us[lo..hi] {
            for vm in &vs {
                let s = dot(&ul.vec, &vm.kv);
                if s == 0.0 {
                    continue;
                }
                for (c, t) in product_expansion(ul.k, vm.k) {
                    let Some(t) = t else { continue };
                    let Some(idx) = out_lat.index_of(t) else { continue };
                    let b = out_lat.basis(idx);
                    let f = kappa * c * s;
                    acc[idx][0] += f * dot(&b.x1, &vm.vec);
                    acc[idx][1] += f * dot(&b.x2, &vm.vec);
                }
            }
        }
        acc
    };
    let chunks = us.len().div_ceil(CHUNK);
    let work = us.len() * vs.len();
    let partials: Vec<Vec<[f64; 2]>> = if work < 4096 {
        (0..chunks).map(accumulate).collect()
    } else {
        parallel::map_indices(chunks, accumulate)
    };
    let mut out = SpectralField::zeros_on(out_lat);
    for p in partials {
        for (o, c) in out.coeffs_mut().iter_mut().zip(p) {
            o[0] += c[0];
            o[1] += c[1];
        }
    }
    Ok(out)
}

/// `π_{n_out} B(u, u)`.
pub fn convective_term(u: &SpectralField, n_out: usize) -> Result<SpectralField> {
    if n_out > u.n_max() {
        return param(format!("N_out={n_out} exceeds N_max={}", u.n_max()));
    }
    bilinear_term(u, u, n_out)
}

/// Grid evaluation of `P (u·∇) u` by direct trig sums and quadrature.
pub fn pseudospectral_oracle(u: &SpectralField, grid_per_axis: usize) -> Result<SpectralField> {
    let n = u.n_max();
    if grid_per_axis < 4 * n + 1 {
        return param(format!(
            "grid of {grid_per_axis} points per axis aliases the quadratic term at N_max={n} (need >= {})",
            4 * n + 1
        ));
    }
    let g = grid_per_axis;
    let kappa = normalization();
    let lat = u.lattice().clone();
    let nn = n as i32;
    // per-axis tables of exp(i k x_j) for |k| ≤ n
    let width = 2 * n + 1;
    let mut table = vec![(0.0f64, 0.0f64); width * g];
    for kk in -nn..=nn {
        for j in 0..g {
            let x = 2.0 * PI * j as f64 / g as f64;
            let ph = kk as f64 * x;
            table[(kk + nn) as usize * g + j] = (ph.cos(), ph.sin());
        }
    }
    let phase = |k: [i32; 3], p: [usize; 3]| -> (f64, f64) {
        let a = table[(k[0] + nn) as usize * g + p[0]];
        let b = table[(k[1] + nn) as usize * g + p[1]];
        let c = table[(k[2] + nn) as usize * g + p[2]];
        let ab = (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0);
        (ab.0 * c.0 - ab.1 * c.1, ab.0 * c.1 + ab.1 * c.0)
    };
    let entries = nonzero_entries(u);
    let points = g * g * g;
    // pointwise (u·∇)u
    let field_at = |p: usize| -> Vec3 {
        let idx = [p / (g * g), (p / g) % g, p % g];
        let mut val = [0.0; 3];
        let mut grad = [[0.0; 3]; 3]; // grad[a][b] = ∂_a u_b
        for e in &entries {
            let (c, s) = phase(e.k, idx);
            let (f, df) = if is_positive(e.k) { (c, -s) } else { (s, c) };
            for b in 0..3 {
                val[b] += kappa * e.vec[b] * f;
                for a in 0..3 {
                    grad[a][b] += kappa * e.vec[b] * e.kv[a] * df;
                }
            }
        }
        let mut out = [0.0; 3];
        for b in 0..3 {
            out[b] = val[0] * grad[0][b] + val[1] * grad[1][b] + val[2] * grad[2][b];
        }
        out
    };
    let conv: Vec<Vec3> = parallel::map_indices(points, field_at);
    let weight = (2.0 * PI / g as f64).powi(3);
    let project = |i: usize| -> [f64; 2] {
        let m = lat.mode(i);
        let k = m.k();
        let pos = m.is_positive();
        let mut acc = [0.0; 3];
        for (p, f) in conv.iter().enumerate() {
            let idx = [p / (g * g), (p / g) % g, p % g];
            let (c, s) = phase(k, idx);
            let e = if pos { c } else { s };
            for b in 0..3 {
                acc[b] += f[b] * e;
            }
        }
        let v = [acc[0] * weight * kappa, acc[1] * weight * kappa, acc[2] * weight * kappa];
        lat.basis(i).components(&leray_project(&m, &v))
    };
    let coeffs = parallel::map_indices(lat.len(), project);
    SpectralField::from_coeffs(n, coeffs)
}

/// `|A^{β−1/4}B(u,v)|_H / (|A^{β+1/4}u|_H |A^{β+1/4}v|_H)`, the ratio whose
/// supremum is the constant of the bilinear estimate.
pub fn bilinear_norm_ratio(u: &SpectralField, v: &SpectralField, beta: f64) -> Result<f64> {
    use crate::field::SobolevIndex;
    let b = bilinear_term(u, v, u.n_max().max(v.n_max()))?;
    let num = b.sobolev_norm(SobolevIndex(2.0 * beta - 0.5));
    let den = u.sobolev_norm(SobolevIndex(2.0 * beta + 0.5)) * v.sobolev_norm(SobolevIndex(2.0 * beta + 0.5));
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::SobolevIndex;
    use crate::modes::{norm3, Part};
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

    fn mode(k: [i32; 3]) -> ModeIndex {
        ModeIndex::new(k).unwrap()
    }

    #[test]
    fn self_interaction_vanishes() {
        let l = mode([1, 2, 0]);
        let p = perp_basis(&l);
        let r = pair_interaction(l, p.x1, l, p.x1).unwrap();
        assert!(r.emissions.iter().all(|e| norm3(&e.vector) <= 1e-16));
        let f = SpectralField::single_mode(2, l, [0.4, -1.1]).unwrap();
        assert!(convective_term(&f, 2).unwrap().max_abs() <= 1e-16);
    }

    #[test]
    fn orthogonal_prefactor_vanishes() {
        let l = mode([1, 0, 0]);
        let m = mode([0, 1, 0]);
        // u_l ⟂ m and u_l ⟂ l
        let r = pair_interaction(l, [0.0, 0.0, 1.0], m, [0.0, 0.0, 1.0]).unwrap();
        assert!(r.emissions.is_empty());
    }

    #[test]
    fn pair_targets_match_oracle() {
        let l = mode([2, 2, 1]);
        let m = mode([-1, -2, -1]);
        let (pl, pm) = (perp_basis(&l), perp_basis(&m));
        let r = pair_interaction(l, pl.x1, m, pm.x1).unwrap();
        let mut targets: Vec<_> = r.emissions.iter().map(|e| e.target.k()).collect();
        targets.sort();
        assert_eq!(targets, vec![[1, 0, 0], [3, 4, 2]]);
        for e in &r.emissions {
            assert!(dot(&e.vector, &e.target.as_vec3()).abs() < 1e-14);
        }
        // the ordered pair alone equals B(u_l ê_l, u_m ê_m) of the fields
        let ul = SpectralField::single_mode(4, l, [1.0, 0.0]).unwrap();
        let um = SpectralField::single_mode(4, m, [1.0, 0.0]).unwrap();
        let b = bilinear_term(&ul, &um, 4).unwrap();
        for e in &r.emissions {
            let c = b.get(e.target);
            assert!((c[0] - e.components[0]).abs() < 1e-15);
            assert!((c[1] - e.components[1]).abs() < 1e-15);
        }
        // full B(u,u) of the two-mode field against the grid oracle
        let u = &ul + &um;
        let spectral = convective_term(&u, 4).unwrap();
        let oracle = pseudospectral_oracle(&u, 17).unwrap();
        let scale = spectral.max_abs();
        assert!(scale > 0.0);
        assert!(spectral.max_abs_diff(&oracle) <= 1e-10 * scale);
    }

    #[test]
    fn oracle_support_on_sum_and_difference() {
        let l = mode([2, 0, 0]);
        let m = mode([0, 2, 1]);
        let mut u = SpectralField::single_mode(4, l, [0.7, -0.3]).unwrap();
        u.set(m, [0.2, 0.9]).unwrap();
        let oracle = pseudospectral_oracle(&u, 17).unwrap();
        let allowed: Vec<[i32; 3]> = [l.add(&m), l.sub(&m), m.sub(&l), l.neg().sub(&m)]
            .into_iter()
            .flatten()
            .map(|k| k.k())
            .collect();
        let scale = oracle.max_abs();
        assert!(scale > 1e-3);
        for (i, c) in oracle.coeffs().iter().enumerate() {
            let k = oracle.lattice().mode(i).k();
            if !allowed.contains(&k) {
                assert!(c[0].abs().max(c[1].abs()) <= 1e-12 * scale, "mass at {k:?}");
            }
        }
    }

    #[test]
    fn oracle_rejects_aliasing_grid() {
        let u = random_field(2, 1);
        assert!(pseudospectral_oracle(&u, 8).is_err());
    }

    #[test]
    fn oracle_single_mode_is_zero() {
        let u = SpectralField::single_mode(2, mode([1, -1, 2]), [0.3, 0.8]).unwrap();
        assert!(pseudospectral_oracle(&u, 9).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn random_field_matches_oracle() {
        let u = random_field(3, 7);
        let a = convective_term(&u, 3).unwrap();
        let b = pseudospectral_oracle(&u, 13).unwrap();
        let rel = (&a - &b).sobolev_norm(SobolevIndex::H) / b.sobolev_norm(SobolevIndex::H);
        assert!(rel <= 1e-9, "relative error {rel}");
    }

    #[test]
    fn skew_symmetry() {
        let u = random_field(4, 3);
        let b = convective_term(&u, 4).unwrap();
        let e = b.inner(&u, SobolevIndex::H).abs();
        let scale = u.sobolev_norm_sq(SobolevIndex::V1) * u.sobolev_norm(SobolevIndex::H);
        assert!(e <= 1e-10 * scale, "{e} vs {scale}");
    }

    #[test]
    fn bilinear_consistency_and_splitting() {
        let u = random_field(3, 11);
        let z = SpectralField::zeros(3).unwrap();
        assert_eq!(bilinear_term(&u, &u, 3).unwrap(), convective_term(&u, 3).unwrap());
        assert_eq!(bilinear_term(&u, &z, 3).unwrap().max_abs(), 0.0);
        let lo = u.project_window(1, Part::Low).unwrap();
        let hi = u.project_window(1, Part::High).unwrap();
        let mut sum = bilinear_term(&lo, &lo, 3).unwrap();
        sum += &bilinear_term(&lo, &hi, 3).unwrap();
        sum += &bilinear_term(&hi, &lo, 3).unwrap();
        sum += &bilinear_term(&hi, &hi, 3).unwrap();
        let full = convective_term(&u, 3).unwrap();
        assert!(sum.max_abs_diff(&full) <= 1e-12 * full.max_abs());
    }

    #[test]
    fn output_independent_of_frame_choice() {
        // Recompute every emission with the Leray projector in R³ and compare
        // reconstructed vectors; frames only enter through the final components.
        let u = random_field(2, 5);
        let b = convective_term(&u, 2).unwrap();
        let lat = u.lattice().clone();
        let mut r3 = vec![[0.0; 3]; lat.len()];
        for i in 0..lat.len() {
            for j in 0..lat.len() {
                let p = pair_interaction(lat.mode(i), u.vector(i), lat.mode(j), u.vector(j)).unwrap();
                for e in p.emissions {
                    if let Some(t) = lat.index_of(e.target.k()) {
                        for a in 0..3 {
                            r3[t][a] += e.vector[a];
                        }
                    }
                }
            }
        }
        for (t, v) in r3.iter().enumerate() {
            let w = b.vector(t);
            for a in 0..3 {
                assert!((v[a] - w[a]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_estimate_ratio_is_finite() {
        let mut worst: f64 = 0.0;
        for s in 0..5 {
            let u = random_field(2, 100 + s);
            let v = random_field(2, 200 + s);
            worst = worst.max(bilinear_norm_ratio(&u, &v, 0.5).unwrap());
        }
        assert!(worst.is_finite() && worst > 0.0);
    }
}
