//! Hörmander system of the low-mode equation: generators, brackets, rank
//! certificates and the mode-pair search.
//!
//! Brackets are evaluated in closed form by the chain rule through the scalar
//! cutoff factors; [`bracket_l`] is the generic Richardson finite-difference
//! bracket used to check them. Signs follow `[X,K]_L = DK·X − D_L X^L·K` with
//! the drift `X⁰ = Ay + χ B(y,y) + X⁰²`, so in the region `χ ≡ 1` the double
//! bracket equals `−(π_N B(q_l e_l, q_m e_m) + π_N B(q_m e_m, q_l e_l))`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::field::SpectralField;
use crate::flow::LowBlock;
use crate::modes::{enumerate_modes, Lattice, ModeIndex, Window};
use crate::noise::{chi, chi_prime, chi_second, chi_third, Model};
use crate::nonlinearity::{bilinear_term, convective_term};
use crate::parallel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairSign {
    /// `k = l + m`
    Plus,
    /// `k = l − m`
    Minus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCertificate {
    pub k: [i32; 3],
    pub l: [i32; 3],
    pub m: [i32; 3],
    pub sign: PairSign,
}

fn norm_sq(a: [i32; 3]) -> i64 {
    a.iter().map(|x| (*x as i64) * (*x as i64)).sum()
}

fn sup(a: [i32; 3]) -> i32 {
    a.iter().map(|x| x.abs()).max().unwrap_or(0)
}

fn independent(a: [i32; 3], b: [i32; 3]) -> bool {
    let c = [
        a[1] as i64 * b[2] as i64 - a[2] as i64 * b[1] as i64,
        a[2] as i64 * b[0] as i64 - a[0] as i64 * b[2] as i64,
        a[0] as i64 * b[1] as i64 - a[1] as i64 * b[0] as i64,
    ];
    c != [0, 0, 0]
}

impl PairCertificate {
    /// Re-checks every condition in integer arithmetic.
    pub fn validate(&self, n0: usize, n: usize) -> bool {
        let (n0, n) = (n0 as i32, n as i32);
        let combined = match self.sign {
            PairSign::Plus => [self.l[0] + self.m[0], self.l[1] + self.m[1], self.l[2] + self.m[2]],
            PairSign::Minus => [self.l[0] - self.m[0], self.l[1] - self.m[1], self.l[2] - self.m[2]],
        };
        let k_ok = self.k != [0, 0, 0] && sup(self.k) <= n0;
        let window = |v: [i32; 3]| sup(v) > n0 && sup(v) <= n;
        k_ok && combined == self.k
            && window(self.l)
            && window(self.m)
            && norm_sq(self.l) != norm_sq(self.m)
            && independent(self.l, self.m)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Decomposition {
    pub n0: usize,
    /// Smallest `N` at which every low mode has a certificate.
    pub n: usize,
    pub certificates: Vec<PairCertificate>,
}

/// Smallest `N ≥ N₀` such that every `k` with `|k|∞ ≤ N₀` splits as `l ± m`
/// over the shell `N₀ < |·|∞ ≤ N` with `|l| ≠ |m|` and `l, m` independent.
/// Among the pairs for a given `k` the one with smallest `|l|² + |m|²` is kept.
pub fn decomposition_search(n0: usize) -> Result<Decomposition> {
    if n0 < 1 {
        return param("N0 must be at least 1");
    }
    let targets: Vec<[i32; 3]> = enumerate_modes(Window::Low(n0))?.iter().map(|m| m.k()).collect();
    for n in n0 + 1..=n0 + 8 {
        let shell: Vec<[i32; 3]> = enumerate_modes(Window::High { n: n0, n_max: n })?.iter().map(|m| m.k()).collect();
        let mut certs = Vec::with_capacity(targets.len());
        for &k in &targets {
            let mut best: Option<(i64, PairCertificate)> = None;
            for &l in &shell {
                for sign in [PairSign::Plus, PairSign::Minus] {
                    let m = match sign {
                        PairSign::Plus => [k[0] - l[0], k[1] - l[1], k[2] - l[2]],
                        PairSign::Minus => [l[0] - k[0], l[1] - k[1], l[2] - k[2]],
                    };
                    let c = PairCertificate { k, l, m, sign };
                    if !c.validate(n0, n) {
                        continue;
                    }
                    let cost = norm_sq(l) + norm_sq(m);
                    if best.is_none_or(|(b, _)| cost < b) {
                        best = Some((cost, c));
                    }
                }
            }
            match best {
                Some((_, c)) => certs.push(c),
                None => break,
            }
        }
        if certs.len() == targets.len() {
            return Ok(Decomposition { n0, n, certificates: certs });
        }
    }
    Err(Error::Consistency(format!("no decomposition found up to N = {}", n0 + 8)))
}

/// `h(s) = χ′(s)(1 − χ(s))` and its first two derivatives.
fn shell_profile(s: f64) -> [f64; 3] {
    let (c0, c1, c2, c3) = (chi(s), chi_prime(s), chi_second(s), chi_third(s));
    [c1 * (1.0 - c0), c2 * (1.0 - c0) - c1 * c1, c3 * (1.0 - c0) - 3.0 * c1 * c2]
}

/// `X⁰(y) = Ay + χ(|y|_W/3ρ) e^{−δA_H} B(y,y) + X⁰²(y)`, the correction
/// `X⁰² = (1/2ρ) χ′(1−χ)(|y|_W/ρ) Σ_{k ∈ Z_L(N₀)} q̄_k² ⟨y, e_k^i⟩_W/|y|_W e_k^i`.
pub fn drift_field_x0(y: &SpectralField, model: &Model) -> Result<SpectralField> {
    let lat = model.lattice();
    let r = model.w_norm(y);
    let c = chi(r / (3.0 * model.rho()));
    let mut out = if c != 0.0 { convective_term(y, y.n_max())? } else { SpectralField::zeros_on(lat.clone()) };
    let gamma = x02_factor(r, model.rho())[0];
    for (i, o) in out.coeffs_mut().iter_mut().enumerate() {
        let m = model.mollifier()[i];
        let k2 = lat.norm_sq(i);
        let w = model.w_weights()[i];
        let qb = model.noise.q_bar(i);
        let yc = y.coeffs()[i];
        for k in 0..2 {
            o[k] = k2 * yc[k] + c * m * o[k] + gamma * qb[k] * qb[k] * w * yc[k];
        }
    }
    Ok(out)
}

/// `γ(r) = h(r/ρ)/(2ρr)` and its first two derivatives; zero at `r = 0`.
fn x02_factor(r: f64, rho: f64) -> [f64; 3] {
    if r <= 0.0 {
        return [0.0; 3];
    }
    let [h0, h1, h2] = shell_profile(r / rho);
    [
        h0 / (2.0 * rho * r),
        h1 / (2.0 * rho * rho * r) - h0 / (2.0 * rho * r * r),
        h2 / (2.0 * rho.powi(3) * r) - h1 / (rho * rho * r * r) + h0 / (rho * r.powi(3)),
    ]
}

/// Where a bracket vector came from. Indices are low coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Noise { a: usize },
    Drift { a: usize },
    Double { outer: usize, inner: usize },
}

#[derive(Debug, Clone)]
pub struct BracketVector {
    pub provenance: Provenance,
    /// Low coordinates in the perpendicular frames of `Z_L(N)`.
    pub coords: DVector<f64>,
}

/// Everything the closed-form brackets need at one point `y`.
pub struct HormanderPoint {
    pub block: LowBlock,
    lattice: Arc<Lattice>,
    /// `q_a(y)` and whether it carries the factor `1 − χ(|y|_W/ρ)`.
    amp: Vec<f64>,
    qbar: Vec<f64>,
    modulated: Vec<bool>,
    w: Vec<f64>,
    /// Gradient of `|y|_W` restricted to low coordinates.
    g: Vec<f64>,
    r: f64,
    c: [f64; 3],
    phi: [f64; 3],
    gamma: [f64; 3],
    /// `g · X⁰(y)` and `Σ w X⁰_a e_a` on low coordinates (for `Dg[X⁰]`).
    g_x0: f64,
    x0_low: Vec<f64>,
    /// Low parts of `B(y,y)`, `P̃y` and per coordinate `L(e) = B(e,y)+B(y,e)`,
    /// `DX⁰[e]` with their full-lattice `g`-dots.
    byy: DVector<f64>,
    py: DVector<f64>,
    le: Vec<DVector<f64>>,
    dx0: Vec<DVector<f64>>,
    g_dx0: Vec<f64>,
}

impl HormanderPoint {
    pub fn new(y: &SpectralField, model: &Model, n_low: usize) -> Result<Self> {
        let lattice = model.lattice().clone();
        if y.n_max() != lattice.n_max() {
            return param("point must live on the model lattice");
        }
        if n_low != model.n_low {
            return param(format!("bracket level N={n_low} differs from the model splitting level {}", model.n_low));
        }
        let block = LowBlock::new(&lattice, n_low)?;
        let rho = model.rho();
        let r = model.w_norm(y);
        let (s3, s1) = (r / (3.0 * rho), r / rho);
        let c = [chi(s3), chi_prime(s3) / (3.0 * rho), chi_second(s3) / (9.0 * rho * rho)];
        let phi = [1.0 - chi(s1), -chi_prime(s1) / rho, -chi_second(s1) / (rho * rho)];
        let gamma = x02_factor(r, rho);
        let m = block.dim();
        let mut amp = vec![0.0; m];
        let mut qbar = vec![0.0; m];
        let mut modulated = vec![false; m];
        let mut w = vec![0.0; m];
        let mut g = vec![0.0; m];
        for a in 0..m {
            let (i, k) = block.slot(a);
            let qb = model.noise.q_bar(i)[k];
            w[a] = model.w_weights()[i];
            if r > 0.0 {
                g[a] = w[a] * y.coeffs()[i][k] / r;
            }
            if qb != 0.0 {
                modulated[a] = true;
                qbar[a] = qb;
                amp[a] = qb * phi[0];
            } else {
                amp[a] = model.noise.q(i)[k];
            }
        }
        let gfull = |f: &SpectralField| -> f64 {
            if r == 0.0 {
                return 0.0;
            }
            f.coeffs()
                .iter()
                .zip(y.coeffs())
                .zip(model.w_weights())
                .map(|((a, b), w)| w * (a[0] * b[0] + a[1] * b[1]) / r)
                .sum()
        };
        let moll = |f: &mut SpectralField| {
            for (v, mo) in f.coeffs_mut().iter_mut().zip(model.mollifier()) {
                v[0] *= mo;
                v[1] *= mo;
            }
        };
        let x0 = drift_field_x0(y, model)?;
        let g_x0 = gfull(&x0);
        let x0_low: Vec<f64> = (0..m).map(|a| w[a] * block.gather(&x0)[a]).collect();
        let mut byy_full = convective_term(y, y.n_max())?;
        moll(&mut byy_full);
        let g_byy = gfull(&byy_full);
        let byy = block.gather(&byy_full);
        let py = DVector::from_fn(m, |a, _| qbar[a] * qbar[a] * w[a] * block.gather(y)[a]);
        let g_py: f64 = (0..m).map(|a| g[a] * py[a]).sum();
        let per: Vec<Result<(DVector<f64>, DVector<f64>, f64)>> = parallel::map_indices(m, |a| {
            let e = block.unit(&lattice, a);
            let mut l = &bilinear_term(&e, y, y.n_max())? + &bilinear_term(y, &e, y.n_max())?;
            moll(&mut l);
            let le = block.gather(&l);
            let ga = g[a];
            let p_e = qbar[a] * qbar[a] * w[a];
            // DX⁰[e] = A e + c L(e) + c′ (g·e) B(y,y) + γ′ (g·e) P̃y + γ P̃e
            let k2 = lattice.norm_sq(block.slot(a).0);
            let mut dx = &le * c[0] + &byy * (c[1] * ga) + &py * (gamma[1] * ga);
            dx[a] += k2 + gamma[0] * p_e;
            let g_dx = k2 * ga + c[0] * gfull(&l) + c[1] * ga * g_byy + gamma[1] * ga * g_py + gamma[0] * p_e * ga;
            Ok((le, dx, g_dx))
        });
        let mut le = Vec::with_capacity(m);
        let mut dx0 = Vec::with_capacity(m);
        let mut g_dx0 = Vec::with_capacity(m);
        for p in per {
            let (a, b, c) = p?;
            le.push(a);
            dx0.push(b);
            g_dx0.push(c);
        }
        Ok(HormanderPoint {
            block,
            lattice,
            amp,
            qbar,
            modulated,
            w,
            g,
            r,
            c,
            phi,
            gamma,
            g_x0,
            x0_low,
            byy,
            py,
            le,
            dx0,
            g_dx0,
        })
    }

    pub fn dim(&self) -> usize {
        self.block.dim()
    }

    /// `q_a(y)`, the noise amplitude on low coordinate `a` at this point.
    pub fn amplitude(&self, a: usize) -> f64 {
        self.amp[a]
    }

    /// `q_a(y) e_a`.
    pub fn k0(&self, a: usize) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        v[a] = self.amp[a];
        v
    }

    /// `[X⁰, q_m e_m]_L = (∇q_m · X⁰) e_m − q_m D_L X⁰^L e_m`.
    pub fn k1(&self, m: usize) -> DVector<f64> {
        let mut v = &self.dx0[m] * (-self.amp[m]);
        if self.modulated[m] {
            v[m] += self.qbar[m] * self.phi[1] * self.g_x0;
        }
        v
    }

    fn dg(&self, a: usize, b: usize) -> f64 {
        if self.r == 0.0 {
            return 0.0;
        }
        let diag = if a == b { self.w[a] } else { 0.0 };
        (diag - self.g[a] * self.g[b]) / self.r
    }

    /// `[q_l e_l, [X⁰, q_m e_m]_L]_L = q_l DK₁_m[e_l] − (∇_L q_l · K₁_m) e_l`,
    /// with `sym = π_N(B(e_m,e_l) + B(e_l,e_m))` supplied by the caller.
    pub fn k2_with(&self, l: usize, m: usize, k1_m: &DVector<f64>, sym: &DVector<f64>) -> DVector<f64> {
        let (gl, gm) = (self.g[l], self.g[m]);
        let [c0, c1, c2] = self.c;
        let [_, g1, g2] = self.gamma;
        let dgml = self.dg(m, l);
        // D²X⁰[e_m, e_l] on low coordinates
        let mut d2 = sym * c0 + &self.le[m] * (c1 * gl) + &self.le[l] * (c1 * gm) + &self.byy * (c2 * gm * gl + c1 * dgml);
        d2 += &self.py * (g2 * gm * gl + g1 * dgml);
        d2[l] += g1 * gm * self.qbar[l] * self.qbar[l] * self.w[l];
        d2[m] += g1 * gl * self.qbar[m] * self.qbar[m] * self.w[m];
        let mut dk1 = d2 * (-self.amp[m]);
        if self.modulated[m] {
            let qb = self.qbar[m];
            let [_, p1, p2] = self.phi;
            let dg_x0_l = if self.r == 0.0 { 0.0 } else { (self.x0_low[l] - self.g_x0 * gl) / self.r };
            dk1[m] += qb * (p2 * self.g_x0 * gl + p1 * dg_x0_l) + qb * p1 * self.g_dx0[l];
            dk1 -= &self.dx0[m] * (qb * p1 * gl);
        }
        let mut out = dk1 * self.amp[l];
        if self.modulated[l] {
            let grad_dot: f64 = (0..self.dim()).map(|a| self.g[a] * k1_m[a]).sum();
            out[l] -= self.qbar[l] * self.phi[1] * grad_dot;
        }
        out
    }

    /// `π_N(B(e_m,e_l) + B(e_l,e_m))` on low coordinates.
    pub fn symmetric_pair(&self, l: usize, m: usize) -> Result<DVector<f64>> {
        let el = self.block.unit(&self.lattice, l);
        let em = self.block.unit(&self.lattice, m);
        let n = self.block.n;
        let small = |f: &SpectralField| f.resize(n);
        let (el, em) = (small(&el)?, small(&em)?);
        let s = &bilinear_term(&em, &el, n)? + &bilinear_term(&el, &em, n)?;
        let full = s.resize(self.lattice.n_max())?;
        Ok(self.block.gather(&full))
    }

    pub fn k2(&self, l: usize, m: usize) -> Result<DVector<f64>> {
        Ok(self.k2_with(l, m, &self.k1(m), &self.symmetric_pair(l, m)?))
    }

    /// All `K₂` vectors with outer generator `l`, one per inner `m`.
    pub fn k2_row(&self, l: usize) -> Result<Vec<DVector<f64>>> {
        (0..self.dim()).map(|m| self.k2(l, m)).collect()
    }
}

/// The full system `K₀ ∪ K₁ ∪ K₂` at `y` with provenance.
pub fn hormander_system(y: &SpectralField, model: &Model, n_low: usize) -> Result<Vec<BracketVector>> {
    let hp = HormanderPoint::new(y, model, n_low)?;
    let m = hp.dim();
    let mut out = Vec::with_capacity(m * (m + 2));
    for a in 0..m {
        out.push(BracketVector { provenance: Provenance::Noise { a }, coords: hp.k0(a) });
    }
    for a in 0..m {
        out.push(BracketVector { provenance: Provenance::Drift { a }, coords: hp.k1(a) });
    }
    let rows: Vec<Result<Vec<DVector<f64>>>> = parallel::map_indices(m, |l| hp.k2_row(l));
    for (l, row) in rows.into_iter().enumerate() {
        for (inner, coords) in row?.into_iter().enumerate() {
            out.push(BracketVector { provenance: Provenance::Double { outer: l, inner }, coords });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanReport {
    pub dimension: usize,
    pub rank: usize,
    /// Smallest singular value counted in the rank.
    pub sigma: f64,
    pub sigma_max: f64,
    /// Smallest of the `dimension` singular values (zero padded if fewer).
    pub sigma_min: f64,
    pub vectors_used: usize,
}

impl SpanReport {
    pub fn spans(&self) -> bool {
        self.rank == self.dimension
    }
}

pub const RANK_TOLERANCE: f64 = 1e-10;

/// Triangular factor of the stacked rows, merged chunk by chunk.
struct RowStack {
    dim: usize,
    r: Option<DMatrix<f64>>,
    used: usize,
}

impl RowStack {
    fn new(dim: usize) -> Self {
        RowStack { dim, r: None, used: 0 }
    }

    fn factor(rows: &DMatrix<f64>) -> DMatrix<f64> {
        if rows.nrows() < rows.ncols() {
            let mut padded = DMatrix::zeros(rows.ncols(), rows.ncols());
            padded.rows_mut(0, rows.nrows()).copy_from(rows);
            return padded.qr().r();
        }
        rows.clone().qr().r()
    }

    fn push_block(&mut self, block: DMatrix<f64>, count: usize) {
        self.used += count;
        if count == 0 {
            return;
        }
        let stacked = match self.r.take() {
            None => block,
            Some(r) => {
                let mut s = DMatrix::zeros(r.nrows() + block.nrows(), self.dim);
                s.rows_mut(0, r.nrows()).copy_from(&r);
                s.rows_mut(r.nrows(), block.nrows()).copy_from(&block);
                s
            }
        };
        self.r = Some(Self::factor(&stacked));
    }

    fn report(self) -> SpanReport {
        let dim = self.dim;
        let Some(r) = self.r else {
            return SpanReport { dimension: dim, rank: 0, sigma: 0.0, sigma_max: 0.0, sigma_min: 0.0, vectors_used: 0 };
        };
        let mut sv: Vec<f64> = r.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let smax = sv.first().copied().unwrap_or(0.0);
        let rank = sv.iter().filter(|s| **s > RANK_TOLERANCE * smax && **s > 0.0).count();
        let sigma = if rank > 0 { sv[rank - 1] } else { 0.0 };
        let sigma_min = if sv.len() >= dim { sv[dim - 1] } else { 0.0 };
        SpanReport { dimension: dim, rank, sigma, sigma_max: smax, sigma_min, vectors_used: self.used }
    }
}

/// Rows in W-orthonormal coordinates, exact zeros dropped.
fn weighted_rows(vectors: &[DVector<f64>], sqrt_w: &DVector<f64>) -> (DMatrix<f64>, usize) {
    let keep: Vec<&DVector<f64>> = vectors.iter().filter(|v| v.iter().any(|x| *x != 0.0)).collect();
    let mut m = DMatrix::zeros(keep.len(), sqrt_w.len());
    for (i, v) in keep.iter().enumerate() {
        for a in 0..sqrt_w.len() {
            m[(i, a)] = v[a] * sqrt_w[a];
        }
    }
    (m, keep.len())
}

/// Rank and singular values of the stacked vectors in the W inner product.
pub fn span_rank(vectors: &[DVector<f64>], w_weights: &DVector<f64>) -> Result<SpanReport> {
    if vectors.is_empty() {
        return param("span_rank needs at least one vector");
    }
    let dim = w_weights.len();
    if vectors.iter().any(|v| v.len() != dim) {
        return param("vector and weight dimensions differ");
    }
    let sqrt_w = w_weights.map(f64::sqrt);
    let mut stack = RowStack::new(dim);
    for chunk in vectors.chunks(4 * dim.max(1)) {
        let (rows, n) = weighted_rows(chunk, &sqrt_w);
        stack.push_block(rows, n);
    }
    Ok(stack.report())
}

/// Which generations enter a rank computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Generations {
    K0,
    K0K2,
    All,
}

/// Span of the system at `y` without materializing it: each outer generator's
/// `K₂` row block is reduced to a triangular factor in parallel and the
/// factors are merged in index order.
pub fn hormander_rank(y: &SpectralField, model: &Model, n_low: usize, generations: Generations) -> Result<SpanReport> {
    let hp = HormanderPoint::new(y, model, n_low)?;
    rank_from_point(&hp, generations, |l| hp.k2_row(l))
}

fn rank_from_point<F>(hp: &HormanderPoint, generations: Generations, k2_row: F) -> Result<SpanReport>
where
    F: Fn(usize) -> Result<Vec<DVector<f64>>> + Sync + Send,
{
    let m = hp.dim();
    let sqrt_w = DVector::from_vec(hp.w.clone()).map(f64::sqrt);
    let mut stack = RowStack::new(m);
    let k0: Vec<DVector<f64>> = (0..m).map(|a| hp.k0(a)).collect();
    let (rows, n) = weighted_rows(&k0, &sqrt_w);
    stack.push_block(rows, n);
    if generations == Generations::All {
        let k1: Vec<DVector<f64>> = (0..m).map(|a| hp.k1(a)).collect();
        let (rows, n) = weighted_rows(&k1, &sqrt_w);
        stack.push_block(rows, n);
    }
    if generations != Generations::K0 {
        let blocks: Vec<Result<(DMatrix<f64>, usize)>> = parallel::map_indices(m, |l| {
            let (rows, n) = weighted_rows(&k2_row(l)?, &sqrt_w);
            Ok((if n > 0 { RowStack::factor(&rows) } else { rows }, n))
        });
        for b in blocks {
            let (r, n) = b?;
            stack.push_block(r, n);
        }
    }
    Ok(stack.report())
}

/// Derivative of `f` at `y` along `v` by Richardson-extrapolated central
/// differences; the step is `eps` relative to `max(1, |y|)` along `v/|v|`.
pub fn directional_derivative<F>(f: F, y: &SpectralField, v: &SpectralField, eps: f64) -> DVector<f64>
where
    F: Fn(&SpectralField) -> DVector<f64>,
{
    let zero_metric = crate::field::SobolevIndex(0.0);
    let nv = v.sobolev_norm(zero_metric);
    if nv == 0.0 {
        return f(y) * 0.0;
    }
    let h = eps * y.sobolev_norm(zero_metric).max(1.0) / nv;
    let central = |h: f64| {
        let p = y + &(v * h);
        let m = y - &(v * h);
        (f(&p) - f(&m)) / (2.0 * h)
    };
    (central(h / 2.0) * 4.0 - central(h)) / 3.0
}

/// `[X, K]_L(y) = DK(y)·X(y) − D_L X^L(y)·K(y)` by finite differences.
pub fn bracket_l<X, K>(x_field: X, k_field: K, y: &SpectralField, block: &LowBlock, eps: f64) -> DVector<f64>
where
    X: Fn(&SpectralField) -> SpectralField,
    K: Fn(&SpectralField) -> DVector<f64>,
{
    let xy = x_field(y);
    let ky = block.scatter(y.lattice(), k_field(y).as_slice());
    let dk = directional_derivative(&k_field, y, &xy, eps);
    let dx = directional_derivative(|z| block.gather(&x_field(z)), y, &ky, eps);
    dk - dx
}

/// Rank of `K₀ ∪ K₂` with `K₂` from finite differences of the closed-form `K₁`.
pub fn hormander_rank_fd(y: &SpectralField, model: &Model, n_low: usize, eps: f64) -> Result<SpanReport> {
    let hp = HormanderPoint::new(y, model, n_low)?;
    let lat = model.lattice().clone();
    let k1_all = |z: &SpectralField| -> DVector<f64> {
        let p = HormanderPoint::new(z, model, n_low).expect("shifted point on the same lattice");
        let mut v = DVector::zeros(p.dim() * p.dim());
        for m in 0..p.dim() {
            v.rows_mut(m * p.dim(), p.dim()).copy_from(&p.k1(m));
        }
        v
    };
    let amp = |z: &SpectralField, l: usize| -> f64 {
        let p = HormanderPoint::new(z, model, n_low).expect("same lattice");
        p.amp[l]
    };
    let m = hp.dim();
    rank_from_point(&hp, Generations::K0K2, |l| {
        let el = hp.block.unit(&lat, l);
        let dk1 = directional_derivative(&k1_all, y, &el, eps);
        let al = hp.amp[l];
        Ok((0..m)
            .map(|inner| {
                let k1m = hp.k1(inner);
                let mut v = dk1.rows(inner * m, m) * al;
                let kf = hp.block.scatter(&lat, k1m.as_slice());
                let da = directional_derivative(|z| DVector::from_element(1, amp(z, l)), y, &kf, eps)[0];
                v[l] -= da;
                v.into_owned()
            })
            .collect())
    })
}

/// Which case of the spanning argument a W-norm falls in; boundaries go to
/// the lower-numbered case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Case1,
    Case2,
    Case3,
}

pub fn region_classify(w_norm: f64, rho: f64, radius: f64) -> Result<Region> {
    if !(rho > 0.0) || !(radius >= 0.0) || radius > rho / 4.0 {
        return param(format!("need rho > 0 and 0 <= R <= rho/4, got rho={rho}, R={radius}"));
    }
    Ok(if w_norm >= radius + 2.0 * rho {
        Region::Case1
    } else if w_norm <= rho - radius {
        Region::Case2
    } else {
        Region::Case3
    })
}

/// Double brackets of the correction field alone:
/// `[q_l e_l, [X⁰², q_m e_m]_L]_L = −q_l q_m D²X⁰²[e_m, e_l]` for `l, m` outside `Z_L(N₀)`.
pub fn x02_double_bracket(y: &SpectralField, model: &Model, n_low: usize, l: usize, m: usize) -> Result<DVector<f64>> {
    let hp = HormanderPoint::new(y, model, n_low)?;
    if hp.modulated[l] || hp.modulated[m] {
        return param("X02 double brackets are taken over modes outside Z_L(N0)");
    }
    let [_, g1, g2] = hp.gamma;
    let (gl, gm) = (hp.g[l], hp.g[m]);
    let d2 = &hp.py * (g2 * gm * gl + g1 * hp.dg(m, l));
    Ok(d2 * (-hp.amp[l] * hp.amp[m]))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub rho: Vec<f64>,
    /// Largest W-norm of the correction double brackets over the sample.
    pub magnitude: Vec<f64>,
    pub exponent: f64,
    /// `c` in `magnitude ≈ c ρ^exponent`.
    pub constant: f64,
}

/// Fits the ρ-scaling of the correction double brackets. For each ρ the
/// sample directions are rescaled to W-norms spread over the Case-3 shell.
pub fn case3_perturbation_bound(
    directions: &[SpectralField],
    model: &Model,
    n_low: usize,
    rhos: &[f64],
    pairs: &[(usize, usize)],
) -> Result<PerturbationReport> {
    if directions.is_empty() || pairs.is_empty() || rhos.len() < 2 {
        return param("need directions, pairs and at least two radii");
    }
    let mut magnitude = Vec::with_capacity(rhos.len());
    let block = LowBlock::new(model.lattice(), n_low)?;
    let w = block.gather_weights(model.w_weights());
    for &rho in rhos {
        let mut mm = model.clone();
        mm.cutoff = crate::noise::CutoffSpec::new(rho)?;
        let mut best = 0.0f64;
        for (s, d) in directions.iter().enumerate() {
            // W-norms between 1.1ρ and 1.9ρ, inside the shell where χ′(1−χ) lives
            let target = rho * (1.1 + 0.8 * (s as f64 + 0.5) / directions.len() as f64);
            let y = d * (target / model.w_norm(d));
            for &(l, m) in pairs {
                let v = x02_double_bracket(&y, &mm, n_low, l, m)?;
                let wn = v.iter().zip(w.iter()).map(|(x, w)| w * x * x).sum::<f64>().sqrt();
                best = best.max(wn);
            }
        }
        magnitude.push(best);
    }
    let lx: Vec<f64> = rhos.iter().map(|r| r.ln()).collect();
    let ly: Vec<f64> = magnitude.iter().map(|m| m.ln()).collect();
    let (a, b) = crate::stats::linear_fit(&lx, &ly);
    Ok(PerturbationReport { rho: rhos.to_vec(), magnitude, exponent: b, constant: a.exp() })
}

/// Low coordinates of modes in `N₀ < |k|∞ ≤ N`.
pub fn shell_coordinates(model: &Model, n_low: usize) -> Result<Vec<usize>> {
    let block = LowBlock::new(model.lattice(), n_low)?;
    Ok((0..block.dim()).filter(|&a| model.lattice().sup_norm(block.slot(a).0) > model.n0()).collect())
}

/// Lattice mode of a low coordinate.
pub fn coordinate_mode(model: &Model, n_low: usize, a: usize) -> Result<(ModeIndex, usize)> {
    let block = LowBlock::new(model.lattice(), n_low)?;
    let (i, c) = block.slot(a);
    Ok((model.lattice().mode(i), c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::random_w_sphere;

    #[test]
    fn spec_certificate_validates() {
        let c = PairCertificate { k: [1, 0, 0], l: [2, 2, 1], m: [-1, -2, -1], sign: PairSign::Plus };
        assert!(c.validate(1, 2));
        let bad = PairCertificate { m: [-1, -1, -1], ..c };
        assert!(!bad.validate(1, 2));
        let parallel = PairCertificate { k: [1, 0, 0], l: [3, 0, 0], m: [-2, 0, 0], sign: PairSign::Plus };
        assert!(!parallel.validate(1, 3));
    }

    #[test]
    fn search_finds_two_for_n0_one() {
        let d = decomposition_search(1).unwrap();
        assert_eq!(d.n, 2);
        assert_eq!(d.certificates.len(), 26);
        assert!(d.certificates.iter().all(|c| c.validate(1, 2)));
        let d2 = decomposition_search(2).unwrap();
        assert_eq!(d2.n, 3);
        assert!(d2.certificates.iter().all(|c| c.validate(2, 3)));
    }

    #[test]
    fn regions_cover_and_respect_boundaries() {
        assert_eq!(region_classify(0.0, 4.0, 1.0).unwrap(), Region::Case2);
        assert_eq!(region_classify(40.0, 4.0, 1.0).unwrap(), Region::Case1);
        assert_eq!(region_classify(6.0, 4.0, 1.0).unwrap(), Region::Case3);
        assert_eq!(region_classify(3.0, 4.0, 1.0).unwrap(), Region::Case2);
        assert_eq!(region_classify(9.0, 4.0, 1.0).unwrap(), Region::Case1);
        assert!(region_classify(1.0, 4.0, 1.5).is_err());
    }

    #[test]
    fn x0_vanishes_at_zero_and_correction_lives_on_shell() {
        let model = Model::canonical(2, 1, 1, 1.0, 1.0, 0.1).unwrap();
        let z = SpectralField::zeros(2).unwrap();
        assert_eq!(drift_field_x0(&z, &model).unwrap().max_abs(), 0.0);
        for (r, active) in [(0.5, false), (1.5, true), (2.5, false)] {
            let y = random_w_sphere(&model, r, 3);
            let mut plain = model.clone();
            plain.noise = crate::noise::NoiseSpec::canonical(2, 1, 1.0).unwrap();
            let full = drift_field_x0(&y, &model).unwrap();
            let lat = model.lattice();
            let c = chi(r / 3.0);
            let mut b = convective_term(&y, 2).unwrap();
            for (i, v) in b.coeffs_mut().iter_mut().enumerate() {
                let yc = y.coeffs()[i];
                for k in 0..2 {
                    v[k] = lat.norm_sq(i) * yc[k] + c * model.mollifier()[i] * v[k];
                }
            }
            let corr = (&full - &b).max_abs();
            assert_eq!(corr > 0.0, active, "r = {r}");
            if active {
                // bound: (1/2ρ) max|χ′| Σ |⟨y, e_k^i⟩_W| / |y|_W
                let low: f64 = (0..lat.len())
                    .filter(|&i| lat.sup_norm(i) <= 1)
                    .map(|i| model.w_weights()[i] * (y.coeffs()[i][0].abs() + y.coeffs()[i][1].abs()))
                    .sum();
                assert!(corr <= 0.5 * 2.1875 * low / r);
            }
        }
    }

    #[test]
    fn bracket_with_stokes_is_minus_laplacian() {
        let model = Model::canonical(2, 1, 1, 1.0, 1.0, 0.0).unwrap();
        let block = LowBlock::new(model.lattice(), 1).unwrap();
        let y = random_w_sphere(&model, 0.7, 1);
        let lat = model.lattice().clone();
        let a_op = |z: &SpectralField| {
            let mut o = z.clone();
            for (i, c) in o.coeffs_mut().iter_mut().enumerate() {
                c[0] *= lat.norm_sq(i);
                c[1] *= lat.norm_sq(i);
            }
            o
        };
        for a in [0, 11, 40] {
            let k = |_: &SpectralField| {
                let mut v = DVector::zeros(52);
                v[a] = 0.3;
                v
            };
            let b = bracket_l(a_op, k, &y, &block, 1e-3);
            let k2 = lat.norm_sq(block.slot(a).0);
            let mut want = DVector::zeros(52);
            want[a] = -0.3 * k2;
            assert!((b - want).amax() <= 1e-10);
        }
    }

    fn shell_point(model: &Model, radius: f64, seed: u64) -> SpectralField {
        random_w_sphere(model, radius, seed)
    }

    #[test]
    fn closed_form_brackets_match_finite_differences() {
        // Case 3 shell point: every chain-rule term is active
        for (radius, n_low) in [(1.5, 1), (4.0, 2), (0.5, 2), (1.7, 2)] {
            let model = Model::canonical(2, 1, n_low, 1.0, 1.0, 0.05).unwrap();
            let y = shell_point(&model, radius, 7);
            let hp = HormanderPoint::new(&y, &model, n_low).unwrap();
            let block = hp.block.clone();
            let lat = model.lattice().clone();
            let x0 = |z: &SpectralField| drift_field_x0(z, &model).unwrap();
            let k0 = |a: usize| {
                let model = &model;
                move |z: &SpectralField| HormanderPoint::new(z, model, n_low).unwrap().k0(a)
            };
            for m in [0, 5, 13, hp.dim() - 1] {
                let fd = bracket_l(&x0, k0(m), &y, &block, 1e-4);
                let an = hp.k1(m);
                let rel = (&fd - &an).norm() / an.norm().max(1e-300);
                assert!(rel < 1e-7, "K1 m={m} radius={radius}: {rel}");
                for l in [1, 6, 13] {
                    let el = block.unit(&lat, l);
                    let outer = |z: &SpectralField| {
                        let mut o = SpectralField::zeros_on(z.lattice().clone());
                        let (i, c) = block.slot(l);
                        o.coeffs_mut()[i][c] = HormanderPoint::new(z, &model, n_low).unwrap().amp[l];
                        o
                    };
                    let _ = &el;
                    let inner = |z: &SpectralField| HormanderPoint::new(z, &model, n_low).unwrap().k1(m);
                    let fd2 = bracket_l(outer, inner, &y, &block, 1e-4);
                    let an2 = hp.k2(l, m).unwrap();
                    let scale = an2.norm().max(hp.k1(m).norm() * 1e-6);
                    let rel = (&fd2 - &an2).norm() / scale;
                    assert!(rel < 1e-6, "K2 l={l} m={m} radius={radius}: {rel} ({} vs {})", fd2.norm(), an2.norm());
                }
            }
        }
    }

    #[test]
    fn case_two_double_bracket_is_negated_symmetric_product() {
        let model = Model::canonical(2, 1, 2, 1.0, 10.0, 1e-3).unwrap();
        let y = shell_point(&model, 2.0, 5);
        let hp = HormanderPoint::new(&y, &model, 2).unwrap();
        let shell = shell_coordinates(&model, 2).unwrap();
        let slow = Model::canonical(2, 1, 2, 1.0, 10.0, 1e-1).unwrap();
        let hq = HormanderPoint::new(&y, &slow, 2).unwrap();
        for (l, m) in [(shell[0], shell[5]), (shell[17], shell[90]), (shell[3], shell[150])] {
            let closed = hp.symmetric_pair(l, m).unwrap() * (-hp.amp[l] * hp.amp[m]);
            let an = hp.k2(l, m).unwrap();
            assert!((&an - &closed).amax() <= 1e-8 * closed.amax().max(1.0));
            assert!((&an - hq.k2(l, m).unwrap()).amax() <= 1e-10);
        }
    }

    #[test]
    fn case_one_noise_alone_spans() {
        let model = Model::canonical(2, 1, 2, 1.0, 0.5, 0.0).unwrap();
        let y = shell_point(&model, 1.5, 2);
        let rep = hormander_rank(&y, &model, 2, Generations::K0).unwrap();
        assert!(rep.spans());
        let lower = shell_point(&model, 0.2, 2);
        let rep = hormander_rank(&lower, &model, 2, Generations::K0).unwrap();
        assert_eq!(rep.rank, 248 - 52);
    }

    #[test]
    fn case_two_needs_double_brackets() {
        let model = Model::canonical(2, 1, 2, 1.0, 10.0, 0.1).unwrap();
        let y = shell_point(&model, 1.0, 4);
        let rep = hormander_rank(&y, &model, 2, Generations::K0K2).unwrap();
        assert!(rep.spans(), "{rep:?}");
        assert!(rep.sigma > 0.0);
    }

    #[test]
    fn system_sizes_and_zero_noise_in_case_two() {
        let model = Model::canonical(1, 1, 1, 1.0, 10.0, 0.0).unwrap();
        let y = shell_point(&model, 1.0, 4);
        let sys = hormander_system(&y, &model, 1).unwrap();
        assert_eq!(sys.len(), 52 + 52 + 52 * 52);
        assert!(sys.iter().filter(|b| matches!(b.provenance, Provenance::Noise { .. })).all(|b| b.coords.amax() == 0.0));
    }

    #[test]
    fn span_rank_basics() {
        let w = DVector::from_element(3, 2.0);
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let rep = span_rank(&[v.clone(), v.clone(), v * 2.0], &w).unwrap();
        assert_eq!(rep.rank, 1);
        assert!(span_rank(&[], &w).is_err());
        let id: Vec<DVector<f64>> = (0..3).map(|a| DVector::from_fn(3, |i, _| (i == a) as u8 as f64)).collect();
        let rep = span_rank(&id, &w).unwrap();
        assert!(rep.spans());
        assert!((rep.sigma - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sigma_stable_under_fd_step() {
        let model = Model::canonical(1, 1, 1, 1.0, 1.0, 0.05).unwrap();
        let y = shell_point(&model, 1.4, 9);
        let an = hormander_rank(&y, &model, 1, Generations::K0K2).unwrap();
        let a = hormander_rank_fd(&y, &model, 1, 1e-4).unwrap();
        let b = hormander_rank_fd(&y, &model, 1, 1e-5).unwrap();
        assert_eq!(a.rank, an.rank);
        assert!((a.sigma / b.sigma - 1.0).abs() < 0.1);
        assert!((a.sigma / an.sigma - 1.0).abs() < 0.1);
    }

    #[test]
    fn correction_brackets_scale_like_inverse_cube() {
        let model = Model::canonical(2, 1, 2, 1.0, 4.0, 0.0).unwrap();
        let dirs: Vec<SpectralField> = (0..4).map(|s| random_w_sphere(&model, 1.0, s)).collect();
        let shell = shell_coordinates(&model, 2).unwrap();
        let pairs = [(shell[0], shell[1]), (shell[10], shell[40])];
        let rep = case3_perturbation_bound(&dirs, &model, 2, &[4.0, 8.0, 16.0], &pairs).unwrap();
        assert!(rep.exponent > -3.5 && rep.exponent < -2.5, "{rep:?}");
        // off the shell the correction is absent
        let inside = random_w_sphere(&model, 1.0, 1);
        assert_eq!(x02_double_bracket(&inside, &model, 2, shell[0], shell[1]).unwrap().amax(), 0.0);
    }
}
