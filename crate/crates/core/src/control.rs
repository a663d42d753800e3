//! Constructive controllability: a control `w` acting only through `Q` that
//! steers the deterministic Galerkin system `∂_t u + Au + B(u,u) = Qw` from
//! `x` to within `ε` of `y`.
//!
//! The plan runs in four phases. Phase 1 is free evolution. Phase 2 drives the
//! high modes to zero along a smooth homotopy. Phase 3 moves the low modes,
//! which the control cannot touch directly, by exciting pairs of auxiliary
//! high modes `(l_k, m_k)` whose quadratic interaction lands exactly on the
//! low mode `k`. Phase 4 interpolates the high modes to the target while the
//! low modes drift freely for a short time.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{param, Error, Result};
use crate::field::{SobolevIndex, SpectralField};
use crate::modes::{cross, dot, is_positive, norm3, perp_basis, Lattice, ModeIndex, Part, SignClass, Vec3};
use crate::noise::{smoothstep, smoothstep_prime, NoiseSpec};
use crate::nonlinearity::{bilinear_term, convective_term, pair_interaction};
use crate::parallel;
use crate::pseudospectral::GridConvolver;

type K = [i32; 3];

fn sup(k: K) -> i32 {
    k.iter().map(|c| c.abs()).max().unwrap_or(0)
}

fn is_low(k: K, n0: i32) -> bool {
    let s = sup(k);
    s > 0 && s <= n0
}

fn add(a: K, b: K) -> K {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: K, b: K) -> K {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm_sq(a: K) -> i64 {
    a.iter().map(|&c| (c as i64) * (c as i64)).sum()
}

/// `c_k = (|l|² − |m|²) / sqrt(|l|²|m|² − (l·m)²)`, the coefficient that makes
/// the phase-3 bilinear system solvable; zero exactly when `|l| = |m|`.
pub fn bilinear_constant(l: ModeIndex, m: ModeIndex) -> f64 {
    let (lv, mv) = (l.as_vec3(), m.as_vec3());
    let (ll, mm, lm) = (dot(&lv, &lv), dot(&mv, &mv), dot(&lv, &mv));
    (ll - mm) / (ll * mm - lm * lm).sqrt()
}

/// Carrier pair for one low mode: `k = l + m` for positive `k`, `k = l − m` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryPair {
    pub k: ModeIndex,
    pub l: ModeIndex,
    pub m: ModeIndex,
    pub class: SignClass,
    pub c_k: f64,
}

impl AuxiliaryPair {
    /// Integer identity, sign classes, `|l| ≠ |m|` and `l ∦ m`.
    pub fn validate(&self, n0: usize) -> Result<()> {
        let (k, l, m) = (self.k.k(), self.l.k(), self.m.k());
        let n0 = n0 as i32;
        let fail = |why: &str| Err(Error::Certificate(format!("pair for k={}: {why}", self.k)));
        if !is_low(k, n0) || is_low(l, n0) || is_low(m, n0) {
            return fail("k must be low and l, m high");
        }
        if !is_positive(l) {
            return fail("l must be a positive mode");
        }
        let ok = if is_positive(k) { add(l, m) == k && !is_positive(m) } else { sub(l, m) == k && is_positive(m) };
        if !ok {
            return fail("integer identity or sign class violated");
        }
        if norm_sq(l) == norm_sq(m) {
            return fail("|l| = |m|");
        }
        if cross(&self.l.as_vec3(), &self.m.as_vec3()) == [0.0; 3] {
            return fail("l parallel to m");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuxiliaryModeSet {
    pub n0: usize,
    pub n_max: usize,
    pub pairs: Vec<AuxiliaryPair>,
    /// Smallest `|·|∞` among the auxiliary modes.
    pub min_aux_sup: u32,
    pub nodes_explored: u64,
}

/// Result of evaluating every interaction that the construction needs to vanish.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionAudit {
    pub forbidden_checked: usize,
    /// Largest low-mode emission among the forbidden interactions; exactly 0 for a valid set.
    pub forbidden_max: f64,
    /// Smallest designated emission onto its own `k`; must be nonzero.
    pub designated_min: f64,
}

impl InteractionAudit {
    pub fn passes(&self) -> bool {
        self.forbidden_max == 0.0 && self.designated_min > 0.0
    }
}

/// A perpendicular vector with no special alignment, for probing interactions.
fn probe(k: ModeIndex) -> Vec3 {
    let b = perp_basis(&k);
    b.reconstruct([1.0, 0.618_033_988_749_894_8])
}

impl AuxiliaryModeSet {
    pub fn aux_modes(&self) -> Vec<ModeIndex> {
        self.pairs.iter().flat_map(|p| [p.l, p.m]).collect()
    }

    /// Evaluates, through [`pair_interaction`], every ordered product that could
    /// feed a low mode other than the designated `B_k(u_{l_k}, u_{m_k})` terms.
    pub fn audit(&self) -> Result<InteractionAudit> {
        let n0 = self.n0 as i32;
        let lows = Lattice::shared(self.n0)?;
        let aux = self.aux_modes();
        let owner: Vec<usize> = (0..self.pairs.len()).flat_map(|i| [i, i]).collect();
        let low_emission = |a: ModeIndex, b: ModeIndex, skip: Option<ModeIndex>| -> Result<f64> {
            let pi = pair_interaction(a, probe(a), b, probe(b))?;
            Ok(pi
                .emissions
                .iter()
                .filter(|e| is_low(e.target.k(), n0) && Some(e.target) != skip)
                .map(|e| norm3(&e.vector))
                .fold(0.0, f64::max))
        };
        let mut checked = 0;
        let mut worst: f64 = 0.0;
        let mut designated = f64::INFINITY;
        // low × aux in both orders
        for &k in lows.modes() {
            for &a in &aux {
                worst = worst.max(low_emission(k, a, None)?).max(low_emission(a, k, None)?);
                checked += 2;
            }
        }
        for (i, &a) in aux.iter().enumerate() {
            for (j, &b) in aux.iter().enumerate() {
                let p = &self.pairs[owner[i]];
                let partner = owner[i] == owner[j] && i != j;
                let skip = if partner { Some(p.k) } else { None };
                worst = worst.max(low_emission(a, b, skip)?);
                checked += 1;
                if partner {
                    let pi = pair_interaction(a, probe(a), b, probe(b))?;
                    let on_k = pi.emissions.iter().filter(|e| e.target == p.k).map(|e| norm3(&e.vector)).sum::<f64>();
                    designated = designated.min(on_k);
                }
            }
        }
        if self.pairs.is_empty() {
            designated = 0.0;
        }
        Ok(InteractionAudit { forbidden_checked: checked, forbidden_max: worst, designated_min: designated })
    }
}

/// Outcome of the pair search at one truncation.
#[derive(Debug, Clone)]
pub enum PairSearch {
    Found(AuxiliaryModeSet),
    /// The whole tree was explored: no set exists at this truncation.
    Infeasible { n_max: usize, nodes: u64 },
    /// The node budget ran out first; feasibility is undecided.
    BudgetExhausted { n_max: usize, nodes: u64 },
}

type Candidate = (K, K);

fn candidates(k: K, n0: i32, n_max: i32) -> Vec<Candidate> {
    let floor = 2 * n0 + 1;
    let mut out = Vec::new();
    for a in -n_max..=n_max {
        for b in -n_max..=n_max {
            for c in -n_max..=n_max {
                let l = [a, b, c];
                if !is_positive(l) || sup(l) < floor {
                    continue;
                }
                let (m, other) = if is_positive(k) { (sub(k, l), sub(l, sub(k, l))) } else { (sub(l, k), add(l, sub(l, k))) };
                if is_positive(m) != !is_positive(k) || sup(m) < floor || sup(m) > n_max {
                    continue;
                }
                let (lv, mv) = ([a as f64, b as f64, c as f64], [m[0] as f64, m[1] as f64, m[2] as f64]);
                if norm_sq(l) == norm_sq(m) || cross(&lv, &mv) == [0.0; 3] || is_low(other, n0) {
                    continue;
                }
                out.push((l, m));
            }
        }
    }
    out
}

fn compatible(p: &Candidate, q: &Candidate, n0: i32) -> bool {
    for a in [p.0, p.1] {
        for b in [q.0, q.1] {
            if a == b || is_low(add(a, b), n0) || is_low(sub(a, b), n0) {
                return false;
            }
        }
    }
    true
}

struct Search {
    n0: i32,
    budget: u64,
    nodes: u64,
    exhausted: bool,
}

impl Search {
    /// Depth-first search with minimum-remaining-values variable choice,
    /// forward checking and least-constraining value order.
    fn descend(&mut self, domains: &[Vec<Candidate>], assigned: &mut [Option<Candidate>]) -> bool {
        self.nodes += 1;
        if self.nodes > self.budget {
            self.exhausted = true;
            return false;
        }
        let next = (0..domains.len()).filter(|&i| assigned[i].is_none()).min_by_key(|&i| domains[i].len());
        let Some(i) = next else { return true };
        let mut values: Vec<(Candidate, usize)> = domains[i]
            .iter()
            .map(|c| {
                let support = (0..domains.len())
                    .filter(|&j| j != i && assigned[j].is_none())
                    .map(|j| domains[j].iter().filter(|d| compatible(c, d, self.n0)).count())
                    .sum();
                (*c, support)
            })
            .collect();
        values.sort_by(|a, b| b.1.cmp(&a.1));
        for (c, _) in values {
            let mut pruned = domains.to_vec();
            let mut wiped = false;
            for j in 0..pruned.len() {
                if j == i || assigned[j].is_some() {
                    continue;
                }
                pruned[j].retain(|d| compatible(&c, d, self.n0));
                if pruned[j].is_empty() {
                    wiped = true;
                    break;
                }
            }
            if wiped {
                continue;
            }
            assigned[i] = Some(c);
            if self.descend(&pruned, assigned) {
                return true;
            }
            assigned[i] = None;
            if self.exhausted {
                return false;
            }
        }
        false
    }
}

/// Searches the lattice `|·|∞ ≤ n_max` for carrier pairs, one per low mode,
/// whose unwanted interactions all miss the low modes.
pub fn search_auxiliary_pairs(n0: usize, n_max: usize, budget: u64) -> Result<PairSearch> {
    if n0 == 0 || n_max <= n0 {
        return param(format!("need 1 <= N0 < N_max, got N0={n0}, N_max={n_max}"));
    }
    let lows = Lattice::shared(n0)?;
    let (n0i, nmi) = (n0 as i32, n_max as i32);
    let domains: Vec<Vec<Candidate>> = lows.modes().iter().map(|k| candidates(k.k(), n0i, nmi)).collect();
    if domains.iter().any(|d| d.is_empty()) {
        return Ok(PairSearch::Infeasible { n_max, nodes: 0 });
    }
    let mut search = Search { n0: n0i, budget, nodes: 0, exhausted: false };
    let mut assigned = vec![None; domains.len()];
    if search.descend(&domains, &mut assigned) {
        let mut pairs = Vec::with_capacity(domains.len());
        for (k, c) in lows.modes().iter().zip(&assigned) {
            let (l, m) = c.expect("complete assignment");
            let (l, m) = (ModeIndex::new(l)?, ModeIndex::new(m)?);
            let pair = AuxiliaryPair { k: *k, l, m, class: k.sign_class(), c_k: bilinear_constant(l, m) };
            pair.validate(n0)?;
            pairs.push(pair);
        }
        let min_aux_sup = pairs.iter().flat_map(|p| [p.l.sup_norm(), p.m.sup_norm()]).min().unwrap_or(0);
        Ok(PairSearch::Found(AuxiliaryModeSet { n0, n_max, pairs, min_aux_sup, nodes_explored: search.nodes }))
    } else if search.exhausted {
        Ok(PairSearch::BudgetExhausted { n_max, nodes: search.nodes })
    } else {
        Ok(PairSearch::Infeasible { n_max, nodes: search.nodes })
    }
}

pub const DEFAULT_SEARCH_BUDGET: u64 = 200_000;

/// Pair set at `n_max`, or a planning error naming the smallest truncation at
/// which the search succeeds.
pub fn select_auxiliary_pairs(n0: usize, n_max: usize) -> Result<AuxiliaryModeSet> {
    select_auxiliary_pairs_with_budget(n0, n_max, DEFAULT_SEARCH_BUDGET)
}

pub fn select_auxiliary_pairs_with_budget(n0: usize, n_max: usize, budget: u64) -> Result<AuxiliaryModeSet> {
    let describe = |s: &PairSearch| match s {
        PairSearch::Found(_) => "feasible".to_string(),
        PairSearch::Infeasible { n_max, nodes } => format!("N_max={n_max} infeasible ({nodes} nodes, exhaustive)"),
        PairSearch::BudgetExhausted { n_max, nodes } => format!("N_max={n_max} undecided ({nodes} nodes)"),
    };
    let first = search_auxiliary_pairs(n0, n_max, budget)?;
    if let PairSearch::Found(set) = first {
        return Ok(set);
    }
    let mut notes = vec![describe(&first)];
    for bigger in n_max + 1..=n_max + 4 {
        let s = search_auxiliary_pairs(n0, bigger, budget)?;
        if let PairSearch::Found(_) = s {
            return Err(Error::Planning(format!(
                "no auxiliary pair set for N0={n0} at N_max={n_max}; smallest feasible N_max found: {bigger} [{}]",
                notes.join("; ")
            )));
        }
        notes.push(describe(&s));
    }
    Err(Error::Planning(format!("no auxiliary pair set for N0={n0} up to N_max={} [{}]", n_max + 4, notes.join("; "))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Regularize,
    KillHigh,
    SteerLow,
    Finish,
}

/// One phase of the plan sampled on its quadrature grid.
#[derive(Debug, Clone)]
pub struct PhasePlan {
    pub phase: Phase,
    pub start: f64,
    pub end: f64,
    pub times: Vec<f64>,
    pub states: Vec<SpectralField>,
    pub controls: Vec<SpectralField>,
    /// Relative residual of the high-mode equation, checked with the pairwise convolution.
    pub high_defect: f64,
    /// Relative residual of the low-mode equation where the low path is prescribed.
    pub low_defect: Option<f64>,
}

impl PhasePlan {
    /// Control at `t`, linear between grid nodes.
    pub fn control_at(&self, t: f64) -> SpectralField {
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return self.controls[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.controls[n - 1].clone();
        }
        let j = self.times.partition_point(|&s| s <= t).clamp(1, n - 1);
        let (t0, t1) = (self.times[j - 1], self.times[j]);
        let s = (t - t0) / (t1 - t0);
        let mut w = &self.controls[j - 1] * (1.0 - s);
        w.axpy(s, &self.controls[j]);
        w
    }

    pub fn final_state(&self) -> &SpectralField {
        self.states.last().expect("phase has nodes")
    }
}

#[derive(Debug, Clone)]
pub struct PlanOptions {
    pub steps_per_phase: usize,
    pub max_phase1_halvings: usize,
    pub max_phase4_halvings: usize,
    pub search_budget: u64,
    /// Nodes between pairwise defect checks on dense phases.
    pub defect_stride: usize,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            steps_per_phase: 200,
            max_phase1_halvings: 8,
            max_phase4_halvings: 12,
            search_budget: DEFAULT_SEARCH_BUDGET,
            defect_stride: 25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControlSolution {
    pub x: SpectralField,
    pub y: SpectralField,
    pub t_end: f64,
    pub eps: f64,
    /// `T₁ < T₂ < T₃`.
    pub boundaries: [f64; 3],
    pub phases: Vec<PhasePlan>,
    pub pairs: AuxiliaryModeSet,
    pub audit: InteractionAudit,
    /// `sup_t |u(t)|_W` over the planned trajectory.
    pub rho0: f64,
    pub planned_miss: f64,
    /// Energy-inequality constant measured at `x`.
    pub energy_constant: f64,
    pub phase1_halvings: usize,
    /// `|u^L(T) − y^L|_W` for each phase-4 attempt, in order.
    pub phase4_misses: Vec<f64>,
    /// Largest `|u(t)|²_W / |x|²_W` during phase 2.
    pub phase2_energy_ratio: f64,
    noise: NoiseSpec,
}

impl ControlSolution {
    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    pub fn n_max(&self) -> usize {
        self.x.n_max()
    }

    pub fn max_high_defect(&self) -> f64 {
        self.phases.iter().map(|p| p.high_defect).fold(0.0, f64::max)
    }

    pub fn max_low_defect(&self) -> f64 {
        self.phases.iter().filter_map(|p| p.low_defect).fold(0.0, f64::max)
    }

    pub fn planned_state(&self, phase: usize, node: usize) -> &SpectralField {
        &self.phases[phase].states[node]
    }

    /// Summary JSON; with `samples` the control is included on every grid node.
    pub fn to_json(&self, samples: bool) -> Result<String> {
        let phases: Vec<_> = self
            .phases
            .iter()
            .map(|p| {
                let mut v = json!({
                    "phase": p.phase,
                    "start": p.start,
                    "end": p.end,
                    "nodes": p.times.len(),
                    "high_defect": p.high_defect,
                    "low_defect": p.low_defect,
                });
                if samples {
                    v["times"] = json!(p.times);
                    v["controls"] = json!(p.controls.iter().map(|w| w.as_flat()).collect::<Vec<_>>());
                }
                v
            })
            .collect();
        let doc = json!({
            "n_max": self.n_max(),
            "n0": self.pairs.n0,
            "t_end": self.t_end,
            "eps": self.eps,
            "boundaries": self.boundaries,
            "rho0": self.rho0,
            "planned_miss": self.planned_miss,
            "energy_constant": self.energy_constant,
            "phase1_halvings": self.phase1_halvings,
            "phase2_energy_ratio": self.phase2_energy_ratio,
            "phase4_misses": self.phase4_misses,
            "pairs": self.pairs,
            "audit": self.audit,
            "phases": phases,
        });
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Serialization(e.to_string()))
    }
}

/// Shared per-plan context.
struct Ctx<'a> {
    noise: &'a NoiseSpec,
    n0: usize,
    n_max: usize,
    conv: GridConvolver,
    weights: Vec<f64>,
    opts: &'a PlanOptions,
}

fn stokes(u: &SpectralField) -> SpectralField {
    let lat = u.lattice().clone();
    let mut out = u.clone();
    for (i, c) in out.coeffs_mut().iter_mut().enumerate() {
        let k2 = lat.norm_sq(i);
        c[0] *= k2;
        c[1] *= k2;
    }
    out
}

fn decay(u: &SpectralField, h: f64) -> SpectralField {
    let lat = u.lattice().clone();
    let mut out = u.clone();
    for (i, c) in out.coeffs_mut().iter_mut().enumerate() {
        let e = (-lat.norm_sq(i) * h).exp();
        c[0] *= e;
        c[1] *= e;
    }
    out
}

fn part(u: &SpectralField, n0: usize, p: Part) -> SpectralField {
    u.project_window(n0, p).expect("n0 below truncation")
}

/// One integrating-factor RK4 step of `u̇ = −Au + F(u, t)`.
fn if_rk4<F>(u: &SpectralField, t: f64, h: f64, f: F) -> Result<SpectralField>
where
    F: Fn(&SpectralField, f64) -> Result<SpectralField>,
{
    let half = |v: &SpectralField| decay(v, 0.5 * h);
    let k1 = f(u, t)?;
    let mut a = u.clone();
    a.axpy(0.5 * h, &k1);
    let a = half(&a);
    let k2 = f(&a, t + 0.5 * h)?;
    let mut b = half(u);
    b.axpy(0.5 * h, &k2);
    let k3 = f(&b, t + 0.5 * h)?;
    let mut c = decay(u, h);
    c.axpy(h, &half(&k3));
    let k4 = f(&c, t + h)?;
    let mut out = decay(u, h);
    let mut inc = decay(&k1, h);
    let mut mid = k2;
    mid += &k3;
    inc.axpy(2.0, &half(&mid));
    inc += &k4;
    out.axpy(h / 6.0, &inc);
    Ok(out)
}

/// Classic RK4 for the low-mode system.
fn rk4<F>(u: &SpectralField, t: f64, h: f64, f: F) -> Result<SpectralField>
where
    F: Fn(&SpectralField, f64) -> Result<SpectralField>,
{
    let k1 = f(u, t)?;
    let k2 = f(&(u + &(&k1 * (0.5 * h))), t + 0.5 * h)?;
    let k3 = f(&(u + &(&k2 * (0.5 * h))), t + 0.5 * h)?;
    let k4 = f(&(u + &(&k3 * h)), t + h)?;
    let mut out = u.clone();
    out.axpy(h / 6.0, &k1);
    out.axpy(h / 3.0, &k2);
    out.axpy(h / 3.0, &k3);
    out.axpy(h / 6.0, &k4);
    Ok(out)
}

fn grid(start: f64, end: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|j| if j == steps { end } else { start + (end - start) * j as f64 / steps as f64 }).collect()
}

impl Ctx<'_> {
    fn w_norm(&self, u: &SpectralField) -> f64 {
        u.weighted_norm(&self.weights)
    }

    /// `Q⁻¹ F_H` for a high-supported forcing.
    fn control_from(&self, forcing: &SpectralField) -> Result<SpectralField> {
        let low = part(forcing, self.n0, Part::Low);
        if low.max_abs() != 0.0 {
            return Err(Error::Consistency("control forcing has low-mode content".into()));
        }
        self.noise.apply_q_inverse_high(forcing)
    }

    /// `w = Q⁻¹[u̇^H + Au^H + B_H(u,u)]`.
    fn control(&self, u: &SpectralField, du_high: &SpectralField) -> Result<SpectralField> {
        let mut f = du_high.clone();
        f += &stokes(&part(u, self.n0, Part::High));
        f += &part(&self.conv.convective(u, self.n_max)?, self.n0, Part::High);
        self.control_from(&f)
    }

    /// Relative high-mode residual with an independent evaluation of `B`.
    fn high_defect(&self, u: &SpectralField, du_high: &SpectralField, w: &SpectralField) -> Result<f64> {
        let b = part(&convective_term(u, self.n_max)?, self.n0, Part::High);
        let qw = self.noise.apply_q(w);
        let mut r = du_high.clone();
        r += &stokes(&part(u, self.n0, Part::High));
        r += &b;
        let r = &r - &qw;
        Ok(r.max_abs() / qw.max_abs().max(b.max_abs()).max(1.0))
    }

    fn low_convective(&self, u: &SpectralField) -> Result<SpectralField> {
        self.conv.convective(u, self.n0)
    }

    fn defect_nodes(&self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).step_by(self.opts.defect_stride.max(1)).collect();
        if idx.last() != Some(&(n - 1)) {
            idx.push(n - 1);
        }
        idx
    }
}

/// Energy constant `c` of `d|u|²_W/dt + 2|A^{1/2}u|²_W ≤ |A^{1/2}u|²_W + c|u|⁴_W` at `x`.
pub fn energy_constant(x: &SpectralField, alpha0: f64) -> Result<f64> {
    let wn = x.sobolev_norm_sq(SobolevIndex::w(alpha0));
    if wn == 0.0 {
        return Ok(0.0);
    }
    let b = convective_term(x, x.n_max())?;
    let pairing = x.inner(&b, SobolevIndex::w(alpha0)).abs();
    let dissipation = x.sobolev_norm_sq(SobolevIndex(2.0 * alpha0 + 1.5));
    Ok(((2.0 * pairing - dissipation) / (wn * wn)).max(0.0))
}

/// Phase 1: free evolution on `[0, T₁]`, `T₁ = min(T/4, t₀)`, halved until
/// `|u(t)|_W ≤ √2 |x|_W` holds throughout.
fn phase1(ctx: &Ctx, x: &SpectralField, t_end: f64, c: f64) -> Result<(PhasePlan, usize)> {
    let xn = ctx.w_norm(x);
    let t0 = if c * xn * xn > 0.0 { 1.0 / (2.0 * c * xn * xn) } else { f64::INFINITY };
    let mut t1 = (t_end / 4.0).min(t0);
    let zero = SpectralField::zeros(ctx.n_max)?;
    for halving in 0..=ctx.opts.max_phase1_halvings {
        let times = grid(0.0, t1, ctx.opts.steps_per_phase);
        let mut states = vec![x.clone()];
        let mut ok = true;
        for j in 1..times.len() {
            let h = times[j] - times[j - 1];
            let next =
                if_rk4(states.last().unwrap(), times[j - 1], h, |u, _| Ok(&ctx.conv.convective(u, ctx.n_max)? * -1.0))?;
            if !next.is_finite() || ctx.w_norm(&next) > std::f64::consts::SQRT_2 * xn * (1.0 + 1e-12) {
                ok = false;
                break;
            }
            states.push(next);
        }
        if ok {
            let controls = vec![zero.clone(); times.len()];
            let plan = PhasePlan {
                phase: Phase::Regularize,
                start: 0.0,
                end: t1,
                times,
                states,
                controls,
                high_defect: 0.0,
                low_defect: None,
            };
            return Ok((plan, halving));
        }
        t1 *= 0.5;
    }
    Err(Error::Planning(format!(
        "phase 1 energy bound failed after {} halvings",
        ctx.opts.max_phase1_halvings
    )))
}

fn zeros_like(u: &SpectralField) -> SpectralField {
    SpectralField::zeros_on(u.lattice().clone())
}

/// Phase 2: `u^H(t) = ψ(t) u^H(T₁)` with `ψ` a smoothstep from 1 to 0; the low
/// modes follow their own equation.
fn phase2(ctx: &Ctx, u1: &SpectralField, t1: f64, t2: f64) -> Result<(PhasePlan, f64)> {
    let h1 = part(u1, ctx.n0, Part::High);
    let span = t2 - t1;
    let psi = |t: f64| 1.0 - smoothstep((t - t1) / span);
    let dpsi = |t: f64| -smoothstep_prime((t - t1) / span) / span;
    let times = grid(t1, t2, ctx.opts.steps_per_phase);
    let mut lows = vec![part(u1, ctx.n0, Part::Low)];
    let rhs = |ul: &SpectralField, t: f64| -> Result<SpectralField> {
        let mut u = ul.clone();
        u.axpy(psi(t), &h1);
        let b = part(&ctx.low_convective(&u)?, ctx.n0, Part::Low).resize(ctx.n_max)?;
        Ok(&(&stokes(ul) * -1.0) - &b)
    };
    for j in 1..times.len() {
        let next = rk4(lows.last().unwrap(), times[j - 1], times[j] - times[j - 1], &rhs)?;
        if !next.is_finite() {
            return Err(Error::Integration { time: times[j], reason: "phase-2 low modes diverged".into() });
        }
        lows.push(next);
    }
    let states: Vec<SpectralField> = times
        .iter()
        .zip(&lows)
        .map(|(&t, ul)| {
            let mut u = ul.clone();
            // the endpoint is exactly zero
            if t < t2 {
                u.axpy(psi(t), &h1);
            }
            u
        })
        .collect();
    let du: Vec<SpectralField> = times.iter().map(|&t| &h1 * dpsi(t)).collect();
    let controls: Vec<SpectralField> = parallel::map_indices(times.len(), |j| ctx.control(&states[j], &du[j]))
        .into_iter()
        .collect::<Result<_>>()?;
    let mut defect: f64 = 0.0;
    for j in ctx.defect_nodes(times.len()) {
        defect = defect.max(ctx.high_defect(&states[j], &du[j], &controls[j])?);
    }
    let xn2 = ctx.w_norm(&states[0]).powi(2);
    let ratio = states.iter().map(|u| ctx.w_norm(u).powi(2)).fold(0.0, f64::max) / xn2.max(f64::MIN_POSITIVE);
    let plan = PhasePlan {
        phase: Phase::KillHigh,
        start: t1,
        end: t2,
        times,
        states,
        controls,
        high_defect: defect,
        low_defect: None,
    };
    Ok((plan, ratio))
}

/// Per-pair linear solve of the phase-3 force balance.
struct PairSolver {
    l_idx: usize,
    m_idx: usize,
    k_low: usize,
    x_hat: Vec3,
    y_basis: [Vec3; 2],
    inverse: [[f64; 2]; 2],
}

impl PairSolver {
    fn new(pair: AuxiliaryPair, lat: &Lattice, lows: &Lattice) -> Result<Self> {
        let cert = |why: String| Error::Certificate(format!("phase-3 solve for k={}: {why}", pair.k));
        if pair.c_k == 0.0 || !pair.c_k.is_finite() {
            return Err(cert(format!("c_k = {}", pair.c_k)));
        }
        let kv = pair.k.as_vec3();
        let kn = norm3(&kv);
        let khat = [kv[0] / kn, kv[1] / kn, kv[2] / kn];
        let lv = pair.l.as_vec3();
        let l0 = dot(&lv, &khat);
        let lperp = [lv[0] - l0 * khat[0], lv[1] - l0 * khat[1], lv[2] - l0 * khat[2]];
        let l1 = norm3(&lperp);
        if l1 == 0.0 {
            return Err(cert("l parallel to k".into()));
        }
        let g1 = [lperp[0] / l1, lperp[1] / l1, lperp[2] / l1];
        let g2 = cross(&khat, &g1);
        let mv = pair.m.as_vec3();
        let (m0, m1) = (dot(&mv, &khat), dot(&mv, &g1));
        if m1 == 0.0 {
            return Err(cert("m parallel to k".into()));
        }
        // x₀ = x₂ = 1, x₁ from X·l = 0; Y ranges over span{k̂ − (m₀/m₁) g₁, g₂}
        let x1 = -l0 / l1;
        let x_hat = [khat[0] + x1 * g1[0] + g2[0], khat[1] + x1 * g1[1] + g2[1], khat[2] + x1 * g1[2] + g2[2]];
        let ya = [khat[0] - m0 / m1 * g1[0], khat[1] - m0 / m1 * g1[1], khat[2] - m0 / m1 * g1[2]];
        let y_basis = [ya, g2];
        let mut cols = [[0.0; 2]; 2];
        for (c, y) in y_basis.iter().enumerate() {
            let e = Self::on_k(&pair, &x_hat, y)?;
            cols[c] = e;
        }
        let det = cols[0][0] * cols[1][1] - cols[1][0] * cols[0][1];
        let scale = (cols[0][0].abs() + cols[0][1].abs()) * (cols[1][0].abs() + cols[1][1].abs());
        if !(det.abs() > 1e-12 * scale) || scale == 0.0 {
            return Err(cert(format!("singular 2x2 system (det {det:e})")));
        }
        let inverse = [[cols[1][1] / det, -cols[1][0] / det], [-cols[0][1] / det, cols[0][0] / det]];
        let idx = |m: ModeIndex| {
            lat.index_of(m.k()).ok_or_else(|| cert(format!("mode {m} outside the truncation")))
        };
        let k_low = lows.index_of(pair.k.k()).ok_or_else(|| cert("k not low".into()))?;
        Ok(PairSolver { l_idx: idx(pair.l)?, m_idx: idx(pair.m)?, k_low, x_hat, y_basis, inverse })
    }

    /// Components on `k` of `B(X e_l, Y e_m) + B(Y e_m, X e_l)`.
    fn on_k(pair: &AuxiliaryPair, x: &Vec3, y: &Vec3) -> Result<[f64; 2]> {
        let mut out = [0.0; 2];
        for pi in [pair_interaction(pair.l, *x, pair.m, *y)?, pair_interaction(pair.m, *y, pair.l, *x)?] {
            for e in pi.emissions.iter().filter(|e| e.target == pair.k) {
                out[0] += e.components[0];
                out[1] += e.components[1];
            }
        }
        Ok(out)
    }

    /// `Y` with `B(X̂ e_l, Y e_m) + B(Y e_m, X̂ e_l)` equal to `target` on `k`.
    fn solve(&self, target: [f64; 2]) -> Vec3 {
        let a = self.inverse[0][0] * target[0] + self.inverse[0][1] * target[1];
        let b = self.inverse[1][0] * target[0] + self.inverse[1][1] * target[1];
        let (ya, g2) = (&self.y_basis[0], &self.y_basis[1]);
        [a * ya[0] + b * g2[0], a * ya[1] + b * g2[1], a * ya[2] + b * g2[2]]
    }
}

/// Quartic low-mode path on `[T₂, T₃]` matching value, velocity and
/// acceleration of the free low dynamics at `T₂`, and value and free velocity at `T₃`.
struct LowPath {
    coef: [SpectralField; 5],
    span: f64,
}

impl LowPath {
    fn eval(&self, tau: f64, order: usize) -> SpectralField {
        let mut out = zeros_like(&self.coef[0]);
        for (p, c) in self.coef.iter().enumerate().skip(order) {
            let falling: f64 = (0..order).map(|i| (p - i) as f64).product();
            out.axpy(falling * tau.powi((p - order) as i32), c);
        }
        out.scale(self.span.powi(-(order as i32)));
        out
    }
}

struct LowKinematics {
    u: SpectralField,
    du: SpectralField,
    g: SpectralField,
    dg: SpectralField,
    ddg: SpectralField,
}

fn low_free_velocity(u: &SpectralField, n0: usize) -> Result<SpectralField> {
    Ok(&(&stokes(u) * -1.0) - &bilinear_term(u, u, n0)?)
}

fn low_kinematics(path: &LowPath, tau: f64, n0: usize) -> Result<LowKinematics> {
    let [u, du, ddu, dddu] = [0, 1, 2, 3].map(|o| path.eval(tau, o));
    let b = |a: &SpectralField, c: &SpectralField| bilinear_term(a, c, n0);
    let mut g = du.clone();
    g += &stokes(&u);
    g += &b(&u, &u)?;
    let mut dg = ddu.clone();
    dg += &stokes(&du);
    dg += &b(&du, &u)?;
    dg += &b(&u, &du)?;
    let mut ddg = dddu;
    ddg += &stokes(&ddu);
    ddg += &b(&ddu, &u)?;
    ddg.axpy(2.0, &b(&du, &du)?);
    ddg += &b(&u, &ddu)?;
    Ok(LowKinematics { u, du, g, dg, ddg })
}

struct Phase3 {
    plan: PhasePlan,
}

/// Phase 3: the low modes follow the quartic path to `z^L` and every low
/// mode is forced through its carrier pair `X_k = σ_k τ X̂_k`, `Y_k` solved pointwise.
fn phase3(
    ctx: &Ctx,
    u2: &SpectralField,
    z: &SpectralField,
    t2: f64,
    t3: f64,
    solvers: &[PairSolver],
    with_controls: bool,
) -> Result<Phase3> {
    let n0 = ctx.n0;
    let span = t3 - t2;
    let ul2 = part(u2, n0, Part::Low).resize(n0)?;
    if part(u2, n0, Part::High).max_abs() != 0.0 {
        return Err(Error::Consistency("phase 3 must start with zero high modes".into()));
    }
    let zl = part(z, n0, Part::Low).resize(n0)?;
    let d1 = low_free_velocity(&ul2, n0)?;
    // Df(u)v = −Av − B(u,v) − B(v,u)
    let mut d2 = &stokes(&d1) * -1.0;
    d2.axpy(-1.0, &bilinear_term(&ul2, &d1, n0)?);
    d2.axpy(-1.0, &bilinear_term(&d1, &ul2, n0)?);
    let fz = low_free_velocity(&zl, n0)?;
    let a0 = ul2.clone();
    let a1 = &d1 * span;
    let a2 = &d2 * (0.5 * span * span);
    let r1 = &(&(&zl - &a0) - &a1) - &a2;
    let r2 = &(&(&fz * span) - &a1) - &(&a2 * 2.0);
    let a4 = &r2 - &(&r1 * 3.0);
    let a3 = &r1 - &a4;
    let path = LowPath { coef: [a0, a1, a2, a3, a4], span };

    let times = grid(t2, t3, ctx.opts.steps_per_phase);
    let kin: Vec<LowKinematics> = parallel::map_indices(times.len(), |j| low_kinematics(&path, (times[j] - t2) / span, n0))
        .into_iter()
        .collect::<Result<_>>()?;
    let neg = |f: &SpectralField, i: usize| {
        let c = f.coeffs()[i];
        [-c[0], -c[1]]
    };
    // balance |X| and |Y| over the phase
    let sigmas: Vec<f64> = solvers
        .iter()
        .map(|s| {
            let xn = norm3(&s.x_hat);
            let ymax = times
                .iter()
                .zip(&kin)
                .skip(1)
                .map(|(&t, kk)| norm3(&s.solve(neg(&kk.g, s.k_low))) / ((t - t2) / span))
                .fold(0.0, f64::max);
            if ymax > 0.0 {
                (ymax / xn).sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let lat = ctx.noise.lattice().clone();
    let assemble = |j: usize| -> Result<(SpectralField, SpectralField)> {
        let tau = (times[j] - t2) / span;
        let kk = &kin[j];
        let mut u = kk.u.resize(ctx.n_max)?;
        let mut du_high = SpectralField::zeros_on(lat.clone());
        for (s, &sigma) in solvers.iter().zip(&sigmas) {
            if sigma == 0.0 {
                continue;
            }
            let xl = s.x_hat.map(|c| c * sigma * tau);
            let dxl = s.x_hat.map(|c| c * sigma / span);
            let (y, dy) = if j == 0 {
                let target = neg(&kk.ddg, s.k_low).map(|c| 0.5 * c * span / sigma);
                ([0.0; 3], s.solve(target))
            } else {
                let y = s.solve(neg(&kk.g, s.k_low)).map(|c| c / (sigma * tau));
                let gt = neg(&kk.dg, s.k_low);
                let g = neg(&kk.g, s.k_low);
                let target = [0, 1].map(|i| gt[i] / (sigma * tau) - g[i] / (sigma * tau * tau * span));
                (y, s.solve(target))
            };
            let (lb, mb) = (lat.basis(s.l_idx), lat.basis(s.m_idx));
            u.coeffs_mut()[s.l_idx] = lb.components(&xl);
            u.coeffs_mut()[s.m_idx] = mb.components(&y);
            du_high.coeffs_mut()[s.l_idx] = lb.components(&dxl);
            du_high.coeffs_mut()[s.m_idx] = mb.components(&dy);
        }
        Ok((u, du_high))
    };
    let assembled: Vec<(SpectralField, SpectralField)> =
        parallel::map_indices(times.len(), assemble).into_iter().collect::<Result<_>>()?;
    let (states, du): (Vec<_>, Vec<_>) = assembled.into_iter().unzip();

    // the low equation with the full quadratic term of the assembled field
    let mut low_defect: f64 = 0.0;
    for (u, kk) in states.iter().zip(&kin) {
        let b = bilinear_term(u, u, n0)?;
        let mut r = kk.du.clone();
        r += &stokes(&kk.u);
        r += &b;
        low_defect = low_defect.max(r.max_abs() / b.max_abs().max(1.0));
    }
    let (controls, high_defect) = if with_controls {
        let controls: Vec<SpectralField> = parallel::map_indices(times.len(), |j| ctx.control(&states[j], &du[j]))
            .into_iter()
            .collect::<Result<_>>()?;
        let mut d: f64 = 0.0;
        for j in 0..times.len() {
            d = d.max(ctx.high_defect(&states[j], &du[j], &controls[j])?);
        }
        (controls, d)
    } else {
        (Vec::new(), 0.0)
    };
    let plan = PhasePlan {
        phase: Phase::SteerLow,
        start: t2,
        end: t3,
        times,
        states,
        controls,
        high_defect,
        low_defect: Some(low_defect),
    };
    Ok(Phase3 { plan })
}

/// Phase 4: `u^H` interpolates linearly to `z^H`; the low modes integrate freely.
fn phase4(ctx: &Ctx, u3: &SpectralField, z: &SpectralField, t3: f64, t_end: f64, with_controls: bool) -> Result<PhasePlan> {
    let n0 = ctx.n0;
    let h3 = part(u3, n0, Part::High);
    let dh = &part(z, n0, Part::High) - &h3;
    let span = t_end - t3;
    let high_at = |t: f64| {
        let mut h = h3.clone();
        h.axpy((t - t3) / span, &dh);
        h
    };
    let times = grid(t3, t_end, ctx.opts.steps_per_phase);
    let rhs = |ul: &SpectralField, t: f64| -> Result<SpectralField> {
        let u = ul + &high_at(t);
        let b = part(&ctx.low_convective(&u)?, n0, Part::Low).resize(ctx.n_max)?;
        Ok(&(&stokes(ul) * -1.0) - &b)
    };
    let mut lows = vec![part(u3, n0, Part::Low)];
    for j in 1..times.len() {
        let next = rk4(lows.last().unwrap(), times[j - 1], times[j] - times[j - 1], &rhs)?;
        if !next.is_finite() {
            return Err(Error::Integration { time: times[j], reason: "phase-4 low modes diverged".into() });
        }
        lows.push(next);
    }
    let states: Vec<SpectralField> = times.iter().zip(&lows).map(|(&t, ul)| ul + &high_at(t)).collect();
    let du = &dh * (1.0 / span);
    let (controls, defect) = if with_controls {
        let controls: Vec<SpectralField> = parallel::map_indices(times.len(), |j| ctx.control(&states[j], &du))
            .into_iter()
            .collect::<Result<_>>()?;
        let mut d: f64 = 0.0;
        for j in ctx.defect_nodes(times.len()) {
            d = d.max(ctx.high_defect(&states[j], &du, &controls[j])?);
        }
        (controls, d)
    } else {
        (Vec::new(), 0.0)
    };
    Ok(PhasePlan { phase: Phase::Finish, start: t3, end: t_end, times, states, controls, high_defect: defect, low_defect: None })
}

/// Plans a control steering `x` to within `eps` of `y` at `t_end`.
pub fn plan_control(
    x: &SpectralField,
    y: &SpectralField,
    t_end: f64,
    eps: f64,
    noise: &NoiseSpec,
    opts: &PlanOptions,
) -> Result<ControlSolution> {
    let n_max = noise.lattice().n_max();
    let n0 = noise.n0();
    if x.n_max() != n_max || y.n_max() != n_max {
        return param(format!("x and y must live on the N_max={n_max} truncation"));
    }
    if !(t_end > 0.0) || !(eps > 0.0) {
        return param("need T > 0 and eps > 0");
    }
    if opts.steps_per_phase < 2 {
        return param("need at least 2 steps per phase");
    }
    let pairs = select_auxiliary_pairs_with_budget(n0, n_max, opts.search_budget)?;
    let audit = pairs.audit()?;
    if !audit.passes() {
        return Err(Error::Certificate(format!("interaction audit failed: {audit:?}")));
    }
    let lat = noise.lattice().clone();
    let lows = Lattice::shared(n0)?;
    let solvers: Vec<PairSolver> =
        pairs.pairs.iter().map(|p| PairSolver::new(*p, &lat, &lows)).collect::<Result<_>>()?;
    let ctx = Ctx {
        noise,
        n0,
        n_max,
        conv: GridConvolver::new(n_max)?,
        weights: SobolevIndex::w(noise.alpha0()).weights(&lat),
        opts,
    };

    let c = energy_constant(x, noise.alpha0())?;
    let (p1, phase1_halvings) = phase1(&ctx, x, t_end, c)?;
    let t1 = p1.end;
    let xn = ctx.w_norm(x);
    let t2_energy = if c * xn * xn > 0.0 { t1 + 1.0 / (4.0 * c * xn * xn) } else { f64::INFINITY };
    let t2 = (t_end / 2.0).min(t2_energy);
    let (p2, phase2_energy_ratio) = phase2(&ctx, p1.final_state(), t1, t2)?;
    let u2 = p2.final_state().clone();

    let mut gap = (t_end - t2) / 4.0;
    let mut misses = Vec::new();
    let y_low = part(y, n0, Part::Low);
    let mut accepted = None;
    for _ in 0..=opts.max_phase4_halvings {
        let t3 = t_end - gap;
        let p3 = phase3(&ctx, &u2, y, t2, t3, &solvers, false)?;
        let p4 = phase4(&ctx, p3.plan.final_state(), y, t3, t_end, false)?;
        let miss = ctx.w_norm(&(&part(p4.final_state(), n0, Part::Low) - &y_low));
        misses.push(miss);
        if miss <= 0.5 * eps {
            accepted = Some(t3);
            break;
        }
        gap *= 0.5;
    }
    let Some(t3) = accepted else {
        return Err(Error::Planning(format!(
            "phase 4 missed the low target after {} halvings: misses {misses:?}",
            opts.max_phase4_halvings
        )));
    };
    let p3 = phase3(&ctx, &u2, y, t2, t3, &solvers, true)?.plan;
    let p4 = phase4(&ctx, p3.final_state(), y, t3, t_end, true)?;
    let phases = vec![p1, p2, p3, p4];
    let rho0 = phases.iter().flat_map(|p| p.states.iter()).map(|u| ctx.w_norm(u)).fold(0.0, f64::max);
    let planned_miss = ctx.w_norm(&(phases[3].final_state() - y));
    Ok(ControlSolution {
        x: x.clone(),
        y: y.clone(),
        t_end,
        eps,
        boundaries: [t1, t2, t3],
        phases,
        pairs,
        audit,
        rho0,
        planned_miss,
        energy_constant: c,
        phase1_halvings,
        phase4_misses: misses,
        phase2_energy_ratio,
        noise: noise.clone(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub n_verify: usize,
    pub dt: f64,
    /// `|u(T) − y|_W` of the closed-loop replay.
    pub final_miss: f64,
    /// The same miss restricted to the planning truncation.
    pub final_miss_planned_modes: f64,
    pub sup_w: f64,
    pub rho0: f64,
    /// `|u_replay − u_plan|_W` at the end of each phase.
    pub phase_deviation: Vec<f64>,
    pub max_high_defect: f64,
    pub max_low_defect: f64,
}

/// Integrates the controlled equation from `x` with the planned control on the
/// truncation `n_verify ≥ N_max`, time step about `dt`, aligned to the phases.
pub fn verify_control(plan: &ControlSolution, n_verify: usize, dt: f64) -> Result<VerificationReport> {
    if n_verify < plan.n_max() {
        return param(format!("N_verify={n_verify} below the planning truncation {}", plan.n_max()));
    }
    if !(dt > 0.0) {
        return param("dt must be positive");
    }
    let lat = Lattice::shared(n_verify)?;
    let weights = SobolevIndex::w(plan.noise.alpha0()).weights(&lat);
    let conv = GridConvolver::new(n_verify)?;
    let mut u = plan.x.resize(n_verify)?;
    let mut sup_w = u.weighted_norm(&weights);
    let mut deviation = Vec::new();
    for p in &plan.phases {
        let steps = ((p.end - p.start) / dt).ceil().max(1.0) as usize;
        let h = (p.end - p.start) / steps as f64;
        let forcing = |t: f64| plan.noise.apply_q(&p.control_at(t)).resize(n_verify);
        for j in 0..steps {
            let t = p.start + j as f64 * h;
            u = if_rk4(&u, t, h, |v, s| Ok(&forcing(s)? - &conv.convective(v, n_verify)?))?;
            if !u.is_finite() {
                return Err(Error::Integration { time: t + h, reason: "replay diverged".into() });
            }
            sup_w = sup_w.max(u.weighted_norm(&weights));
        }
        let planned = p.final_state().resize(n_verify)?;
        deviation.push((&u - &planned).weighted_norm(&weights));
    }
    let err = &u - &plan.y.resize(n_verify)?;
    let final_miss = err.weighted_norm(&weights);
    let final_miss_planned_modes = err.project_window(plan.n_max(), Part::Low)?.weighted_norm(&weights);
    Ok(VerificationReport {
        n_verify,
        dt,
        final_miss,
        final_miss_planned_modes,
        sup_w,
        rho0: plan.rho0,
        phase_deviation: deviation,
        max_high_defect: plan.max_high_defect(),
        max_low_defect: plan.max_low_defect(),
    })
}
