//! Variational flows along a recorded trajectory.
//!
//! Everything here is the exact derivative of the exponential-Euler map used
//! by the simulator, driven by the same increments. The low-block step
//! matrix `S_n` includes the `χ′` chain-rule term of the drift cutoff and the
//! rank-one derivative of the state-dependent covariance, so `J_{n+1} = S_n J_n`
//! and `Jinv_{n+1} = Jinv_n S_n⁻¹` are inverse to roundoff. The Itô trace
//! correction of the continuous inverse equation is what the exact inverse
//! produces at first order; [`inverse_flow_euler`] integrates that equation
//! directly for comparison.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::field::SpectralField;
use crate::modes::Lattice;
use crate::noise::{state_covariance, Model};
use crate::nonlinearity::{bilinear_term, convective_term};
use crate::rng::{split_seed, NoisePath};
use crate::simulator::{simulate, Stepper, Trajectory};
use crate::stats::log_log_slope;
use crate::{parallel, stats};

/// Coordinates of the modes `|k|∞ ≤ N` inside a larger lattice, two per mode.
#[derive(Debug, Clone)]
pub struct LowBlock {
    pub n: usize,
    /// Full-lattice index of each low mode.
    pub modes: Vec<usize>,
}

impl LowBlock {
    pub fn new(lattice: &Lattice, n: usize) -> Result<Self> {
        if n < 1 || n > lattice.n_max() {
            return param(format!("low block N={n} outside 1..={}", lattice.n_max()));
        }
        Ok(LowBlock { n, modes: lattice.low_indices(n) })
    }

    pub fn dim(&self) -> usize {
        2 * self.modes.len()
    }

    /// Full-lattice `(mode, component)` of low coordinate `a`.
    pub fn slot(&self, a: usize) -> (usize, usize) {
        (self.modes[a / 2], a % 2)
    }

    pub fn gather(&self, f: &SpectralField) -> DVector<f64> {
        DVector::from_fn(self.dim(), |a, _| {
            let (i, c) = self.slot(a);
            f.coeffs()[i][c]
        })
    }

    pub fn gather_weights(&self, w: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.dim(), |a, _| w[self.slot(a).0])
    }

    /// Full-lattice field with the given low coordinates and zero high part.
    pub fn scatter(&self, lattice: &std::sync::Arc<Lattice>, v: &[f64]) -> SpectralField {
        let mut f = SpectralField::zeros_on(lattice.clone());
        for (a, x) in v.iter().enumerate() {
            let (i, c) = self.slot(a);
            f.coeffs_mut()[i][c] = *x;
        }
        f
    }

    pub fn unit(&self, lattice: &std::sync::Arc<Lattice>, a: usize) -> SpectralField {
        let mut f = SpectralField::zeros_on(lattice.clone());
        let (i, c) = self.slot(a);
        f.coeffs_mut()[i][c] = 1.0;
        f
    }
}

/// State-dependent pieces of the step derivative at `u`.
pub struct Linearization {
    pub u: SpectralField,
    pub w_norm: f64,
    /// Drift cutoff factor and its W-norm derivative.
    pub c: f64,
    pub c_prime: f64,
    /// Low-noise factor derivative.
    pub f_prime: f64,
    /// `B(u,u)`, needed only when `c′ ≠ 0`.
    pub buu: Option<SpectralField>,
    /// W-gradient of `|u|_W` in coefficient coordinates.
    pub grad: SpectralField,
}

impl Linearization {
    pub fn at(u: &SpectralField, model: &Model) -> Result<Self> {
        let w_norm = model.w_norm(u);
        let c = model.drift_factor(w_norm);
        let c_prime = model.drift_factor_prime(w_norm);
        let f_prime = model.low_noise_factor_prime(w_norm);
        let buu = if c_prime != 0.0 { Some(convective_term(u, u.n_max())?) } else { None };
        let mut grad = u.clone();
        if w_norm > 0.0 {
            for (g, w) in grad.coeffs_mut().iter_mut().zip(model.w_weights()) {
                g[0] *= w / w_norm;
                g[1] *= w / w_norm;
            }
        } else {
            grad.scale(0.0);
        }
        Ok(Linearization { u: u.clone(), w_norm, c, c_prime, f_prime, buu, grad })
    }

    fn grad_dot(&self, d: &SpectralField) -> f64 {
        self.grad.inner(d, crate::field::SobolevIndex(0.0))
    }

    /// `DN(u)[d]` with `N(u) = −e^{−δA_H} χ(|u|_W/3ρ) B(u,u)`.
    pub fn drift_derivative(&self, d: &SpectralField, model: &Model) -> Result<SpectralField> {
        let n = self.u.n_max();
        let mut out = SpectralField::zeros_on(self.u.lattice().clone());
        if self.c != 0.0 {
            out = &bilinear_term(d, &self.u, n)? + &bilinear_term(&self.u, d, n)?;
            out.scale(self.c);
        }
        if let Some(b) = &self.buu {
            out.axpy(self.c_prime * self.grad_dot(d), b);
        }
        for (v, m) in out.coeffs_mut().iter_mut().zip(model.mollifier()) {
            v[0] *= -m;
            v[1] *= -m;
        }
        Ok(out)
    }

    /// Derivative of one exponential-Euler step applied to `d`.
    pub fn step_derivative(&self, d: &SpectralField, dw: &SpectralField, stepper: &Stepper, model: &Model) -> Result<SpectralField> {
        let dn = self.drift_derivative(d, model)?;
        let gd = self.f_prime * self.grad_dot(d);
        let mut out = d.clone();
        for (i, o) in out.coeffs_mut().iter_mut().enumerate() {
            let (e, p) = (stepper.decay[i], stepper.phi_dt[i]);
            let qb = model.noise.q_bar(i);
            let w = dw.coeffs()[i];
            let n = dn.coeffs()[i];
            o[0] = e * o[0] + p * n[0] + e * qb[0] * w[0] * gd;
            o[1] = e * o[1] + p * n[1] + e * qb[1] * w[1] * gd;
        }
        Ok(out)
    }
}

/// Low block of the step derivative at `u` for increment `dw`.
pub fn step_matrix(lin: &Linearization, dw: &SpectralField, stepper: &Stepper, model: &Model, block: &LowBlock) -> Result<DMatrix<f64>> {
    let m = block.dim();
    let lat = lin.u.lattice();
    let cols: Vec<Result<DVector<f64>>> = parallel::map_indices(m, |a| {
        let d = block.unit(lat, a);
        Ok(block.gather(&lin.step_derivative(&d, dw, stepper, model)?))
    });
    let mut s = DMatrix::zeros(m, m);
    for (a, c) in cols.into_iter().enumerate() {
        s.set_column(a, &c?);
    }
    Ok(s)
}

/// Every step node of `traj` together with its path, replaying if the
/// trajectory was stored with a stride.
pub(crate) fn replay(traj: &Trajectory, model: &Model) -> Result<(Vec<SpectralField>, NoisePath, u64)> {
    let path = traj.path.ok_or_else(|| Error::Parameter("trajectory carries no noise path".into()))?;
    let ratio = path.ratio(traj.dt)?;
    if traj.stride == 1 {
        return Ok((traj.fields.clone(), path, ratio));
    }
    let t_end = traj.steps() as f64 * traj.dt;
    let full = simulate(&traj.fields[0], t_end, traj.dt, &path, model, 1)?;
    Ok((full.fields, path, ratio))
}

#[derive(Debug, Clone)]
pub struct FlowMatrices {
    pub n_low: usize,
    pub dt: f64,
    /// Step interval between stored nodes.
    pub stride: usize,
    pub times: Vec<f64>,
    pub j: Vec<DMatrix<f64>>,
    pub jinv: Vec<DMatrix<f64>>,
    /// `max_t ‖J_t Jinv_t − Id‖_F` over every step node, stored or not.
    pub max_inverse_defect: f64,
}

/// Jacobian of the low-mode map and its inverse, stored every `stride` steps.
pub fn jacobian_flow(traj: &Trajectory, n_low: usize, model: &Model, stride: usize) -> Result<FlowMatrices> {
    if n_low != model.n_low {
        return param(format!("flow level N={n_low} differs from the model splitting level {}", model.n_low));
    }
    let (fields, path, ratio) = replay(traj, model)?;
    let block = LowBlock::new(model.lattice(), n_low)?;
    let stepper = Stepper::new(model, traj.dt)?;
    let m = block.dim();
    let stride = stride.max(1);
    let id = DMatrix::<f64>::identity(m, m);
    let (mut j, mut jinv) = (id.clone(), id.clone());
    let mut out = FlowMatrices {
        n_low,
        dt: traj.dt,
        stride,
        times: vec![0.0],
        j: vec![j.clone()],
        jinv: vec![jinv.clone()],
        max_inverse_defect: 0.0,
    };
    let steps = fields.len() - 1;
    for n in 0..steps {
        let t = (n + 1) as f64 * traj.dt;
        let lin = Linearization::at(&fields[n], model)?;
        let dw = path.increment(n as u64, ratio);
        let s = step_matrix(&lin, &dw, &stepper, model, &block)?;
        j = &s * &j;
        let st = s.transpose();
        jinv = st
            .lu()
            .solve(&jinv.transpose())
            .ok_or_else(|| Error::Integration { time: t, reason: "singular step matrix".into() })?
            .transpose();
        let defect = (&j * &jinv - &id).norm();
        if !defect.is_finite() {
            return Err(Error::Integration { time: t, reason: "non-finite Jacobian".into() });
        }
        out.max_inverse_defect = out.max_inverse_defect.max(defect);
        if (n + 1) % stride == 0 || n + 1 == steps {
            out.times.push(t);
            out.j.push(j.clone());
            out.jinv.push(jinv.clone());
        }
    }
    Ok(out)
}

/// The inverse flow alone (same integration as [`jacobian_flow`]).
pub fn inverse_flow(traj: &Trajectory, n_low: usize, model: &Model, stride: usize) -> Result<Vec<DMatrix<f64>>> {
    Ok(jacobian_flow(traj, n_low, model, stride)?.jinv)
}

/// Euler–Maruyama for the continuous inverse equation
/// `dJ⁻¹ = J⁻¹[A − DN + σ Σ_j G_j²] dt − J⁻¹ G dW`, where `G_j` is the
/// derivative of the low covariance column `j`. `trace_sign` is `σ`; the Itô
/// correction has `σ = +1`.
pub fn inverse_flow_euler(traj: &Trajectory, n_low: usize, model: &Model, trace_sign: f64) -> Result<DMatrix<f64>> {
    let (fields, path, ratio) = replay(traj, model)?;
    let block = LowBlock::new(model.lattice(), n_low)?;
    let lat = model.lattice().clone();
    let m = block.dim();
    let dt = traj.dt;
    let mut jinv = DMatrix::<f64>::identity(m, m);
    let k2 = DVector::from_fn(m, |a, _| lat.norm_sq(block.slot(a).0));
    let qb = DVector::from_fn(m, |a, _| {
        let (i, c) = block.slot(a);
        model.noise.q_bar(i)[c]
    });
    for (n, u) in fields.iter().enumerate().take(fields.len() - 1) {
        let lin = Linearization::at(u, model)?;
        let dw = block.gather(&path.increment(n as u64, ratio));
        let mut dn = DMatrix::zeros(m, m);
        for a in 0..m {
            dn.set_column(a, &block.gather(&lin.drift_derivative(&block.unit(&lat, a), model)?));
        }
        let g = block.gather(&lin.grad);
        let f = lin.f_prime;
        // G(ΔW) = f′ (q̄ ⊙ ΔW) gᵀ and Σ_j G_j² = f′² (q̄² ⊙ g) gᵀ
        let noise_col = qb.component_mul(&dw) * f;
        let trace_col = qb.component_mul(&qb).component_mul(&g) * (f * f);
        let mut gen = -dn * dt;
        for a in 0..m {
            gen[(a, a)] += k2[a] * dt;
        }
        gen += (trace_col * (trace_sign * dt) - noise_col) * g.transpose();
        jinv = &jinv + &jinv * gen;
    }
    Ok(jinv)
}

/// Full linearized flow `D_hΦ_t` at every stored node of `traj`.
pub fn frechet_flow(traj: &Trajectory, h: &SpectralField, model: &Model) -> Result<Vec<SpectralField>> {
    if h.n_max() != model.n_max() {
        return param("direction must live on the model lattice");
    }
    let (fields, path, ratio) = replay(traj, model)?;
    let stepper = Stepper::new(model, traj.dt)?;
    let mut d = h.clone();
    let mut out = vec![d.clone()];
    let steps = fields.len() - 1;
    for n in 0..steps {
        let lin = Linearization::at(&fields[n], model)?;
        let dw = path.increment(n as u64, ratio);
        d = lin.step_derivative(&d, &dw, &stepper, model)?;
        if (n + 1) % traj.stride == 0 || n + 1 == steps {
            out.push(d.clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockReport {
    pub times: Vec<f64>,
    /// `sup_{s ≤ t} |D_{h^L}Φ^H_s|_W / |h^L|_W`.
    pub low_to_high: Vec<f64>,
    /// `sup_{s ≤ t} |D_{h^H}Φ^L_s|_W / |h^H|_W`.
    pub high_to_low: Vec<f64>,
    pub exponent_low_to_high: Option<f64>,
    pub exponent_high_to_low: Option<f64>,
}

/// Growth of the off-diagonal blocks of the linearized flow from zero.
pub fn block_growth(traj: &Trajectory, model: &Model, n_low: usize, h: &SpectralField) -> Result<BlockReport> {
    use crate::modes::Part;
    let hl = h.project_window(n_low, Part::Low)?;
    let hh = h.project_window(n_low, Part::High)?;
    let (nl, nh) = (model.w_norm(&hl), model.w_norm(&hh));
    if nl == 0.0 || nh == 0.0 {
        return param("direction needs nonzero low and high parts");
    }
    let fl = frechet_flow(traj, &hl, model)?;
    let fh = frechet_flow(traj, &hh, model)?;
    let mut rep = BlockReport {
        times: Vec::new(),
        low_to_high: Vec::new(),
        high_to_low: Vec::new(),
        exponent_low_to_high: None,
        exponent_high_to_low: None,
    };
    let (mut a, mut b) = (0.0f64, 0.0f64);
    for (k, (dl, dh)) in fl.iter().zip(&fh).enumerate().skip(1) {
        a = a.max(model.w_norm(&dl.project_window(n_low, Part::High)?) / nl);
        b = b.max(model.w_norm(&dh.project_window(n_low, Part::Low)?) / nh);
        rep.times.push(traj.times[k]);
        rep.low_to_high.push(a);
        rep.high_to_low.push(b);
    }
    rep.exponent_low_to_high = log_log_slope(&rep.times, &rep.low_to_high);
    rep.exponent_high_to_low = log_log_slope(&rep.times, &rep.high_to_low);
    Ok(rep)
}

/// Low-mode Malliavin matrix assembled two ways.
#[derive(Debug, Clone)]
pub struct MalliavinMatrix {
    pub t: f64,
    /// The operator `∫ Y Yᵀ D ds` in coefficient coordinates, `Y = Jinv E Q_L`,
    /// `D` the W weights; self-adjoint in the W inner product.
    pub operator: DMatrix<f64>,
    /// Gram form `⟨M ê_a, ê_b⟩_W` in W-orthonormal coordinates, summed mode by mode.
    pub gram: DMatrix<f64>,
    /// Relative Frobenius distance between the two assemblies.
    pub assembly_mismatch: f64,
    pub eigenvalues: Vec<f64>,
}

impl MalliavinMatrix {
    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(f64::NAN)
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(f64::NAN)
    }

    pub fn symmetry_defect(&self) -> f64 {
        (&self.gram - self.gram.transpose()).amax()
    }
}

/// Columns `Jinv_{n+1} E Q_L(u_n)` of every step, the noise sensitivities.
fn sensitivities(traj: &Trajectory, flows: &FlowMatrices, model: &Model) -> Result<(Vec<SpectralField>, Vec<DMatrix<f64>>)> {
    if flows.stride != 1 {
        return param("Malliavin assembly needs flows stored at every step");
    }
    let (fields, _, _) = replay(traj, model)?;
    if fields.len() != flows.jinv.len() {
        return param("flows and trajectory have different lengths");
    }
    let block = LowBlock::new(model.lattice(), flows.n_low)?;
    let stepper = Stepper::new(model, traj.dt)?;
    let ys = (0..fields.len() - 1)
        .map(|n| {
            let amp = state_covariance(&fields[n], model);
            let scale = DVector::from_fn(block.dim(), |a, _| {
                let (i, c) = block.slot(a);
                stepper.decay[i] * amp[i][c]
            });
            let mut y = flows.jinv[n + 1].clone();
            for (a, s) in scale.iter().enumerate() {
                y.column_mut(a).scale_mut(*s);
            }
            y
        })
        .collect();
    Ok((fields, ys))
}

/// Malliavin matrix at the final node of `flows`.
pub fn malliavin_matrix(traj: &Trajectory, flows: &FlowMatrices, model: &Model) -> Result<MalliavinMatrix> {
    let (_, ys) = sensitivities(traj, flows, model)?;
    let block = LowBlock::new(model.lattice(), flows.n_low)?;
    let m = block.dim();
    let d = block.gather_weights(model.w_weights());
    let sd = d.map(f64::sqrt);
    let dt = traj.dt;
    let mut op = DMatrix::<f64>::zeros(m, m);
    let mut gram = DMatrix::<f64>::zeros(m, m);
    for y in &ys {
        let mut yd = y.transpose();
        for (a, w) in d.iter().enumerate() {
            yd.column_mut(a).scale_mut(*w);
        }
        op += y * yd * dt;
        for j in 0..m {
            let col = y.column(j);
            if col.iter().all(|x| *x == 0.0) {
                continue;
            }
            let c = col.component_mul(&sd);
            gram.ger(dt, &c, &c, 1.0);
        }
    }
    let mut conj = op.clone();
    for a in 0..m {
        for b in 0..m {
            conj[(a, b)] *= sd[a] / sd[b];
        }
    }
    let scale = gram.norm().max(f64::MIN_POSITIVE);
    let assembly_mismatch = if ys.is_empty() { 0.0 } else { (&conj - &gram).norm() / scale };
    let sym = (&gram + gram.transpose()) * 0.5;
    let mut eigenvalues: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    eigenvalues.sort_by(f64::total_cmp);
    if assembly_mismatch > 1e-8 {
        return Err(Error::Consistency(format!("Malliavin assemblies differ by {assembly_mismatch:e}")));
    }
    Ok(MalliavinMatrix { t: flows.times.last().copied().unwrap_or(0.0), operator: op, gram: sym, assembly_mismatch, eigenvalues })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailCurve {
    pub t: f64,
    pub q: f64,
    pub lambda_min: Vec<f64>,
    pub eps: Vec<f64>,
    /// Empirical `P[λ_min ≤ ε^q]` with Wilson intervals.
    pub probability: Vec<stats::Proportion>,
    pub log_log_slope: Option<f64>,
}

/// Monte Carlo law of `λ_min(M_t)` from `x`, one independent path per replica.
#[allow(clippy::too_many_arguments)]
pub fn lambda_min_tail(
    x: &SpectralField,
    t: f64,
    dt: f64,
    n_low: usize,
    replicas: usize,
    seed: u64,
    eps: &[f64],
    q: f64,
    model: &Model,
) -> Result<TailCurve> {
    if !(t > 0.0) {
        return param("t must be positive");
    }
    let lams: Vec<Result<f64>> = parallel::map_indices(replicas, |r| {
        let path = NoisePath::new(split_seed(seed, "malliavin", r as u64), dt, model.n_max())?;
        let traj = simulate(x, t, dt, &path, model, 1)?;
        let flows = jacobian_flow(&traj, n_low, model, 1)?;
        Ok(malliavin_matrix(&traj, &flows, model)?.lambda_min())
    });
    let lambda_min = lams.into_iter().collect::<Result<Vec<f64>>>()?;
    let mut eps = eps.to_vec();
    eps.sort_by(f64::total_cmp);
    let probability: Vec<stats::Proportion> = eps
        .iter()
        .map(|e| stats::wilson(lambda_min.iter().filter(|l| **l <= e.powf(q)).count(), replicas))
        .collect();
    let p: Vec<f64> = probability.iter().map(|p| p.estimate).collect();
    let slope = log_log_slope(&eps, &p);
    Ok(TailCurve { t, q, lambda_min, eps, probability, log_log_slope: slope })
}

#[derive(Debug, Clone)]
pub struct DirectionReport {
    /// `max_t ‖𝒟_vΦ^H_t‖_F / ‖𝒟_vΦ^L_t‖_F`.
    pub high_residual: f64,
    /// `‖𝒟_vΦ^L_T − J_T M_T‖_F / ‖J_T M_T‖_F`.
    pub identity_error: f64,
    /// `𝒟_vΦ^L_T`, one column per direction `η`.
    pub low_derivative: DMatrix<f64>,
}

/// Builds `v^L = (Jinv E Q_L)*` and the high control cancelling the high
/// response, then integrates the full linearized flow under that control.
/// With `zero_low` the low control is switched off.
pub fn malliavin_direction(traj: &Trajectory, flows: &FlowMatrices, model: &Model, zero_low: bool) -> Result<DirectionReport> {
    if model.delta <= 0.0 {
        return Err(Error::Unsupported("the high control needs delta > 0 to lie in the range of Q_H".into()));
    }
    let (fields, ys) = sensitivities(traj, flows, model)?;
    let path = traj.path.expect("checked by replay");
    let ratio = path.ratio(traj.dt)?;
    let lat = model.lattice().clone();
    let block = LowBlock::new(&lat, flows.n_low)?;
    let high: Vec<usize> = lat.high_indices(flows.n_low);
    let stepper = Stepper::new(model, traj.dt)?;
    let m = block.dim();
    let dt = traj.dt;
    let d = block.gather_weights(model.w_weights());
    let mut cols: Vec<SpectralField> = vec![SpectralField::zeros_on(lat.clone()); m];
    let mut high_residual = 0.0f64;
    let mut op = DMatrix::<f64>::zeros(m, m);
    for (n, y) in ys.iter().enumerate() {
        let lin = Linearization::at(&fields[n], model)?;
        let dw = path.increment(n as u64, ratio);
        let amp = state_covariance(&fields[n], model);
        // low control: column c of Yᵀ D
        let mut v_low = y.transpose();
        for (c, w) in d.iter().enumerate() {
            v_low.column_mut(c).scale_mut(*w);
        }
        if zero_low {
            v_low.fill(0.0);
        } else {
            op += y * &v_low * dt;
        }
        let next: Vec<Result<SpectralField>> = parallel::map_indices(m, |c| {
            let col = &cols[c];
            let mut out = lin.step_derivative(col, &dw, &stepper, model)?;
            // high control cancels φ_H D_H[N](u)·𝒟_vΦ^L
            let low_part = block.scatter(&lat, block.gather(col).as_slice());
            let dn = lin.drift_derivative(&low_part, model)?;
            for &i in &high {
                let q = model.noise.q(i);
                for k in 0..2 {
                    let v_h = -stepper.phi_dt[i] * dn.coeffs()[i][k] / (stepper.decay[i] * q[k] * dt);
                    out.coeffs_mut()[i][k] += stepper.decay[i] * q[k] * v_h * dt;
                }
            }
            for a in 0..m {
                let (i, k) = block.slot(a);
                out.coeffs_mut()[i][k] += stepper.decay[i] * amp[i][k] * v_low[(a, c)] * dt;
            }
            Ok(out)
        });
        cols = next.into_iter().collect::<Result<_>>()?;
        let (mut lo, mut hi) = (0.0f64, 0.0f64);
        for col in &cols {
            for (i, c) in col.coeffs().iter().enumerate() {
                let s = c[0] * c[0] + c[1] * c[1];
                if lat.sup_norm(i) <= flows.n_low {
                    lo += s;
                } else {
                    hi += s;
                }
            }
        }
        if lo > 0.0 {
            high_residual = high_residual.max((hi / lo).sqrt());
        } else if hi > 0.0 {
            high_residual = f64::INFINITY;
        }
    }
    let mut low_derivative = DMatrix::zeros(m, m);
    for (c, col) in cols.iter().enumerate() {
        low_derivative.set_column(c, &block.gather(col));
    }
    let jm = flows.j.last().expect("flows are nonempty") * op;
    let identity_error = if zero_low {
        low_derivative.norm()
    } else {
        (&low_derivative - &jm).norm() / jm.norm().max(f64::MIN_POSITIVE)
    };
    Ok(DirectionReport { high_residual, identity_error, low_derivative })
}
