//! Exponential-Euler integration of the truncated cutoff equation, first
//! passage of the W-ball, coupled cutoff/plain comparisons and Monte Carlo
//! batches.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::field::{SobolevIndex, SpectralField};
use crate::noise::{state_covariance, Dynamics, Model};
use crate::parallel;
use crate::rng::{split_seed, NoisePath};
use crate::stats::{wilson, Proportion};

/// Diagonal factors of one exponential-Euler step.
#[derive(Debug, Clone)]
pub struct Stepper {
    pub dt: f64,
    /// `e^{−|k|² dt}`
    pub decay: Vec<f64>,
    /// `φ₁(−|k|² dt)·dt = (1 − e^{−|k|² dt})/|k|²`
    pub phi_dt: Vec<f64>,
}

impl Stepper {
    pub fn new(model: &Model, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return param("dt must be positive");
        }
        let lat = model.lattice();
        let decay = (0..lat.len()).map(|i| (-lat.norm_sq(i) * dt).exp()).collect();
        let phi_dt = (0..lat.len())
            .map(|i| {
                let k2 = lat.norm_sq(i);
                -(-k2 * dt).exp_m1() / k2
            })
            .collect();
        Ok(Stepper { dt, decay, phi_dt })
    }

    /// `u⁺ = E u + φ₁ dt N(u) + E Q(u) ΔW`.
    pub fn step(&self, u: &SpectralField, dw: &SpectralField, model: &Model, t: f64) -> Result<SpectralField> {
        let n = model.nonlinear_drift(u)?;
        let amp = state_covariance(u, model);
        let mut out = u.clone();
        for (i, c) in out.coeffs_mut().iter_mut().enumerate() {
            let (e, p) = (self.decay[i], self.phi_dt[i]);
            let nn = n.coeffs()[i];
            let w = dw.coeffs()[i];
            c[0] = e * c[0] + p * nn[0] + e * amp[i][0] * w[0];
            c[1] = e * c[1] + p * nn[1] + e * amp[i][1] * w[1];
        }
        if !out.is_finite() {
            return Err(Error::Integration { time: t + self.dt, reason: "non-finite coefficient".into() });
        }
        Ok(out)
    }
}

/// One exponential-Euler step.
pub fn step(u: &SpectralField, dt: f64, dw: &SpectralField, model: &Model) -> Result<SpectralField> {
    Stepper::new(model, dt)?.step(u, dw, model, 0.0)
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    /// Nodes kept in `fields`, every `stride`-th step.
    pub stride: usize,
    pub times: Vec<f64>,
    pub fields: Vec<SpectralField>,
    /// W-norm at every step node.
    pub w_norms: Vec<f64>,
    pub h_norms: Vec<f64>,
    /// First grid time with `|u|_W ≥ ρ`.
    pub tau: Option<f64>,
    pub path: Option<NoisePath>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.w_norms.len() - 1
    }

    pub fn final_field(&self) -> &SpectralField {
        self.fields.last().expect("trajectory has at least one node")
    }

    /// Rows `t, |u|_W, |u|_H, passed` for every step node.
    pub fn to_csv(&self, header: &str) -> String {
        let mut s = String::new();
        for line in header.lines() {
            let _ = writeln!(s, "# {line}");
        }
        s.push_str("t,w_norm,h_norm,tau_passed\n");
        for (n, (w, h)) in self.w_norms.iter().zip(&self.h_norms).enumerate() {
            let t = n as f64 * self.dt;
            let passed = self.tau.is_some_and(|tau| t >= tau - 1e-12 * self.dt);
            let _ = writeln!(s, "{t:.10e},{w:.17e},{h:.17e},{}", passed as u8);
        }
        s
    }
}

pub(crate) fn step_count(t_end: f64, dt: f64) -> Result<usize> {
    if !(t_end > 0.0) || !(dt > 0.0) {
        return param("T and dt must be positive");
    }
    let n = (t_end / dt).round();
    if (t_end / dt - n).abs() > 1e-9 * n.max(1.0) || n < 1.0 {
        return param(format!("dt={dt} does not divide T={t_end}"));
    }
    Ok(n as usize)
}

/// Integrates from `x` to `t_end`, keeping every `stride`-th field.
pub fn simulate(
    x: &SpectralField,
    t_end: f64,
    dt: f64,
    path: &NoisePath,
    model: &Model,
    stride: usize,
) -> Result<Trajectory> {
    if x.n_max() != model.n_max() || path.n_max != model.n_max() {
        return param("initial field, noise path and model must share N_max");
    }
    let steps = step_count(t_end, dt)?;
    let stride = stride.max(1);
    let ratio = path.ratio(dt)?;
    let stepper = Stepper::new(model, dt)?;
    let mut u = x.clone();
    let mut traj = Trajectory {
        dt,
        stride,
        times: vec![0.0],
        fields: vec![u.clone()],
        w_norms: vec![model.w_norm(&u)],
        h_norms: vec![u.sobolev_norm(SobolevIndex::H)],
        tau: None,
        path: Some(*path),
    };
    if traj.w_norms[0] >= model.rho() {
        traj.tau = Some(0.0);
    }
    for n in 0..steps {
        let dw = path.increment(n as u64, ratio);
        u = stepper.step(&u, &dw, model, n as f64 * dt)?;
        let t = (n + 1) as f64 * dt;
        let w = model.w_norm(&u);
        traj.w_norms.push(w);
        traj.h_norms.push(u.sobolev_norm(SobolevIndex::H));
        if traj.tau.is_none() && w >= model.rho() {
            traj.tau = Some(t);
        }
        if (n + 1) % stride == 0 || n + 1 == steps {
            traj.times.push(t);
            traj.fields.push(u.clone());
        }
    }
    Ok(traj)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoupledReport {
    pub tau: Option<f64>,
    /// `sup_{t ≤ τ} max_k |u^cut_k − u^plain_k|` (whole horizon if τ is not reached).
    pub max_diff_before_tau: f64,
    /// `(t, max_k |Δ_k|)` at every step node.
    pub diff_series: Vec<(f64, f64)>,
}

/// Cutoff and plain dynamics driven by the same increments.
pub fn coupled_weak_strong(
    x: &SpectralField,
    model: &Model,
    t_end: f64,
    dt: f64,
    path: &NoisePath,
) -> Result<CoupledReport> {
    let cut = model.clone().with_dynamics(Dynamics::Cutoff);
    if cut.w_norm(x) >= cut.rho() {
        return param("coupled comparison needs |x|_W < rho");
    }
    let plain = model.clone().with_dynamics(Dynamics::Plain);
    let steps = step_count(t_end, dt)?;
    let ratio = path.ratio(dt)?;
    let stepper = Stepper::new(model, dt)?;
    let (mut a, mut b) = (x.clone(), x.clone());
    let mut tau = None;
    let mut max_before = 0.0f64;
    let mut series = vec![(0.0, 0.0)];
    for n in 0..steps {
        let t = n as f64 * dt;
        let dw = path.increment(n as u64, ratio);
        a = stepper.step(&a, &dw, &cut, t)?;
        b = stepper.step(&b, &dw, &plain, t)?;
        let d = a.max_abs_diff(&b);
        series.push((t + dt, d));
        if tau.is_none() {
            max_before = max_before.max(d);
            if cut.w_norm(&a) >= cut.rho() {
                tau = Some(t + dt);
            }
        }
    }
    Ok(CoupledReport { tau, max_diff_before_tau: max_before, diff_series: series })
}

/// Random field of W-norm exactly `radius` (Gaussian direction).
pub fn random_w_sphere(model: &Model, radius: f64, seed: u64) -> SpectralField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = SpectralField::zeros_on(model.lattice().clone());
    for (i, c) in f.coeffs_mut().iter_mut().enumerate() {
        // decay keeps the direction comparable across norms
        let s = 1.0 / model.w_weights()[i].sqrt();
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        *c = [s * a, s * b];
    }
    let n = model.w_norm(&f);
    f.scale(radius / n);
    f
}

/// Monte Carlo estimate of `P[τ_ρ ≥ ε]` from `x + h`, `h` uniform-radius in the W-ball
/// of radius `h_radius`; step `dt = ε/100`.
pub fn stopping_time_tail(
    x: &SpectralField,
    h_radius: f64,
    model: &Model,
    eps: f64,
    replicas: usize,
    seed: u64,
) -> Result<Proportion> {
    if model.w_norm(x) >= model.rho() {
        return param("stopping-time study needs |x|_W < rho");
    }
    if !(eps > 0.0) || replicas == 0 {
        return param("need eps > 0 and at least one replica");
    }
    let dt = eps / 100.0;
    let outcomes: Vec<Result<bool>> = parallel::map_indices(replicas, |r| {
        let s = split_seed(seed, "stopping-time", r as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let radius = h_radius * rng.random::<f64>().cbrt();
        let h = random_w_sphere(model, radius, split_seed(s, "direction", 0));
        let start = x + &h;
        let path = NoisePath::new(split_seed(s, "path", 0), dt, model.n_max())?;
        let traj = simulate(&start, eps, dt, &path, model, 100)?;
        // τ ≥ ε iff no node strictly before ε has left the ball
        Ok(traj.w_norms[..traj.w_norms.len() - 1].iter().all(|&w| w < model.rho()))
    });
    let mut hits = 0;
    for o in outcomes {
        hits += o? as usize;
    }
    Ok(wilson(hits, replicas))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modes::ModeIndex;
    use crate::stats::log_log_slope;

    fn quiet_model(n_max: usize, rho: f64) -> Model {
        let noise = crate::noise::NoiseSpec::canonical(n_max, 1, 1.0).unwrap().scale_high(1e-300).unwrap();
        Model::new(noise, crate::noise::CutoffSpec::new(rho).unwrap(), 1, 0.0).unwrap()
    }

    #[test]
    fn stokes_decay_of_single_mode() {
        let model = quiet_model(2, 1e6);
        let k = ModeIndex::new([1, 2, 0]).unwrap();
        let x = SpectralField::single_mode(2, k, [0.8, -0.3]).unwrap();
        let path = NoisePath::new(1, 1e-3, 2).unwrap();
        let traj = simulate(&x, 0.1, 1e-3, &path, &model, 100).unwrap();
        let f = (-5.0f64 * 0.1).exp();
        let got = traj.final_field().get(k);
        assert!((got[0] / (0.8 * f) - 1.0).abs() <= 1e-10);
        assert!((got[1] / (-0.3 * f) - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn zero_stays_zero_and_runs_repeat() {
        let model = quiet_model(2, 1.0);
        let z = SpectralField::zeros(2).unwrap();
        let path = NoisePath::new(5, 1e-2, 2).unwrap();
        let noiseless = simulate(&z, 0.1, 1e-2, &path, &model, 1).unwrap();
        assert!(noiseless.final_field().max_abs() < 1e-100);
        let model = Model::canonical(2, 1, 1, 1.0, 1.0, 0.0).unwrap();
        let a = simulate(&z, 0.2, 1e-2, &path, &model, 1).unwrap();
        let b = simulate(&z, 0.2, 1e-2, &path, &model, 1).unwrap();
        assert_eq!(a.fields, b.fields);
        assert_eq!(a.w_norms, b.w_norms);
    }

    #[test]
    fn deterministic_energy_balance() {
        let model = quiet_model(2, 1e6);
        let x = random_w_sphere(&model, 0.5, 3);
        let dt = 1e-4;
        let path = NoisePath::new(2, dt, 2).unwrap();
        let traj = simulate(&x, 0.01, dt, &path, &model, 1).unwrap();
        let mut worst = 0.0f64;
        for n in 0..traj.steps() {
            let (u0, u1) = (&traj.fields[n], &traj.fields[n + 1]);
            let lhs = (u1.sobolev_norm_sq(SobolevIndex::H) - u0.sobolev_norm_sq(SobolevIndex::H)) / dt;
            let rhs = -2.0 * u0.sobolev_norm_sq(SobolevIndex::V1);
            worst = worst.max((lhs - rhs).abs() / rhs.abs());
        }
        assert!(worst < 0.05, "relative imbalance {worst}");
    }

    #[test]
    fn strong_self_convergence() {
        let model = Model::canonical(2, 1, 1, 1.0, 100.0, 0.0).unwrap();
        let x = random_w_sphere(&model, 1.0, 11);
        let base = 1e-3 / 16.0;
        let path = NoisePath::new(9, base, 2).unwrap();
        let reference = simulate(&x, 0.1, base, &path, &model, 1600).unwrap();
        let r = reference.final_field();
        let dts = [1e-3 / 8.0, 1e-3 / 4.0, 1e-3 / 2.0, 1e-3];
        let errs: Vec<f64> = dts
            .iter()
            .map(|&dt| {
                let t = simulate(&x, 0.1, dt, &path, &model, 100_000).unwrap();
                (t.final_field() - r).sobolev_norm(SobolevIndex::H)
            })
            .collect();
        let order = log_log_slope(&dts, &errs).unwrap();
        assert!(order > 0.7 && order < 1.5, "fitted order {order}, errors {errs:?}");
    }

    #[test]
    fn tiny_noise_never_exits() {
        let noise = crate::noise::NoiseSpec::canonical(2, 1, 1.0).unwrap().scale_high(1e-6).unwrap();
        let model = Model::new(noise, crate::noise::CutoffSpec::new(1.0).unwrap(), 1, 0.0).unwrap();
        let x = random_w_sphere(&model, 0.5, 1);
        let mut stayed = 0;
        for s in 0..100 {
            let path = NoisePath::new(s, 0.02, 2).unwrap();
            let t = simulate(&x, 1.0, 0.02, &path, &model, 50).unwrap();
            stayed += t.tau.is_none() as usize;
        }
        assert!(stayed >= 99);
    }

    #[test]
    fn coupled_paths_coincide_before_exit() {
        let model = Model::canonical(2, 1, 1, 1.0, 0.3, 0.0).unwrap();
        let x = random_w_sphere(&model, 0.2, 4);
        let path = NoisePath::new(77, 1e-2, 2).unwrap();
        let rep = coupled_weak_strong(&x, &model, 1.0, 1e-2, &path).unwrap();
        assert!(rep.max_diff_before_tau <= 1e-12);
        let far = random_w_sphere(&model, 0.5, 4);
        assert!(coupled_weak_strong(&far, &model, 1.0, 1e-2, &path).is_err());
    }

    #[test]
    fn smaller_ball_exits_sooner() {
        let mean_tau = |rho: f64| {
            let model = Model::canonical(2, 1, 1, 1.0, rho, 0.0).unwrap();
            let x = SpectralField::zeros(2).unwrap();
            let mut total = 0.0;
            for s in 0..100 {
                let path = NoisePath::new(s, 0.01, 2).unwrap();
                let rep = coupled_weak_strong(&x, &model, 2.0, 0.01, &path).unwrap();
                total += rep.tau.unwrap_or(2.0);
            }
            total / 100.0
        };
        assert!(mean_tau(0.15) <= mean_tau(0.3));
    }

    #[test]
    fn exit_probability_is_monotone_in_start() {
        let model = Model::canonical(2, 1, 1, 1.0, 1.0, 0.0).unwrap();
        let near = random_w_sphere(&model, 0.99, 8);
        let centre = random_w_sphere(&model, 0.1, 8);
        let a = stopping_time_tail(&near, 0.0, &model, 1e-2, 200, 1).unwrap();
        let b = stopping_time_tail(&centre, 0.0, &model, 1e-2, 200, 1).unwrap();
        assert!(a.estimate <= b.estimate);
    }

    #[test]
    fn csv_has_one_row_per_node() {
        let model = Model::canonical(1, 1, 1, 1.0, 1.0, 0.0).unwrap();
        let x = SpectralField::zeros(1).unwrap();
        let path = NoisePath::new(1, 0.1, 1).unwrap();
        let t = simulate(&x, 1.0, 0.1, &path, &model, 5).unwrap();
        let csv = t.to_csv("run");
        assert_eq!(csv.lines().count(), 2 + 11);
        assert_eq!(t.fields.len(), 3);
    }
}
