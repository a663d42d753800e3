//! Experiment configuration: a TOML file, dotted `--set` overrides, defaults.

use std::path::Path;

use degnse_core::noise::Model;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_max: usize,
    pub n0: usize,
    /// Bracket level `N`, also the size of the low block.
    pub n_low: usize,
    pub alpha0: f64,
    pub rho: f64,
    pub delta: f64,
    pub t_end: f64,
    pub dt: f64,
    pub seed: u64,
    pub replicas: usize,
    pub simulate: SimulateConfig,
    pub coupled: CoupledConfig,
    pub malliavin: MalliavinConfig,
    pub hormander: HormanderConfig,
    pub control: ControlConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_max: 2,
            n0: 1,
            n_low: 2,
            alpha0: 1.0,
            rho: 1.0,
            delta: 0.0,
            t_end: 1.0,
            dt: 1e-2,
            seed: 0,
            replicas: 8,
            simulate: SimulateConfig::default(),
            coupled: CoupledConfig::default(),
            malliavin: MalliavinConfig::default(),
            hormander: HormanderConfig::default(),
            control: ControlConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// W-norm of the initial condition.
    pub radius: f64,
    /// Full-field snapshots are dumped every `snapshot_stride` steps (0: final only).
    pub snapshot_stride: usize,
    /// Exit-time tail `P[τ ≥ ε]` is estimated for each ε listed.
    pub tail_eps: Vec<f64>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig { radius: 0.5, snapshot_stride: 0, tail_eps: vec![] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoupledConfig {
    pub radius: f64,
    pub tolerance: f64,
}

impl Default for CoupledConfig {
    fn default() -> Self {
        CoupledConfig { radius: 0.2, tolerance: 1e-12 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MalliavinConfig {
    pub radius: f64,
    pub t: f64,
    /// Thresholds for the empirical law of `λ_min`.
    pub tail_eps: Vec<f64>,
    pub tail_q: f64,
}

impl Default for MalliavinConfig {
    fn default() -> Self {
        MalliavinConfig { radius: 1.0, t: 0.5, tail_eps: vec![1e-2, 1e-4, 1e-6], tail_q: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HormanderConfig {
    /// Points sampled on the W-sphere of this radius for rank reports.
    pub radius: f64,
    pub points: usize,
    /// `k0`, `k0k2` or `all`.
    pub generations: String,
    /// Radii of the Case-3 perturbation study (empty: skipped).
    pub case3_rho: Vec<f64>,
}

impl Default for HormanderConfig {
    fn default() -> Self {
        HormanderConfig { radius: 1.0, points: 2, generations: "k0k2".into(), case3_rho: vec![] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    /// Planning truncation; may exceed the model's `n_max`.
    pub n_max: usize,
    pub eps: f64,
    pub x_radius: f64,
    pub y_radius: f64,
    pub verify_dt: f64,
    /// Truncations replayed in addition to the planning one.
    pub verify_n: Vec<usize>,
    pub steps_per_phase: usize,
    pub samples: bool,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            n_max: 5,
            eps: 0.05,
            x_radius: 1.0,
            y_radius: 1.0,
            verify_dt: 2e-3,
            verify_n: vec![],
            steps_per_phase: 200,
            samples: false,
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (if any), applies `key=value` overrides in order and validates.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: ExperimentConfig =
            toml::Value::Table(value).try_into().map_err(|e| CliError::Config(format!("config: {e}")))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(self.n0 < self.n_low && self.n_low <= self.n_max) {
            return bad(format!("need n0 < n_low <= n_max, got {} / {} / {}", self.n0, self.n_low, self.n_max));
        }
        if !(self.alpha0 > 0.5) {
            return bad(format!("alpha0 must exceed 1/2, got {}", self.alpha0));
        }
        if !(self.dt > 0.0) || !(self.t_end > 0.0) {
            return bad("dt and t_end must be positive".into());
        }
        if !(self.rho > 0.0) {
            return bad(format!("rho must be positive, got {}", self.rho));
        }
        if !(self.delta >= 0.0) {
            return bad(format!("delta must be nonnegative, got {}", self.delta));
        }
        if self.replicas == 0 {
            return bad("replicas must be at least 1".into());
        }
        if self.control.n_max <= self.n0 || !(self.control.eps > 0.0) {
            return bad("control needs n_max > n0 and eps > 0".into());
        }
        if !["k0", "k0k2", "all"].contains(&self.hormander.generations.as_str()) {
            return bad(format!("unknown generations {:?}", self.hormander.generations));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<Model, CliError> {
        Model::canonical(self.n_max, self.n0, self.n_low, self.alpha0, self.rho, self.delta).map_err(CliError::from)
    }

    /// The resolved configuration in canonical TOML form.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical form with the seed cleared, hex encoded;
    /// the seed is stamped next to it, so seed sweeps share one hash.
    pub fn hash(&self) -> String {
        let unseeded = ExperimentConfig { seed: 0, ..self.clone() };
        Sha256::digest(unseeded.canonical().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `a.b.c=value`, where `value` is any TOML value or else a bare string.
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key {key:?}")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = ExperimentConfig::load(
            None,
            &["control.eps=0.1".into(), "n_max=3".into(), "hormander.generations=all".into()],
            Some(7),
        )
        .unwrap();
        assert_eq!(cfg.control.eps, 0.1);
        assert_eq!(cfg.n_max, 3);
        assert_eq!(cfg.hormander.generations, "all");
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 9;
        assert_eq!(a.hash(), b.hash());
        b.rho = 2.0;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for o in ["alpha0=0.4", "n_low=1", "dt=-1.0", "unknown=1", "n_max=\"x\""] {
            let e = ExperimentConfig::load(None, &[o.into()], None).unwrap_err();
            assert!(matches!(e, CliError::Config(_)), "{o}");
        }
    }
}
