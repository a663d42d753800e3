//! One function per subcommand. Seeds split as `(root, subcommand tag, replica)`.

use std::fmt::Write as _;

use degnse_core::control::{plan_control, verify_control, PlanOptions};
use degnse_core::flow::{jacobian_flow, lambda_min_tail, malliavin_direction, malliavin_matrix};
use degnse_core::hormander::{
    case3_perturbation_bound, decomposition_search, hormander_rank, region_classify, shell_coordinates, Generations,
};
use degnse_core::noise::{Model, NoiseSpec};
use degnse_core::nonlinearity::{convective_term, pseudospectral_oracle};
use degnse_core::parallel;
use degnse_core::rng::{split_seed, NoisePath};
use degnse_core::simulator::{coupled_weak_strong, random_w_sphere, simulate as integrate, stopping_time_tail};
use degnse_core::{SobolevIndex, SpectralField};
use serde_json::json;

use crate::artifact::ArtifactWriter;
use crate::config::ExperimentConfig;
use crate::{at, CliError};

fn rank_target(n: usize) -> usize {
    2 * (2 * n + 1).pow(3) - 2
}

fn generations(name: &str) -> Generations {
    match name {
        "k0" => Generations::K0,
        "all" => Generations::All,
        _ => Generations::K0K2,
    }
}

pub fn simulate(cfg: &ExperimentConfig, out: &mut ArtifactWriter) -> Result<(), CliError> {
    let model = cfg.model()?;
    let x = random_w_sphere(&model, cfg.simulate.radius, split_seed(cfg.seed, "simulate-x", 0));
    let stride = match cfg.simulate.snapshot_stride {
        0 => usize::MAX,
        s => s,
    };
    let runs = parallel::map_indices(cfg.replicas, |r| {
        let path = NoisePath::new(split_seed(cfg.seed, "simulate", r as u64), cfg.dt, model.n_max())?;
        integrate(&x, cfg.t_end, cfg.dt, &path, &model, stride.min((cfg.t_end / cfg.dt).round() as usize))
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>, _>>().map_err(at("simulate"))?;
    let header = out.header_line();
    for (r, traj) in runs.iter().enumerate() {
        out.csv(&format!("trajectory_{r:03}.csv"), &traj.to_csv(&header))?;
    }
    let first = &runs[0];
    let flat: Vec<f64> = first.fields.iter().flat_map(|f| f.as_flat()).collect();
    out.binary("fields_000.f64", first.fields.len(), first.fields[0].as_flat().len(), &flat)?;
    let tails = cfg
        .simulate
        .tail_eps
        .iter()
        .map(|&e| {
            stopping_time_tail(&x, 0.0, &model, e, cfg.replicas, split_seed(cfg.seed, "simulate-tail", 0))
                .map(|p| json!({ "eps": e, "probability": p }))
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(at("stopping-time"))?;
    let exited = runs.iter().filter(|t| t.tau.is_some()).count();
    out.json_value(
        "simulate.json",
        json!({
            "x_w_norm": model.w_norm(&x),
            "replicas": cfg.replicas,
            "exited": exited,
            "tau": runs.iter().map(|t| t.tau).collect::<Vec<_>>(),
            "final_w_norm": runs.iter().map(|t| *t.w_norms.last().unwrap()).collect::<Vec<_>>(),
            "final_h_norm": runs.iter().map(|t| *t.h_norms.last().unwrap()).collect::<Vec<_>>(),
            "stopping_tail": tails,
        }),
    )
}

pub fn coupled(cfg: &ExperimentConfig, out: &mut ArtifactWriter) -> Result<(), CliError> {
    let model = cfg.model()?;
    let reports = parallel::map_indices(cfg.replicas, |r| {
        let x = random_w_sphere(&model, cfg.coupled.radius, split_seed(cfg.seed, "coupled-x", r as u64));
        let path = NoisePath::new(split_seed(cfg.seed, "coupled", r as u64), cfg.dt, model.n_max())?;
        coupled_weak_strong(&x, &model, cfg.t_end, cfg.dt, &path)
    });
    let reports = reports.into_iter().collect::<Result<Vec<_>, _>>().map_err(at("coupled"))?;
    let mut csv = format!("# {}\nreplica,t,max_abs_diff\n", out.header_line());
    for (r, rep) in reports.iter().enumerate() {
        for (t, d) in &rep.diff_series {
            let _ = writeln!(csv, "{r},{t:.10e},{d:.17e}");
        }
    }
    out.csv("coupled.csv", &csv)?;
    let worst = reports.iter().map(|r| r.max_diff_before_tau).fold(0.0, f64::max);
    let agree = reports.iter().filter(|r| r.max_diff_before_tau <= cfg.coupled.tolerance).count();
    out.json_value(
        "coupled.json",
        json!({
            "replicas": cfg.replicas,
            "agree": agree,
            "max_diff_before_tau": worst,
            "tolerance": cfg.coupled.tolerance,
            "tau": reports.iter().map(|r| r.tau).collect::<Vec<_>>(),
        }),
    )?;
    if agree < reports.len() {
        return Err(CliError::numerical(
            "coupled",
            format!("{}/{} paths differ before the exit time (worst {worst:e})", reports.len() - agree, reports.len()),
        ));
    }
    Ok(())
}

pub fn malliavin(cfg: &ExperimentConfig, out: &mut ArtifactWriter) -> Result<(), CliError> {
    let model = cfg.model()?;
    let t = cfg.malliavin.t;
    let x = random_w_sphere(&model, cfg.malliavin.radius, split_seed(cfg.seed, "malliavin-x", 0));
    let path = NoisePath::new(split_seed(cfg.seed, "malliavin", 0), cfg.dt, model.n_max()).map_err(at("malliavin"))?;
    let traj = integrate(&x, t, cfg.dt, &path, &model, 1).map_err(at("simulate"))?;
    let flows = jacobian_flow(&traj, cfg.n_low, &model, 1).map_err(at("jacobian flow"))?;
    let m = malliavin_matrix(&traj, &flows, &model).map_err(at("malliavin matrix"))?;
    let dir = malliavin_direction(&traj, &flows, &model, false).map_err(at("malliavin direction"))?;
    let dim = m.operator.nrows();
    out.binary("malliavin_operator.f64", dim, dim, m.operator.transpose().as_slice())?;
    out.binary("jacobian_final.f64", dim, dim, flows.j.last().unwrap().transpose().as_slice())?;
    let tail = lambda_min_tail(
        &x,
        t,
        cfg.dt,
        cfg.n_low,
        cfg.replicas,
        split_seed(cfg.seed, "malliavin-tail", 0),
        &cfg.malliavin.tail_eps,
        cfg.malliavin.tail_q,
        &model,
    )
    .map_err(at("lambda_min tail"))?;
    out.json_value(
        "malliavin.json",
        json!({
            "t": m.t,
            "dimension": dim,
            "eigenvalues": m.eigenvalues,
            "lambda_min": m.lambda_min(),
            "lambda_max": m.lambda_max(),
            "assembly_mismatch": m.assembly_mismatch,
            "symmetry_defect": m.symmetry_defect(),
            "max_inverse_defect": flows.max_inverse_defect,
            "direction_high_residual": dir.high_residual,
            "direction_identity_error": dir.identity_error,
            "lambda_min_tail": tail,
        }),
    )?;
    if !(m.lambda_min() > 0.0) {
        return Err(CliError::numerical("malliavin matrix", format!("lambda_min = {:e}", m.lambda_min())));
    }
    Ok(())
}

pub fn hormander(cfg: &ExperimentConfig, out: &mut ArtifactWriter) -> Result<(), CliError> {
    let dec = decomposition_search(cfg.n0).map_err(at("decomposition search"))?;
    let n = dec.n;
    let mut doc = json!({
        "n0": cfg.n0,
        "minimal_n": n,
        "rank_target": rank_target(n),
        "certificates": dec.certificates,
    });
    if cfg.n_max >= n {
        let model = Model::canonical(cfg.n_max, cfg.n0, n, cfg.alpha0, cfg.rho, cfg.delta)?;
        let gens = generations(&cfg.hormander.generations);
        let points = parallel::map_indices(cfg.hormander.points, |p| {
            let y = random_w_sphere(&model, cfg.hormander.radius, split_seed(cfg.seed, "hormander", p as u64));
            let region = region_classify(model.w_norm(&y), model.rho(), 0.0)?;
            hormander_rank(&y, &model, n, gens).map(|r| json!({ "region": region, "span": r, "spans": r.spans() }))
        });
        let points = points.into_iter().collect::<Result<Vec<_>, _>>().map_err(at("hormander rank"))?;
        doc["points"] = json!(points);
        if !cfg.hormander.case3_rho.is_empty() {
            let dirs: Vec<SpectralField> = (0..4)
                .map(|s| random_w_sphere(&model, 1.0, split_seed(cfg.seed, "case3", s)))
                .collect();
            let shell = shell_coordinates(&model, n)?;
            let pairs = [(shell[0], shell[1]), (shell[shell.len() / 2], shell[shell.len() - 1])];
            let rep = case3_perturbation_bound(&dirs, &model, n, &cfg.hormander.case3_rho, &pairs)
                .map_err(at("case-3 study"))?;
            doc["case3"] = json!(rep);
        }
    }
    out.json_value("hormander.json", doc)
}

pub fn control(cfg: &ExperimentConfig, out: &mut ArtifactWriter) -> Result<(), CliError> {
    let c = &cfg.control;
    let noise = NoiseSpec::canonical(c.n_max, cfg.n0, cfg.alpha0)?;
    let sampler = Model::canonical(c.n_max, cfg.n0, cfg.n0, cfg.alpha0, 1.0, 0.0)?;
    let x = random_w_sphere(&sampler, c.x_radius, split_seed(cfg.seed, "control-x", 0));
    let y = random_w_sphere(&sampler, c.y_radius, split_seed(cfg.seed, "control-y", 0));
    let opts = PlanOptions { steps_per_phase: c.steps_per_phase, ..PlanOptions::default() };
    let plan = plan_control(&x, &y, cfg.t_end, c.eps, &noise, &opts).map_err(|e| match e {
        degnse_core::Error::Parameter(m) => CliError::Config(m),
        other => CliError::numerical("control planning", other.to_string()),
    })?;
    let mut levels = vec![c.n_max];
    levels.extend(c.verify_n.iter().copied().filter(|&n| n > c.n_max));
    let reports = parallel::map_slice(&levels, |&n| verify_control(&plan, n, c.verify_dt));
    let reports = reports.into_iter().collect::<Result<Vec<_>, _>>().map_err(at("control replay"))?;
    let plan_json: serde_json::Value =
        serde_json::from_str(&plan.to_json(c.samples).map_err(at("control planning"))?).map_err(|e| CliError::Io(e.to_string()))?;
    out.json_value("control.json", json!({ "plan": plan_json, "verification": reports }))?;
    let own = &reports[0];
    if own.final_miss > c.eps {
        return Err(CliError::numerical(
            "control replay",
            format!("miss {:.3e} exceeds eps {:.3e} at the planning truncation", own.final_miss, c.eps),
        ));
    }
    Ok(())
}

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn check(name: &'static str, pass: bool, detail: String) -> Check {
    eprintln!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Check { name, pass, detail }
}

/// Reduced versions of the acceptance checks at fixed desk parameters; only the seed is taken from `cfg`.
pub fn verify_all(cfg: &ExperimentConfig, out: &mut ArtifactWriter) -> Result<(), CliError> {
    let seed = cfg.seed;
    let mut checks = Vec::new();

    let fields: Vec<SpectralField> = (0..12)
        .map(|i| {
            let m = Model::canonical(1 + i % 3, 1, 1, 1.0, 1.0, 0.0).unwrap();
            random_w_sphere(&m, 1.0, split_seed(seed, "verify-oracle", i as u64))
        })
        .collect();
    let (mut oracle, mut energy): (f64, f64) = (0.0, 0.0);
    for u in &fields {
        let n = u.n_max();
        let b = convective_term(u, n).map_err(at("nonlinearity"))?;
        let g = pseudospectral_oracle(u, 4 * n + 1).map_err(at("nonlinearity"))?;
        oracle = oracle.max(b.max_abs_diff(&g) / b.max_abs());
        let scale = u.sobolev_norm_sq(SobolevIndex::V1) * u.sobolev_norm(SobolevIndex::H);
        energy = energy.max(b.inner(u, SobolevIndex::H).abs() / scale);
    }
    checks.push(check("nonlinearity oracle", oracle <= 1e-9, format!("max rel err {oracle:.2e}")));
    checks.push(check("energy identity", energy <= 1e-10, format!("max scaled pairing {energy:.2e}")));

    let model = Model::canonical(3, 1, 1, 1.0, 0.3, 0.0)?;
    let coupled = parallel::map_indices(20, |r| {
        let x = random_w_sphere(&model, 0.2, split_seed(seed, "verify-coupled-x", r as u64));
        let path = NoisePath::new(split_seed(seed, "verify-coupled", r as u64), 1e-2, 3)?;
        coupled_weak_strong(&x, &model, 1.0, 1e-2, &path).map(|r| r.max_diff_before_tau)
    });
    let coupled = coupled.into_iter().collect::<Result<Vec<_>, _>>().map_err(at("coupled"))?;
    let worst = coupled.iter().copied().fold(0.0, f64::max);
    checks.push(check("weak-strong coincidence", worst <= 1e-12, format!("20 seeds, max diff {worst:.2e}")));

    let model = Model::canonical(2, 1, 1, 1.0, 0.4, 0.1)?;
    let x = random_w_sphere(&model, 0.7, split_seed(seed, "verify-flow-x", 0));
    let path = NoisePath::new(split_seed(seed, "verify-flow", 0), 1e-2, 2)?;
    let traj = integrate(&x, 1.0, 1e-2, &path, &model, 1).map_err(at("simulate"))?;
    let flows = jacobian_flow(&traj, 1, &model, 1).map_err(at("jacobian flow"))?;
    let dir = malliavin_direction(&traj, &flows, &model, false).map_err(at("malliavin direction"))?;
    checks.push(check(
        "flow inverse",
        flows.max_inverse_defect <= 1e-6,
        format!("max |J Jinv - I| {:.2e}", flows.max_inverse_defect),
    ));
    checks.push(check(
        "malliavin direction",
        dir.high_residual <= 1e-8 && dir.identity_error <= 1e-8,
        format!("high residual {:.2e}, identity {:.2e}", dir.high_residual, dir.identity_error),
    ));

    let model = Model::canonical(2, 1, 2, 1.0, 50.0, 0.0)?;
    let mats = parallel::map_indices(4, |r| {
        let x = random_w_sphere(&model, 5.0, split_seed(seed, "verify-malliavin-x", r as u64));
        let path = NoisePath::new(split_seed(seed, "verify-malliavin", r as u64), 0.025, 2)?;
        let traj = integrate(&x, 0.5, 0.025, &path, &model, 1)?;
        let flows = jacobian_flow(&traj, 2, &model, 1)?;
        malliavin_matrix(&traj, &flows, &model).map(|m| (m.assembly_mismatch, m.lambda_min()))
    });
    let mats = mats.into_iter().collect::<Result<Vec<_>, _>>().map_err(at("malliavin matrix"))?;
    let mismatch = mats.iter().map(|m| m.0).fold(0.0, f64::max);
    let lmin = mats.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
    checks.push(check(
        "malliavin assembly",
        mismatch <= 1e-8 && lmin > 0.0,
        format!("4 seeds, mismatch {mismatch:.2e}, lambda_min {lmin:.2e}"),
    ));

    let dec = decomposition_search(1).map_err(at("decomposition search"))?;
    let n = dec.n;
    let model = Model::canonical(n, 1, n, 1.0, 10.0, 0.1)?;
    let y = random_w_sphere(&model, 1.0, split_seed(seed, "verify-hormander", 0));
    let span = hormander_rank(&y, &model, n, Generations::K0K2).map_err(at("hormander rank"))?;
    checks.push(check(
        "hormander spanning",
        span.rank == rank_target(n) && dec.certificates.iter().all(|c| c.validate(1, n)),
        format!("N={n}, rank {} of {}", span.rank, rank_target(n)),
    ));

    let model = Model::canonical(2, 1, 1, 1.0, 1.0, 0.0)?;
    let x = random_w_sphere(&model, 0.5, split_seed(seed, "verify-tail-x", 0));
    let tail = stopping_time_tail(&x, 0.0, &model, 1e-3, 50, split_seed(seed, "verify-tail", 0)).map_err(at("stopping time"))?;
    checks.push(check("stopping time", tail.estimate >= 0.99, format!("P[tau >= 1e-3] = {:.3}", tail.estimate)));

    let noise = NoiseSpec::canonical(5, 1, 1.0)?;
    let sampler = Model::canonical(5, 1, 1, 1.0, 1.0, 0.0)?;
    let x = random_w_sphere(&sampler, 1.0, split_seed(seed, "verify-control-x", 0));
    let y = random_w_sphere(&sampler, 1.0, split_seed(seed, "verify-control-y", 0));
    let plan = plan_control(&x, &y, 1.0, 0.05, &noise, &PlanOptions::default()).map_err(at("control planning"))?;
    let rep = verify_control(&plan, 5, 2e-3).map_err(at("control replay"))?;
    let defect = plan.max_high_defect().max(plan.max_low_defect());
    checks.push(check(
        "control",
        rep.final_miss <= 0.05 && defect <= 1e-9 && plan.audit.passes(),
        format!("N_max=5, replay miss {:.3e}, defect {defect:.1e}", rep.final_miss),
    ));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
    out.json_value(
        "verify_all.json",
        json!({
            "checks": checks.iter().map(|c| json!({ "name": c.name, "pass": c.pass, "detail": c.detail })).collect::<Vec<_>>(),
            "passed": failed.is_empty(),
        }),
    )?;
    if !failed.is_empty() {
        return Err(CliError::numerical(failed[0], format!("failed checks: {}", failed.join(", "))));
    }
    Ok(())
}
