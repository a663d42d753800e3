use std::path::Path;
use std::process::{Command, Output};

fn degnse(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_degnse"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

const QUICK: [&str; 6] = ["--set", "t_end=0.1", "--set", "replicas=2", "--set", "simulate.snapshot_stride=5"];

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = degnse(d, &[&["simulate", "--seed", "11"][..], &QUICK].concat());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["trajectory_000.csv", "trajectory_001.csv", "fields_000.f64", "simulate.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    let csv = std::fs::read_to_string(a.join("trajectory_000.csv")).unwrap();
    let head = csv.lines().next().unwrap();
    assert!(head.starts_with("# degnse config_hash=") && head.contains("seed=11") && head.contains("git="), "{head}");
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 10 + 1);
    let bin = std::fs::read(a.join("fields_000.f64")).unwrap();
    assert!(bin.starts_with(b"degnse config_hash="));
}

#[test]
fn seed_changes_the_output() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(degnse(&a, &[&["simulate", "--seed", "1"][..], &QUICK].concat()).status.success());
    assert!(degnse(&b, &[&["simulate", "--seed", "2"][..], &QUICK].concat()).status.success());
    let (ja, jb) = (read_json(&a.join("simulate.json")), read_json(&b.join("simulate.json")));
    assert_ne!(ja["report"]["final_w_norm"], jb["report"]["final_w_norm"]);
    assert_eq!(ja["provenance"]["config_hash"], jb["provenance"]["config_hash"]);
    assert_eq!(ja["provenance"]["seed"], 1);
}

#[test]
fn hormander_reports_minimal_level_and_rank_target() {
    let dir = tempfile::tempdir().unwrap();
    let o = degnse(dir.path(), &["hormander", "--set", "n0=1", "--set", "hormander.points=1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let j = read_json(&dir.path().join("hormander.json"));
    assert_eq!(j["report"]["minimal_n"], 2);
    assert_eq!(j["report"]["rank_target"], 248);
    assert_eq!(j["report"]["certificates"].as_array().unwrap().len(), 26);
    assert_eq!(j["report"]["points"][0]["span"]["rank"], 248);
    assert!(j["provenance"]["config_hash"].as_str().unwrap().len() == 64);
}

#[test]
fn config_file_and_flags_compose() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("exp.toml");
    std::fs::write(&file, "rho = 2.0\nseed = 5\n[simulate]\nradius = 0.3\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_degnse"))
        .args(["config", "--config", file.to_str().unwrap(), "--set", "simulate.radius=0.4"])
        .output()
        .unwrap();
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("rho = 2.0") && text.contains("seed = 5") && text.contains("radius = 0.4"), "{text}");
}

#[test]
fn exit_codes_separate_config_and_numerical_failures() {
    let dir = tempfile::tempdir().unwrap();
    for bad in [&["simulate", "--set", "alpha0=0.3"][..], &["simulate", "--set", "nonsense=1"], &["simulate", "--set", "dt=0.03"]] {
        let o = degnse(dir.path(), bad);
        assert_eq!(o.status.code(), Some(2), "{bad:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let missing = degnse(dir.path(), &["simulate", "--config", "/nonexistent/exp.toml"]);
    assert_eq!(missing.status.code(), Some(2));
    // no path can agree to a negative tolerance
    let o = degnse(dir.path(), &["coupled", "--set", "coupled.tolerance=-1.0", "--set", "replicas=1", "--set", "t_end=0.1"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("numerical failure in coupled"));
}

#[test]
fn verify_all_passes_on_the_default_config() {
    let dir = tempfile::tempdir().unwrap();
    let start = std::time::Instant::now();
    let o = degnse(dir.path(), &["verify-all"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(start.elapsed().as_secs() < 600);
    let j = read_json(&dir.path().join("verify_all.json"));
    assert_eq!(j["report"]["passed"], true);
}
