use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn acflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acflow")).args(args).output().expect("binary runs")
}

fn run_config(cfg: &Path, out: &Path) -> Output {
    acflow(&["--out-dir", out.to_str().unwrap(), "run", cfg.to_str().unwrap()])
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

const SMALL: &str = r#"{
  "mdp": {"generator": {"seed": 3, "n_states": 2, "n_actions": 2, "gamma": 0.4, "tau": 1.0}},
  "schedule": {"kind": "constant", "eta0": 30.0},
  "initial": {"theta": "zeros", "policy": "uniform"},
  "integrator": {"method": "exponential-euler", "dt": 0.01, "t_end": 4.0, "n_out": 40}
}"#;

#[test]
fn equilibrium_config_passes() {
    let out = TempDir::new().unwrap();
    let o = run_config(&configs().join("equilibrium.json"), out.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
    for f in ["trajectory.csv", "constants.json", "certificates.json", "config.json"] {
        assert!(out.path().join(f).exists(), "{f}");
    }
}

#[test]
fn small_timescale_is_not_a_failure() {
    let out = TempDir::new().unwrap();
    let o = run_config(&configs().join("unstable_eta.json"), out.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("n/a"));
}

#[test]
fn polynomial_schedule_run_reports_slope_failure() {
    let out = TempDir::new().unwrap();
    let o = run_config(&configs().join("paper_sqrt_t.json"), out.path());
    assert_eq!(code(&o), 2, "{}", stdout(&o));
    let failing: Vec<_> = stdout(&o).lines().filter(|l| l.starts_with("FAIL")).map(str::to_owned).collect();
    assert_eq!(failing.len(), 1, "{failing:?}");
    assert!(failing[0].contains("polynomial_slope"));
}

#[test]
fn artifacts_carry_the_config_hash() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "small.json", SMALL);
    let out = dir.path().join("out");
    let o = run_config(&cfg, &out);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let hash = stdout(&o).lines().find_map(|l| l.strip_prefix("config_hash=")).unwrap().to_owned();
    assert_eq!(hash.len(), 64);
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), format!("# config_hash={hash}"));
    for f in ["constants.json", "certificates.json"] {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(f)).unwrap()).unwrap();
        assert_eq!(v["config_hash"], hash.as_str(), "{f}");
    }
}

#[test]
fn reruns_are_bit_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "small.json", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&run_config(&cfg, &a)), 0);
    assert_eq!(code(&run_config(&cfg, &b)), 0);
    for f in ["trajectory.csv", "constants.json", "certificates.json", "config.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_override_changes_the_hash() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "small.json", SMALL);
    let hash = |extra: &[&str]| {
        let mut args = extra.to_vec();
        args.extend(["validate", cfg.to_str().unwrap()]);
        let o = acflow(&args);
        assert_eq!(code(&o), 0);
        stdout(&o)
    };
    assert_ne!(hash(&[]), hash(&["--seed-override", "99"]));
    assert_eq!(hash(&["--seed-override", "3"]), hash(&[]));
}

#[test]
fn bad_configs_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let bad_dt = write(dir.path(), "dt.json", &SMALL.replace("\"dt\": 0.01", "\"dt\": -1.0"));
    let bad_eta = write(dir.path(), "eta.json", &SMALL.replace("\"eta0\": 30.0", "\"eta0\": 0.5"));
    let bad_json = write(dir.path(), "broken.json", "{ \"mdp\": ");
    let missing = dir.path().join("nope.json");
    for cfg in [&bad_dt, &bad_eta, &bad_json, &missing] {
        let o = acflow(&["validate", cfg.to_str().unwrap()]);
        assert_eq!(code(&o), 1, "{}", cfg.display());
        assert!(!o.stderr.is_empty());
        let o = run_config(cfg, &dir.path().join("out"));
        assert_eq!(code(&o), 1, "{}", cfg.display());
    }
}

#[test]
fn generated_mdp_file_round_trips() {
    let dir = TempDir::new().unwrap();
    let spec = write(
        dir.path(),
        "spec.json",
        r#"{"seed": 5, "n_states": 3, "n_actions": 2, "gamma": 0.5, "tau": 0.7}"#,
    );
    let mdp = dir.path().join("mdp.json");
    let o = acflow(&["gen-mdp", spec.to_str().unwrap(), "-o", mdp.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&mdp).unwrap()).unwrap();
    assert_eq!(v["n_states"], 3);
    assert_eq!(v["transition"].as_array().unwrap().len(), 3);

    let gen_cfg = SMALL.replace(
        r#"{"generator": {"seed": 3, "n_states": 2, "n_actions": 2, "gamma": 0.4, "tau": 1.0}}"#,
        r#"{"generator": {"seed": 5, "n_states": 3, "n_actions": 2, "gamma": 0.5, "tau": 0.7}}"#,
    );
    let file_cfg = SMALL.replace(
        r#"{"generator": {"seed": 3, "n_states": 2, "n_actions": 2, "gamma": 0.4, "tau": 1.0}}"#,
        r#"{"file": "mdp.json"}"#,
    );
    let a = write(dir.path(), "gen.json", &gen_cfg);
    let b = write(dir.path(), "file.json", &file_cfg);
    let (oa, ob) = (dir.path().join("oa"), dir.path().join("ob"));
    assert_eq!(code(&run_config(&a, &oa)), 0);
    assert_eq!(code(&run_config(&b, &ob)), 0);
    let values = |p: &Path| {
        let s = fs::read_to_string(p.join("trajectory.csv")).unwrap();
        s.lines()
            .skip(2)
            .flat_map(|l| l.split(',').map(|x| x.parse::<f64>().unwrap()).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    // the file path renormalises the stored probabilities, so agreement is up to round-off
    let (va, vb) = (values(&oa), values(&ob));
    assert_eq!(va.len(), vb.len());
    for (x, y) in va.iter().zip(&vb) {
        assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()), "{x} vs {y}");
    }
}

#[test]
fn sweep_writes_one_row_per_point() {
    let dir = TempDir::new().unwrap();
    let cfg = SMALL.replacen('{', r#"{"sweep": {"eta0": [2.0, 30.0], "seed": [3, 4]},"#, 1);
    let cfg = write(dir.path(), "sweep.json", &cfg);
    let out = dir.path().join("out");
    let o = acflow(&["--threads", "2", "--out-dir", out.to_str().unwrap(), "sweep", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<_> = summary.lines().collect();
    assert!(lines[0].starts_with("# config_hash="));
    assert!(lines[1].starts_with("point,"));
    assert_eq!(lines.len(), 2 + 4);
    for i in 0..4 {
        assert!(out.join(format!("point_{i:04}")).join("certificates.json").exists());
    }
}

#[test]
fn single_point_sweep_matches_run() {
    let dir = TempDir::new().unwrap();
    let run_cfg = write(dir.path(), "run.json", SMALL);
    let sweep_cfg = write(dir.path(), "sweep.json", &SMALL.replacen('{', r#"{"sweep": {"eta0": [30.0]},"#, 1));
    let (r, s) = (dir.path().join("r"), dir.path().join("s"));
    assert_eq!(code(&run_config(&run_cfg, &r)), 0);
    let o = acflow(&["--out-dir", s.to_str().unwrap(), "sweep", sweep_cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    for f in ["trajectory.csv", "constants.json", "certificates.json"] {
        assert_eq!(
            fs::read(r.join(f)).unwrap(),
            fs::read(s.join("point_0000").join(f)).unwrap(),
            "{f}"
        );
    }
}
