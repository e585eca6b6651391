use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn lelab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lelab"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// The run directory printed on the last stdout line.
fn run_dir(o: &Output) -> PathBuf {
    let text = String::from_utf8_lossy(&o.stdout);
    PathBuf::from(text.lines().last().expect("run directory printed"))
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_outputs_exist(dir: &Path) -> Value {
    let manifest = json(&dir.join("manifest.json"));
    for f in manifest["outputs"].as_array().unwrap() {
        let p = dir.join(f.as_str().unwrap());
        assert!(fs::metadata(&p).unwrap().len() > 0, "{}", p.display());
    }
    manifest
}

#[test]
fn ground_bubble_constant() {
    let tmp = TempDir::new().unwrap();
    let o = lelab(tmp.path(), &["ground", "--p", "5", "--N", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(&o);
    let m = assert_outputs_exist(&dir);
    assert_eq!(m["command"], "ground");
    assert_eq!(m["status"], "ok");
    let c = json(&dir.join("constants.json"));
    let a = c["a"].as_f64().unwrap();
    assert!((a - 3f64.sqrt()).abs() < 1e-4);
    assert!(c["tolerance"].is_object());
    let csv = fs::read_to_string(dir.join("profile.csv")).unwrap();
    assert!(csv.lines().next().unwrap().starts_with("r,"));
}

#[test]
fn ground_self_convergence() {
    let tmp = TempDir::new().unwrap();
    let a = lelab(tmp.path(), &["ground", "--p", "5", "--N", "3"]);
    let b = lelab(
        tmp.path(),
        &[
            "ground", "--p", "5", "--N", "3", "--tol", "1e-10", "--rmax", "1e5",
        ],
    );
    assert_eq!((code(&a), code(&b)), (0, 0));
    let ca = json(&run_dir(&a).join("constants.json"))["a"]
        .as_f64()
        .unwrap();
    let cb = json(&run_dir(&b).join("constants.json"))["a"]
        .as_f64()
        .unwrap();
    assert!((ca - cb).abs() < 1e-6);
}

#[test]
fn ground_rejects_inadmissible_exponent() {
    let tmp = TempDir::new().unwrap();
    let o = lelab(tmp.path(), &["ground", "--p", "0.5", "--N", "3"]);
    assert_eq!(code(&o), 64);
    assert!(String::from_utf8_lossy(&o.stderr).contains("2/(N-2)"));
}

#[test]
fn usage_errors_exit_64() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&lelab(tmp.path(), &["bogus"])), 64);
    assert_eq!(code(&lelab(tmp.path(), &["verify", "bogus"])), 64);
    assert_eq!(code(&lelab(tmp.path(), &["ground", "--N", "3"])), 64);
    assert_eq!(
        code(&lelab(
            tmp.path(),
            &["sweep", "--p", "5", "--N", "3", "--eps", "0.1:0.5:geo1.25"]
        )),
        64
    );
    assert_eq!(
        code(&lelab(
            tmp.path(),
            &["sweep", "--p", "5", "--N", "3", "--eps", "0.5-0.1"]
        )),
        64
    );
    assert_eq!(
        code(&lelab(
            tmp.path(),
            &["--threads", "0", "ground", "--p", "5", "--N", "3"]
        )),
        64
    );
    assert_eq!(
        code(&lelab(
            tmp.path(),
            &[
                "sweep",
                "--mode",
                "perturbation",
                "--p",
                "5",
                "--N",
                "3",
                "--eps",
                "1:0.5:geo0.8"
            ]
        )),
        64
    );
    assert_eq!(code(&lelab(tmp.path(), &["--help"])), 0);
}

#[test]
fn green_robin_value_and_identities() {
    let tmp = TempDir::new().unwrap();
    let o = lelab(
        tmp.path(),
        &[
            "green", "--domain", "ball", "--R", "1", "--N", "3", "--x0", "0,0,0",
        ],
    );
    assert_eq!(code(&o), 0);
    let dir = run_dir(&o);
    assert_outputs_exist(&dir);
    let b = json(&dir.join("bundle.json"));
    assert!((b["phi"].as_f64().unwrap() + 0.0795775).abs() < 1e-7);
    assert_eq!(b["outside_smoothness_hypotheses"], false);

    let o = lelab(
        tmp.path(),
        &[
            "green",
            "--domain",
            "ball",
            "--R",
            "1",
            "--N",
            "3",
            "--p",
            "2.5",
            "--x0",
            "0,0,0",
            "--identities",
        ],
    );
    assert_eq!(code(&o), 0);
    let b = json(&run_dir(&o).join("bundle.json"));
    assert!(b["residuals"]["identity_ii"]["residual"].as_f64().unwrap() < 1e-3);
    assert!(b["phi_t"].as_f64().unwrap() < 0.0);
    let field = fs::read_to_string(run_dir(&o).join("field.csv")).unwrap();
    assert_eq!(field.lines().next().unwrap(), "x,y,z,G,Gt");
}

#[test]
fn green_box_is_flagged_and_boundary_source_rejected() {
    let tmp = TempDir::new().unwrap();
    let o = lelab(
        tmp.path(),
        &["green", "--domain", "box", "--x0", "0.5,0.5,0.5"],
    );
    assert_eq!(code(&o), 0);
    let b = json(&run_dir(&o).join("bundle.json"));
    assert_eq!(b["outside_smoothness_hypotheses"], true);
    let o = lelab(
        tmp.path(),
        &["green", "--domain", "ball", "--N", "3", "--x0", "1,0,0"],
    );
    assert_eq!(code(&o), 64);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"p": 2.5, "N": 3}"#).unwrap();
    let o = lelab(
        tmp.path(),
        &["--config", cfg.to_str().unwrap(), "ground", "--p", "5"],
    );
    assert_eq!(code(&o), 0);
    let m = json(&run_dir(&o).join("manifest.json"));
    assert_eq!(m["config"]["p"], 5.0);
    assert_eq!(m["config"]["N"], 3);
    fs::write(&cfg, "[1, 2]").unwrap();
    assert_eq!(
        code(&lelab(
            tmp.path(),
            &["--config", cfg.to_str().unwrap(), "ground"]
        )),
        64
    );
}

#[test]
fn manifests_are_deterministic_modulo_timestamps() {
    let tmp = TempDir::new().unwrap();
    let args = [
        "--threads",
        "2",
        "green",
        "--domain",
        "ball",
        "--N",
        "3",
        "--p",
        "2.5",
        "--x0",
        "0.1,0,0",
    ];
    let a = lelab(tmp.path(), &args);
    let b = lelab(tmp.path(), &args);
    assert_eq!((code(&a), code(&b)), (0, 0));
    let (da, db) = (run_dir(&a), run_dir(&b));
    assert_ne!(da, db);
    let strip = |mut v: Value| {
        v.as_object_mut().unwrap().remove("timestamps");
        v
    };
    assert_eq!(
        strip(json(&da.join("manifest.json"))),
        strip(json(&db.join("manifest.json")))
    );
    assert_eq!(
        fs::read(da.join("bundle.json")).unwrap(),
        fs::read(db.join("bundle.json")).unwrap()
    );
}

#[test]
fn solve_ball_writes_pohozaev_summary() {
    let tmp = TempDir::new().unwrap();
    let o = lelab(
        tmp.path(),
        &["solve", "--p", "5", "--N", "3", "--eps", "0.3"],
    );
    assert_eq!(code(&o), 0);
    let dir = run_dir(&o);
    assert_outputs_exist(&dir);
    let s = json(&dir.join("summary.json"));
    assert!(s["pohozaev"]["residual"].as_f64().unwrap() < 1e-6);
    assert_eq!(s["pohozaev"]["tolerance"], 1e-6);
    assert_eq!(s["peaks"], 1);
}

#[test]
fn solve_box_too_coarse_is_numerical_failure() {
    let tmp = TempDir::new().unwrap();
    let o = lelab(
        tmp.path(),
        &[
            "solve", "--p", "5", "--N", "3", "--eps", "0.3", "--domain", "box", "--nodes", "33",
        ],
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("resolution"));
}

#[test]
fn perturbed_sweep_selects_window_and_prediction() {
    let tmp = TempDir::new().unwrap();
    let o = lelab(
        tmp.path(),
        &[
            "sweep",
            "--mode",
            "perturbation",
            "--p",
            "1",
            "--N",
            "9",
            "--eps",
            "2000:800:geo0.8",
            "--exponent-tol",
            "1",
        ],
    );
    let dir = run_dir(&o);
    let m = assert_outputs_exist(&dir);
    assert!(m["checks"][0]["check"]
        .as_str()
        .unwrap()
        .starts_with("window subcritical"));
    let r = json(&dir.join("ratefit.json"));
    assert!((r["prediction"]["exponent"].as_f64().unwrap() - 0.4).abs() < 1e-12);
    assert_eq!(r["perturbed_case"], "subcritical");
    let branch = fs::read_to_string(dir.join("branch.csv")).unwrap();
    assert!(branch.starts_with("eps,u_max,mu,"));
    assert_eq!(branch.lines().count(), 6);
    // Every emitted check carries its tolerance.
    assert!(m["checks"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c.get("tolerance").is_some()));
}

#[test]
fn supercritical_sweep_records_checks() {
    let tmp = TempDir::new().unwrap();
    let o = lelab(
        tmp.path(),
        &[
            "sweep",
            "--p",
            "5",
            "--N",
            "3",
            "--domain",
            "ball",
            "--R",
            "1",
            "--eps",
            "0.2:0.05:geo0.8",
        ],
    );
    assert!(matches!(code(&o), 0 | 1));
    let dir = run_dir(&o);
    let m = assert_outputs_exist(&dir);
    let checks = m["checks"].as_array().unwrap();
    assert!(checks
        .iter()
        .filter(|c| c["check"].as_str().unwrap().starts_with("pohozaev"))
        .all(|c| c["pass"] == true));
    assert!((m["last_good_eps"].as_f64().unwrap() - 0.2 * 0.8f64.powi(6)).abs() < 1e-12);
    let r = json(&dir.join("ratefit.json"));
    assert_eq!(r["prediction"]["exponent"], 2.0);
    assert!(r["fit"]["fitted_exponent"].as_f64().is_some());
}
