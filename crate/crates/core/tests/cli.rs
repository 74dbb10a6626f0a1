use std::path::Path;
use std::process::Command;

const SMALL: &str = r#"seed = 3

[domain]
shape = "box"
lengths = [1.0, 1.0]
divisions = [12, 12]

[coefficients]
gamma = "1 + 0.2*x"
kappa = "1"
tensor = [["1", "0"], ["0", "1"]]

[source]
h = "x"
h_tilde = "y"
envelope = "ramp"
epsilon = 1e-3

[time]
t_end = 2.0
dt = 0.02
stride = 5

[solver]
modes = 20
"#;

fn run(dir: &Path, args: &[&str]) -> std::process::Output {
    let cfg = dir.join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    Command::new(env!("CARGO_BIN_EXE_thermoeit"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn verify_passes_on_small_problem() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["verify"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/verify/report.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
}

#[test]
fn spectrum_output_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = run(d.path(), &["spectrum"]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("out/spectrum/eigenvalues.csv")).unwrap();
    let (x, y) = (read(&a), read(&b));
    assert!(String::from_utf8_lossy(&x).starts_with("# config_digest:"));
    assert_eq!(x, y);
}

#[test]
fn forward_writes_fields_and_flux() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["forward"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["fields.csv", "flux.csv", "summary.json"] {
        assert!(dir.path().join("out/forward").join(f).exists(), "missing {f}");
    }
}

#[test]
fn invalid_config_reports_position_and_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[domain]\nshape = \"box\"\nlengths = [1.0, 1.0]\ndivisions = [4, 4]\n[coefficients]\ngamma = \"1 + (x\"\nkappa = \"1\"\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_thermoeit"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .arg("spectrum")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error[config]"), "{err}");
    assert!(!dir.path().join("out/spectrum").exists());
}

#[test]
fn missing_subcommand_is_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_thermoeit")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
