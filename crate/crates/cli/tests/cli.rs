//! End-to-end runs of the `homog` binary on small configurations.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SCALAR: &str = r#"
[coefficients]
n = 1
entries = { "M.11" = "1", "E.11" = "1", "E.22" = "1", "H.1" = "1", "L.11" = "1", "G.11" = "1" }

[cell]
hole = "disk"
radius = 0.25
resolution = 8

[time]
t_end = 0.1
steps = 4
"#;

fn homog(dir: &Path, cmd: &str, config: &str, out: &str) -> Output {
    let cfg = dir.join("run.toml");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_homog"))
        .args([cmd, "--config", cfg.to_str().unwrap(), "--out", dir.join(out).to_str().unwrap(), "--threads", "2"])
        .output()
        .unwrap()
}

fn read(dir: &Path, out: &str, file: &str) -> String {
    fs::read_to_string(dir.join(out).join(file)).unwrap()
}

#[test]
fn cell_writes_tables_and_manifest() {
    let dir = TempDir::new().unwrap();
    let o = homog(dir.path(), "cell", SCALAR, "out");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read(dir.path(), "out", "effective.csv").lines().count() == 2);
    assert!(read(dir.path(), "out", "cell_fields.csv").starts_with("y1,y2,W1,W2,Z11"));
    let manifest = read(dir.path(), "out", "manifest.toml");
    assert!(manifest.contains("command = \"cell\""));
    assert!(manifest.contains("radius = 0.25"));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let o = homog(dir.path(), "cell", &format!("{SCALAR}\n[fine]\nepsilon = 0.25\ntypo = 1\n"), "out");
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("configuration error"));
}

#[test]
fn missing_table_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    assert_eq!(homog(dir.path(), "oscillation", SCALAR, "out").status.code(), Some(2));
}

#[test]
fn fine_run_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = format!("{SCALAR}\n[fine]\nepsilon = 0.5\n");
    let a = homog(dir.path(), "fine", &cfg, "a");
    let b = homog(dir.path(), "fine", &cfg, "b");
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    for f in ["fine_energy.csv", "fine_final.csv", "manifest.toml"] {
        assert_eq!(read(dir.path(), "a", f), read(dir.path(), "b", f), "{f} differs");
    }
    // The a priori inequality is checked and recorded at every level.
    let energy = read(dir.path(), "a", "fine_energy.csv");
    assert_eq!(energy.lines().count(), 6);
    assert!(energy.lines().nth(1).unwrap().split(',').all(|v| !v.is_empty()));
}

#[test]
fn non_integer_epsilon_is_rejected() {
    let dir = TempDir::new().unwrap();
    let o = homog(dir.path(), "fine", &format!("{SCALAR}\n[fine]\nepsilon = 0.3\n"), "out");
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn macro_run_writes_final_state() {
    let dir = TempDir::new().unwrap();
    let o = homog(dir.path(), "macro", &format!("{SCALAR}\n[macro]\nresolution = 8\n"), "out");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(dir.path(), "out", "macro_final.csv").lines().count(), 82);
}

#[test]
fn constants_and_rates() {
    let dir = TempDir::new().unwrap();
    let cfg = format!("{SCALAR}\n[constants]\nsample_points = 5\nq = 0.1\nrate_points = 10\n");
    let o = homog(dir.path(), "constants", &cfg, "out");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rates = read(dir.path(), "out", "rates.csv");
    assert!(rates.starts_with("tau,branch,phi_exponent,psi_exponent"));
    assert_eq!(rates.lines().count(), 11);
    let bad = homog(dir.path(), "constants", &format!("{SCALAR}\n[constants]\nq = 0.7\n"), "bad");
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn oscillation_table() {
    let dir = TempDir::new().unwrap();
    let cfg = "[oscillation]\nfunction = \"x1*sin(2*pi*y1)\"\nepsilons = [0.25, 0.125, 0.0625]\nper_period = 8\n";
    let o = homog(dir.path(), "oscillation", cfg, "out");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(dir.path(), "out", "oscillation.csv").lines().count(), 4);
    assert!(String::from_utf8_lossy(&o.stdout).contains("order 1.0"));
}

#[test]
fn corrosion_preset_report() {
    let dir = TempDir::new().unwrap();
    let o = homog(dir.path(), "corrosion", "[constants]\nsample_points = 5\n", "out");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read(dir.path(), "out", "corrosion.txt").contains("det G~ = 1.500000000000000"));
    assert!(read(dir.path(), "out", "corrosion_coefficients.txt").starts_with("n = 2"));
}

#[test]
fn failing_sweep_rows_give_numerical_exit_code() {
    let dir = TempDir::new().unwrap();
    let cfg = format!("{SCALAR}\n[sweep]\nepsilons = [0.3]\nself_check = false\nsample_points = 5\neta_points = 2\n");
    let o = homog(dir.path(), "sweep", &cfg, "out");
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read(dir.path(), "out", "corrector.csv").lines().count() == 2);
}
