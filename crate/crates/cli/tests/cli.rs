use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[model]
frequencies = [1.99, 0.73]
couplings = [1.67, 1.32]
d_osc = 3
spin_init = "plus"

[schedule]
deltas = [1.0]
steps = 3
substeps = 4

[measurement]
lambdas = [0.0, 1.0]

[convergence]
deltas = [1.0]
"#;

fn sttm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sttm"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn dephasing_demo_runs_without_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("res");
    let o = sttm(&["dephasing-demo", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.lines().next().unwrap().starts_with("case"));
    assert!(stdout.contains("cp-divisible-memory"));
    let csv = std::fs::read_to_string(out.join("dephasing.csv")).unwrap();
    assert!(csv.starts_with("# experiment: dephasing"));
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 4);
}

#[test]
fn missing_config_is_a_config_error() {
    let o = sttm(&["quantifiers", "--config", "missing.file"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.file"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&sttm(&["frobnicate"])), 1);
    assert_eq!(code(&sttm(&["dynamics", "--no-such-flag"])), 1);
    assert_eq!(code(&sttm(&[])), 1);
    assert_eq!(code(&sttm(&["dynamics", "--norm", "nuclear"])), 1);
    assert_eq!(code(&sttm(&["dynamics", "--branch-mode", "some"])), 1);
    let help = sttm(&["--help"]);
    assert_eq!(code(&help), 0);
    assert!(String::from_utf8_lossy(&help.stdout).contains("dephasing-demo"));
}

#[test]
fn invalid_values_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&sttm(&["dynamics", "--config", &cfg, "--out", out, "--lambda", "1.5"])), 1);
    assert_eq!(code(&sttm(&["violation", "--config", &cfg, "--out", out, "--delta", "1", "--delta", "2"])), 1);
    let bad = write_config(dir.path(), "[schedule]\nsteps = 12\n");
    assert_eq!(code(&sttm(&["quantifiers", "--config", &bad])), 1);
    let typo = write_config(dir.path(), "[modle]\nd_osc = 3\n");
    assert_eq!(code(&sttm(&["quantifiers", "--config", &typo])), 1);
}

#[test]
fn tolerance_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("{SMALL}\n[tolerances]\nstructural = 1e-300\nreconstruction = 1e-300\npsd = 1e-300\n"),
    );
    let o = sttm(&["quantifiers", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tolerance"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    for (cmd, file) in [
        ("dynamics", "dynamics.csv"),
        ("quantifiers", "quantifiers.csv"),
        ("violation", "violation.csv"),
        ("dephasing-demo", "dephasing.csv"),
        ("convergence", "convergence.csv"),
    ] {
        let a = dir.path().join(format!("a-{cmd}"));
        let b = dir.path().join(format!("b-{cmd}"));
        for out in [&a, &b] {
            let o = sttm(&[cmd, "--config", &cfg, "--out", out.to_str().unwrap()]);
            assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        }
        let (x, y) = (std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap());
        assert!(!x.is_empty());
        assert_eq!(x, y, "{cmd} output differs between runs");
    }
}

#[test]
fn overrides_select_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("o");
    let o = sttm(&[
        "dynamics", "--config", &cfg, "--out", out.to_str().unwrap(), "--lambda", "1", "--delta", "0.5",
    ]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(out.join("dynamics.csv")).unwrap();
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = r.headers().unwrap().clone();
    let (li, di) = (
        header.iter().position(|h| h == "lambda").unwrap(),
        header.iter().position(|h| h == "delta").unwrap(),
    );
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert!(!rows.is_empty());
    for row in &rows {
        assert_eq!(row[li].parse::<f64>().unwrap(), 1.0);
        assert_eq!(row[di].parse::<f64>().unwrap(), 0.5);
    }

    let o = sttm(&[
        "quantifiers", "--config", &cfg, "--out", out.to_str().unwrap(), "--branch-mode", "per-branch",
        "--dk-paper-literal", "--norm", "spectral",
    ]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(out.join("quantifiers.csv")).unwrap();
    assert!(text.contains(",per-branch,"));
    assert!(text.contains(",spectral,paper-literal,"));
    assert!(!text.contains(",average,"));
}
