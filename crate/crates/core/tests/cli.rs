use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cavity_qst::experiment::{parse_config, run_experiment};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cavity-qst"))
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn run_cli(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn parse_table(text: &str) -> (String, Vec<Vec<f64>>) {
    let mut lines = text.lines();
    let header = lines.next().expect("header").to_string();
    let rows = lines
        .map(|l| l.split(',').map(|c| c.parse::<f64>().expect("numeric cell")).collect())
        .collect();
    (header, rows)
}

#[test]
fn golden_tables_reproduce() {
    let mut seen = 0;
    for entry in fs::read_dir(golden_dir()).unwrap() {
        let cfg_path = entry.unwrap().path();
        if cfg_path.extension().and_then(|e| e.to_str()) != Some("cfg") {
            continue;
        }
        let expected = fs::read_to_string(cfg_path.with_extension("csv")).unwrap();
        let cfg = parse_config(&fs::read_to_string(&cfg_path).unwrap()).unwrap();
        let run = run_experiment(&cfg).unwrap();
        assert!(run.within_tolerance, "{}", cfg_path.display());
        let actual = run.table.to_csv_string();
        let (h0, r0) = parse_table(&expected);
        let (h1, r1) = parse_table(&actual);
        assert_eq!(h0, h1, "{}", cfg_path.display());
        assert_eq!(r0.len(), r1.len(), "{}", cfg_path.display());
        for (a, b) in r0.iter().flatten().zip(r1.iter().flatten()) {
            assert!((a - b).abs() < 1e-9, "{}: {a} vs {b}", cfg_path.display());
        }
        seen += 1;
    }
    assert!(seen >= 5);
}

#[test]
fn run_writes_identical_files_twice() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "f.cfg",
        "experiment = fig3b\nsweep_points = 3\ndt_per_T = 500\n",
    );
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for out in [&a, &b] {
        let o = run_cli(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = fs::read(&a).unwrap();
    assert_eq!(text, fs::read(&b).unwrap());
    assert!(text.starts_with(b"g_tau,fidelity\n"));
    assert!(text.ends_with(b"\n"));
}

#[test]
fn output_path_from_config_and_stdout_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from_config.csv");
    let cfg = write_config(
        dir.path(),
        "c.cfg",
        &format!(
            "experiment = discrepancy\nsweep_points = 2\noutput_path = {}\n",
            target.display()
        ),
    );
    assert!(run_cli(&["run", cfg.to_str().unwrap()]).status.success());
    assert!(fs::read_to_string(&target)
        .unwrap()
        .starts_with("delta_over_g,discrepancy\n"));

    let cfg = write_config(dir.path(), "s.cfg", "experiment = entangle\nopen_system = false\n");
    let o = run_cli(&["run", cfg.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("checkpoint,"));
}

#[test]
fn dt_override_changes_only_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.cfg", "experiment = fig3a\nsweep_points = 2\n");
    let coarse = run_cli(&["run", cfg.to_str().unwrap(), "--dt-per-T", "100"]);
    let fine = run_cli(&["run", cfg.to_str().unwrap(), "--dt-per-T", "4000"]);
    assert!(coarse.status.success() && fine.status.success());
    let (_, a) = parse_table(&String::from_utf8_lossy(&coarse.stdout));
    let (_, b) = parse_table(&String::from_utf8_lossy(&fine.stdout));
    for (x, y) in a.iter().zip(&b) {
        assert!((x[1] - y[1]).abs() < 1e-6);
    }
    assert_eq!(
        run_cli(&["run", cfg.to_str().unwrap(), "--dt-per-T", "0"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn exit_status_one_for_invalid_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.cfg", "experiment = fig3a\nalpha = 0.6\nbeta = 0.7\n");
    let o = run_cli(&["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn exit_status_two_for_io_failures() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.cfg");
    assert_eq!(run_cli(&["run", missing.to_str().unwrap()]).status.code(), Some(2));

    let cfg = write_config(dir.path(), "ok.cfg", "experiment = discrepancy\nsweep_points = 2\n");
    let unwritable = dir.path().join("no/such/dir/out.csv");
    let o = run_cli(&["run", cfg.to_str().unwrap(), "--out", unwritable.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn selftest_subcommand_passes() {
    let o = run_cli(&["selftest"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().count() >= 5);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn fig3_curves_are_monotone_and_haar_average_is_deterministic() {
    let cfg = parse_config("experiment = fig3a\nsweep_points = 5\nhaar_average = true\ndt_per_T = 400\n").unwrap();
    let a = run_experiment(&cfg).unwrap().table;
    let b = run_experiment(&cfg).unwrap().table;
    assert_eq!(a.to_csv_string(), b.to_csv_string());
    let f = a.column("fidelity").unwrap();
    assert!(f.windows(2).all(|w| w[1] <= w[0]));
    assert!((f[0] - 1.0).abs() < 1e-8);
}
