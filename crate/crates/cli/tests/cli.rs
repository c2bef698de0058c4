use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn isogp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isogp")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = isogp(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn plane_distances(dir: &Path, n: &str) {
    ok(dir, &["gen", "plane", "--n", n, "--seed", "2", "--out", "p.csv"]);
    ok(dir, &["dist", "euclid", "--input", "p.csv", "--out", "d.csv"]);
}

#[test]
fn gen_swissroll_writes_requested_rows() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen", "swissroll", "--n", "300", "--out", "roll.csv"]);
    let text = fs::read_to_string(dir.path().join("roll.csv")).unwrap();
    assert_eq!(text.lines().count(), 301);
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("roll.json")).unwrap()).unwrap();
    assert_eq!(side["truth"].as_array().unwrap().len(), 300);
}

#[test]
fn invalid_arguments_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(isogp(dir.path(), &["gen", "plane", "--n", "0", "--out", "x.csv"]).status.code(), Some(2));
    assert_eq!(isogp(dir.path(), &["gen", "nonsense", "--out", "x.csv"]).status.code(), Some(2));
    assert_eq!(isogp(dir.path(), &["dist", "euclid", "--input", "missing.csv", "--out", "d.csv"]).status.code(), Some(2));
    plane_distances(dir.path(), "12");
    assert_eq!(isogp(dir.path(), &["dist", "rot", "--input", "p.csv", "--out", "r.csv"]).status.code(), Some(2));
}

#[test]
fn fit_without_eps_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    plane_distances(dir.path(), "12");
    fs::write(dir.path().join("c.json"), r#"{"epochs": 2}"#).unwrap();
    let out = isogp(dir.path(), &["fit", "--distances", "d.csv", "--config", "c.json", "--out", "fit"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("eps"));
}

#[test]
fn diverging_fit_exits_with_code_3_and_dumps_state() {
    let dir = tempfile::tempdir().unwrap();
    plane_distances(dir.path(), "20");
    fs::write(dir.path().join("c.json"), r#"{"eps": 3.0, "learning_rate": 1000, "epochs": 60, "inducing_points": 8}"#).unwrap();
    let out = isogp(dir.path(), &["fit", "--distances", "d.csv", "--config", "c.json", "--out", "fit", "--quiet"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("fit/abort_dump.json").exists());
}

#[test]
fn low_eps_warns_and_reports_singletons() {
    let dir = tempfile::tempdir().unwrap();
    plane_distances(dir.path(), "15");
    let out = isogp(dir.path(), &["graph", "--distances", "d.csv", "--eps", "1e-6"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("15 components"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn fits_are_byte_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    plane_distances(dir.path(), "25");
    fs::write(dir.path().join("c.json"), r#"{"eps": 4.0, "epochs": 12, "inducing_points": 10, "pair_subsample": 150}"#).unwrap();
    let run = |out: &str, threads: &str| {
        ok(dir.path(), &["--threads", threads, "fit", "--distances", "d.csv", "--config", "c.json", "--seed", "5", "--out", out, "--quiet"]);
        fs::read(dir.path().join(out).join("report.json")).unwrap()
    };
    let a = run("a", "1");
    let b = run("b", "1");
    let c = run("c", "3");
    assert_eq!(a, b);
    assert_eq!(a, c);
    let other = {
        ok(dir.path(), &["fit", "--distances", "d.csv", "--config", "c.json", "--seed", "6", "--out", "d", "--quiet"]);
        fs::read(dir.path().join("d/report.json")).unwrap()
    };
    assert_ne!(a, other);
}

#[test]
fn downstream_commands_consume_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    plane_distances(p, "20");
    fs::write(p.join("c.json"), r#"{"eps": 4.0, "epochs": 6, "inducing_points": 8}"#).unwrap();
    ok(p, &["fit", "--distances", "d.csv", "--config", "c.json", "--out", "fit", "--quiet"]);
    for f in ["report.json", "embedding.csv", "elbo_trace.csv"] {
        assert!(p.join("fit").join(f).exists(), "{f}");
    }
    let stdout = ok(p, &["geodesic", "--report", "fit/report.json", "--from", "0", "--to", "3", "--segments", "8", "--out", "g.csv"]);
    assert!(stdout.contains("geodesic length"));
    assert_eq!(fs::read_to_string(p.join("g.csv")).unwrap().lines().count(), 10);
    ok(p, &["geodesic", "--report", "fit/report.json", "--za=-0.5,0", "--zb", "0.5,0.2", "--out", "g2.csv"]);
    ok(p, &["metric-grid", "--report", "fit/report.json", "--res", "6", "--mc", "3", "--out", "grid.csv"]);
    assert_eq!(fs::read_to_string(p.join("grid.csv")).unwrap().lines().count(), 37);
    let stdout = ok(p, &["baseline", "--distances", "d.csv", "--eps", "4.0", "--out", "base"]);
    assert!(stdout.contains("stress mds"));
    assert!(p.join("base/mds.csv").exists() && p.join("base/isomap.csv").exists());
    ok(p, &["plot", "--report", "fit/report.json", "--grid-res", "5", "--geodesic", "g.csv", "--out", "fig.svg"]);
    let svg = fs::read_to_string(p.join("fig.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<polyline") && svg.matches("<circle").count() == 20);
}

#[test]
fn glyph_distances_and_persistence() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["gen", "glyph", "--n", "12", "--size", "12", "--out", "g.csv"]);
    ok(p, &["dist", "euclid", "--input", "g.csv", "--out", "e.csv"]);
    ok(p, &["dist", "rot", "--input", "g.csv", "--angles", "12", "--out", "r.csv"]);
    ok(p, &["dist", "lex", "--input", "g.csv", "--eps", "5", "--out", "l.csv"]);
    let stdout = ok(p, &["graph", "--distances", "e.csv", "--persistence", "--out", "pers.csv"]);
    assert!(stdout.contains("one component"));
    assert_eq!(fs::read_to_string(p.join("pers.csv")).unwrap().lines().count(), 12);
}
