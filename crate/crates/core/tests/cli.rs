use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mfggp::experiment::{l2_gauge_error, l2_grid_error, Grid, ResultRecord, Status, StudySummary};

const EXPLICIT_1D: &str = r#"{
  "schema_version": 1,
  "domain": {"lower": [0.0], "upper": [1.0]},
  "environment": {
    "potential": {"constant": 2.0, "terms": [{"coef": 1.0, "func": "sin", "wave": [1.0]}]},
    "nu": 0.0,
    "coupling": {"type": "power", "alpha": 2.0}
  },
  "reference": {"kind": "explicit"},
  "inversion": {"points": 40, "m_observations": 12, "v_observations": 12},
  "study": {"observation_counts": [6, 12]},
  "seeds": [3, 4]
}"#;

fn mfggp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfggp")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn without_clock(mut r: ResultRecord) -> ResultRecord {
    r.wall_clock_seconds = 0.0;
    r
}

#[test]
fn invert_is_deterministic_and_recomputable_from_grids() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", EXPLICIT_1D);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = mfggp(&["invert", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for seed in [3, 4] {
        let name = format!("invert_seed{seed}.json");
        let ra = ResultRecord::read(&a.join(&name)).unwrap();
        let rb = ResultRecord::read(&b.join(&name)).unwrap();
        assert_eq!(ra.status, Status::Ok);
        assert_eq!(without_clock(ra.clone()), without_clock(rb));
        for file in ra.grids.values() {
            assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
        }

        let grid = |name: &str| Grid::read(&a.join(&ra.grids[name])).unwrap();
        assert_eq!(grid("m").dims, vec![128]);
        assert_eq!(l2_grid_error(&grid("m"), &grid("m_ref")).unwrap(), ra.errors["m"]);
        assert_eq!(l2_grid_error(&grid("u"), &grid("u_ref")).unwrap(), ra.errors["u"]);
        assert_eq!(l2_grid_error(&grid("v"), &grid("v_ref")).unwrap(), ra.errors["v"]);
        let gauge = l2_gauge_error(
            &grid("v"),
            ra.recovered.hbar.unwrap(),
            &grid("v_ref"),
            ra.reference.hbar.unwrap(),
        )
        .unwrap();
        assert_eq!(gauge, ra.errors["v_minus_hbar"]);
    }
}

#[test]
fn seed_flag_overrides_config_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", EXPLICIT_1D);
    let out = dir.path().join("o");
    let o = mfggp(&["invert", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "11", "--threads", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("invert_seed11.json").exists());
    assert!(!out.join("invert_seed3.json").exists());
}

#[test]
fn study_writes_summary_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", EXPLICIT_1D);
    let out = dir.path().join("s");
    let o = mfggp(&["study", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s: StudySummary = serde_json::from_str(&fs::read_to_string(out.join("study.json")).unwrap()).unwrap();
    assert_eq!(s.rows.iter().map(|r| r.observations).collect::<Vec<_>>(), vec![6, 12]);
    assert_eq!(s.records.len(), 4);
    for r in &s.rows {
        let [q1, med, q3] = r.quantiles["m"];
        assert!(q1 <= med && med <= q3);
        assert_eq!(r.failed, 0);
    }
    let csv = fs::read_to_string(out.join("study.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("observations,field,q1,median,q3"));
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
}

#[test]
fn tdinvert_reports_per_slice_mass() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "t.json",
        r#"{
          "schema_version": 1,
          "mode": "tdinvert",
          "domain": {"lower": [-0.5], "upper": [0.5]},
          "environment": {
            "potential": {"terms": [{"coef": 1.0, "func": "cos", "wave": [1.0]}]},
            "nu": 0.1,
            "coupling": {"type": "power", "alpha": 2.0}
          },
          "time": {"horizon": 0.5, "steps": 3},
          "reference": {"grid": 24},
          "inversion": {"points": 16, "m_observations": 4, "v_observations": 3, "kernels": {"u": [1.5], "m": [1.5], "v": [1.0]}},
          "metrics_grid": 32
        }"#,
    );
    let out = dir.path().join("t");
    let o = mfggp(&["tdinvert", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = ResultRecord::read(&out.join("tdinvert_seed1.json")).unwrap();
    assert_eq!(r.series["mass"].len(), 4);
    let m = Grid::read(&out.join(&r.grids["m"])).unwrap();
    assert_eq!(m.dims, vec![4, 32]);
    assert_eq!(l2_grid_error(&m, &Grid::read(&out.join(&r.grids["m_ref"])).unwrap()).unwrap(), r.errors["m"]);
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = EXPLICIT_1D.replace(r#""m_observations": 12"#, r#""m_observations": 41"#);
    let cfg = write_config(dir.path(), "bad.json", &bad);
    let o = mfggp(&["invert", "--config", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("inversion.m_observations"));

    let o = mfggp(&["invert", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = mfggp(&["sideways", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    let o = mfggp(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn solver_failures_exit_with_two_and_leave_a_record() {
    let dir = tempfile::tempdir().unwrap();
    // a lengthscale of 50 without nugget makes the Gram matrix numerically singular
    let cfg = write_config(
        dir.path(),
        "f.json",
        r#"{
          "schema_version": 1,
          "domain": {"lower": [0.0], "upper": [1.0]},
          "environment": {"potential": {"constant": 0.0}, "nu": 0.1, "coupling": {"type": "power", "alpha": 2.0}},
          "reference": {"grid": 40, "lengthscale": 50.0, "eta": 0.0}
        }"#,
    );
    let out = dir.path().join("f");
    let o = mfggp(&["forward", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let r = ResultRecord::read(&out.join("forward.json")).unwrap();
    assert_eq!(r.status, Status::Failed);
    assert!(r.error.unwrap().contains("positive definite"));
}
