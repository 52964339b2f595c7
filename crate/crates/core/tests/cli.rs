use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn grsaa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grsaa"))
        .args(args)
        .output()
        .unwrap()
}

fn out_arg(dir: &Path) -> String {
    dir.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn solve_writes_artifacts_and_reruns_identically() {
    let tmp = TempDir::new().unwrap();
    let first = tmp.path().join("first");
    let o = grsaa(&[
        "solve",
        "--problem",
        "sin",
        "--n",
        "3",
        "--N",
        "1500",
        "--L",
        "3",
        "--partition",
        "linear:500",
        "--out",
        &out_arg(&first),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for name in ["config.txt", "path.csv", "summary.json"] {
        assert!(first.join(name).is_file(), "{name} missing");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(first.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["status"], "converged");
    assert!(summary["final_residual"].as_f64().unwrap() <= 1e-10);

    let second = tmp.path().join("second");
    let config = first.join("config.txt");
    let o = grsaa(&[
        "solve",
        "--config",
        &out_arg(&config),
        "--out",
        &out_arg(&second),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        fs::read(first.join("path.csv")).unwrap(),
        fs::read(second.join("path.csv")).unwrap()
    );
}

#[test]
fn path_csv_has_documented_columns() {
    let tmp = TempDir::new().unwrap();
    let o = grsaa(&[
        "solve",
        "--problem",
        "svi",
        "--n",
        "1",
        "--N",
        "300",
        "--L",
        "5",
        "--out",
        &out_arg(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(tmp.path().join("path.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,t,u_norm,residual,step_len,corrector_iters,sample_evals"
    );
    let rows: Vec<Vec<String>> = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    assert!(rows.len() > 2);
    assert_eq!(rows[0][1].parse::<f64>().unwrap(), 1.0);
    let last_evals: Vec<u64> = rows.iter().map(|r| r[6].parse().unwrap()).collect();
    assert!(last_evals.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn too_many_segments_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("never");
    let o = grsaa(&[
        "solve",
        "--problem",
        "sin",
        "--N",
        "10",
        "--L",
        "11",
        "--out",
        &out_arg(&dir),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!dir.exists());
}

#[test]
fn malformed_options_are_config_errors() {
    let tmp = TempDir::new().unwrap();
    let out = out_arg(tmp.path());
    for bad in [
        vec!["solve", "--problem", "heat", "--out", &out],
        vec!["solve", "--schedule", "harmonic:-1", "--out", &out],
        vec!["solve", "--set", "nonsense=1", "--out", &out],
        vec!["solve", "--kappa0", "1", "--out", &out],
        vec!["solve", "--bogus"],
    ] {
        let o = grsaa(&bad);
        assert_eq!(o.status.code(), Some(3), "{bad:?}: {}", stderr(&o));
    }
}

#[test]
fn sweep_writes_one_row_per_segment_count() {
    let tmp = TempDir::new().unwrap();
    let run = |dir: &Path| {
        let o = grsaa(&[
            "sweep-l",
            "--problem",
            "svi",
            "--n",
            "1",
            "--N",
            "400",
            "--l-values",
            "1,0.25N",
            "--reps",
            "2",
            "--out",
            &out_arg(dir),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        fs::read_to_string(dir.join("sweep.csv")).unwrap()
    };
    let a = run(&tmp.path().join("a"));
    let b = run(&tmp.path().join("b"));
    let strip_time = |s: &str| -> Vec<String> {
        let mut r = csv::Reader::from_reader(s.as_bytes());
        let h = r.headers().unwrap().clone();
        let col = h.iter().position(|c| c == "mean_wall_seconds").unwrap();
        r.records()
            .map(|rec| {
                let rec = rec.unwrap();
                rec.iter()
                    .enumerate()
                    .filter(|(i, _)| *i != col)
                    .map(|(_, v)| v)
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect()
    };
    let rows = strip_time(&a);
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("1,2,2,"));
    assert!(rows[1].starts_with("100,2,2,"));
    assert_eq!(rows, strip_time(&b));
}

#[test]
fn comparing_a_run_with_itself_gives_unit_ratio() {
    let tmp = TempDir::new().unwrap();
    let o = grsaa(&[
        "compare",
        "--problem",
        "sin",
        "--n",
        "2",
        "--N",
        "300",
        "--L",
        "1",
        "--baseline-L",
        "1",
        "--reps",
        "2",
        "--out",
        &out_arg(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut r = csv::Reader::from_path(tmp.path().join("compare.csv")).unwrap();
    let h = r.headers().unwrap().clone();
    let ratio = h.iter().position(|c| c == "eval_ratio").unwrap();
    let gap = h.iter().position(|c| c == "state_gap").unwrap();
    let mut n = 0;
    for rec in r.records() {
        let rec = rec.unwrap();
        assert_eq!(rec[ratio].parse::<f64>().unwrap(), 1.0);
        assert_eq!(rec[gap].parse::<f64>().unwrap(), 0.0);
        n += 1;
    }
    assert_eq!(n, 2);
}

#[test]
fn market_solve_reaches_the_equilibrium() {
    let tmp = TempDir::new().unwrap();
    let o = grsaa(&[
        "solve",
        "--problem",
        "market",
        "--n",
        "3",
        "--N",
        "4000",
        "--L",
        "10",
        "--schedule",
        "random",
        "--out",
        &out_arg(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("summary.json")).unwrap())
            .unwrap();
    let x: Vec<f64> = summary["x"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let target = [0.40, 0.45, 0.15];
    let err = x
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err <= 0.015, "p = {x:?}");
}

#[test]
fn coercivity_report_is_written() {
    let tmp = TempDir::new().unwrap();
    let o = grsaa(&[
        "diagnose-coercivity",
        "--problem",
        "sin",
        "--n",
        "2",
        "--N",
        "200",
        "--L",
        "4",
        "--grid",
        "3",
        "--out",
        &out_arg(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("coercivity.json")).unwrap())
            .unwrap();
    assert!(report["points_checked"].as_u64().unwrap() > 0);
}
