use std::fs;
use std::process::Command;

use sdae_cli::{check_problem, run, EXIT_FAILED, EXIT_OK, EXIT_USAGE};
use sdae_core::experiment::{fit_slope, parse_report_csv, REPORT_HEADER};
use sdae_core::{builtin, Matrix, SdaeProblem};

fn sdae(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["sdae"];
    full.extend_from_slice(args);
    let code = run(full, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn data_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .skip(1)
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn binary_reports_usage_errors_with_exit_one() {
    let out = Command::new(env!("CARGO_BIN_EXE_sdae"))
        .args(["convergence", "--problem", "nope"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    for label in ["example51", "example52", "remark31", "linear_sanity"] {
        assert!(stderr.contains(label), "{stderr}");
    }

    let out = Command::new(env!("CARGO_BIN_EXE_sdae"))
        .args(["simulate", "--problem", "example51", "--frobnicate"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn every_subcommand_has_help() {
    for sub in ["convergence", "simulate", "check", "fit", "diagnose"] {
        let (code, out, _) = sdae(&[sub, "--help"]);
        assert_eq!(code, EXIT_OK, "{sub}");
        assert!(out.contains("Usage"), "{sub}: {out}");
    }
}

#[test]
fn bad_ladder_is_a_usage_error() {
    let (code, _, err) = sdae(&["convergence", "--problem", "example51", "--levels", "9..6"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("ladder"), "{err}");
    let (code, _, _) = sdae(&[
        "convergence", "--problem", "example51", "--levels", "6..13", "--paths", "4",
    ]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn convergence_csv_has_one_block_per_theta() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");
    let (code, _, err) = sdae(&[
        "convergence",
        "--problem",
        "example51",
        "--seed",
        "7",
        "--paths",
        "16",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next(), Some(REPORT_HEADER));
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 18);
    for (block, theta) in [0.5, 0.75, 1.0].iter().enumerate() {
        for (i, level) in (6..=11).enumerate() {
            let row = &rows[block * 6 + i];
            assert_eq!(row[0], "example51");
            assert_eq!(row[1].parse::<f64>().unwrap(), *theta);
            assert_eq!(row[2], level.to_string());
            assert_eq!(row[5], "16");
            assert_eq!(row[6], "0");
            assert_eq!(row[7], "7");
        }
    }
    let slope_rows = text.lines().filter(|l| l.starts_with("#slope,")).count();
    let intercept_rows = text.lines().filter(|l| l.starts_with("#intercept,")).count();
    assert_eq!((slope_rows, intercept_rows), (3, 3));
}

#[test]
fn reduced_ladder_for_example52() {
    let (code, out, err) = sdae(&[
        "convergence",
        "--problem",
        "example52",
        "--paths",
        "100",
        "--levels",
        "8..10",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let parsed = parse_report_csv(&out).unwrap();
    assert_eq!(parsed.rows.len(), 9);
    for (theta, slope) in &parsed.slopes {
        assert!((0.7..=1.3).contains(slope), "theta {theta}: slope {slope}");
    }
}

#[test]
fn output_does_not_depend_on_worker_count() {
    let args = |w: &'static str| {
        vec![
            "convergence", "--problem", "example52", "--paths", "12", "--levels", "5..7",
            "--ref-level", "9", "--workers", w,
        ]
    };
    let (c1, one, _) = sdae(&args("1"));
    let (c3, three, _) = sdae(&args("3"));
    assert_eq!((c1, c3), (EXIT_OK, EXIT_OK));
    assert_eq!(one, three);
}

#[test]
fn fit_reproduces_embedded_slopes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");
    let (code, _, _) = sdae(&[
        "convergence", "--problem", "example51", "--paths", "10", "--levels", "5..8",
        "--ref-level", "10", "--out", path.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);
    let parsed = parse_report_csv(&fs::read_to_string(&path).unwrap()).unwrap();
    let (code, out, _) = sdae(&["fit", "--in", path.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    let printed: Vec<(f64, f64)> = out
        .lines()
        .map(|l| {
            let fields: Vec<&str> = l.split_whitespace().collect();
            let value = |f: &str| f.split_once('=').unwrap().1.parse::<f64>().unwrap();
            (value(fields[0]), value(fields[1]))
        })
        .collect();
    assert_eq!(printed.len(), parsed.slopes.len());
    for ((t1, s1), (t2, s2)) in printed.iter().zip(&parsed.slopes) {
        assert_eq!(t1, t2);
        assert!((s1 - s2).abs() <= 1e-12, "{s1} vs {s2}");
    }
}

fn synthetic_csv(order: f64) -> String {
    let mut text = format!("{REPORT_HEADER}\n");
    for level in 6..=11 {
        let delta = 2f64.powi(-level);
        text.push_str(&format!(
            "synthetic,1,{level},{delta:e},{:e},10,0,1\n",
            delta.powf(order)
        ));
    }
    text
}

#[test]
fn fit_recovers_synthetic_orders_through_files() {
    let dir = tempfile::tempdir().unwrap();
    for order in [0.5, 1.0, 0.6264] {
        let path = dir.path().join(format!("s{order}.csv"));
        fs::write(&path, synthetic_csv(order)).unwrap();
        let (code, out, _) = sdae(&["fit", "--in", path.to_str().unwrap()]);
        assert_eq!(code, EXIT_OK);
        let slope: f64 = out
            .split_whitespace()
            .find_map(|f| f.strip_prefix("slope="))
            .unwrap()
            .parse()
            .unwrap();
        assert!((slope - order).abs() <= 1e-12, "{slope} vs {order}");
    }
}

#[test]
fn fit_rejects_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let (code, _, err) = sdae(&["fit", "--in", empty.to_str().unwrap()]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("line 1"), "{err}");

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, format!("{REPORT_HEADER}\nx,1,6,0.015625,0.1,10,0,1\nx,1,7\n")).unwrap();
    let (code, _, err) = sdae(&["fit", "--in", bad.to_str().unwrap()]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("line 3"), "{err}");

    let missing = dir.path().join("missing.csv");
    let (code, _, _) = sdae(&["fit", "--in", missing.to_str().unwrap()]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn simulate_linear_sanity_closed_form() {
    let (code, out, _) = sdae(&["simulate", "--problem", "linear_sanity", "--theta", "1.0", "--level", "3"]);
    assert_eq!(code, EXIT_OK);
    let rows = data_rows(&out);
    assert_eq!(rows.len(), 9);
    for (k, row) in rows.iter().enumerate() {
        let t: f64 = row[0].parse().unwrap();
        let x: f64 = row[1].parse().unwrap();
        assert!((t - k as f64 / 8.0).abs() < 1e-15);
        assert!((x - (1.0f64 + 0.125).powi(-(k as i32))).abs() <= 1e-10);
    }
}

#[test]
fn simulate_without_noise_stays_on_the_constraint() {
    let (code, out, _) = sdae(&["simulate", "--problem", "example51", "--no-noise"]);
    assert_eq!(code, EXIT_OK);
    let rows = data_rows(&out);
    assert_eq!(rows.len(), 1025);
    for row in rows {
        let v: Vec<f64> = row[..3].iter().map(|s| s.parse().unwrap()).collect();
        assert!((v[1] + v[2] + v[0].sin()).abs() <= 1e-3);
    }
}

#[test]
fn simulate_is_deterministic_and_writes_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let (code, _, _) = sdae(&[
            "simulate", "--problem", "example52", "--level", "8", "--seed", "3", "--out",
            p.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_OK);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let (code, out, _) = sdae(&["simulate", "--problem", "example52", "--level", "8", "--seed", "3", "--inherent"]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(data_rows(&out).len(), 257);
}

#[test]
fn check_passes_for_example51() {
    let (code, out, _) = sdae(&["check", "--problem", "example51"]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert!(!out.contains("FAIL"), "{out}");
}

#[test]
fn check_warns_but_passes_for_remark31() {
    let (code, out, _) = sdae(&["check", "--problem", "remark31"]);
    assert_eq!(code, EXIT_OK, "{out}");
    let line = out.lines().find(|l| l.contains("coupling probe")).unwrap();
    assert!(line.starts_with("WARN") && line.contains("unbounded"), "{line}");
}

fn tampered() -> SdaeProblem {
    let p = builtin("example51").unwrap();
    let base = p.clone();
    SdaeProblem::new(
        "tampered",
        2,
        2,
        1.0,
        move |t| base.a(t),
        move |t, x| p.drift(t, x),
        |_, _| Matrix::zeros(2, 2),
        vec![1.0, -1.0],
    )
    .unwrap()
    .with_jacobian(|_, _| Matrix::from_rows(&[[1.0, 1.0], [0.0, 0.0]]))
}

#[test]
fn check_fails_on_wrong_jacobian() {
    let mut out = Vec::new();
    let code = check_problem(&tampered(), 50, 0, &mut out);
    let out = String::from_utf8(out).unwrap();
    assert_eq!(code, EXIT_FAILED, "{out}");
    let line = out.lines().find(|l| l.contains("finite differences")).unwrap();
    assert!(line.starts_with("FAIL"), "{line}");
}

#[test]
fn diagnose_writes_moment_curve() {
    let (code, out, err) = sdae(&[
        "diagnose", "--problem", "example52", "--level", "7", "--paths", "20",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(data_rows(&out).len(), 129);
    assert!(out.contains("#holder_slope"));
    assert!(err.contains("holder slope"));
}

#[test]
fn synthetic_fit_matches_library() {
    let pts: Vec<(f64, f64)> = (6..=11).map(|l| 2f64.powi(-l)).map(|d| (d, 2.0 * d)).collect();
    let (s, _) = fit_slope(&pts).unwrap();
    assert!((s - 1.0).abs() < 1e-12);
}
