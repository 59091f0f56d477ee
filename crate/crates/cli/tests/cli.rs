use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn qerf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qerf"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("QERF_WORKERS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = qerf(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const COVS: &str = "c1,c2,c3,c4,c5,c6";

fn simulated(dir: &Path, n: usize) -> std::path::PathBuf {
    let path = dir.join("data.csv");
    ok(&["simulate", "--seed", "11", "--n", &n.to_string(), "--out", p(&path)]);
    path
}

#[test]
fn simulate_shape_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    ok(&["simulate", "--seed", "1", "--n", "10", "--scenario", "A", "--out", p(&a)]);
    ok(&["simulate", "--seed", "1", "--n", "10", "--out", p(&b)]);
    let text = fs::read_to_string(&a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "c1,c2,c3,c4,c5,c6,w,y");
    assert_eq!(lines.len(), 11);
    assert_eq!(text, fs::read_to_string(&b).unwrap());

    let out = qerf(&["simulate", "--seed", "1", "--n", "0", "--out", p(&tmp.path().join("c.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("c.csv").exists());

    let out = qerf(&["simulate", "--n", "5", "--out", p(&tmp.path().join("d.csv"))]);
    assert_eq!(out.status.code(), Some(2), "seed is mandatory");
}

#[test]
fn design_then_analyze() {
    let tmp = TempDir::new().unwrap();
    let data = simulated(tmp.path(), 1500);
    let des = tmp.path().join("design");
    ok(&["design", "--input", p(&data), "--exposure-col", "w", "--covariate-cols", COVS, "--out", p(&des)]);
    for f in ["matched.csv", "balance.csv", "balance.svg", "manifest.json"] {
        assert!(des.join(f).exists(), "{f}");
    }
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(des.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["outcome_read"], false);
    assert_eq!(m["tuning_grid"].as_array().unwrap().len(), 100);
    let matched = fs::read_to_string(des.join("matched.csv")).unwrap();
    let first = matched.lines().nth(1).unwrap();
    // Outcome-blind design leaves the matched outcome empty.
    assert_eq!(first.split(',').nth(4), Some(""));

    let an = tmp.path().join("an");
    ok(&["analyze", "--design", p(&des), "--outcome-col", "y", "--taus", "0.5", "--out", p(&an)]);
    let csvs: Vec<_> = fs::read_dir(&an)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|f| f.starts_with("qerf_"))
        .collect();
    assert_eq!(csvs.len(), 2, "{csvs:?}");
    let curve = fs::read_to_string(an.join("qerf_tau0.5.csv")).unwrap();
    assert_eq!(curve.lines().count(), 51);
    assert!(curve.lines().skip(1).all(|l| l.ends_with(",,")), "no bands without bootstrap");

    // Effects for increments of one start one unit above the grid minimum.
    let grid_min: f64 = curve.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    let qee = fs::read_to_string(an.join("qee.csv")).unwrap();
    let ws: Vec<f64> = qee.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(!ws.is_empty() && ws.len() < 50);
    assert!(ws.iter().all(|&w| w >= grid_min + 1.0 - 1e-9));
}

#[test]
fn fixed_design_skips_grid() {
    let tmp = TempDir::new().unwrap();
    let data = simulated(tmp.path(), 600);
    let des = tmp.path().join("design");
    ok(&[
        "design", "--input", p(&data), "--exposure-col", "w", "--covariate-cols", COVS, "--delta", "0.5", "--lambda",
        "0.4", "--out", p(&des),
    ]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(des.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["delta"], 0.5);
    assert_eq!(m["lambda"], 0.4);
    assert!(m["tuning_grid"].is_null());
    assert_eq!(m["config"]["design"]["delta"], 0.5);
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = TempDir::new().unwrap();
    let data = simulated(tmp.path(), 600);
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        format!(
            "seed = 5\n[data]\ninput = \"{}\"\nexposure_col = \"w\"\ncovariate_cols = [\"c1\", \"c2\", \"c3\", \"c4\", \"c5\", \"c6\"]\n[design]\ndelta = 0.25\nlambda = 0.6\n",
            p(&data)
        ),
    )
    .unwrap();
    let des = tmp.path().join("design");
    ok(&["--config", p(&cfg), "design", "--delta", "0.75", "--lambda", "1", "--out", p(&des)]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(des.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["delta"], 0.75);
    assert_eq!(m["config"]["seed"], 5);

    fs::write(&cfg, "[data]\nexposure = \"w\"\n").unwrap();
    let out = qerf(&["--config", p(&cfg), "design", "--out", p(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn validation_exit_codes_and_cleanup() {
    let tmp = TempDir::new().unwrap();
    let data = simulated(tmp.path(), 200);
    let out_dir = tmp.path().join("bad");
    let out = qerf(&["design", "--input", p(&data), "--exposure-col", "dose", "--covariate-cols", COVS, "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dose"));
    assert!(!out_dir.join("manifest.json").exists());

    let out = qerf(&["bench", "--seed", "1", "--scenario", "E", "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    let out = qerf(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    // A caliper wider than the exposure range is a numerical failure.
    let out = qerf(&[
        "design", "--input", p(&data), "--exposure-col", "w", "--covariate-cols", COVS, "--delta", "1000", "--lambda",
        "0.5", "--out", p(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!out_dir.join("matched.csv").exists());
}

#[test]
fn analyze_with_bands_and_nesting() {
    let tmp = TempDir::new().unwrap();
    let data = simulated(tmp.path(), 800);
    let des = tmp.path().join("design");
    ok(&[
        "design", "--input", p(&data), "--exposure-col", "w", "--covariate-cols", COVS, "--delta", "0.5", "--lambda",
        "0.6", "--out", p(&des),
    ]);
    let run = |alpha: &str, dir: &str| {
        let out = tmp.path().join(dir);
        ok(&[
            "analyze", "--design", p(&des), "--outcome-col", "y", "--taus", "0.5", "--grid-size", "12", "--h-mean", "1.5",
            "--replicates", "20", "--alpha", alpha, "--seed", "4", "--workers", "2", "--out", p(&out),
        ]);
        let text = fs::read_to_string(out.join("qerf_tau0.5.csv")).unwrap();
        text.lines()
            .skip(1)
            .map(|l| {
                let f: Vec<f64> = l.split(',').skip(3).map(|v| v.parse().unwrap()).collect();
                (f[0], f[1])
            })
            .collect::<Vec<_>>()
    };
    let wide = run("0.05", "wide");
    let narrow = run("0.5", "narrow");
    for ((lw, uw), (ln, un)) in wide.iter().zip(&narrow) {
        assert!(lw <= ln && un <= uw);
    }
    let qee = fs::read_to_string(tmp.path().join("wide/qee.csv")).unwrap();
    assert!(qee.lines().skip(1).all(|l| !l.ends_with(",,")));
}

#[test]
fn bands_command() {
    let tmp = TempDir::new().unwrap();
    let data = simulated(tmp.path(), 600);
    let des = tmp.path().join("design");
    ok(&[
        "design", "--input", p(&data), "--exposure-col", "w", "--covariate-cols", COVS, "--delta", "0.5", "--lambda",
        "0.6", "--out", p(&des),
    ]);
    let out = tmp.path().join("bands");
    ok(&[
        "bands", "--design", p(&des), "--outcome-col", "y", "--taus", "0.25,0.75", "--grid-size", "10", "--replicates",
        "10", "--seed", "2", "--out", p(&out),
    ]);
    let text = fs::read_to_string(out.join("bands.csv")).unwrap();
    assert_eq!(text.lines().count(), 21);
    assert!(out.join("bands.svg").exists());
}

#[test]
fn bench_is_reproducible_and_filtered() {
    let tmp = TempDir::new().unwrap();
    let run = |dir: &str, workers: &str, extra: &[&str]| {
        let out = tmp.path().join(dir);
        let mut args = vec![
            "bench", "--seed", "7", "--reps", "2", "--truth-draws", "10000", "--grid-size", "10",
            "--workers", workers, "--out", p(&out),
        ];
        args.extend_from_slice(extra);
        ok(&args);
        out
    };
    let a = run("a", "1", &["--scenario", "A", "--n", "250"]);
    let b = run("b", "3", &["--scenario", "A", "--n", "250"]);
    for f in ["bench.csv", "bench_qerf.txt", "bench_qee.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let c = run("c", "1", &["--scenario", "all", "--n", "250,300", "--estimators", "matching-s,iptw", "--taus", "0.5"]);
    let text = fs::read_to_string(c.join("bench_qerf.txt")).unwrap();
    assert_eq!(text.matches("Scenario").count(), 8);
    assert!(text.contains("Matching-S") && text.contains("IPTW"));
    assert!(!text.contains(" Matching "));
}
