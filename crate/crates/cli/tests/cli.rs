use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn spurious(args: &[&str], workers: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_spurious"));
    cmd.args(args);
    match workers {
        Some(w) => cmd.env("SPURIOUS_WORKERS", w),
        None => cmd.env_remove("SPURIOUS_WORKERS"),
    };
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = spurious(args, None);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(args: &[&str]) -> i32 {
    spurious(args, None).status.code().expect("exit code")
}

/// Rows of a CSV as floats, after checking the header.
fn read_csv(path: &Path, header: &str) -> Vec<Vec<f64>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), header, "{}", path.display());
    lines
        .map(|l| {
            l.split(',')
                .map(|f| {
                    let v: f64 = f.parse().unwrap();
                    assert!(v.is_finite(), "{}: {l}", path.display());
                    v
                })
                .collect()
        })
        .collect()
}

const CURVE: &str = "lambda,tau,c_sigma,l_sigma,bound1,bound2,bound3";
const AGGREGATE: &str = "lambda,c_mean,c_std,l_mean,l_std,n_seeds";

#[test]
fn tau_on_isotropic_model() {
    let out = ok(&["tau", "--lambda", "1", "--set", r#"model={"d":1,"sigma":[1,0,0,1]}"#, "--set", "n=4"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let tau = v["tau"].as_f64().unwrap();
    assert!((tau - (0.5 + 4.25f64.sqrt()) / 2.0).abs() < 1e-12, "{tau}");
    assert_eq!(v["c_sigma"].as_f64().unwrap(), 0.0);
    assert!(v["residual"].as_f64().unwrap().abs() <= 1e-12);
    assert!((v["l_sigma"].as_f64().unwrap() - 0.625459).abs() < 1e-6);
}

#[test]
fn curves_are_reproducible_and_independent_of_workers() {
    let dir = tempfile::tempdir().unwrap();
    let args = |name: &str| {
        vec![
            "curves".to_string(),
            "--desk".into(),
            "--set".into(),
            "lambda_grid.count=6".into(),
            "--set".into(),
            "seeds.count=4".into(),
            "-o".into(),
            dir.path().join(name).to_string_lossy().into_owned(),
        ]
    };
    for (name, workers) in [("a", "1"), ("b", "1"), ("c", "3")] {
        let a = args(name);
        let a: Vec<&str> = a.iter().map(String::as_str).collect();
        let out = spurious(&a, Some(workers));
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["curve.csv", "trials.csv", "aggregate.csv", "thresholds.json"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        assert_eq!(a, fs::read(dir.path().join("b").join(file)).unwrap(), "{file} differs between reruns");
        assert_eq!(a, fs::read(dir.path().join("c").join(file)).unwrap(), "{file} depends on the worker count");
    }
    let curve = read_csv(&dir.path().join("a/curve.csv"), CURVE);
    assert_eq!(curve.len(), 6);
    read_csv(&dir.path().join("a/aggregate.csv"), AGGREGATE);
    read_csv(&dir.path().join("a/trials.csv"), "lambda,seed,c_emp,l_emp");
    let meta: Value = serde_json::from_slice(&fs::read(dir.path().join("a/metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["command"], "curves");
    assert_eq!(meta["config"]["n"], 500);
    assert_eq!(meta["model_fingerprint"].as_str().unwrap().len(), 64);
}

#[test]
fn vanishing_regularization_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_string_lossy().into_owned();
    ok(&[
        "curves",
        "--desk",
        "--set",
        "lambda_grid={\"min\":1e-7,\"max\":1e-7,\"count\":1}",
        "--set",
        "seeds.count=2",
        "-o",
        &out,
    ]);
    let curve = read_csv(&dir.path().join("curve.csv"), CURVE);
    assert_eq!(curve.len(), 1);
    assert!(curve[0][2].abs() < 1e-3, "{:?}", curve[0]);
}

#[test]
fn default_model_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_string_lossy().into_owned();
    ok(&["curves", "--set", "lambda_grid.count=40", "--set", "seeds.count=2", "-o", &out]);
    let curve = read_csv(&dir.path().join("curve.csv"), CURVE);
    let t: Value = serde_json::from_slice(&fs::read(dir.path().join("thresholds.json")).unwrap()).unwrap();
    let lambda_c = t["thresholds"]["lambda_c"].as_f64().unwrap();
    let c: Vec<f64> = curve.iter().map(|r| r[2]).collect();
    let peak = (0..c.len()).max_by(|&a, &b| c[a].total_cmp(&c[b])).unwrap();
    // rises, then falls, with the peak within a grid step or two of λ_C
    assert!(peak > 0 && peak < c.len() - 1);
    assert!(c[..=peak].windows(2).all(|w| w[1] >= w[0]));
    assert!(c[peak..].windows(2).all(|w| w[1] <= w[0]));
    let ratio = curve[peak][0] / lambda_c;
    assert!((0.25..=4.0).contains(&ratio), "peak at {} vs λ_C {lambda_c}", curve[peak][0]);
    let best = (0..curve.len()).min_by(|&a, &b| curve[a][3].total_cmp(&curve[b][3])).unwrap();
    assert!(curve[best][0] <= lambda_c, "argmin L at {} beyond λ_C {lambda_c}", curve[best][0]);
}

#[test]
fn empirical_means_track_deterministic_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_string_lossy().into_owned();
    ok(&["curves", "--desk", "--set", "lambda_grid.count=8", "-o", &out]);
    let curve = read_csv(&dir.path().join("curve.csv"), CURVE);
    let agg = read_csv(&dir.path().join("aggregate.csv"), AGGREGATE);
    for (p, a) in curve.iter().zip(&agg) {
        assert_eq!(p[0], a[0]);
        let se = |std: f64| std / a[5].sqrt();
        assert!((a[1] - p[2]).abs() <= 3.0 * se(a[2]), "C at λ = {}: {} vs {}", p[0], a[1], p[2]);
        assert!((a[3] - p[3]).abs() <= 3.0 * se(a[4]), "L at λ = {}: {} vs {}", p[0], a[3], p[3]);
    }
}

#[test]
fn noise_subtraction_shifts_losses() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, flag: &str| {
        let out = dir.path().join(name).to_string_lossy().into_owned();
        let set = format!("subtract_noise={flag}");
        ok(&["curves", "--set", "model.d=20", "--set", "n=100", "--set", "lambda_grid.count=3", "--set", &set, "-o", &out]);
        (read_csv(&dir.path().join(name).join("curve.csv"), CURVE), read_csv(&dir.path().join(name).join("aggregate.csv"), AGGREGATE))
    };
    let (raw_c, raw_a) = run("raw", "false");
    let (sub_c, sub_a) = run("sub", "true");
    for (r, s) in raw_c.iter().zip(&sub_c) {
        assert!((r[3] - 0.25 - s[3]).abs() < 1e-12);
        assert_eq!(r[2], s[2]);
    }
    for (r, s) in raw_a.iter().zip(&sub_a) {
        assert!((r[3] - 0.25 - s[3]).abs() < 1e-12);
        assert!((r[4] - s[4]).abs() < 1e-12);
    }
}

#[test]
fn simplicity_directions() {
    let dir = tempfile::tempdir().unwrap();
    let ev = dir.path().join("ev").to_string_lossy().into_owned();
    ok(&["simplicity", "--desk", "--set", "seeds.count=3", "-o", &ev]);
    let header = "axis_value,c_sigma,l_sigma,c_emp_mean,l_emp_mean,c_emp_std,l_emp_std,n_seeds";
    let rows = read_csv(&dir.path().join("ev/simplicity.csv"), header);
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), vec![1.5, 2.0, 3.0, 5.0]);
    assert!(rows.windows(2).all(|w| w[1][1] > w[0][1] && w[1][2] < w[0][2]));

    // at ev_max_yy = 1 the largest admissible beta is 1, where Σxy = 0
    let beta = dir.path().join("beta").to_string_lossy().into_owned();
    ok(&[
        "simplicity",
        "--desk",
        "--set",
        "model.ev_max_yy=1",
        "--set",
        r#"simplicity={"axis":"beta","values":[0.25,0.5,1.0],"lambda":1.0}"#,
        "--set",
        "seeds.count=2",
        "-o",
        &beta,
    ]);
    let rows = read_csv(&dir.path().join("beta/simplicity.csv"), header);
    assert!(rows[2][1].abs() < 1e-12, "{:?}", rows[2]);
    assert!(rows.windows(2).all(|w| w[1][1] < w[0][1]));
}

#[test]
fn rf_equivalence_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, workers: &str| {
        let out = dir.path().join(name).to_string_lossy().into_owned();
        let args = [
            "rf-equiv",
            "--set",
            "model.d=20",
            "--set",
            "n=80",
            "--set",
            "seeds.count=3",
            "--set",
            "rf.p_ladder=[200,800,3200]",
            "--set",
            "rf.mc_samples=5000",
            "--set",
            "rf.feature_budget=40000",
            "-o",
            &out,
        ];
        let o = spurious(&args, Some(workers));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    run("a", "1");
    run("b", "1");
    run("c", "3");
    for file in ["ladder_tanh.csv", "ladder_hermite_mix.csv", "rf_spurious.csv", "equivalence_tanh.json"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        assert_eq!(a, fs::read(dir.path().join("b").join(file)).unwrap(), "{file} differs between reruns");
        assert_eq!(a, fs::read(dir.path().join("c").join(file)).unwrap(), "{file} depends on the worker count");
    }
    for act in ["tanh", "hermite_mix"] {
        let rows = read_csv(&dir.path().join(format!("a/ladder_{act}.csv")), "p,mean_gap,max_gap,seed");
        assert_eq!(rows.len(), 9);
        let mean_at = |p: f64| {
            let g: Vec<f64> = rows.iter().filter(|r| r[0] == p).map(|r| r[1]).collect();
            g.iter().sum::<f64>() / g.len() as f64
        };
        assert!(mean_at(200.0) > mean_at(800.0) && mean_at(800.0) > mean_at(3200.0), "{act}");
    }
    let report: Value =
        serde_json::from_slice(&fs::read(dir.path().join("a/equivalence_tanh.json")).unwrap()).unwrap();
    let first = &report.as_array().unwrap()[0];
    for key in ["activation", "d", "n", "p", "lambda", "lambda_tilde", "max_gap", "mean_gap", "seed"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    let rf = read_csv_mixed(&dir.path().join("a/rf_spurious.csv"));
    assert_eq!(rf.len(), 2);
    assert_eq!(rf[0].0, "tanh");
    assert_eq!(rf[1].0, "hermite_mix");
    // λ̃ for the mixture: 0.01 · 2d/n
    assert!((rf[1].1[1] - 0.005).abs() < 1e-12);
}

fn read_csv_mixed(path: &Path) -> Vec<(String, Vec<f64>)> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "activation,lambda,lambda_tilde,c_rf,c_rf_se,c_rf_exact,c_rf_linear,c_sigma,n_seeds,m"
    );
    lines
        .map(|l| {
            let mut f = l.split(',');
            let name = f.next().unwrap().to_string();
            (name, f.map(|v| v.parse().unwrap()).collect())
        })
        .collect()
}

#[test]
fn validate_model_reports() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"d": 1, "sigma": [1, 2, 2, 1]}"#).unwrap();
    let out = spurious(&["validate-model", "--model", bad.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["passes"], false);
    assert!(v["diagnostics"]["lambda_min"].as_f64().unwrap() < 0.0);

    let unnormalized = dir.path().join("scaled.json");
    fs::write(&unnormalized, r#"{"d": 1, "sigma": [2, 0, 0, 2]}"#).unwrap();
    let path = unnormalized.to_str().unwrap();
    assert_eq!(code(&["validate-model", "--model", path]), 2);
    assert_eq!(code(&["validate-model", "--model", path, "--set", "require_trace_normalized=false"]), 0);

    let v: Value = serde_json::from_slice(&ok(&["validate-model", "--desk"]).stdout).unwrap();
    assert_eq!(v["passes"], true);
    assert_eq!(v["diagnostics"]["d"], 100);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_string_lossy().into_owned();
    assert_eq!(code(&["tau", "--lambda", "0"]), 2);
    assert_eq!(code(&["tau", "--lambda", "1", "--set", "no_such_key=1"]), 2);
    assert_eq!(code(&["tau", "--lambda", "1", "--set", "n"]), 2);
    assert_eq!(code(&["tau", "--lambda", "1", "--config", "/nonexistent/config.json"]), 2);
    assert_eq!(code(&["tau", "--lambda", "1", "--set", "model.beta=5"]), 2);
    assert_eq!(code(&["tau", "--lambda", "1", "--set", r#"model={"path":"missing.json"}"#]), 2);
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(spurious(&["tau", "--lambda", "1"], Some("0")).status.code(), Some(2));
    // the identity kernel has rank 2d < n, so the ridgeless fit is singular
    assert_eq!(
        code(&[
            "rf-equiv",
            "--set",
            "model.d=5",
            "--set",
            "n=40",
            "--set",
            "seeds.count=1",
            "--set",
            r#"rf.activations=[{"kind":"identity"}]"#,
            "--set",
            "rf.p_ladder=[100]",
            "-o",
            &out,
        ]),
        3
    );
}

#[test]
fn config_file_with_model_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("model.json"), r#"{"d": 1, "sigma": [1, 0, 0, 1]}"#).unwrap();
    let cfg = dir.path().join("exp.json");
    fs::write(&cfg, r#"{"model": {"path": "model.json"}, "n": 4, "ground_truth": {"sigma2": 0.25}}"#).unwrap();
    let v: Value = serde_json::from_slice(&ok(&["tau", "--lambda", "1", "--config", cfg.to_str().unwrap()]).stdout).unwrap();
    assert_eq!(v["d"], 1);
    assert!((v["l_sigma"].as_f64().unwrap() - 0.625459).abs() < 1e-6);
}
