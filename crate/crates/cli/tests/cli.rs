use std::path::Path;
use std::process::{Command, Output};

use genlayer::experiments::presets;
use genlayer::network::{save_checkpoint, Activation, Network};
use genlayer::Matrix;

fn genlayer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genlayer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read_bounds(dir: &Path) -> Vec<std::collections::HashMap<String, String>> {
    let mut rd = csv::Reader::from_path(dir.join("bounds.csv")).unwrap();
    let header: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
    rd.records()
        .map(|r| {
            let r = r.unwrap();
            header.iter().cloned().zip(r.iter().map(String::from)).collect()
        })
        .collect()
}

#[test]
fn gen_data_defaults_write_100_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("q.csv");
    let o = genlayer(&["gen-data", "--fn", "quadratic", "--n", "100", "--lo", "-8", "--hi", "8", "--sigma", "10", "--seed", "3", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 101);
    assert!(text.starts_with("x"));

    let bare = dir.path().join("bare.csv");
    let o = genlayer(&["gen-data", "--fn", "cubic", "--out", p(&bare)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&bare).unwrap().lines().count(), 101);
}

#[test]
fn gen_data_rejects_single_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("one.csv");
    let o = genlayer(&["gen-data", "--fn", "quadratic", "--n", "1", "--out", p(&out)]);
    assert!(!o.status.success());
    assert!(!stderr(&o).is_empty());
    assert!(!out.exists());

    let o = genlayer(&["gen-data", "--fn", "sine", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = genlayer(&["gen-data", "--fn", "quadratic", "--bogus", "1", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_data_is_deterministic_in_seed() {
    let dir = tempfile::tempdir().unwrap();
    let files: Vec<_> = ["a", "b", "c"].iter().map(|n| dir.path().join(format!("{n}.csv"))).collect();
    for (f, seed) in files.iter().zip(["7", "7", "8"]) {
        let o = genlayer(&["gen-data", "--fn", "cubic", "--seed", seed, "--out", p(f)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |f: &Path| std::fs::read(f).unwrap();
    assert_eq!(read(&files[0]), read(&files[1]));
    assert_ne!(read(&files[0]), read(&files[2]));
}

#[test]
fn train_missing_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = genlayer(&["train", "--config", p(&dir.path().join("nope.json")), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn train_malformed_key_exits_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let text = presets::linear_regression().to_json().replace("\"lr_schedule\"", "\"lr_schedul\"");
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, text).unwrap();
    let o = genlayer(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("experiment.train.train.lr_schedul"), "{}", stderr(&o));
}

#[test]
fn train_without_output_dir_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("lin.json");
    std::fs::write(&cfg, presets::linear_regression().to_json()).unwrap();
    let o = genlayer(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_linear_config_converges_to_least_squares() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("lin.json");
    let spec = presets::linear_regression();
    std::fs::write(&cfg, spec.to_json()).unwrap();
    let run = dir.path().join("run");
    let o = genlayer(&["train", "--config", p(&cfg), "--out", p(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    // The resolved config is echoed first.
    assert!(stdout(&o).contains("\"schema_version\""));
    for f in ["config.json", "history.csv", "histograms.csv", "bounds.csv", "summary.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    // Closed-form least squares on the same data.
    let ds = match &spec.experiment {
        genlayer::experiments::Experiment::Train(t) => t.data.load().unwrap(),
        _ => unreachable!(),
    };
    let n = ds.len() as f64;
    let xs: Vec<f64> = (0..ds.len()).map(|r| ds.inputs.get(r, 0)).collect();
    let ys: Vec<f64> = (0..ds.len()).map(|r| ds.targets.get(r, 0)).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let ls_loss: f64 = xs.iter().zip(&ys).map(|(x, y)| 0.5 * (slope * x + icpt - y).powi(2)).sum::<f64>() / n;

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    let final_loss = summary["final_train_loss"].as_f64().unwrap();
    assert!((final_loss - ls_loss).abs() < 1e-6, "{final_loss} vs {ls_loss}");
    assert_eq!(summary["bound_violations"].as_u64(), Some(0));
}

#[test]
fn seed_override_changes_history() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("lin.json");
    std::fs::write(&cfg, presets::linear_regression().to_json()).unwrap();
    let hist = |args: &[&str], name: &str| {
        let run = dir.path().join(name);
        let mut full = vec!["train", "--config", p(&cfg), "--out", p(&run)];
        full.extend_from_slice(args);
        let o = genlayer(&full);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(run.join("history.csv")).unwrap()
    };
    let base = hist(&[], "base");
    assert_eq!(base, hist(&[], "again"));
    assert_ne!(base, hist(&["--seed", "99"], "seeded"));
}

fn fixture_checkpoint(dir: &Path, w1: &[f64], w2: &[f64]) -> std::path::PathBuf {
    let net = Network::from_dense_weights(
        vec![Matrix::column(w1), Matrix::row_vector(w2)],
        &[Activation::Relu, Activation::Relu],
    )
    .unwrap();
    let path = dir.join("net.json");
    save_checkpoint(&path, &net, serde_json::json!({})).unwrap();
    path
}

fn one_d_data(dir: &Path, xs: &[f64]) -> std::path::PathBuf {
    let path = dir.join("data.csv");
    let mut text = String::from("x0,y0\n");
    for x in xs {
        text.push_str(&format!("{x},0\n"));
    }
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn analyze_fixture_matches_hand_values() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = fixture_checkpoint(dir.path(), &[2.0, -3.0], &[1.0, 1.0]);
    let data = one_d_data(dir.path(), &[1.0]);
    let out = dir.path().join("an");
    let o = genlayer(&["analyze", "--checkpoint", p(&ckpt), "--data", p(&data), "--loss", "squared", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_bounds(&out);
    assert_eq!(rows.len(), 1);
    let get = |k: &str| rows[0][k].parse::<f64>().unwrap();
    assert_eq!(get("sigma_max"), 4.0);
    assert_eq!(get("trace_bound"), 52.0);
    assert_eq!(get("spectral_bound"), 104.0);
    assert_eq!(rows[0]["violation"], "0");
    assert!(out.join("summary.json").exists());
}

#[test]
fn analyze_zero_weights_gives_zero_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = fixture_checkpoint(dir.path(), &[0.0, 0.0], &[0.0, 0.0]);
    let data = one_d_data(dir.path(), &[-2.0, 0.5, 3.0]);
    let out = dir.path().join("an");
    let o = genlayer(&["analyze", "--checkpoint", p(&ckpt), "--data", p(&data), "--loss", "squared", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_bounds(&out);
    assert_eq!(rows.len(), 3);
    for row in &rows {
        for k in ["sigma_max", "trace_bound", "spectral_bound"] {
            assert_eq!(row[k].parse::<f64>().unwrap(), 0.0, "{k}");
        }
        assert_eq!(row["violation"], "0");
    }
}

#[test]
fn analyze_dimension_mismatch_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = fixture_checkpoint(dir.path(), &[2.0, -3.0], &[1.0, 1.0]);
    let data = dir.path().join("wide.csv");
    std::fs::write(&data, "x0,x1,y0\n1,2,0\n").unwrap();
    let o = genlayer(&[
        "analyze", "--checkpoint", p(&ckpt), "--data", p(&data), "--loss", "squared", "--out", p(&dir.path().join("an")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn verify_passes_on_a_clean_build() {
    let start = std::time::Instant::now();
    let o = genlayer(&["verify", "--quick"]);
    assert!(start.elapsed().as_secs() <= 60);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn verify_full_suite_passes() {
    let o = genlayer(&["verify"]);
    assert!(o.status.success(), "{}", stdout(&o));
}

#[test]
fn verify_catches_hessian_sign_flip() {
    let o = genlayer(&["verify", "--quick", "--inject-fault", "hessian-sign-flip"]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.contains("FAIL psd"), "{out}");
    assert!(stderr(&o).contains("psd"));
}

#[test]
fn preset_files_load_back() {
    let dir = tempfile::tempdir().unwrap();
    for name in presets::NAMES.iter().chain(["linear_regression"].iter()) {
        let out = dir.path().join(format!("{name}.json"));
        let o = genlayer(&["preset", name, "--scale", "full", "--out", p(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let spec = genlayer::experiments::ExperimentSpec::load(&out).unwrap();
        assert_eq!(spec, presets::by_name(name, presets::Scale::Full).unwrap());
    }
    let o = genlayer(&["preset", "nonesuch", "--out", p(&dir.path().join("x.json"))]);
    assert_eq!(o.status.code(), Some(2));
}
