use std::path::Path;

use genlayer::data::Dataset;
use genlayer::experiments::presets::{self, Scale};
use genlayer::experiments::*;
use genlayer::network::{Activation, InitScheme, LayerParams, LayerSpec};
use genlayer::schedule::Schedule;
use genlayer::training::{Optimizer, TrainConfig};
use genlayer::{Error, Matrix};

fn config_key(err: Error) -> String {
    match err {
        Error::Config { key, .. } => key,
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn config_errors_name_the_offending_key() {
    let mut v: serde_json::Value = serde_json::from_str(&presets::linear_regression().to_json()).unwrap();
    v["experiment"]["train"]["train"]["lr_schedul"] = serde_json::json!(1);
    let key = config_key(ExperimentSpec::from_json(&v.to_string()).unwrap_err());
    assert_eq!(key, "experiment.train.train.lr_schedul");

    let mut v: serde_json::Value = serde_json::from_str(&presets::overfit(Scale::Desk).to_json()).unwrap();
    v["experiment"]["overfit"]["models"][1]["model"]["seed"] = serde_json::json!("x");
    let key = config_key(ExperimentSpec::from_json(&v.to_string()).unwrap_err());
    assert_eq!(key, "experiment.overfit.models[1].model.seed");

    let mut v: serde_json::Value = serde_json::from_str(&presets::linear_regression().to_json()).unwrap();
    v["schema_version"] = serde_json::json!(7);
    assert_eq!(config_key(ExperimentSpec::from_json(&v.to_string()).unwrap_err()), "schema_version");

    assert!(matches!(ExperimentSpec::from_json("{not json"), Err(Error::Config { .. })));
    assert!(matches!(
        ExperimentSpec::load(Path::new("/nonexistent/config.json")),
        Err(Error::Config { .. })
    ));
}

#[test]
fn missing_data_file_is_a_config_error() {
    let mut spec = presets::gld(Scale::Desk);
    if let Experiment::Gld(g) = &mut spec.experiment {
        g.data = DataSpec::Csv {
            path: "/nonexistent/data.csv".into(),
        };
    }
    assert_eq!(config_key(spec.validate().unwrap_err()), "experiment.gld.data.path");
}

#[test]
fn presets_round_trip_and_validate() {
    for scale in [Scale::Desk, Scale::Full] {
        for name in presets::NAMES {
            let spec = presets::by_name(name, scale).unwrap();
            let back = ExperimentSpec::from_json(&spec.to_json()).unwrap();
            assert_eq!(back, spec, "{name}");
        }
    }
}

#[test]
fn full_scale_parameter_counts() {
    let Experiment::Overfit(o) = presets::overfit(Scale::Full).experiment else {
        panic!("overfit preset");
    };
    let counts: Vec<usize> = o.models.iter().map(|m| m.model.num_params().unwrap()).collect();
    assert_eq!(counts, vec![35_998, 35_989, 36_160]);
}

#[test]
fn gl_preset_layout() {
    let Experiment::Gl(g) = presets::gl(Scale::Desk).experiment else {
        panic!("gl preset");
    };
    let net = g.model.build().unwrap();
    let hidden: usize = net.specs()[1..net.specs().len() - 1]
        .iter()
        .map(|s| s.depth_in_layers())
        .sum();
    assert_eq!(hidden, 90);
    let gl_blocks = net
        .specs()
        .iter()
        .filter(|s| matches!(s, LayerSpec::GenSkip { nu: genlayer::network::SkipStrength::Scheduled, .. }))
        .count();
    assert_eq!(gl_blocks, 3);
    assert_eq!(net.specs().len() - 2, 45);
}

#[test]
fn long_skip_wiring_spans_seven_layers() {
    let Experiment::LongSkip(l) = presets::longskip(Scale::Desk).experiment else {
        panic!("longskip preset");
    };
    let mut net = l.model.build().unwrap();
    let blocks = &net.specs()[1..net.specs().len() - 1];
    assert!(blocks.iter().all(|s| s.depth_in_layers() == 7));

    // With every branch silenced each block is the identity, so the output
    // only sees the input layer and the readout.
    let x = [0.7];
    for layer in net.layers_mut() {
        if let LayerParams::GenSkip { branch, .. } = layer {
            for lin in branch {
                lin.weight = Matrix::zeros(lin.weight.rows(), lin.weight.cols());
                if let Some(b) = &mut lin.bias {
                    b.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }
    let lin_in = net.linears()[0].clone();
    let lin_out = net.linears().last().copied().unwrap().clone();
    let h: Vec<f64> = (0..lin_in.weight.rows())
        .map(|i| (lin_in.weight.get(i, 0) * x[0] + lin_in.bias.as_ref().unwrap()[i]).max(0.0))
        .collect();
    let expected: f64 = (0..h.len()).map(|j| lin_out.weight.get(0, j) * h[j]).sum::<f64>()
        + lin_out.bias.as_ref().unwrap()[0];
    let got = net.predict_one(&x).unwrap()[0];
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

#[test]
fn histogram_edges_are_symmetric_and_he_tails_are_light() {
    let Experiment::Histogram(h) = presets::histogram(Scale::Desk).experiment else {
        panic!("histogram preset");
    };
    let net = h.model.build().unwrap();
    let hist = weight_histogram(&net, h.bins, h.range_std);
    assert_eq!(hist.edges.len(), h.bins + 1);
    for i in 0..=h.bins {
        assert_eq!(hist.edges[i], -hist.edges[h.bins - i]);
    }
    assert_eq!(hist.edges[h.bins / 2], 0.0);
    assert_eq!(hist.counts.iter().sum::<u64>() + hist.underflow + hist.overflow, hist.total);
    assert!(hist.tail_mass < 0.05, "tail mass {}", hist.tail_mass);
    assert!(hist.tail_mass > 0.03, "tail mass {}", hist.tail_mass);
}

fn tiny_train_spec() -> ExperimentSpec {
    presets::linear_regression()
}

#[test]
fn linear_regression_converges_to_least_squares() {
    let report = tiny_train_spec().run_in_memory().unwrap();
    let ExperimentReport::Train(t) = report else {
        panic!("train report");
    };
    let Experiment::Train(spec) = tiny_train_spec().experiment else {
        unreachable!()
    };
    let ds = spec.data.load().unwrap();
    // closed-form least squares for y = a·x + b
    let n = ds.len() as f64;
    let xs: Vec<f64> = (0..ds.len()).map(|r| ds.inputs.get(r, 0)).collect();
    let ys: Vec<f64> = (0..ds.len()).map(|r| ds.targets.get(r, 0)).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let a = sxy / sxx;
    let b = my - a * mx;
    let p = t.parameters.unwrap();
    assert!((p[0] - a).abs() < 1e-6, "slope {} vs {a}", p[0]);
    assert!((p[1] - b).abs() < 1e-6, "intercept {} vs {b}", p[1]);
    assert_eq!(t.run.bound_violations, 0);
}

#[test]
fn report_directory_layout_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_train_spec();
    spec.run(&dir.path().join("a")).unwrap();
    spec.run(&dir.path().join("b")).unwrap();
    for f in ["config.json", "history.csv", "histograms.csv", "bounds.csv", "summary.json"] {
        assert!(dir.path().join("a").join(f).is_file(), "{f}");
    }
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/history.csv"), read("b/history.csv"));

    let config: serde_json::Value = serde_json::from_slice(&read("a/config.json")).unwrap();
    assert_eq!(config["build_id"], BUILD_ID);
    assert_eq!(config["datasets"]["train"]["sha256"].as_str().unwrap().len(), 64);
    let summary: serde_json::Value = serde_json::from_slice(&read("a/summary.json")).unwrap();
    assert_eq!(summary["build_id"], BUILD_ID);

    let mut other = spec.clone();
    other.override_seed(99);
    other.run(&dir.path().join("c")).unwrap();
    assert_ne!(read("a/history.csv"), read("c/history.csv"));
}

#[test]
fn one_epoch_does_not_overfit() {
    let mut spec = presets::overfit(Scale::Desk);
    if let Experiment::Overfit(o) = &mut spec.experiment {
        for m in &mut o.models {
            if let Some(t) = &mut m.train {
                t.epochs = 1;
            }
        }
    }
    let ExperimentReport::Overfit(r) = spec.run_in_memory().unwrap() else {
        panic!("overfit report");
    };
    assert_eq!(r.floor_mse, 50.0);
    assert!(r.models.iter().all(|m| !m.overfit && m.epochs == 1));
}

fn write_blobs(dir: &Path) -> std::path::PathBuf {
    // Two noisy Gaussian blobs per class in 6 dimensions, 3 classes.
    let mut rng = genlayer::rng::SeededRng::new(4);
    let (n, d, k) = (60, 6, 3);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for r in 0..n {
        let c = r % k;
        for j in 0..d {
            x.push(if j % k == c { 1.0 } else { 0.0 } + 0.3 * rng.normal());
        }
        for j in 0..k {
            y.push(if j == c { 1.0 } else { 0.0 });
        }
    }
    let ds = Dataset::new(Matrix::new(n, d, x).unwrap(), Matrix::new(n, k, y).unwrap(), "blobs").unwrap();
    let path = dir.join("blobs.csv");
    ds.write_csv(&path).unwrap();
    path
}

#[test]
fn gld_demo_degenerate_dropout_matches_plain_network() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_blobs(dir.path());
    let mut train = TrainConfig::new(15, 3, Optimizer::Sgd, Schedule::constant(0.05));
    train.batch_size = 8;
    train.probe_size = 4;
    let spec = ExperimentSpec::new(
        "gld_small",
        Experiment::Gld(GldSpec {
            data: DataSpec::Csv { path: csv.clone() },
            test: DataSpec::Csv { path: csv },
            model: ModelSpec {
                architecture: Architecture::DropoutNet {
                    input: 6,
                    hidden: vec![8, 8],
                    output: 3,
                    activation: Activation::Relu,
                    gl_width: 5,
                    position: 2,
                    drop_prob: 0.5,
                    expand: false,
                    bias: true,
                },
                init: InitScheme::He,
                seed: 2,
            },
            train,
            drop_probs: vec![0.5, 0.6, 0.75],
            early_position: 1,
            bounds_points: 4,
        }),
    );
    let out = dir.path().join("report");
    let ExperimentReport::Gld(r) = spec.run(&out).unwrap() else {
        panic!("gld report");
    };
    assert!(r.p0_matches_plain);
    assert_eq!(r.runs.len(), 6);
    let ab = r.ablation.unwrap();
    assert_eq!(ab.drop_prob, 0.6);
    assert!(ab.late_test_accuracy.is_some() && ab.early_test_accuracy.is_some());
    for run in ["p0.5_late", "p0.6_early", "plain"] {
        assert!(out.join(run).join("history.csv").is_file());
    }
    assert!(out.join("summary.json").is_file());

    // masks are reproducible: a rerun gives the same histories
    let ExperimentReport::Gld(again) = spec.run_in_memory().unwrap() else {
        panic!("gld report");
    };
    assert_eq!(
        serde_json::to_string(&again.runs).unwrap(),
        serde_json::to_string(&r.runs).unwrap()
    );
}

#[test]
fn gl_schedule_reaches_target_and_holds() {
    let mut train = TrainConfig::new(
        520,
        1,
        Optimizer::Sgd,
        Schedule::StepDecay {
            initial: 1e-3,
            factor: 0.1,
            every: 200,
        },
    );
    train.nu_schedule = Schedule::LinearDecay {
        initial: 1.0,
        target: 0.1,
        end_epoch: 500,
    };
    train.batch_size = 10;
    let spec = ExperimentSpec::new(
        "gl_small",
        Experiment::Gl(GlSpec {
            data: DataSpec::Regression {
                function: genlayer::data::TargetFn::Cubic,
                n: 20,
                lo: -8.0,
                hi: 8.0,
                sigma: 10.0,
                seed: 1,
            },
            test: DataSpec::Grid {
                function: genlayer::data::TargetFn::Cubic,
                lo: -8.0,
                hi: 8.0,
                n: 17,
            },
            model: ModelSpec {
                architecture: Architecture::SkipNet {
                    input: 1,
                    width: 4,
                    blocks: 4,
                    block_depth: 1,
                    gl_blocks: vec![1, 3],
                    output: 1,
                    activation: Activation::Relu,
                    bias: true,
                },
                init: InitScheme::FanInUniform,
                seed: 1,
            },
            train,
            seeds: vec![5],
            sigma_ratio_limit: 1.5,
            bounds_points: 4,
        }),
    );
    let dir = tempfile::tempdir().unwrap();
    let ExperimentReport::Gl(r) = spec.run(dir.path()).unwrap() else {
        panic!("gl report");
    };
    assert_eq!(r.pairs.len(), 1);
    assert_eq!(r.pairs[0].nu_final, 0.1);
    let history = std::fs::read_to_string(dir.path().join("seed5_gl/history.csv")).unwrap();
    let nu_col = history.lines().next().unwrap().split(',').position(|c| c == "nu").unwrap();
    for line in history.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let epoch: usize = cols[0].parse().unwrap();
        let nu: f64 = cols[nu_col].parse().unwrap();
        // record `epoch` holds the value used during zero-based epoch `epoch - 1`
        if epoch > 500 {
            assert_eq!(nu, 0.1, "epoch {epoch}");
        } else {
            assert!(nu > 0.1);
        }
    }
    let vanilla = std::fs::read_to_string(dir.path().join("seed5_vanilla/history.csv")).unwrap();
    assert!(vanilla.lines().skip(1).all(|l| l.split(',').nth(nu_col) == Some("1.0")));
}
