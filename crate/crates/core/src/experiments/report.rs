//! Single training runs and their report directories.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::bregman::{BregmanLoss, LossKind};
use crate::data::Dataset;
use crate::error::Result;
use crate::geometry::{analyze_bounds, group_sigma_product, spectral_summary, BoundChainReport};
use crate::network::{LayerParams, Linear, Network, ParamGroup};
use crate::training::{probe_rows, train, History, Hooks, NoHooks, StopAtZeroTrainError, TrainConfig};

use super::{
    ExperimentSpec, ModelSpec, RunContext, BUILD_ID, GL_SIGMA_RATIO_LIMIT, HISTOGRAM_BINS,
    HISTOGRAM_RANGE_STD, OVERFIT_FACTOR, SCHEMA_VERSION, TAIL_STD,
};

/// Histogram of weights measured in units of each layer's init std.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightHistogram {
    /// `bins + 1` edges, antisymmetric about zero.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
    pub total: u64,
    /// Fraction of weights with `|w| > 2·init_std`.
    pub tail_mass: f64,
}

fn weight_matrices(net: &Network) -> Vec<&Linear> {
    let mut out = Vec::new();
    for layer in net.layers() {
        match layer {
            LayerParams::Dense(l) => out.push(l),
            LayerParams::GenSkip { branch, skip, .. } => {
                out.extend(branch.iter());
                out.extend(skip.iter());
            }
            LayerParams::GenDropout { gate, out: o } => {
                out.push(gate);
                out.push(o);
            }
        }
    }
    out
}

/// Weights (biases excluded) divided by the init std of their layer, binned
/// over `[-range_std, range_std]`.
pub fn weight_histogram(net: &Network, bins: usize, range_std: f64) -> WeightHistogram {
    let bins = bins.max(1);
    let half = bins as f64 / 2.0;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| range_std * ((i as f64 - half) / half))
        .collect();
    let mut h = WeightHistogram {
        edges,
        counts: vec![0; bins],
        underflow: 0,
        overflow: 0,
        total: 0,
        tail_mass: 0.0,
    };
    let mut tail = 0u64;
    for lin in weight_matrices(net) {
        let (fan_out, fan_in) = lin.weight.shape();
        let std = net.init_scheme().weight_std(fan_in, fan_out);
        for &w in lin.weight.data() {
            let z = w / std;
            h.total += 1;
            if z.abs() > TAIL_STD {
                tail += 1;
            }
            if z < -range_std {
                h.underflow += 1;
            } else if z > range_std {
                h.overflow += 1;
            } else {
                let i = ((z + range_std) / (2.0 * range_std) * bins as f64).floor() as usize;
                h.counts[i.min(bins - 1)] += 1;
            }
        }
    }
    h.tail_mass = if h.total == 0 { 0.0 } else { tail as f64 / h.total as f64 };
    h
}

fn histograms_csv(stages: &[(&str, &WeightHistogram)]) -> String {
    let mut out = String::from("stage,bin,lo,hi,count\n");
    for (stage, h) in stages {
        for (i, c) in h.counts.iter().enumerate() {
            out.push_str(&format!("{stage},{i},{:?},{:?},{c}\n", h.edges[i], h.edges[i + 1]));
        }
    }
    out
}

/// Name, size and checksum of a dataset, computed once per experiment.
#[derive(Clone, Debug, Serialize)]
pub(crate) struct DataInfo {
    pub name: String,
    pub rows: usize,
    pub sha256: String,
}

impl DataInfo {
    pub fn of(ds: &Dataset) -> Self {
        Self {
            name: ds.meta.name.clone(),
            rows: ds.len(),
            sha256: ds.checksum(),
        }
    }
}

/// Everything one training run needs.
pub(crate) struct RunInput<'a> {
    /// Subdirectory name; `None` writes into the experiment directory itself.
    pub dir: Option<String>,
    pub label: String,
    pub model: &'a ModelSpec,
    pub train: TrainConfig,
    pub train_set: &'a Dataset,
    pub train_info: &'a DataInfo,
    pub test_set: Option<&'a Dataset>,
    pub test_info: Option<&'a DataInfo>,
    pub loss: LossKind,
    pub stop_at_zero_error: bool,
    pub bounds_points: usize,
    pub bins: usize,
    pub range_std: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub label: String,
    pub num_params: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub final_train_loss: Option<f64>,
    pub final_test_loss: Option<f64>,
    pub final_train_error: Option<f64>,
    pub final_test_error: Option<f64>,
    pub sigma_product_init: f64,
    pub sigma_product_final: f64,
    pub ln_sigma_product_init: f64,
    pub ln_sigma_product_final: f64,
    pub gl_sigma_product_init: Option<f64>,
    pub gl_sigma_product_final: Option<f64>,
    pub tail_mass_init: f64,
    pub tail_mass_final: f64,
    pub bound_violations: usize,
}

/// A finished run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub history: History,
    pub summary: RunSummary,
    pub init_histogram: WeightHistogram,
    pub final_histogram: WeightHistogram,
    pub bounds: BoundChainReport,
    pub network: Network,
    pub(crate) config: Value,
    pub(crate) dir: Option<PathBuf>,
}

impl RunOutput {
    /// First logged epoch whose train loss fell below `level`.
    pub fn first_epoch_below(&self, level: f64) -> Option<usize> {
        self.history
            .records
            .iter()
            .find(|r| r.train_loss < level)
            .map(|r| r.epoch)
    }
}

pub(crate) fn execute(ctx: &RunContext, input: RunInput) -> Result<RunOutput> {
    let mut net = input.model.build()?;
    let loss = BregmanLoss::from_kind(input.loss, net.output_dim());
    let dir = ctx.out_dir.map(|d| match &input.dir {
        Some(sub) => d.join(sub),
        None => d.to_path_buf(),
    });
    let mut cfg = input.train.clone();
    if let Some(d) = &dir {
        std::fs::create_dir_all(d)?;
        if cfg.checkpoint_every > 0 {
            cfg.checkpoint_dir = Some(d.clone());
        }
    }

    let init_hist = weight_histogram(&net, input.bins, input.range_std);
    let init_summary = spectral_summary(&net);
    let has_gl = net.has_generalization_layers();
    let gl_init = has_gl.then(|| group_sigma_product(&net, ParamGroup::Generalization));

    let mut stop = StopAtZeroTrainError;
    let hooks: &mut dyn Hooks = if input.stop_at_zero_error { &mut stop } else { &mut NoHooks };
    let history = train(&mut net, input.train_set, input.test_set, &loss, &cfg, hooks)?;

    let final_hist = weight_histogram(&net, input.bins, input.range_std);
    let final_summary = spectral_summary(&net);
    let xs: Vec<Vec<f64>> = probe_rows(input.train_set.len(), input.bounds_points)
        .into_iter()
        .map(|r| input.train_set.inputs.row(r).to_vec())
        .collect();
    let bounds = analyze_bounds(&net, &loss, &xs)?;
    let last = history.last();
    let summary = RunSummary {
        label: input.label.clone(),
        num_params: net.num_params(),
        epochs_run: last.map_or(0, |r| r.epoch),
        stopped_early: history.stopped_early,
        final_train_loss: last.map(|r| r.train_loss),
        final_test_loss: last.and_then(|r| r.test_loss),
        final_train_error: last.and_then(|r| r.train_error),
        final_test_error: last.and_then(|r| r.test_error),
        sigma_product_init: init_summary.sigma_product,
        sigma_product_final: final_summary.sigma_product,
        ln_sigma_product_init: init_summary.ln_sigma_product,
        ln_sigma_product_final: final_summary.ln_sigma_product,
        gl_sigma_product_init: gl_init,
        gl_sigma_product_final: has_gl.then(|| group_sigma_product(&net, ParamGroup::Generalization)),
        tail_mass_init: init_hist.tail_mass,
        tail_mass_final: final_hist.tail_mass,
        bound_violations: bounds.violations,
    };
    let config = json!({
        "schema_version": SCHEMA_VERSION,
        "build_id": BUILD_ID,
        "experiment": ctx.spec.name,
        "run": input.label,
        "model": input.model,
        "train": input.train,
        "loss": input.loss,
        "stop_at_zero_train_error": input.stop_at_zero_error,
        "bounds_points": input.bounds_points,
        "histogram": {"bins": input.bins, "range_std": input.range_std, "tail_std": TAIL_STD},
        "datasets": {"train": input.train_info, "test": input.test_info},
    });
    Ok(RunOutput {
        history,
        summary,
        init_histogram: init_hist,
        final_histogram: final_hist,
        bounds,
        network: net,
        config,
        dir,
    })
}

/// Writes the five report files of a run, merging `extra` into its summary.
pub(crate) fn write_run(run: &RunOutput, extra: Value) -> Result<()> {
    let Some(dir) = &run.dir else {
        return Ok(());
    };
    write_json(&dir.join("config.json"), &run.config)?;
    run.history.write_csv(&dir.join("history.csv"))?;
    std::fs::write(
        dir.join("histograms.csv"),
        histograms_csv(&[("init", &run.init_histogram), ("final", &run.final_histogram)]),
    )?;
    std::fs::write(dir.join("bounds.csv"), run.bounds.to_csv_string())?;
    let mut summary = serde_json::to_value(&run.summary)?;
    if let (Value::Object(s), Value::Object(e)) = (&mut summary, extra) {
        s.extend(e);
    }
    summary["build_id"] = json!(BUILD_ID);
    summary["datasets"] = run.config["datasets"].clone();
    write_json(&dir.join("summary.json"), &summary)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Experiment-level config: the resolved spec plus provenance and constants.
pub(crate) fn experiment_config(spec: &ExperimentSpec) -> Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "build_id": BUILD_ID,
        "spec": spec,
        "constants": {
            "overfit_factor_default": OVERFIT_FACTOR,
            "gl_sigma_ratio_limit_default": GL_SIGMA_RATIO_LIMIT,
            "histogram_bins_default": HISTOGRAM_BINS,
            "histogram_range_std_default": HISTOGRAM_RANGE_STD,
            "tail_std": TAIL_STD,
        },
    })
}

pub(crate) fn with_provenance<T: Serialize>(report: &T) -> Result<Value> {
    let mut v = serde_json::to_value(report)?;
    if let Value::Object(m) = &mut v {
        m.insert("build_id".into(), json!(BUILD_ID));
    }
    Ok(v)
}
