//! Experiment harness: JSON-configurable runs that train networks, record
//! bound diagnostics and write report directories.
//!
//! A run directory always holds `config.json`, `history.csv`,
//! `histograms.csv`, `bounds.csv` and `summary.json`. Multi-run experiments
//! put one such directory per run under the experiment directory, next to an
//! experiment-level `config.json` and `summary.json`.

mod demos;
pub mod presets;
mod report;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bregman::LossKind;
use crate::data::{self, Dataset, TargetFn};
use crate::error::{Error, Result};
use crate::network::{Activation, InitScheme, LayerSpec, Network, Projection, SkipStrength};
use crate::training::TrainConfig;

pub use demos::*;
pub use report::{weight_histogram, RunOutput, WeightHistogram};

pub const SCHEMA_VERSION: u32 = 1;

/// Build identifier embedded in every report.
pub const BUILD_ID: &str = env!("GENLAYER_BUILD_ID");

/// Overfitting means final train MSE below this fraction of the noise variance.
pub const OVERFIT_FACTOR: f64 = 0.5;

/// Largest allowed growth of the generalization group's `∏σ²` over a run.
pub const GL_SIGMA_RATIO_LIMIT: f64 = 1.5;

pub const HISTOGRAM_BINS: usize = 64;

/// Half-width of the histogram range, in units of each layer's init std.
pub const HISTOGRAM_RANGE_STD: f64 = 8.0;

/// Tail threshold, in units of each layer's init std.
pub const TAIL_STD: f64 = 2.0;

fn default_n() -> usize {
    100
}
fn default_true() -> bool {
    true
}
fn default_identity() -> Activation {
    Activation::Identity
}
fn default_one() -> usize {
    1
}
fn default_bounds_points() -> usize {
    16
}
fn default_overfit_factor() -> f64 {
    OVERFIT_FACTOR
}
fn default_ratio_limit() -> f64 {
    GL_SIGMA_RATIO_LIMIT
}
fn default_bins() -> usize {
    HISTOGRAM_BINS
}
fn default_range() -> f64 {
    HISTOGRAM_RANGE_STD
}

/// Where a dataset comes from. Relative paths resolve against the working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Noisy samples of a target function on a uniform grid.
    Regression {
        function: TargetFn,
        #[serde(default = "default_n")]
        n: usize,
        lo: f64,
        hi: f64,
        sigma: f64,
        seed: u64,
    },
    /// Noise-free grid of a target function.
    Grid {
        function: TargetFn,
        lo: f64,
        hi: f64,
        n: usize,
    },
    Csv {
        path: PathBuf,
    },
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        offset: usize,
        #[serde(default)]
        limit: Option<usize>,
    },
}

impl DataSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSpec::Regression {
                function,
                n,
                lo,
                hi,
                sigma,
                seed,
            } => data::gen_regression(*function, *n, *lo, *hi, *sigma, *seed),
            DataSpec::Grid { function, lo, hi, n } => data::test_grid(*function, *lo, *hi, *n),
            DataSpec::Csv { path } => Dataset::read_csv(path),
            DataSpec::Mnist {
                images,
                labels,
                offset,
                limit,
            } => {
                let all = data::mnist_load(images, labels)?;
                let end = limit.map_or(all.len(), |l| (offset + l).min(all.len()));
                if *offset >= end {
                    return Err(Error::invalid(format!(
                        "mnist slice [{offset}, {end}) is empty ({} rows available)",
                        all.len()
                    )));
                }
                Ok(all.slice(*offset, end))
            }
        }
    }

    /// Noise standard deviation, for generated regression data.
    pub fn noise_sigma(&self) -> Option<f64> {
        match self {
            DataSpec::Regression { sigma, .. } => Some(*sigma),
            _ => None,
        }
    }

    fn check_paths(&self, key: &str) -> Result<()> {
        let paths: Vec<(&str, &PathBuf)> = match self {
            DataSpec::Csv { path } => vec![("path", path)],
            DataSpec::Mnist { images, labels, .. } => vec![("images", images), ("labels", labels)],
            _ => vec![],
        };
        for (field, p) in paths {
            if !p.is_file() {
                return Err(Error::config(
                    format!("{key}.{field}"),
                    format!("file {} does not exist", p.display()),
                ));
            }
        }
        Ok(())
    }
}

/// Network layout. Every variant expands to a list of [`LayerSpec`]s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Dense layers through `hidden` widths, then a linear readout.
    Mlp {
        input: usize,
        hidden: Vec<usize>,
        output: usize,
        activation: Activation,
        #[serde(default = "default_identity")]
        output_activation: Activation,
        #[serde(default = "default_true")]
        bias: bool,
    },
    /// Input layer to `width`, `blocks` identity-shortcut blocks of
    /// `block_depth + 1` layers each, then a linear readout. Blocks listed in
    /// `gl_blocks` are generalization layers with a scheduled `ν`.
    SkipNet {
        input: usize,
        width: usize,
        blocks: usize,
        #[serde(default = "default_one")]
        block_depth: usize,
        #[serde(default)]
        gl_blocks: Vec<usize>,
        output: usize,
        activation: Activation,
        #[serde(default = "default_true")]
        bias: bool,
    },
    /// An [`Architecture::Mlp`] with a dropout generalization layer of width
    /// `gl_width` inserted after hidden layer `position` (1-based). With
    /// `expand` the inserted layer becomes two plain bias-free dense layers
    /// of the same shape.
    DropoutNet {
        input: usize,
        hidden: Vec<usize>,
        output: usize,
        activation: Activation,
        gl_width: usize,
        position: usize,
        drop_prob: f64,
        #[serde(default)]
        expand: bool,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Layers {
        layers: Vec<LayerSpec>,
    },
}

impl Architecture {
    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        let dense = |i, o, a, bias| LayerSpec::Dense {
            input: i,
            output: o,
            activation: a,
            bias,
        };
        match self {
            Architecture::Mlp {
                input,
                hidden,
                output,
                activation,
                output_activation,
                bias,
            } => {
                let mut dims = vec![*input];
                dims.extend(hidden);
                let mut specs: Vec<LayerSpec> = dims
                    .windows(2)
                    .map(|w| dense(w[0], w[1], *activation, *bias))
                    .collect();
                specs.push(dense(*dims.last().unwrap(), *output, *output_activation, *bias));
                Ok(specs)
            }
            Architecture::SkipNet {
                input,
                width,
                blocks,
                block_depth,
                gl_blocks,
                output,
                activation,
                bias,
            } => {
                if let Some(b) = gl_blocks.iter().find(|&&b| b >= *blocks) {
                    return Err(Error::config(
                        "gl_blocks",
                        format!("block index {b} out of range (network has {blocks} blocks)"),
                    ));
                }
                let mut specs = vec![dense(*input, *width, *activation, *bias)];
                for b in 0..*blocks {
                    let nu = if gl_blocks.contains(&b) {
                        SkipStrength::Scheduled
                    } else {
                        SkipStrength::Fixed(1.0)
                    };
                    specs.push(LayerSpec::GenSkip {
                        input: *width,
                        width: *width,
                        output: *width,
                        activation: *activation,
                        nu,
                        projection: Projection::Identity,
                        depth: *block_depth,
                        bias: *bias,
                    });
                }
                specs.push(dense(*width, *output, Activation::Identity, *bias));
                Ok(specs)
            }
            Architecture::DropoutNet {
                input,
                hidden,
                output,
                activation,
                gl_width,
                position,
                drop_prob,
                expand,
                bias,
            } => {
                if *position == 0 || *position > hidden.len() {
                    return Err(Error::config(
                        "position",
                        format!("must lie in 1..={} (after a hidden layer)", hidden.len()),
                    ));
                }
                let mut dims = vec![*input];
                dims.extend(hidden);
                let mut specs = Vec::new();
                for (i, w) in dims.windows(2).enumerate() {
                    specs.push(dense(w[0], w[1], *activation, *bias));
                    if i + 1 == *position {
                        let h = w[1];
                        if *expand {
                            specs.push(dense(h, *gl_width, *activation, false));
                            specs.push(dense(*gl_width, h, *activation, false));
                        } else {
                            specs.push(LayerSpec::gen_dropout(h, *gl_width, h, *activation, *drop_prob));
                        }
                    }
                }
                specs.push(dense(*dims.last().unwrap(), *output, Activation::Identity, *bias));
                Ok(specs)
            }
            Architecture::Layers { layers } => Ok(layers.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub init: InitScheme,
    pub seed: u64,
}

impl ModelSpec {
    pub fn build(&self) -> Result<Network> {
        Network::init(self.architecture.layer_specs()?, self.seed, self.init)
    }

    pub fn num_params(&self) -> Result<usize> {
        Ok(self.build()?.num_params())
    }
}

/// A single training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub data: DataSpec,
    #[serde(default)]
    pub test: Option<DataSpec>,
    pub model: ModelSpec,
    pub loss: LossKind,
    pub train: TrainConfig,
    /// Training rows at which the bound chain is evaluated after training.
    #[serde(default = "default_bounds_points")]
    pub bounds_points: usize,
    #[serde(default)]
    pub stop_at_zero_train_error: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedModel {
    pub name: String,
    pub model: ModelSpec,
    /// Replaces the experiment-wide training config for this model.
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

/// Several regression models trained on the same noisy data, each flagged
/// for fitting below the noise floor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverfitSpec {
    pub data: DataSpec,
    #[serde(default)]
    pub test: Option<DataSpec>,
    pub models: Vec<NamedModel>,
    pub train: TrainConfig,
    #[serde(default = "default_overfit_factor")]
    pub overfit_factor: f64,
    /// Noise std for the floor; read from generated data when absent.
    #[serde(default)]
    pub noise_sigma: Option<f64>,
    #[serde(default = "default_bounds_points")]
    pub bounds_points: usize,
}

/// A network with generalization layers against its vanilla twin (constant
/// `ν = 1`, no learning-rate suppression), over paired seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlSpec {
    pub data: DataSpec,
    pub test: DataSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    /// Each seed sets both the model and the training seed.
    pub seeds: Vec<u64>,
    #[serde(default = "default_ratio_limit")]
    pub sigma_ratio_limit: f64,
    #[serde(default = "default_bounds_points")]
    pub bounds_points: usize,
}

/// One network trained twice, with plain SGD and with Adam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongSkipSpec {
    pub data: DataSpec,
    #[serde(default)]
    pub test: Option<DataSpec>,
    pub model: ModelSpec,
    pub sgd: TrainConfig,
    pub adam: TrainConfig,
    #[serde(default = "default_overfit_factor")]
    pub overfit_factor: f64,
    #[serde(default)]
    pub noise_sigma: Option<f64>,
    #[serde(default = "default_bounds_points")]
    pub bounds_points: usize,
}

/// True-label against random-label training of a classifier, comparing the
/// weight tails once each run fits its training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramSpec {
    pub data: DataSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    /// Each seed sets the model, training and label-shuffling seeds.
    pub seeds: Vec<u64>,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_range")]
    pub range_std: f64,
    #[serde(default = "default_bounds_points")]
    pub bounds_points: usize,
}

/// Dropout generalization layers at several drop probabilities, a placement
/// ablation and the degenerate `p = 0` check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GldSpec {
    pub data: DataSpec,
    pub test: DataSpec,
    /// Must use the `dropout_net` architecture; its `position` is the late placement.
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub drop_probs: Vec<f64>,
    /// Position of the early placement.
    #[serde(default = "default_one")]
    pub early_position: usize,
    #[serde(default = "default_bounds_points")]
    pub bounds_points: usize,
}

/// Externally tagged (`{"overfit": {...}}`) so that config errors keep
/// their full key path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Train(TrainSpec),
    Overfit(OverfitSpec),
    Gl(GlSpec),
    LongSkip(LongSkipSpec),
    Histogram(HistogramSpec),
    Gld(GldSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub schema_version: u32,
    pub name: String,
    /// Report directory; the command line may override it.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub experiment: Experiment,
}

impl ExperimentSpec {
    pub fn new(name: &str, experiment: Experiment) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: name.into(),
            out_dir: None,
            experiment,
        }
    }

    /// Parses and validates a config document. Errors name the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let spec: ExperimentSpec = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".into() } else { path }, e.inner().to_string())
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// Checks the schema version, file references, model layouts and
    /// training configs without running anything.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if self.name.is_empty() {
            return Err(Error::config("name", "must not be empty"));
        }
        let check_train = |key: &str, t: &TrainConfig| {
            t.validate().map_err(|e| match e {
                Error::Config { key: k, message } => Error::config(format!("{key}.{k}"), message),
                other => other,
            })
        };
        let check_model = |key: &str, m: &ModelSpec| {
            m.architecture
                .layer_specs()
                .and_then(|s| crate::network::validate_specs(&s))
                .map_err(|e| match e {
                    Error::Config { key: k, message } => {
                        Error::config(format!("{key}.architecture.{k}"), message)
                    }
                    other => Error::config(format!("{key}.architecture"), other.to_string()),
                })
        };
        let check_seeds = |key: &str, seeds: &[u64]| {
            if seeds.is_empty() {
                Err(Error::config(key, "at least one seed is required"))
            } else {
                Ok(())
            }
        };
        let p = format!("experiment.{}", self.experiment.kind());
        match &self.experiment {
            Experiment::Train(s) => {
                s.data.check_paths(&format!("{p}.data"))?;
                if let Some(t) = &s.test {
                    t.check_paths(&format!("{p}.test"))?;
                }
                check_model(&format!("{p}.model"), &s.model)?;
                check_train(&format!("{p}.train"), &s.train)?;
            }
            Experiment::Overfit(s) => {
                s.data.check_paths(&format!("{p}.data"))?;
                if s.models.is_empty() {
                    return Err(Error::config(&format!("{p}.models"), "at least one model is required"));
                }
                for (i, m) in s.models.iter().enumerate() {
                    check_model(&format!("{p}.models[{i}].model"), &m.model)?;
                    if let Some(t) = &m.train {
                        check_train(&format!("{p}.models[{i}].train"), t)?;
                    }
                }
                check_train(&format!("{p}.train"), &s.train)?;
                if s.noise_sigma.or(s.data.noise_sigma()).is_none() {
                    return Err(Error::config(
                        &format!("{p}.noise_sigma"),
                        "required unless the data is generated regression data",
                    ));
                }
            }
            Experiment::Gl(s) => {
                s.data.check_paths(&format!("{p}.data"))?;
                s.test.check_paths(&format!("{p}.test"))?;
                check_model(&format!("{p}.model"), &s.model)?;
                check_train(&format!("{p}.train"), &s.train)?;
                check_seeds(&format!("{p}.seeds"), &s.seeds)?;
                if !s.model.build()?.has_generalization_layers() {
                    return Err(Error::config(
                        &format!("{p}.model.architecture"),
                        "the model has no generalization layers",
                    ));
                }
            }
            Experiment::LongSkip(s) => {
                s.data.check_paths(&format!("{p}.data"))?;
                check_model(&format!("{p}.model"), &s.model)?;
                check_train(&format!("{p}.sgd"), &s.sgd)?;
                check_train(&format!("{p}.adam"), &s.adam)?;
                if s.noise_sigma.or(s.data.noise_sigma()).is_none() {
                    return Err(Error::config(
                        &format!("{p}.noise_sigma"),
                        "required unless the data is generated regression data",
                    ));
                }
            }
            Experiment::Histogram(s) => {
                s.data.check_paths(&format!("{p}.data"))?;
                check_model(&format!("{p}.model"), &s.model)?;
                check_train(&format!("{p}.train"), &s.train)?;
                check_seeds(&format!("{p}.seeds"), &s.seeds)?;
                if s.bins == 0 || !(s.range_std > 0.0) {
                    return Err(Error::config(&format!("{p}.bins"), "need bins > 0 and range_std > 0"));
                }
            }
            Experiment::Gld(s) => {
                s.data.check_paths(&format!("{p}.data"))?;
                s.test.check_paths(&format!("{p}.test"))?;
                check_model(&format!("{p}.model"), &s.model)?;
                check_train(&format!("{p}.train"), &s.train)?;
                if !matches!(s.model.architecture, Architecture::DropoutNet { .. }) {
                    return Err(Error::config(
                        &format!("{p}.model.architecture.arch"),
                        "gld experiments need the dropout_net architecture",
                    ));
                }
                if s.drop_probs.iter().any(|p| !(0.0..1.0).contains(p)) {
                    return Err(Error::config(&format!("{p}.drop_probs"), "each must lie in [0, 1)"));
                }
                let mut early = s.model.clone();
                set_position(&mut early, s.early_position);
                check_model(&format!("{p}.early_position"), &early)?;
            }
        }
        Ok(())
    }

    /// Replaces every seed (model, training, data noise and label shuffling)
    /// with values derived from `seed`. Seed lists keep their length and
    /// become `seed, seed+1, ...`.
    pub fn override_seed(&mut self, seed: u64) {
        fn data(d: &mut DataSpec, seed: u64) {
            if let DataSpec::Regression { seed: s, .. } = d {
                *s = seed;
            }
        }
        fn list(v: &mut [u64], seed: u64) {
            for (i, s) in v.iter_mut().enumerate() {
                *s = seed.wrapping_add(i as u64);
            }
        }
        match &mut self.experiment {
            Experiment::Train(s) => {
                data(&mut s.data, seed);
                s.model.seed = seed;
                s.train.seed = seed;
            }
            Experiment::Overfit(s) => {
                data(&mut s.data, seed);
                s.train.seed = seed;
                for m in &mut s.models {
                    m.model.seed = seed;
                    if let Some(t) = &mut m.train {
                        t.seed = seed;
                    }
                }
            }
            Experiment::Gl(s) => {
                data(&mut s.data, seed);
                list(&mut s.seeds, seed);
            }
            Experiment::LongSkip(s) => {
                data(&mut s.data, seed);
                s.model.seed = seed;
                s.sgd.seed = seed;
                s.adam.seed = seed;
            }
            Experiment::Histogram(s) => list(&mut s.seeds, seed),
            Experiment::Gld(s) => {
                s.model.seed = seed;
                s.train.seed = seed;
            }
        }
    }

    /// Runs the experiment and writes its reports under `out_dir`.
    pub fn run(&self, out_dir: &Path) -> Result<ExperimentReport> {
        self.validate()?;
        std::fs::create_dir_all(out_dir)?;
        let ctx = RunContext {
            spec: self,
            out_dir: Some(out_dir),
        };
        run_with(&ctx)
    }

    /// Runs the experiment without touching the filesystem.
    pub fn run_in_memory(&self) -> Result<ExperimentReport> {
        self.validate()?;
        run_with(&RunContext {
            spec: self,
            out_dir: None,
        })
    }
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::Train(_) => "train",
            Experiment::Overfit(_) => "overfit",
            Experiment::Gl(_) => "gl",
            Experiment::LongSkip(_) => "long_skip",
            Experiment::Histogram(_) => "histogram",
            Experiment::Gld(_) => "gld",
        }
    }
}

pub(crate) fn set_position(model: &mut ModelSpec, pos: usize) {
    if let Architecture::DropoutNet { position, .. } = &mut model.architecture {
        *position = pos;
    }
}

/// Shared state of one experiment invocation.
pub(crate) struct RunContext<'a> {
    pub spec: &'a ExperimentSpec,
    pub out_dir: Option<&'a Path>,
}

/// Typed result of any experiment, as written to the top-level `summary.json`.
#[derive(Clone, Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentReport {
    Train(TrainReport),
    Overfit(OverfitReport),
    Gl(GlReport),
    LongSkip(LongSkipReport),
    Histogram(HistogramReport),
    Gld(GldReport),
}

fn run_with(ctx: &RunContext) -> Result<ExperimentReport> {
    let report = match &ctx.spec.experiment {
        Experiment::Train(s) => ExperimentReport::Train(demos::run_train(ctx, s)?),
        Experiment::Overfit(s) => ExperimentReport::Overfit(run_overfit_demo(ctx, s)?),
        Experiment::Gl(s) => ExperimentReport::Gl(run_gl_demo(ctx, s)?),
        Experiment::LongSkip(s) => ExperimentReport::LongSkip(run_longskip_demo(ctx, s)?),
        Experiment::Histogram(s) => ExperimentReport::Histogram(run_weight_histogram(ctx, s)?),
        Experiment::Gld(s) => ExperimentReport::Gld(run_gld_demo(ctx, s)?),
    };
    // A single training run writes its own config and summary in place.
    let multi = !matches!(ctx.spec.experiment, Experiment::Train(_));
    if let (Some(dir), true) = (ctx.out_dir, multi) {
        report::write_json(&dir.join("config.json"), &report::experiment_config(ctx.spec))?;
        report::write_json(&dir.join("summary.json"), &report::with_provenance(&report)?)?;
    }
    Ok(report)
}
