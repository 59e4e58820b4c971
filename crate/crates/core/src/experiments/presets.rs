//! Ready-made experiment specs.
//!
//! `Full` presets follow the original architectures, learning rates and epoch
//! counts. `Desk` presets shrink widths and epoch budgets so the whole suite
//! runs on one CPU core in under two hours; the per-experiment notes below
//! say what changed.
//!
//! Regression presets use [`InitScheme::FanInUniform`], the usual default for
//! linear layers, which also gives every ReLU unit a nonzero initial kink.

use std::path::PathBuf;

use crate::bregman::LossKind;
use crate::data::TargetFn;
use crate::network::{Activation, InitScheme};
use crate::schedule::Schedule;
use crate::training::{Optimizer, TrainConfig};

use super::{
    Architecture, DataSpec, Experiment, ExperimentSpec, GlSpec, GldSpec, HistogramSpec, LongSkipSpec,
    ModelSpec, NamedModel, OverfitSpec, TrainSpec, GL_SIGMA_RATIO_LIMIT, HISTOGRAM_BINS,
    HISTOGRAM_RANGE_STD, OVERFIT_FACTOR,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Full,
}

impl std::str::FromStr for Scale {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            other => Err(crate::Error::invalid(format!("unknown scale {other:?} (desk | full)"))),
        }
    }
}

pub const NAMES: [&str; 5] = ["overfit", "gl", "longskip", "histogram", "gld"];

/// Directory holding the bundled MNIST subset: `$GENLAYER_MNIST_DIR` if set,
/// else `data/mnist` at the workspace root.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("GENLAYER_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist")))
}

fn mnist(offset: usize, limit: Option<usize>) -> DataSpec {
    let dir = mnist_dir();
    DataSpec::Mnist {
        images: dir.join("images-idx3-ubyte.gz"),
        labels: dir.join("labels-idx1-ubyte.gz"),
        offset,
        limit,
    }
}

fn regression(function: TargetFn, seed: u64) -> DataSpec {
    DataSpec::Regression {
        function,
        n: 100,
        lo: -8.0,
        hi: 8.0,
        sigma: 10.0,
        seed,
    }
}

fn grid(function: TargetFn) -> DataSpec {
    DataSpec::Grid {
        function,
        lo: -8.0,
        hi: 8.0,
        n: 161,
    }
}

fn sgd(epochs: usize, batch: usize, lr: Schedule, seed: u64) -> TrainConfig {
    let mut t = TrainConfig::new(epochs, seed, Optimizer::Sgd, lr);
    t.batch_size = batch;
    t.log_every = (epochs / 200).max(1);
    t
}

fn mlp(hidden: Vec<usize>, seed: u64) -> ModelSpec {
    ModelSpec {
        architecture: Architecture::Mlp {
            input: 1,
            hidden,
            output: 1,
            activation: Activation::Relu,
            output_activation: Activation::Identity,
            bias: true,
        },
        init: InitScheme::FanInUniform,
        seed,
    }
}

fn skip_net(width: usize, blocks: usize, block_depth: usize, gl_blocks: Vec<usize>, seed: u64) -> ModelSpec {
    ModelSpec {
        architecture: Architecture::SkipNet {
            input: 1,
            width,
            blocks,
            block_depth,
            gl_blocks,
            output: 1,
            activation: Activation::Relu,
            bias: true,
        },
        init: InitScheme::FanInUniform,
        seed,
    }
}

/// One, seven and 119 hidden layers of roughly 36k parameters each.
///
/// Full: widths 11999 / `[85,85,85,85,64,64,64]` / 17, lr `1e-5`, 10000 epochs.
/// Desk: widths halved for the two shallow models (the 17-wide residual net
/// is already small), 20000 epochs, per-model learning rates, batch 10.
pub fn overfit(scale: Scale) -> ExperimentSpec {
    let (models, train) = match scale {
        Scale::Full => (
            vec![
                NamedModel {
                    name: "one_hidden".into(),
                    model: mlp(vec![11999], 1),
                    train: None,
                },
                NamedModel {
                    name: "seven_hidden".into(),
                    model: mlp(vec![85, 85, 85, 85, 64, 64, 64], 1),
                    train: None,
                },
                NamedModel {
                    name: "residual_119".into(),
                    model: skip_net(17, 59, 1, vec![], 1),
                    train: None,
                },
            ],
            sgd(10_000, 10, Schedule::constant(1e-5), 1),
        ),
        Scale::Desk => {
            // Constant rate, then one tenth of it for the last 2000 epochs so
            // the final loss is not a single noisy SGD sample.
            let desk = |lr: f64| sgd(20_000, 10, Schedule::StepDecay { initial: lr, factor: 0.1, every: 18_000 }, 1);
            (
                vec![
                    NamedModel {
                        name: "one_hidden".into(),
                        model: mlp(vec![6000], 1),
                        train: Some(desk(1e-5)),
                    },
                    NamedModel {
                        name: "seven_hidden".into(),
                        model: mlp(vec![43, 43, 43, 43, 32, 32, 32], 1),
                        train: Some(desk(2e-4)),
                    },
                    NamedModel {
                        name: "residual_119".into(),
                        model: skip_net(17, 59, 1, vec![], 1),
                        train: Some(desk(3e-5)),
                    },
                ],
                desk(1e-5),
            )
        }
    };
    ExperimentSpec::new(
        &format!("overfit_{}", scale_name(scale)),
        Experiment::Overfit(OverfitSpec {
            data: regression(TargetFn::Quadratic, 1),
            test: Some(grid(TargetFn::Quadratic)),
            models,
            train,
            overfit_factor: OVERFIT_FACTOR,
            noise_sigma: None,
            bounds_points: 16,
        }),
    )
}

/// 90 hidden layers of width 17 in 45 two-layer skip blocks, three of them
/// generalization layers, against the vanilla twin on three seeds.
///
/// Full: lr `1e-7` decayed by 10 every 200 epochs, 1000 epochs.
/// Desk: lr `1e-4` decayed by 10 every 1000 epochs, 3000 epochs; the
/// skip-strength decay still ends at epoch 500.
pub fn gl(scale: Scale) -> ExperimentSpec {
    let (lr, every, epochs) = match scale {
        Scale::Full => (1e-7, 200, 1000),
        Scale::Desk => (1e-4, 1000, 3000),
    };
    let mut train = sgd(
        epochs,
        10,
        Schedule::StepDecay {
            initial: lr,
            factor: 0.1,
            every,
        },
        1,
    );
    train.nu_schedule = Schedule::LinearDecay {
        initial: 1.0,
        target: 0.1,
        end_epoch: 500,
    };
    train.gl_lr_multiplier = 0.1;
    train.log_every = every / 40;
    ExperimentSpec::new(
        &format!("gl_{}", scale_name(scale)),
        Experiment::Gl(GlSpec {
            data: regression(TargetFn::Cubic, 1),
            test: grid(TargetFn::Cubic),
            model: skip_net(17, 45, 1, vec![14, 29, 44], 1),
            train,
            seeds: vec![1, 2, 3],
            sigma_ratio_limit: GL_SIGMA_RATIO_LIMIT,
            bounds_points: 16,
        }),
    )
}

/// Input layer plus 17 identity-skip blocks of seven layers, trained with SGD
/// and with Adam.
///
/// Full: 20000 epochs. Desk: 5000 epochs.
pub fn longskip(scale: Scale) -> ExperimentSpec {
    let epochs = match scale {
        Scale::Full => 20_000,
        Scale::Desk => 5_000,
    };
    let mut adam = sgd(epochs, 10, Schedule::constant(1e-3), 1);
    adam.optimizer = Optimizer::adam();
    ExperimentSpec::new(
        &format!("longskip_{}", scale_name(scale)),
        Experiment::LongSkip(LongSkipSpec {
            data: regression(TargetFn::Quadratic, 1),
            test: Some(grid(TargetFn::Quadratic)),
            model: skip_net(17, 17, 6, vec![], 1),
            sgd: sgd(epochs, 10, Schedule::constant(1e-5), 1),
            adam,
            overfit_factor: OVERFIT_FACTOR,
            noise_sigma: None,
            bounds_points: 16,
        }),
    )
}

/// A ReLU classifier on 10000 MNIST digits, true against random labels.
pub fn histogram(scale: Scale) -> ExperimentSpec {
    let (hidden, epochs) = match scale {
        Scale::Full => (vec![512, 512], 1000),
        Scale::Desk => (vec![256], 400),
    };
    let mut train = sgd(epochs, 100, Schedule::constant(0.1), 1);
    train.log_every = 1;
    ExperimentSpec::new(
        &format!("histogram_{}", scale_name(scale)),
        Experiment::Histogram(HistogramSpec {
            data: mnist(0, Some(10_000)),
            model: ModelSpec {
                architecture: Architecture::Mlp {
                    input: 784,
                    hidden,
                    output: 10,
                    activation: Activation::Relu,
                    output_activation: Activation::Identity,
                    bias: true,
                },
                init: InitScheme::He,
                seed: 1,
            },
            train,
            seeds: vec![1, 2, 3],
            bins: HISTOGRAM_BINS,
            range_std: HISTOGRAM_RANGE_STD,
            bounds_points: 8,
        }),
    )
}

/// MNIST classifier with a dropout generalization layer just before the
/// readout, at drop probabilities 0.5, 0.6 and 0.75.
pub fn gld(scale: Scale) -> ExperimentSpec {
    let (hidden, gl_width, epochs) = match scale {
        Scale::Full => (vec![512, 256], 256, 100),
        Scale::Desk => (vec![128, 64], 64, 20),
    };
    let position = hidden.len();
    let mut train = sgd(epochs, 50, Schedule::constant(0.05), 1);
    train.log_every = 1;
    ExperimentSpec::new(
        &format!("gld_{}", scale_name(scale)),
        Experiment::Gld(GldSpec {
            data: mnist(0, Some(8000)),
            test: mnist(8000, Some(2000)),
            model: ModelSpec {
                architecture: Architecture::DropoutNet {
                    input: 784,
                    hidden,
                    output: 10,
                    activation: Activation::Relu,
                    gl_width,
                    position,
                    drop_prob: 0.6,
                    expand: false,
                    bias: true,
                },
                init: InitScheme::He,
                seed: 1,
            },
            train,
            drop_probs: vec![0.5, 0.6, 0.75],
            early_position: 1,
            bounds_points: 8,
        }),
    )
}

/// Least-squares fit of a line, the smallest useful config.
pub fn linear_regression() -> ExperimentSpec {
    let mut train = sgd(500, 0, Schedule::constant(0.5), 1);
    train.log_every = 10;
    ExperimentSpec::new(
        "linear_regression",
        Experiment::Train(TrainSpec {
            data: DataSpec::Regression {
                function: TargetFn::Quadratic,
                n: 21,
                lo: -1.0,
                hi: 1.0,
                sigma: 0.1,
                seed: 1,
            },
            test: None,
            model: ModelSpec {
                architecture: Architecture::Mlp {
                    input: 1,
                    hidden: vec![],
                    output: 1,
                    activation: Activation::Identity,
                    output_activation: Activation::Identity,
                    bias: true,
                },
                init: InitScheme::Xavier,
                seed: 1,
            },
            loss: LossKind::Squared,
            train,
            bounds_points: 4,
            stop_at_zero_train_error: false,
        }),
    )
}

pub fn by_name(name: &str, scale: Scale) -> Option<ExperimentSpec> {
    Some(match name {
        "overfit" => overfit(scale),
        "gl" => gl(scale),
        "longskip" => longskip(scale),
        "histogram" => histogram(scale),
        "gld" => gld(scale),
        "linear_regression" => linear_regression(),
        _ => return None,
    })
}

fn scale_name(scale: Scale) -> &'static str {
    match scale {
        Scale::Desk => "desk",
        Scale::Full => "full",
    }
}
