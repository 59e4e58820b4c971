use serde::Serialize;
use serde_json::json;

use crate::bregman::LossKind;
use crate::data::{randomize_labels, Dataset};
use crate::error::{Error, Result};
use crate::schedule::Schedule;
use crate::training::TrainConfig;

use super::report::{execute, write_run, DataInfo, RunInput, RunOutput, RunSummary};
use super::{
    set_position, Architecture, GlSpec, GldSpec, HistogramSpec, LongSkipSpec, ModelSpec, OverfitSpec,
    RunContext, TrainSpec, HISTOGRAM_BINS, HISTOGRAM_RANGE_STD,
};

#[allow(clippy::too_many_arguments)]
fn input<'a>(
    dir: Option<String>,
    label: &str,
    model: &'a ModelSpec,
    train: TrainConfig,
    data: (&'a Dataset, &'a DataInfo),
    test: Option<(&'a Dataset, &'a DataInfo)>,
    loss: LossKind,
    bounds_points: usize,
) -> RunInput<'a> {
    RunInput {
        dir,
        label: label.into(),
        model,
        train,
        train_set: data.0,
        train_info: data.1,
        test_set: test.map(|t| t.0),
        test_info: test.map(|t| t.1),
        loss,
        stop_at_zero_error: false,
        bounds_points,
        bins: HISTOGRAM_BINS,
        range_std: HISTOGRAM_RANGE_STD,
    }
}

fn load_pair(data: &super::DataSpec, test: Option<&super::DataSpec>) -> Result<(Dataset, Option<Dataset>)> {
    Ok((data.load()?, test.map(|t| t.load()).transpose()?))
}

/// Squared-loss values are `½‖z−y‖²`; with one output that is half the MSE.
fn mse(loss: Option<f64>) -> Option<f64> {
    loss.map(|l| 2.0 * l)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub run: RunSummary,
    /// Flat weights then bias of every affine map, for networks of at most 64 parameters.
    pub parameters: Option<Vec<f64>>,
}

pub(crate) fn run_train(ctx: &RunContext, spec: &TrainSpec) -> Result<TrainReport> {
    let (train_set, test_set) = load_pair(&spec.data, spec.test.as_ref())?;
    let info = DataInfo::of(&train_set);
    let test_info = test_set.as_ref().map(DataInfo::of);
    let mut inp = input(
        None,
        &ctx.spec.name,
        &spec.model,
        spec.train.clone(),
        (&train_set, &info),
        test_set.as_ref().zip(test_info.as_ref()),
        spec.loss,
        spec.bounds_points,
    );
    inp.stop_at_zero_error = spec.stop_at_zero_train_error;
    let run = execute(ctx, inp)?;
    let parameters = (run.network.num_params() <= 64).then(|| {
        run.network
            .linears()
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.iter().flatten()).copied())
            .collect()
    });
    write_run(&run, json!({ "parameters": parameters }))?;
    Ok(TrainReport {
        run: run.summary,
        parameters,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct OverfitModelReport {
    pub name: String,
    pub num_params: usize,
    pub epochs: usize,
    pub final_train_mse: Option<f64>,
    pub final_test_mse: Option<f64>,
    pub min_train_mse: Option<f64>,
    /// First logged epoch with train MSE below the floor.
    pub first_epoch_below_floor: Option<usize>,
    /// Final train MSE below the floor.
    pub overfit: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct OverfitReport {
    pub noise_sigma: f64,
    pub overfit_factor: f64,
    /// `overfit_factor · noise_sigma²`.
    pub floor_mse: f64,
    pub models: Vec<OverfitModelReport>,
    pub all_overfit: bool,
    pub all_reached_floor: bool,
}

fn regression_outcome(name: &str, run: &RunOutput, floor_mse: f64) -> OverfitModelReport {
    let final_train_mse = mse(run.summary.final_train_loss);
    OverfitModelReport {
        name: name.into(),
        num_params: run.summary.num_params,
        epochs: run.summary.epochs_run,
        final_train_mse,
        final_test_mse: mse(run.summary.final_test_loss),
        min_train_mse: run
            .history
            .records
            .iter()
            .map(|r| 2.0 * r.train_loss)
            .reduce(f64::min),
        first_epoch_below_floor: run.first_epoch_below(floor_mse / 2.0),
        overfit: final_train_mse.is_some_and(|m| m < floor_mse),
    }
}

/// Trains each model on the same noisy regression data and flags those
/// whose final train MSE falls below `overfit_factor · σ²`.
pub(crate) fn run_overfit_demo(ctx: &RunContext, spec: &OverfitSpec) -> Result<OverfitReport> {
    let (train_set, test_set) = load_pair(&spec.data, spec.test.as_ref())?;
    let info = DataInfo::of(&train_set);
    let test_info = test_set.as_ref().map(DataInfo::of);
    let sigma = spec
        .noise_sigma
        .or(spec.data.noise_sigma())
        .ok_or_else(|| Error::config("experiment.noise_sigma", "unknown noise level"))?;
    let floor_mse = spec.overfit_factor * sigma * sigma;
    let mut models = Vec::new();
    for m in &spec.models {
        let cfg = m.train.clone().unwrap_or_else(|| spec.train.clone());
        let run = execute(
            ctx,
            input(
                Some(m.name.clone()),
                &m.name,
                &m.model,
                cfg,
                (&train_set, &info),
                test_set.as_ref().zip(test_info.as_ref()),
                LossKind::Squared,
                spec.bounds_points,
            ),
        )?;
        let outcome = regression_outcome(&m.name, &run, floor_mse);
        write_run(&run, json!({ "floor_mse": floor_mse, "outcome": outcome }))?;
        models.push(outcome);
    }
    Ok(OverfitReport {
        noise_sigma: sigma,
        overfit_factor: spec.overfit_factor,
        floor_mse,
        all_overfit: models.iter().all(|m| m.overfit),
        all_reached_floor: models.iter().all(|m| m.first_epoch_below_floor.is_some()),
        models,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GlPair {
    pub seed: u64,
    pub gl_test_mse: f64,
    pub vanilla_test_mse: f64,
    pub gl_train_mse: f64,
    pub vanilla_train_mse: f64,
    /// GL test MSE ≤ vanilla test MSE.
    pub gl_not_worse: bool,
    pub gl_sigma_init: f64,
    pub gl_sigma_final: f64,
    pub gl_sigma_ratio: f64,
    /// Same group of weights in the vanilla twin.
    pub vanilla_gl_sigma_ratio: f64,
    pub ratio_ok: bool,
    pub nu_final: f64,
    pub sigma_product_final: f64,
    pub vanilla_sigma_product_final: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GlReport {
    pub sigma_ratio_limit: f64,
    pub pairs: Vec<GlPair>,
    pub gl_wins: usize,
    /// More than half of the pairs have GL test MSE ≤ vanilla.
    pub majority_gl_not_worse: bool,
    pub all_ratios_ok: bool,
}

/// The twin keeps `ν = 1` and trains every group at the full rate.
pub fn vanilla_twin(cfg: &TrainConfig) -> TrainConfig {
    let mut v = cfg.clone();
    v.nu_schedule = Schedule::constant(1.0);
    v.gl_lr_multiplier = 1.0;
    v
}

fn gl_sigma(run: &RunOutput, at_init: bool) -> f64 {
    let s = if at_init {
        run.summary.gl_sigma_product_init
    } else {
        run.summary.gl_sigma_product_final
    };
    s.unwrap_or(f64::NAN)
}

/// Paired runs per seed: the configured GL regime against its vanilla twin.
pub(crate) fn run_gl_demo(ctx: &RunContext, spec: &GlSpec) -> Result<GlReport> {
    let train_set = spec.data.load()?;
    let test_set = spec.test.load()?;
    let (info, test_info) = (DataInfo::of(&train_set), DataInfo::of(&test_set));
    let mut pairs = Vec::new();
    for &seed in &spec.seeds {
        let mut model = spec.model.clone();
        model.seed = seed;
        let mut cfg = spec.train.clone();
        cfg.seed = seed;
        let mut runs = Vec::new();
        for (tag, c) in [("gl", cfg.clone()), ("vanilla", vanilla_twin(&cfg))] {
            runs.push(execute(
                ctx,
                input(
                    Some(format!("seed{seed}_{tag}")),
                    &format!("seed{seed}_{tag}"),
                    &model,
                    c,
                    (&train_set, &info),
                    Some((&test_set, &test_info)),
                    LossKind::Squared,
                    spec.bounds_points,
                ),
            )?);
        }
        let (gl, van) = (&runs[0], &runs[1]);
        let gl_test = mse(gl.summary.final_test_loss).unwrap_or(f64::NAN);
        let van_test = mse(van.summary.final_test_loss).unwrap_or(f64::NAN);
        let ratio = gl_sigma(gl, false) / gl_sigma(gl, true);
        let pair = GlPair {
            seed,
            gl_test_mse: gl_test,
            vanilla_test_mse: van_test,
            gl_train_mse: mse(gl.summary.final_train_loss).unwrap_or(f64::NAN),
            vanilla_train_mse: mse(van.summary.final_train_loss).unwrap_or(f64::NAN),
            gl_not_worse: gl_test <= van_test,
            gl_sigma_init: gl_sigma(gl, true),
            gl_sigma_final: gl_sigma(gl, false),
            gl_sigma_ratio: ratio,
            vanilla_gl_sigma_ratio: gl_sigma(van, false) / gl_sigma(van, true),
            ratio_ok: ratio <= spec.sigma_ratio_limit,
            nu_final: gl.history.last().map_or(f64::NAN, |r| r.nu),
            sigma_product_final: gl.summary.sigma_product_final,
            vanilla_sigma_product_final: van.summary.sigma_product_final,
        };
        let extra = json!({ "pair": pair, "sigma_ratio_limit": spec.sigma_ratio_limit });
        write_run(gl, extra.clone())?;
        write_run(van, extra)?;
        pairs.push(pair);
    }
    let gl_wins = pairs.iter().filter(|p| p.gl_not_worse).count();
    Ok(GlReport {
        sigma_ratio_limit: spec.sigma_ratio_limit,
        majority_gl_not_worse: 2 * gl_wins > pairs.len(),
        all_ratios_ok: pairs.iter().all(|p| p.ratio_ok),
        gl_wins,
        pairs,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct LongSkipReport {
    pub floor_mse: f64,
    pub sgd: OverfitModelReport,
    pub adam: OverfitModelReport,
    /// Adam reached the floor, and strictly before plain SGD did (if it did).
    pub adam_first: bool,
}

/// The same long-skip network trained with plain SGD and with Adam.
pub(crate) fn run_longskip_demo(ctx: &RunContext, spec: &LongSkipSpec) -> Result<LongSkipReport> {
    let (train_set, test_set) = load_pair(&spec.data, spec.test.as_ref())?;
    let info = DataInfo::of(&train_set);
    let test_info = test_set.as_ref().map(DataInfo::of);
    let sigma = spec
        .noise_sigma
        .or(spec.data.noise_sigma())
        .ok_or_else(|| Error::config("experiment.noise_sigma", "unknown noise level"))?;
    let floor_mse = spec.overfit_factor * sigma * sigma;
    let mut outcomes = Vec::new();
    for (tag, cfg) in [("sgd", &spec.sgd), ("adam", &spec.adam)] {
        let run = execute(
            ctx,
            input(
                Some(tag.into()),
                tag,
                &spec.model,
                cfg.clone(),
                (&train_set, &info),
                test_set.as_ref().zip(test_info.as_ref()),
                LossKind::Squared,
                spec.bounds_points,
            ),
        )?;
        let outcome = regression_outcome(tag, &run, floor_mse);
        write_run(&run, json!({ "floor_mse": floor_mse, "outcome": outcome }))?;
        outcomes.push(outcome);
    }
    let adam = outcomes.pop().expect("two runs");
    let sgd = outcomes.pop().expect("two runs");
    let adam_first = match (adam.first_epoch_below_floor, sgd.first_epoch_below_floor) {
        (Some(a), Some(s)) => a < s,
        (Some(_), None) => true,
        _ => false,
    };
    Ok(LongSkipReport {
        floor_mse,
        sgd,
        adam,
        adam_first,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct HistogramRun {
    /// Zero training error was reached within the epoch budget.
    pub complete: bool,
    pub epochs: usize,
    pub final_train_error: Option<f64>,
    pub tail_mass_init: f64,
    pub tail_mass_final: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct HistogramPair {
    pub seed: u64,
    pub true_labels: HistogramRun,
    pub random_labels: HistogramRun,
    /// Both runs complete and the random-label tail is strictly heavier.
    pub random_heavier: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct HistogramReport {
    pub bins: usize,
    pub range_std: f64,
    pub pairs: Vec<HistogramPair>,
    pub all_complete: bool,
    pub all_random_heavier: bool,
}

/// True against random labels per seed, each stopped at zero training error.
pub(crate) fn run_weight_histogram(ctx: &RunContext, spec: &HistogramSpec) -> Result<HistogramReport> {
    let base = spec.data.load()?;
    let base_info = DataInfo::of(&base);
    let mut pairs = Vec::new();
    for &seed in &spec.seeds {
        let mut model = spec.model.clone();
        model.seed = seed;
        let mut cfg = spec.train.clone();
        cfg.seed = seed;
        let random = randomize_labels(&base, seed)?;
        let random_info = DataInfo::of(&random);
        let mut outcome = Vec::new();
        for (tag, ds, info) in [("true", &base, &base_info), ("random", &random, &random_info)] {
            let mut inp = input(
                Some(format!("seed{seed}_{tag}")),
                &format!("seed{seed}_{tag}"),
                &model,
                cfg.clone(),
                (ds, info),
                None,
                LossKind::SoftmaxCe,
                spec.bounds_points,
            );
            inp.stop_at_zero_error = true;
            inp.bins = spec.bins;
            inp.range_std = spec.range_std;
            let run = execute(ctx, inp)?;
            let r = HistogramRun {
                complete: run.summary.final_train_error == Some(0.0),
                epochs: run.summary.epochs_run,
                final_train_error: run.summary.final_train_error,
                tail_mass_init: run.summary.tail_mass_init,
                tail_mass_final: run.summary.tail_mass_final,
            };
            write_run(&run, json!({ "labels": tag, "histogram_outcome": r }))?;
            outcome.push(r);
        }
        let random_labels = outcome.pop().expect("two runs");
        let true_labels = outcome.pop().expect("two runs");
        pairs.push(HistogramPair {
            seed,
            random_heavier: true_labels.complete
                && random_labels.complete
                && random_labels.tail_mass_final > true_labels.tail_mass_final,
            true_labels,
            random_labels,
        });
    }
    Ok(HistogramReport {
        bins: spec.bins,
        range_std: spec.range_std,
        all_complete: pairs.iter().all(|p| p.true_labels.complete && p.random_labels.complete),
        all_random_heavier: pairs.iter().all(|p| p.random_heavier),
        pairs,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GldRun {
    pub label: String,
    pub drop_prob: f64,
    pub position: usize,
    pub test_accuracy: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub sigma_product_final: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GldAblation {
    pub drop_prob: f64,
    pub late_position: usize,
    pub early_position: usize,
    pub late_test_accuracy: Option<f64>,
    pub early_test_accuracy: Option<f64>,
    /// Recorded outcome, not an assertion.
    pub late_not_worse: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GldReport {
    pub runs: Vec<GldRun>,
    pub ablation: Option<GldAblation>,
    /// `p = 0` history equals the plain-network history byte for byte.
    pub p0_matches_plain: bool,
}

fn with_drop(model: &ModelSpec, p: f64, expand: bool) -> ModelSpec {
    let mut m = model.clone();
    if let Architecture::DropoutNet {
        drop_prob, expand: e, ..
    } = &mut m.architecture
    {
        *drop_prob = p;
        *e = expand;
    }
    m
}

fn position_of(model: &ModelSpec) -> usize {
    match model.architecture {
        Architecture::DropoutNet { position, .. } => position,
        _ => 0,
    }
}

/// Late placement at every drop probability, the early placement at the
/// ablation probability, and the `p = 0` against plain-network check.
pub(crate) fn run_gld_demo(ctx: &RunContext, spec: &GldSpec) -> Result<GldReport> {
    let train_set = spec.data.load()?;
    let test_set = spec.test.load()?;
    let (info, test_info) = (DataInfo::of(&train_set), DataInfo::of(&test_set));
    let late = position_of(&spec.model);
    let ablation_p = if spec.drop_probs.contains(&0.6) {
        Some(0.6)
    } else {
        spec.drop_probs.first().copied()
    };

    let mut jobs: Vec<(String, ModelSpec, f64, usize)> = spec
        .drop_probs
        .iter()
        .map(|&p| (format!("p{p}_late"), with_drop(&spec.model, p, false), p, late))
        .collect();
    if let Some(p) = ablation_p {
        let mut early = with_drop(&spec.model, p, false);
        set_position(&mut early, spec.early_position);
        jobs.push((format!("p{p}_early"), early, p, spec.early_position));
    }
    jobs.push(("p0_late".into(), with_drop(&spec.model, 0.0, false), 0.0, late));
    jobs.push(("plain".into(), with_drop(&spec.model, 0.0, true), 0.0, late));

    let mut runs = Vec::new();
    let mut histories = Vec::new();
    for (label, model, p, position) in &jobs {
        let run = execute(
            ctx,
            input(
                Some(label.clone()),
                label,
                model,
                spec.train.clone(),
                (&train_set, &info),
                Some((&test_set, &test_info)),
                LossKind::SoftmaxCe,
                spec.bounds_points,
            ),
        )?;
        let r = GldRun {
            label: label.clone(),
            drop_prob: *p,
            position: *position,
            test_accuracy: run.summary.final_test_error.map(|e| 1.0 - e),
            train_accuracy: run.summary.final_train_error.map(|e| 1.0 - e),
            sigma_product_final: run.summary.sigma_product_final,
        };
        write_run(&run, json!({ "gld_outcome": r }))?;
        histories.push(run.history.to_csv_string());
        runs.push(r);
    }
    let n = runs.len();
    let p0_matches_plain = histories[n - 2] == histories[n - 1];
    let ablation = ablation_p.map(|p| {
        let late_run = runs.iter().find(|r| r.drop_prob == p && r.position == late && r.label.ends_with("_late"));
        let early_run = runs.iter().find(|r| r.label.ends_with("_early"));
        let (la, ea) = (
            late_run.and_then(|r| r.test_accuracy),
            early_run.and_then(|r| r.test_accuracy),
        );
        GldAblation {
            drop_prob: p,
            late_position: late,
            early_position: spec.early_position,
            late_test_accuracy: la,
            early_test_accuracy: ea,
            late_not_worse: matches!((la, ea), (Some(l), Some(e)) if l >= e),
        }
    });
    Ok(GldReport {
        runs,
        ablation,
        p0_matches_plain,
    })
}
