//! Mini-batch training with per-group learning rates and a scheduled skip
//! strength `ν` for generalization layers.

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bregman::{BregmanLoss, LossKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{group_sigma_product, sigma_max_at, spectral_summary};
use crate::linalg::Matrix;
use crate::network::{save_checkpoint, Gradients, Mode, Network, ParamGroup};
use crate::rng::{streams, SeededRng};
use crate::schedule::Schedule;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

/// Update rule. The step size comes from the run's learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// One value per parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupValues {
    #[serde(default)]
    pub main: f64,
    #[serde(default)]
    pub generalization: f64,
}

impl GroupValues {
    pub const fn splat(v: f64) -> Self {
        Self {
            main: v,
            generalization: v,
        }
    }

    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Main => self.main,
            ParamGroup::Generalization => self.generalization,
        }
    }
}

impl Default for GroupValues {
    fn default() -> Self {
        Self::splat(0.0)
    }
}

fn default_gl_multiplier() -> f64 {
    0.1
}
fn default_warmup() -> usize {
    20
}
fn default_nu() -> Schedule {
    Schedule::constant(1.0)
}
fn default_one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Rows per mini-batch; `0` means full batch.
    #[serde(default)]
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub lr_schedule: Schedule,
    /// Learning-rate factor for the generalization group once warm-up is over.
    #[serde(default = "default_gl_multiplier")]
    pub gl_lr_multiplier: f64,
    #[serde(default = "default_warmup")]
    pub gl_lr_warmup_epochs: usize,
    #[serde(default = "default_nu")]
    pub nu_schedule: Schedule,
    #[serde(default)]
    pub weight_decay: GroupValues,
    #[serde(default = "default_one")]
    pub log_every: usize,
    /// Save a checkpoint every this many epochs (`0` disables).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Training rows whose `σ_max(ζ)` is averaged into the history (`0` disables).
    #[serde(default)]
    pub probe_size: usize,
    /// Where periodic checkpoints go; set by the harness, not by config files.
    #[serde(skip)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64, optimizer: Optimizer, lr: Schedule) -> Self {
        Self {
            epochs,
            batch_size: 0,
            seed,
            optimizer,
            lr_schedule: lr,
            gl_lr_multiplier: default_gl_multiplier(),
            gl_lr_warmup_epochs: default_warmup(),
            nu_schedule: default_nu(),
            weight_decay: GroupValues::default(),
            log_every: 1,
            checkpoint_every: 0,
            probe_size: 0,
            checkpoint_dir: None,
        }
    }

    /// Checks every field; `epochs = 0` is allowed here (a no-op run).
    pub fn validate(&self) -> Result<()> {
        self.lr_schedule.validate_positive("lr_schedule")?;
        self.nu_schedule.validate_nu("nu_schedule")?;
        if !(self.gl_lr_multiplier > 0.0 && self.gl_lr_multiplier <= 1.0) {
            return Err(Error::config("gl_lr_multiplier", "must lie in (0, 1]"));
        }
        for (k, v) in [
            ("weight_decay.main", self.weight_decay.main),
            ("weight_decay.generalization", self.weight_decay.generalization),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(k, "must be finite and >= 0"));
            }
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be > 0"));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return Err(Error::config("optimizer", "adam needs beta1, beta2 in [0, 1) and eps > 0"));
            }
        }
        Ok(())
    }

    /// Learning-rate multiplier of each group during `epoch`.
    pub fn group_multipliers(&self, epoch: usize) -> GroupValues {
        GroupValues {
            main: 1.0,
            generalization: if epoch >= self.gl_lr_warmup_epochs {
                self.gl_lr_multiplier
            } else {
                1.0
            },
        }
    }
}

fn check_grads(net: &Network, grads: &Gradients) -> Result<()> {
    grads.check_shapes(net)
}

/// `w ← w − lr·m_g·(∇w + λ_g·w)` for every parameter, with `m_g` and `λ_g`
/// the multiplier and weight decay of the parameter's group.
pub fn sgd_step(
    net: &mut Network,
    grads: &Gradients,
    lr: f64,
    group_lr: &GroupValues,
    weight_decay: &GroupValues,
) -> Result<()> {
    check_grads(net, grads)?;
    for (lin, g) in net.linears_mut().into_iter().zip(&grads.params) {
        let step = lr * group_lr.get(lin.group);
        let wd = weight_decay.get(lin.group);
        update(lin.weight.data_mut(), g.weight.data(), |w, gw| w - step * (gw + wd * w));
        if let (Some(b), Some(gb)) = (&mut lin.bias, &g.bias) {
            update(b, gb, |w, gw| w - step * (gw + wd * w));
        }
    }
    Ok(())
}

fn update(w: &mut [f64], g: &[f64], f: impl Fn(f64, f64) -> f64) {
    w.iter_mut().zip(g).for_each(|(w, &g)| *w = f(*w, g));
}

/// First and second moment buffers, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    m: Gradients,
    v: Gradients,
}

impl AdamState {
    pub fn new(net: &Network) -> Self {
        Self {
            t: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }
}

/// Bias-corrected Adam; weight decay is added to the gradient.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    net: &mut Network,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    group_lr: &GroupValues,
    weight_decay: &GroupValues,
    (beta1, beta2, eps): (f64, f64, f64),
) -> Result<()> {
    check_grads(net, grads)?;
    state.m.check_shapes(net)?;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let linears = net.linears_mut();
    for (((lin, g), m), v) in linears
        .into_iter()
        .zip(&grads.params)
        .zip(&mut state.m.params)
        .zip(&mut state.v.params)
    {
        let step = lr * group_lr.get(lin.group);
        let wd = weight_decay.get(lin.group);
        let adam = |w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..w.len() {
                let gi = g[i] + wd * w[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                w[i] -= step * mhat / (vhat.sqrt() + eps);
            }
        };
        adam(lin.weight.data_mut(), g.weight.data(), m.weight.data_mut(), v.weight.data_mut());
        if let (Some(b), Some(gb), Some(mb), Some(vb)) = (&mut lin.bias, &g.bias, &mut m.bias, &mut v.bias) {
            adam(b, gb, mb, vb);
        }
    }
    Ok(())
}

/// One logged epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based count of completed epochs.
    pub epoch: usize,
    /// Mean loss over the whole training set, eval mode.
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub sigma_product: f64,
    pub ln_sigma_product: f64,
    /// `∏σ²` over the generalization group, if the network has one.
    pub gl_sigma_product: Option<f64>,
    pub probe_sigma_max_mean: Option<f64>,
    pub probe_sigma_max_max: Option<f64>,
    pub nu: f64,
    pub lr: f64,
    /// Misclassification rates for one-hot targets.
    pub train_error: Option<f64>,
    pub test_error: Option<f64>,
}

pub const HISTORY_COLUMNS: [&str; 10] = [
    "epoch",
    "train_loss",
    "test_loss",
    "sigma_product",
    "gl_sigma_product",
    "probe_sigma_max_mean",
    "nu",
    "lr",
    "train_error",
    "test_error",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Whether a hook asked to stop before the epoch budget ran out.
    pub stopped_early: bool,
}

fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

impl History {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = HISTORY_COLUMNS.join(",");
        out.push('\n');
        for r in &self.records {
            let row = [
                r.epoch.to_string(),
                fmt_f(r.train_loss),
                fmt_opt(r.test_loss),
                fmt_f(r.sigma_product),
                fmt_opt(r.gl_sigma_product),
                fmt_opt(r.probe_sigma_max_mean),
                fmt_f(r.nu),
                fmt_f(r.lr),
                fmt_opt(r.train_error),
                fmt_opt(r.test_error),
            ];
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

/// Callbacks invoked by [`train`].
pub trait Hooks {
    /// Called after every epoch; `record` is present on logged epochs.
    fn on_epoch_end(&mut self, _epoch: usize, _net: &Network, _record: Option<&EpochRecord>) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }
}

pub struct NoHooks;

impl Hooks for NoHooks {}

/// Stops once the training misclassification rate hits zero.
pub struct StopAtZeroTrainError;

impl Hooks for StopAtZeroTrainError {
    fn on_epoch_end(&mut self, _: usize, _: &Network, record: Option<&EpochRecord>) -> ControlFlow<()> {
        match record.and_then(|r| r.train_error) {
            Some(e) if e == 0.0 => ControlFlow::Break(()),
            _ => ControlFlow::Continue(()),
        }
    }
}

fn gather_rows(m: &Matrix, rows: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(rows.len(), m.cols());
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(m.row(r));
    }
    out
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Eval-mode mean loss and (for one-hot targets) error rate.
pub fn evaluate(net: &Network, loss: &BregmanLoss, ds: &Dataset) -> Result<(f64, Option<f64>)> {
    const CHUNK: usize = 2048;
    let mut total = 0.0;
    let mut wrong = 0usize;
    let classify = loss.kind() == LossKind::SoftmaxCe;
    let mut start = 0;
    while start < ds.len() {
        let end = (start + CHUNK).min(ds.len());
        let rows: Vec<usize> = (start..end).collect();
        let z = net.predict(&gather_rows(&ds.inputs, &rows))?;
        for (i, &r) in rows.iter().enumerate() {
            let y = ds.targets.row(r);
            total += loss.value_unchecked(z.row(i), y);
            if classify && argmax(z.row(i)) != argmax(y) {
                wrong += 1;
            }
        }
        start = end;
    }
    let n = ds.len().max(1) as f64;
    Ok((total / n, classify.then(|| wrong as f64 / n)))
}

/// Evenly spaced row indices used for the `σ_max` probe.
pub fn probe_rows(n: usize, size: usize) -> Vec<usize> {
    let size = size.min(n);
    (0..size).map(|i| i * n / size).collect()
}

fn validate_data(net: &Network, loss: &BregmanLoss, ds: &Dataset, what: &str) -> Result<()> {
    if ds.dim_in() != net.input_dim() || ds.dim_out() != net.output_dim() {
        return Err(Error::DimensionMismatch {
            op: "train data",
            left: (ds.dim_in(), ds.dim_out()),
            right: (net.input_dim(), net.output_dim()),
        });
    }
    for r in 0..ds.len() {
        let z = vec![0.0; ds.dim_out()];
        loss.value(&z, ds.targets.row(r))
            .map_err(|e| Error::invalid(format!("{what} row {r}: {e}")))?;
    }
    Ok(())
}

/// Trains `net` in place and returns the logged history.
///
/// Epochs are zero-based internally; `ν` and the learning rate are read once
/// at the start of each epoch.
pub fn train(
    net: &mut Network,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    loss: &BregmanLoss,
    config: &TrainConfig,
    hooks: &mut dyn Hooks,
) -> Result<History> {
    config.validate()?;
    let mut history = History::default();
    if config.epochs == 0 {
        return Ok(history);
    }
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    validate_data(net, loss, train_set, "train")?;
    if let Some(t) = test_set {
        validate_data(net, loss, t, "test")?;
    }

    let n = train_set.len();
    let batch = if config.batch_size == 0 { n } else { config.batch_size.min(n) };
    let mut shuffle_rng = SeededRng::stream(config.seed, streams::SHUFFLE);
    let mut dropout_rng = SeededRng::stream(config.seed, streams::DROPOUT);
    let mut adam = matches!(config.optimizer, Optimizer::Adam { .. }).then(|| AdamState::new(net));
    let probe = probe_rows(n, config.probe_size);
    let has_gl = net.has_generalization_layers();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        let lr = config.lr_schedule.value_at(epoch);
        let nu = config.nu_schedule.value_at(epoch);
        if has_gl {
            net.set_scheduled_nu(nu);
        }
        let mult = config.group_multipliers(epoch);
        shuffle_rng.shuffle(&mut order);

        for (b, rows) in order.chunks(batch).enumerate() {
            let x = gather_rows(&train_set.inputs, rows);
            let diverged = |net: &Network, loss: f64| Error::Diverged {
                epoch,
                batch: b,
                loss,
                layer_norms: net.weight_norms(),
            };
            let (z, tape) = match net.forward_batch(&x, Mode::Train(&mut dropout_rng)) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => return Err(diverged(net, f64::NAN)),
                Err(e) => return Err(e),
            };
            let scale = 1.0 / rows.len() as f64;
            let mut dz = Matrix::zeros(z.rows(), z.cols());
            let mut batch_loss = 0.0;
            for (i, &r) in rows.iter().enumerate() {
                let y = train_set.targets.row(r);
                batch_loss += loss.value_unchecked(z.row(i), y);
                let g = loss.grad_unchecked(z.row(i), y);
                dz.row_mut(i).iter_mut().zip(g).for_each(|(d, g)| *d = g * scale);
            }
            batch_loss *= scale;
            if !batch_loss.is_finite() || !dz.is_finite() {
                return Err(diverged(net, batch_loss));
            }
            let grads = net.backward(&tape, &dz)?;
            match (&config.optimizer, adam.as_mut()) {
                (Optimizer::Adam { beta1, beta2, eps }, Some(state)) => {
                    adam_step(net, &grads, state, lr, &mult, &config.weight_decay, (*beta1, *beta2, *eps))?
                }
                _ => sgd_step(net, &grads, lr, &mult, &config.weight_decay)?,
            }
            if net.linears().iter().any(|l| !l.weight.is_finite()) {
                return Err(diverged(net, batch_loss));
            }
        }

        let done = epoch + 1;
        let log_now = done % config.log_every == 0 || done == config.epochs;
        let record = if log_now {
            Some(log_epoch(net, loss, train_set, test_set, &probe, done, nu, lr, has_gl)?)
        } else {
            None
        };
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
            if let Some(dir) = &config.checkpoint_dir {
                save_checkpoint(
                    &dir.join(format!("checkpoint-epoch{done:06}.json")),
                    net,
                    serde_json::json!({"epoch": done, "train_seed": config.seed}),
                )?;
            }
        }
        let flow = hooks.on_epoch_end(done, net, record.as_ref());
        if let Some(r) = record {
            if !r.train_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: 0,
                    loss: r.train_loss,
                    layer_norms: net.weight_norms(),
                });
            }
            history.records.push(r);
        }
        if flow.is_break() {
            if history.records.last().map(|r| r.epoch) != Some(done) {
                history
                    .records
                    .push(log_epoch(net, loss, train_set, test_set, &probe, done, nu, lr, has_gl)?);
            }
            history.stopped_early = done < config.epochs;
            break;
        }
    }
    Ok(history)
}

#[allow(clippy::too_many_arguments)]
fn log_epoch(
    net: &Network,
    loss: &BregmanLoss,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    probe: &[usize],
    epoch: usize,
    nu: f64,
    lr: f64,
    has_gl: bool,
) -> Result<EpochRecord> {
    let (train_loss, train_error) = evaluate(net, loss, train_set)?;
    let (test_loss, test_error) = match test_set {
        Some(t) => {
            let (l, e) = evaluate(net, loss, t)?;
            (Some(l), e)
        }
        None => (None, None),
    };
    let summary = spectral_summary(net);
    let (probe_mean, probe_max) = if probe.is_empty() {
        (None, None)
    } else {
        let mut sum = 0.0;
        let mut max = 0.0_f64;
        for &r in probe {
            let s = sigma_max_at(net, loss, train_set.inputs.row(r))?;
            sum += s;
            max = max.max(s);
        }
        (Some(sum / probe.len() as f64), Some(max))
    };
    Ok(EpochRecord {
        epoch,
        train_loss,
        test_loss,
        sigma_product: summary.sigma_product,
        ln_sigma_product: summary.ln_sigma_product,
        gl_sigma_product: has_gl.then(|| group_sigma_product(net, ParamGroup::Generalization)),
        probe_sigma_max_mean: probe_mean,
        probe_sigma_max_max: probe_max,
        nu,
        lr,
        train_error,
        test_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, InitScheme, LayerParams, LayerSpec, Linear, LinearGrad};

    fn scalar_net(w: f64, group: ParamGroup) -> Network {
        let mut net = Network::from_dense_weights(vec![Matrix::column(&[w])], &[Activation::Identity]).unwrap();
        net.linears_mut()[0].group = group;
        net
    }

    fn scalar_grad(g: f64) -> Gradients {
        Gradients {
            params: vec![LinearGrad {
                weight: Matrix::column(&[g]),
                bias: None,
            }],
        }
    }

    #[test]
    fn sgd_scalar_arithmetic() {
        let mut net = scalar_net(1.0, ParamGroup::Main);
        sgd_step(&mut net, &scalar_grad(2.0), 0.1, &GroupValues::splat(1.0), &GroupValues::default()).unwrap();
        assert!((net.linears()[0].weight.get(0, 0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grad_is_noop() {
        let net0 = scalar_net(1.5, ParamGroup::Main);
        let mut net = net0.clone();
        sgd_step(&mut net, &scalar_grad(0.0), 0.1, &GroupValues::splat(1.0), &GroupValues::default()).unwrap();
        assert_eq!(net, net0);
    }

    #[test]
    fn group_multiplier_scales_step() {
        let mult = GroupValues {
            main: 1.0,
            generalization: 0.1,
        };
        let mut a = scalar_net(1.0, ParamGroup::Main);
        let mut b = scalar_net(1.0, ParamGroup::Generalization);
        sgd_step(&mut a, &scalar_grad(2.0), 0.1, &mult, &GroupValues::default()).unwrap();
        sgd_step(&mut b, &scalar_grad(2.0), 0.1, &mult, &GroupValues::default()).unwrap();
        let da = 1.0 - a.linears()[0].weight.get(0, 0);
        let db = 1.0 - b.linears()[0].weight.get(0, 0);
        assert!((da / db - 10.0).abs() < 1e-9);
    }

    #[test]
    fn adam_first_step_hand_oracle() {
        let mut net = scalar_net(1.0, ParamGroup::Main);
        let mut st = AdamState::new(&net);
        let g = 0.3;
        adam_step(&mut net, &scalar_grad(g), &mut st, 0.01, &GroupValues::splat(1.0), &GroupValues::default(), (0.9, 0.999, 1e-8)).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
        let expected = 1.0 - 0.01 * g / (g.abs() + 1e-8);
        assert!((net.linears()[0].weight.get(0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_grad_from_zero_state_is_noop() {
        let net0 = scalar_net(2.0, ParamGroup::Main);
        let mut net = net0.clone();
        let mut st = AdamState::new(&net);
        adam_step(&mut net, &scalar_grad(0.0), &mut st, 0.01, &GroupValues::splat(1.0), &GroupValues::default(), (0.9, 0.999, 1e-8)).unwrap();
        assert_eq!(net, net0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut net = scalar_net(1.0, ParamGroup::Main);
        let bad = Gradients {
            params: vec![LinearGrad {
                weight: Matrix::zeros(2, 1),
                bias: None,
            }],
        };
        assert!(sgd_step(&mut net, &bad, 0.1, &GroupValues::splat(1.0), &GroupValues::default()).is_err());
    }

    #[test]
    fn zero_epochs_is_noop() {
        let mut net = Network::init(vec![LayerSpec::dense(1, 1, Activation::Identity)], 0, InitScheme::He).unwrap();
        let before = net.clone();
        let ds = crate::data::gen_quadratic(10, -1.0, 1.0, 0.0, 0).unwrap();
        let cfg = TrainConfig::new(0, 1, Optimizer::Sgd, Schedule::constant(0.1));
        let h = train(&mut net, &ds, None, &BregmanLoss::Squared, &cfg, &mut NoHooks).unwrap();
        assert!(h.is_empty());
        assert_eq!(net, before);
    }

    #[test]
    fn least_squares_slope() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 / 10.0 - 1.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x + 0.5 * (x * 7.0).sin()).collect();
        let ds = Dataset::new(Matrix::column(&xs), Matrix::column(&ys), "lin").unwrap();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let slope = sxy / sxx;

        let mut net = Network::from_dense_weights(vec![Matrix::column(&[0.0])], &[Activation::Identity]).unwrap();
        let mut cfg = TrainConfig::new(10_000, 0, Optimizer::Sgd, Schedule::constant(0.5));
        cfg.log_every = 10_000;
        train(&mut net, &ds, None, &BregmanLoss::Squared, &cfg, &mut NoHooks).unwrap();
        assert!((net.linears()[0].weight.get(0, 0) - slope).abs() < 1e-6);
    }

    #[test]
    fn quadratic_loss_decreases_monotonically() {
        let ds = crate::data::gen_quadratic(30, -1.0, 1.0, 0.5, 3).unwrap();
        let specs = vec![LayerSpec::dense(1, 1, Activation::Identity)];
        let mut net = Network::init(specs, 4, InitScheme::He).unwrap();
        // Hessian of the mean squared loss in (w, b) has eigenvalues ≤ max(mean x², 1) + …; lr 0.5 is safe.
        let cfg = TrainConfig::new(200, 0, Optimizer::Sgd, Schedule::constant(0.5));
        let h = train(&mut net, &ds, None, &BregmanLoss::Squared, &cfg, &mut NoHooks).unwrap();
        assert!(h.records.windows(2).all(|w| w[1].train_loss <= w[0].train_loss + 1e-12));
    }

    #[test]
    fn nan_aborts_with_diagnostic() {
        let ds = crate::data::gen_quadratic(10, -8.0, 8.0, 0.0, 0).unwrap();
        let mut net = Network::init(vec![LayerSpec::dense(1, 1, Activation::Identity)], 0, InitScheme::He).unwrap();
        let cfg = TrainConfig::new(500, 0, Optimizer::Sgd, Schedule::constant(10.0));
        match train(&mut net, &ds, None, &BregmanLoss::Squared, &cfg, &mut NoHooks) {
            Err(Error::Diverged { layer_norms, .. }) => assert_eq!(layer_norms.len(), 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn gl_block_matches_plain_residual_block() {
        let gl = vec![
            LayerSpec::dense(1, 4, Activation::Tanh),
            LayerSpec::gen_skip(4, Activation::Tanh),
            LayerSpec::dense(4, 1, Activation::Identity),
        ];
        let mut plain_specs = gl.clone();
        plain_specs[1] = LayerSpec::residual(4, 1, Activation::Tanh, false);
        let mut a = Network::init(gl, 7, InitScheme::Xavier).unwrap();
        let layers: Vec<LayerParams> = a
            .layers()
            .iter()
            .cloned()
            .map(|l| match l {
                LayerParams::GenSkip { branch, skip, nu } => LayerParams::GenSkip {
                    branch: branch
                        .into_iter()
                        .map(|l| Linear {
                            group: ParamGroup::Main,
                            ..l
                        })
                        .collect(),
                    skip,
                    nu,
                },
                other => other,
            })
            .collect();
        let mut b = Network::from_parts(plain_specs, layers, 7, InitScheme::Xavier).unwrap();
        let ds = crate::data::gen_cubic_mix(20, -1.0, 1.0, 0.1, 1).unwrap();
        let mut cfg = TrainConfig::new(30, 3, Optimizer::Sgd, Schedule::constant(0.01));
        cfg.gl_lr_multiplier = 1.0;
        cfg.batch_size = 5;
        let ha = train(&mut a, &ds, None, &BregmanLoss::Squared, &cfg, &mut NoHooks).unwrap();
        let hb = train(&mut b, &ds, None, &BregmanLoss::Squared, &cfg, &mut NoHooks).unwrap();
        assert_eq!(a.flat_weights(), b.flat_weights());
        let losses = |h: &History| h.records.iter().map(|r| r.train_loss).collect::<Vec<_>>();
        assert_eq!(losses(&ha), losses(&hb));
    }
}
