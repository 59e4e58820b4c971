//! Feed-forward networks with dense layers and the two generalization-layer
//! variants.
//!
//! A [`Network`] is an ordered list of [`LayerSpec`]s plus their parameters.
//! Three layer kinds exist:
//!
//! * `Dense`: `a(W·x + b)`.
//! * `GenSkip`: a branch of `depth` hidden layers `g` followed by an output
//!   map, joined with a `ν`-weighted shortcut before the output nonlinearity:
//!   `a(W_out·g + ν·W_s·x)`. With `depth = 1` this is the generalization layer
//!   `(g, W_g, νW_s)`; with a fixed `ν = 1` and identity projection it is an
//!   ordinary residual block.
//! * `GenDropout`: `a(W_out · drop(a(W_g·x)))` with inverted dropout on the
//!   inserted nodes only.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT};
pub use forward::{ForwardTape, Gradients, LinearGrad, Mode};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{streams, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Softplus,
    Identity,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Relu,
        Activation::Tanh,
        Activation::Softplus,
        Activation::Identity,
    ];

    #[inline]
    pub fn apply(self, u: f64) -> f64 {
        match self {
            Activation::Relu => u.max(0.0),
            Activation::Tanh => u.tanh(),
            Activation::Softplus => crate::bregman::softplus(u),
            Activation::Identity => u,
        }
    }

    /// Pointwise derivative; ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, u: f64) -> f64 {
        match self {
            Activation::Relu => {
                if u > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = u.tanh();
                1.0 - t * t
            }
            Activation::Softplus => crate::bregman::sigmoid(u),
            Activation::Identity => 1.0,
        }
    }

    /// Positively homogeneous: `a(βu) = β·a(u)` for `β > 0`.
    pub fn is_positively_homogeneous(self) -> bool {
        matches!(self, Activation::Relu | Activation::Identity)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    #[default]
    Identity,
    Learned,
}

/// Where a skip branch gets its `ν` from.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipStrength {
    /// Follows the training run's `ν` schedule; marks a generalization layer,
    /// whose inserted weights form the low-learning-rate group.
    #[default]
    Scheduled,
    /// Constant strength; `Fixed(1.0)` with an identity projection is a plain residual block.
    Fixed(f64),
}

fn default_true() -> bool {
    true
}

fn default_depth() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
        activation: Activation,
        #[serde(default = "default_true")]
        bias: bool,
    },
    GenSkip {
        input: usize,
        width: usize,
        output: usize,
        activation: Activation,
        #[serde(default)]
        nu: SkipStrength,
        #[serde(default)]
        projection: Projection,
        /// Hidden layers inside the skipped branch.
        #[serde(default = "default_depth")]
        depth: usize,
        #[serde(default)]
        bias: bool,
    },
    GenDropout {
        input: usize,
        width: usize,
        output: usize,
        activation: Activation,
        drop_prob: f64,
        #[serde(default)]
        bias: bool,
    },
}

impl LayerSpec {
    pub fn dense(input: usize, output: usize, activation: Activation) -> Self {
        LayerSpec::Dense {
            input,
            output,
            activation,
            bias: true,
        }
    }

    pub fn dense_no_bias(input: usize, output: usize, activation: Activation) -> Self {
        LayerSpec::Dense {
            input,
            output,
            activation,
            bias: false,
        }
    }

    /// Generalization layer with identity shortcut and scheduled `ν`.
    pub fn gen_skip(dim: usize, activation: Activation) -> Self {
        LayerSpec::GenSkip {
            input: dim,
            width: dim,
            output: dim,
            activation,
            nu: SkipStrength::Scheduled,
            projection: Projection::Identity,
            depth: 1,
            bias: false,
        }
    }

    /// Identity-shortcut residual block over `depth + 1` layers.
    pub fn residual(dim: usize, depth: usize, activation: Activation, bias: bool) -> Self {
        LayerSpec::GenSkip {
            input: dim,
            width: dim,
            output: dim,
            activation,
            nu: SkipStrength::Fixed(1.0),
            projection: Projection::Identity,
            depth,
            bias,
        }
    }

    pub fn gen_dropout(input: usize, width: usize, output: usize, activation: Activation, drop_prob: f64) -> Self {
        LayerSpec::GenDropout {
            input,
            width,
            output,
            activation,
            drop_prob,
            bias: false,
        }
    }

    pub fn input(&self) -> usize {
        match *self {
            LayerSpec::Dense { input, .. }
            | LayerSpec::GenSkip { input, .. }
            | LayerSpec::GenDropout { input, .. } => input,
        }
    }

    pub fn output(&self) -> usize {
        match *self {
            LayerSpec::Dense { output, .. }
            | LayerSpec::GenSkip { output, .. }
            | LayerSpec::GenDropout { output, .. } => output,
        }
    }

    pub fn activation(&self) -> Activation {
        match *self {
            LayerSpec::Dense { activation, .. }
            | LayerSpec::GenSkip { activation, .. }
            | LayerSpec::GenDropout { activation, .. } => activation,
        }
    }

    /// Number of weight layers (linear maps followed by a nonlinearity) on the main path.
    pub fn depth_in_layers(&self) -> usize {
        match *self {
            LayerSpec::Dense { .. } => 1,
            LayerSpec::GenSkip { depth, .. } => depth + 1,
            LayerSpec::GenDropout { .. } => 2,
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidNetwork(format!("layer {index}: {msg}")));
        if self.input() == 0 || self.output() == 0 {
            return bad("zero-sized layer".into());
        }
        match *self {
            LayerSpec::Dense { .. } => Ok(()),
            LayerSpec::GenSkip {
                input,
                width,
                output,
                nu,
                projection,
                depth,
                ..
            } => {
                if width == 0 || depth == 0 {
                    return bad("skip branch needs width > 0 and depth > 0".into());
                }
                if projection == Projection::Identity && input != output {
                    return bad(format!(
                        "identity shortcut needs matching dims, got {input} -> {output}"
                    ));
                }
                if let SkipStrength::Fixed(v) = nu {
                    if !v.is_finite() || v <= 0.0 {
                        return bad(format!("fixed skip strength must be > 0, got {v}"));
                    }
                }
                Ok(())
            }
            LayerSpec::GenDropout {
                width, drop_prob, ..
            } => {
                if width == 0 {
                    return bad("dropout layer needs width > 0".into());
                }
                if !(0.0..1.0).contains(&drop_prob) {
                    return bad(format!("drop_prob must lie in [0, 1), got {drop_prob}"));
                }
                Ok(())
            }
        }
    }
}

pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::InvalidNetwork("no layers".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        s.validate(i)?;
    }
    for (i, pair) in specs.windows(2).enumerate() {
        if pair[0].output() != pair[1].input() {
            return Err(Error::InvalidNetwork(format!(
                "layer {} outputs {} but layer {} expects {}",
                i,
                pair[0].output(),
                i + 1,
                pair[1].input()
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Main,
    /// Inserted weights of a generalization layer.
    Generalization,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Normal with std `√(2/fan_in)`.
    He,
    /// Uniform on `±√(6/(fan_in+fan_out))`.
    Xavier,
    /// Weights and biases uniform on `±1/√fan_in`; the only scheme with
    /// nonzero initial biases.
    FanInUniform,
}

impl InitScheme {
    /// Standard deviation of a freshly drawn weight.
    pub fn weight_std(self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            InitScheme::He => (2.0 / fan_in as f64).sqrt(),
            InitScheme::Xavier => (2.0 / (fan_in + fan_out) as f64).sqrt(),
            InitScheme::FanInUniform => (1.0 / (3.0 * fan_in as f64)).sqrt(),
        }
    }
}

/// One affine map `W·x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
    pub group: ParamGroup,
}

impl Linear {
    fn init(
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        group: ParamGroup,
        scheme: InitScheme,
        rng: &mut SeededRng,
    ) -> Self {
        let data: Vec<f64> = match scheme {
            InitScheme::He => {
                let std = (2.0 / fan_in as f64).sqrt();
                (0..fan_in * fan_out).map(|_| std * rng.normal()).collect()
            }
            InitScheme::Xavier => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..fan_in * fan_out)
                    .map(|_| rng.uniform_range(-limit, limit))
                    .collect()
            }
            InitScheme::FanInUniform => {
                let limit = 1.0 / (fan_in as f64).sqrt();
                (0..fan_in * fan_out)
                    .map(|_| rng.uniform_range(-limit, limit))
                    .collect()
            }
        };
        let bias = bias.then(|| match scheme {
            InitScheme::FanInUniform => {
                let limit = 1.0 / (fan_in as f64).sqrt();
                (0..fan_out).map(|_| rng.uniform_range(-limit, limit)).collect()
            }
            _ => vec![0.0; fan_out],
        });
        Self {
            weight: Matrix::new(fan_out, fan_in, data).expect("finite init"),
            bias,
            group,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.as_ref().map_or(0, Vec::len)
    }
}

/// Parameters of one layer, mirroring its [`LayerSpec`].
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Dense(Linear),
    GenSkip {
        /// Hidden maps `W_g` followed by the output map `W_out` (last entry).
        branch: Vec<Linear>,
        /// Learned projection `W_s`; `None` for identity shortcuts.
        skip: Option<Linear>,
        /// Current skip strength.
        nu: f64,
    },
    GenDropout {
        gate: Linear,
        out: Linear,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    specs: Vec<LayerSpec>,
    layers: Vec<LayerParams>,
    seed: u64,
    scheme: InitScheme,
}

impl Network {
    /// Random initialization, deterministic in `seed`. Biases start at zero
    /// except under [`InitScheme::FanInUniform`].
    pub fn init(specs: Vec<LayerSpec>, seed: u64, scheme: InitScheme) -> Result<Self> {
        validate_specs(&specs)?;
        let mut rng = SeededRng::stream(seed, streams::INIT);
        let layers = specs
            .iter()
            .map(|spec| match *spec {
                LayerSpec::Dense {
                    input,
                    output,
                    bias,
                    ..
                } => LayerParams::Dense(Linear::init(
                    input,
                    output,
                    bias,
                    ParamGroup::Main,
                    scheme,
                    &mut rng,
                )),
                LayerSpec::GenSkip {
                    input,
                    width,
                    output,
                    nu,
                    projection,
                    depth,
                    bias,
                    ..
                } => {
                    let hidden_group = match nu {
                        SkipStrength::Scheduled => ParamGroup::Generalization,
                        SkipStrength::Fixed(_) => ParamGroup::Main,
                    };
                    let mut branch = Vec::with_capacity(depth + 1);
                    let mut fan_in = input;
                    for _ in 0..depth {
                        branch.push(Linear::init(fan_in, width, bias, hidden_group, scheme, &mut rng));
                        fan_in = width;
                    }
                    branch.push(Linear::init(width, output, bias, ParamGroup::Main, scheme, &mut rng));
                    let skip = (projection == Projection::Learned).then(|| {
                        Linear::init(input, output, false, ParamGroup::Main, scheme, &mut rng)
                    });
                    let nu = match nu {
                        SkipStrength::Scheduled => 1.0,
                        SkipStrength::Fixed(v) => v,
                    };
                    LayerParams::GenSkip { branch, skip, nu }
                }
                LayerSpec::GenDropout {
                    input,
                    width,
                    output,
                    bias,
                    ..
                } => LayerParams::GenDropout {
                    gate: Linear::init(input, width, bias, ParamGroup::Main, scheme, &mut rng),
                    out: Linear::init(width, output, bias, ParamGroup::Main, scheme, &mut rng),
                },
            })
            .collect();
        Ok(Self {
            specs,
            layers,
            seed,
            scheme,
        })
    }

    /// Assembles a network from explicit parameters, checking every shape.
    pub fn from_parts(
        specs: Vec<LayerSpec>,
        layers: Vec<LayerParams>,
        seed: u64,
        scheme: InitScheme,
    ) -> Result<Self> {
        validate_specs(&specs)?;
        let template = Network::init(specs.clone(), seed, scheme)?;
        if template.layers.len() != layers.len() {
            return Err(Error::InvalidNetwork("layer count does not match specs".into()));
        }
        let net = Self {
            specs,
            layers,
            seed,
            scheme,
        };
        let expected = template.linears();
        let actual = net.linears();
        if expected.len() != actual.len() {
            return Err(Error::InvalidNetwork("parameter count does not match specs".into()));
        }
        for (i, (e, a)) in expected.iter().zip(&actual).enumerate() {
            if e.weight.shape() != a.weight.shape()
                || e.bias.as_ref().map(Vec::len) != a.bias.as_ref().map(Vec::len)
            {
                return Err(Error::InvalidNetwork(format!(
                    "parameter {i}: shape {:?} does not match spec {:?}",
                    a.weight.shape(),
                    e.weight.shape()
                )));
            }
        }
        Ok(net)
    }

    /// Plain dense network with explicit weights (no biases), mostly for fixtures.
    pub fn from_dense_weights(weights: Vec<Matrix>, activations: &[Activation]) -> Result<Self> {
        if weights.len() != activations.len() {
            return Err(Error::invalid("one activation per weight matrix"));
        }
        let specs: Vec<LayerSpec> = weights
            .iter()
            .zip(activations)
            .map(|(w, &a)| LayerSpec::dense_no_bias(w.cols(), w.rows(), a))
            .collect();
        let layers = weights
            .into_iter()
            .map(|weight| {
                LayerParams::Dense(Linear {
                    weight,
                    bias: None,
                    group: ParamGroup::Main,
                })
            })
            .collect();
        Self::from_parts(specs, layers, 0, InitScheme::He)
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn init_scheme(&self) -> InitScheme {
        self.scheme
    }

    pub fn input_dim(&self) -> usize {
        self.specs[0].input()
    }

    pub fn output_dim(&self) -> usize {
        self.specs[self.specs.len() - 1].output()
    }

    /// Every affine map in canonical order: per layer, `Dense` → `[W]`,
    /// `GenSkip` → `[W_g.., W_out, W_s?]`, `GenDropout` → `[W_g, W_out]`.
    pub fn linears(&self) -> Vec<&Linear> {
        let mut out = Vec::new();
        for layer in &self.layers {
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

    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                LayerParams::Dense(l) => out.push(l),
                LayerParams::GenSkip { branch, skip, .. } => {
                    out.extend(branch.iter_mut());
                    out.extend(skip.iter_mut());
                }
                LayerParams::GenDropout { gate, out: o } => {
                    out.push(gate);
                    out.push(o);
                }
            }
        }
        out
    }

    /// Parameter-group id for each entry of [`Network::linears`].
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        self.linears().iter().map(|l| l.group).collect()
    }

    /// Human-readable names aligned with [`Network::linears`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerParams::Dense(_) => names.push(format!("layers.{i}.dense")),
                LayerParams::GenSkip { branch, skip, .. } => {
                    for j in 0..branch.len() - 1 {
                        names.push(format!("layers.{i}.branch.{j}"));
                    }
                    names.push(format!("layers.{i}.out"));
                    if skip.is_some() {
                        names.push(format!("layers.{i}.skip"));
                    }
                }
                LayerParams::GenDropout { .. } => {
                    names.push(format!("layers.{i}.gate"));
                    names.push(format!("layers.{i}.out"));
                }
            }
        }
        names
    }

    pub fn num_params(&self) -> usize {
        self.linears().iter().map(|l| l.param_count()).sum()
    }

    pub fn has_generalization_layers(&self) -> bool {
        self.specs.iter().any(|s| {
            matches!(
                s,
                LayerSpec::GenSkip {
                    nu: SkipStrength::Scheduled,
                    ..
                }
            )
        })
    }

    /// Current `ν` of each `GenSkip` layer, in layer order.
    pub fn skip_strengths(&self) -> Vec<f64> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerParams::GenSkip { nu, .. } => Some(*nu),
                _ => None,
            })
            .collect()
    }

    /// Sets `ν` on every scheduled skip branch; fixed-strength branches are untouched.
    pub fn set_scheduled_nu(&mut self, value: f64) {
        for (spec, layer) in self.specs.iter().zip(&mut self.layers) {
            if let (
                LayerSpec::GenSkip {
                    nu: SkipStrength::Scheduled,
                    ..
                },
                LayerParams::GenSkip { nu, .. },
            ) = (spec, layer)
            {
                *nu = value;
            }
        }
    }

    pub(crate) fn set_skip_strengths(&mut self, values: &[f64]) -> Result<()> {
        let mut it = values.iter();
        for layer in &mut self.layers {
            if let LayerParams::GenSkip { nu, .. } = layer {
                *nu = *it
                    .next()
                    .ok_or_else(|| Error::Checkpoint("too few skip strengths".into()))?;
            }
        }
        if it.next().is_some() {
            return Err(Error::Checkpoint("too many skip strengths".into()));
        }
        Ok(())
    }

    /// Frobenius norm of each weight matrix (diagnostics).
    pub fn weight_norms(&self) -> Vec<f64> {
        self.linears().iter().map(|l| l.weight.frobenius_norm()).collect()
    }

    /// All weight entries (biases excluded), in canonical order.
    pub fn flat_weights(&self) -> Vec<f64> {
        self.linears()
            .iter()
            .flat_map(|l| l.weight.data().iter().copied())
            .collect()
    }

    /// Reciprocal rescaling of two consecutive dense ReLU layers:
    /// `W_l ← β·W_l`, `b_l ← β·b_l`, `W_{l+1} ← W_{l+1}/β`.
    ///
    /// For positively homogeneous activations the network function is unchanged.
    pub fn scale_layer_pair(&self, l: usize, beta: f64) -> Result<Network> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::invalid(format!("beta must be finite and > 0, got {beta}")));
        }
        if l + 1 >= self.specs.len() {
            return Err(Error::invalid(format!("no layer pair at {l}")));
        }
        for i in [l, l + 1] {
            match self.specs[i] {
                LayerSpec::Dense {
                    activation: Activation::Relu,
                    ..
                } => {}
                _ => {
                    return Err(Error::invalid(format!(
                        "layer {i} is not a dense ReLU layer; rescaling only preserves positively homogeneous pairs"
                    )))
                }
            }
        }
        let mut out = self.clone();
        if let LayerParams::Dense(lin) = &mut out.layers[l] {
            lin.weight = lin.weight.scaled(beta);
            if let Some(b) = &mut lin.bias {
                b.iter_mut().for_each(|v| *v *= beta);
            }
        }
        if let LayerParams::Dense(lin) = &mut out.layers[l + 1] {
            lin.weight = lin.weight.scaled(1.0 / beta);
        }
        Ok(out)
    }
}
