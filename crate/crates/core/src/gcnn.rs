//! Graph convolutional network layers `X' = σ(X Θ₀ + S X Θ₁)`, the centralized
//! forward pass, the MSE loss and its exact backpropagated gradient.
//!
//! Parameters flatten layer-major: for each layer `Θ₀` then `Θ₁`, each stored
//! row-major as a `g_in × g_out` block.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::graph::ShiftOperator;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    Identity,
}

impl Activation {
    pub fn leaky() -> Self {
        Activation::LeakyRelu {
            slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn apply(self, h: f64) -> f64 {
        match self {
            Activation::Relu => h.max(0.0),
            Activation::LeakyRelu { slope } => {
                if h > 0.0 {
                    h
                } else {
                    slope * h
                }
            }
            Activation::Tanh => h.tanh(),
            Activation::Identity => h,
        }
    }

    /// Derivative at `h`; at the kink the negative-branch slope is used.
    pub fn derivative(self, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if h > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => {
                let t = h.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub g_in: usize,
    pub g_out: usize,
    pub activation: Activation,
}

impl LayerSpec {
    /// Layers for the width chain `g₀, g₁, …, g_L` with `hidden` activations
    /// and an identity output layer.
    pub fn chain(widths: &[usize], hidden: Activation) -> Vec<LayerSpec> {
        let last = widths.len().saturating_sub(2);
        widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| LayerSpec {
                g_in: w[0],
                g_out: w[1],
                activation: if l == last { Activation::Identity } else { hidden },
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        2 * self.g_in * self.g_out
    }
}

pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::invalid("network needs at least one layer"));
    }
    for (l, s) in specs.iter().enumerate() {
        if s.g_in == 0 || s.g_out == 0 {
            return Err(Error::invalid(format!("layer {} has a zero width", l + 1)));
        }
        if l > 0 {
            check_dim("layer width chain", specs[l - 1].g_out, s.g_in)?;
        }
    }
    check_dim("output width", 1, specs[specs.len() - 1].g_out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// Self term, `g_in × g_out`.
    pub theta0: DMatrix<f64>,
    /// Neighborhood term, `g_in × g_out`.
    pub theta1: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    specs: Vec<LayerSpec>,
    layers: Vec<LayerParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Uniform in `±sqrt(6 / (g_in + g_out))`.
    #[default]
    GlorotUniform,
    /// Standard normal scaled by `1 / sqrt(g_in)`.
    ScaledNormal,
    Zeros,
}

pub fn init_params(specs: &[LayerSpec], scheme: InitScheme, seed: u64) -> Result<ParamSet> {
    validate_specs(specs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |s: &LayerSpec| -> DMatrix<f64> {
        match scheme {
            InitScheme::Zeros => DMatrix::zeros(s.g_in, s.g_out),
            InitScheme::GlorotUniform => {
                let bound = (6.0 / (s.g_in + s.g_out) as f64).sqrt();
                DMatrix::from_fn(s.g_in, s.g_out, |_, _| rng.random_range(-bound..=bound))
            }
            InitScheme::ScaledNormal => {
                let scale = 1.0 / (s.g_in as f64).sqrt();
                DMatrix::from_fn(s.g_in, s.g_out, |_, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * scale
                })
            }
        }
    };
    let layers = specs
        .iter()
        .map(|s| LayerParams {
            theta0: draw(s),
            theta1: draw(s),
        })
        .collect();
    Ok(ParamSet {
        specs: specs.to_vec(),
        layers,
    })
}

impl ParamSet {
    pub fn new(specs: Vec<LayerSpec>, layers: Vec<LayerParams>) -> Result<Self> {
        validate_specs(&specs)?;
        check_dim("layer count", specs.len(), layers.len())?;
        for (s, p) in specs.iter().zip(&layers) {
            for m in [&p.theta0, &p.theta1] {
                check_dim("parameter rows", s.g_in, m.nrows())?;
                check_dim("parameter columns", s.g_out, m.ncols())?;
            }
        }
        Ok(ParamSet { specs, layers })
    }

    pub fn zeros(specs: &[LayerSpec]) -> Result<Self> {
        init_params(specs, InitScheme::Zeros, 0)
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

    pub fn depth(&self) -> usize {
        self.specs.len()
    }

    pub fn input_width(&self) -> usize {
        self.specs[0].g_in
    }

    /// `g₀, …, g_L`.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.specs[0].g_in)
            .chain(self.specs.iter().map(|s| s.g_out))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.specs)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.layers {
            push_row_major(&mut out, &p.theta0);
            push_row_major(&mut out, &p.theta1);
        }
        out
    }

    pub fn unflatten(specs: &[LayerSpec], flat: &[f64]) -> Result<Self> {
        validate_specs(specs)?;
        check_dim("flat parameter vector", param_count(specs), flat.len())?;
        let mut rest = flat;
        let mut take = |s: &LayerSpec| {
            let (head, tail) = rest.split_at(s.g_in * s.g_out);
            rest = tail;
            DMatrix::from_row_slice(s.g_in, s.g_out, head)
        };
        let layers = specs
            .iter()
            .map(|s| LayerParams {
                theta0: take(s),
                theta1: take(s),
            })
            .collect();
        Ok(ParamSet {
            specs: specs.to_vec(),
            layers,
        })
    }

    /// Overwrites all parameters from a flat vector with the same layout.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("flat parameter vector", self.param_count(), flat.len())?;
        let mut pos = 0;
        for p in &mut self.layers {
            for m in [&mut p.theta0, &mut p.theta1] {
                for r in 0..m.nrows() {
                    for c in 0..m.ncols() {
                        m[(r, c)] = flat[pos];
                        pos += 1;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ParamSet::from_checkpoint_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_checkpoint_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.to_string(),
                order: FLATTEN_ORDER.to_string(),
                widths: self.widths(),
                layers: self.specs.clone(),
                param_count: self.param_count(),
            },
            theta: self.flatten(),
        };
        Ok(serde_json::to_string_pretty(&ckpt)?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.header.format != CHECKPOINT_FORMAT || ckpt.header.order != FLATTEN_ORDER {
            return Err(Error::Parse(format!(
                "unsupported checkpoint format {:?} / order {:?}",
                ckpt.header.format, ckpt.header.order
            )));
        }
        check_dim("checkpoint parameter count", ckpt.header.param_count, ckpt.theta.len())?;
        ParamSet::unflatten(&ckpt.header.layers, &ckpt.theta)
    }
}

pub fn param_count(specs: &[LayerSpec]) -> usize {
    specs.iter().map(LayerSpec::param_count).sum()
}

/// Offsets of `(Θ₀ˡ, Θ₁ˡ)` inside the flat vector, per layer.
pub fn layer_offsets(specs: &[LayerSpec]) -> Vec<(usize, usize)> {
    let mut pos = 0;
    specs
        .iter()
        .map(|s| {
            let block = s.g_in * s.g_out;
            let off = (pos, pos + block);
            pos += 2 * block;
            off
        })
        .collect()
}

fn push_row_major(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        out.extend(m.row(r).iter());
    }
}

const CHECKPOINT_FORMAT: &str = "fdgnn-params/1";
const FLATTEN_ORDER: &str = "layer-major; theta0 then theta1; row-major g_in x g_out";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format: String,
    order: String,
    widths: Vec<usize>,
    layers: Vec<LayerSpec>,
    param_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    header: CheckpointHeader,
    theta: Vec<f64>,
}

/// Forward caches of a centralized pass.
#[derive(Debug, Clone)]
pub struct Activations {
    /// `X⁰ … X^L`, where `X⁰` is the input.
    pub outputs: Vec<DMatrix<f64>>,
    /// `H¹ … H^L`, stored at index `l - 1`.
    pub pre: Vec<DMatrix<f64>>,
    /// `S X^{l-1}` for `l = 1 … L`, stored at index `l - 1`.
    pub aggregates: Vec<DMatrix<f64>>,
}

pub fn forward(
    params: &ParamSet,
    shift: &ShiftOperator,
    features: &DMatrix<f64>,
) -> Result<(DVector<f64>, Activations)> {
    let n = shift.node_count();
    check_dim("feature rows", n, features.nrows())?;
    check_dim("feature columns", params.input_width(), features.ncols())?;
    let mut acts = Activations {
        outputs: vec![features.clone()],
        pre: Vec::with_capacity(params.depth()),
        aggregates: Vec::with_capacity(params.depth()),
    };
    for (spec, p) in params.specs.iter().zip(&params.layers) {
        let x = acts.outputs.last().expect("input present");
        let agg = &shift.matrix * x;
        let h = x * &p.theta0 + &agg * &p.theta1;
        let out = h.map(|v| spec.activation.apply(v));
        acts.aggregates.push(agg);
        acts.pre.push(h);
        acts.outputs.push(out);
    }
    let yhat = acts.outputs.last().expect("output present").column(0).into_owned();
    Ok((yhat, acts))
}

/// Squared error of each node, `(yᵢ - ŷᵢ)²`.
pub fn local_losses(y: &[f64], yhat: &[f64]) -> Result<Vec<f64>> {
    check_dim("label length", y.len(), yhat.len())?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).collect())
}

pub fn mse_loss(y: &[f64], yhat: &[f64]) -> Result<f64> {
    let losses = local_losses(y, yhat)?;
    if losses.is_empty() {
        return Err(Error::invalid("empty label vector"));
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Exact gradient of `mse_loss ∘ forward` with respect to the flat parameters.
pub fn central_gradient(
    params: &ParamSet,
    shift: &ShiftOperator,
    features: &DMatrix<f64>,
    y: &[f64],
) -> Result<Vec<f64>> {
    let (yhat, acts) = forward(params, shift, features)?;
    let n = yhat.len();
    check_dim("label length", n, y.len())?;
    let scale = 2.0 / n as f64;
    // adjoint of the layer output, n × g_l
    let mut z = DMatrix::from_fn(n, 1, |i, _| scale * (yhat[i] - y[i]));
    let mut blocks: Vec<(DMatrix<f64>, DMatrix<f64>)> = Vec::with_capacity(params.depth());
    for l in (0..params.depth()).rev() {
        let spec = &params.specs[l];
        let p = &params.layers[l];
        let q = z.zip_map(&acts.pre[l], |zv, h| zv * spec.activation.derivative(h));
        let d0 = acts.outputs[l].transpose() * &q;
        let d1 = acts.aggregates[l].transpose() * &q;
        if l > 0 {
            z = &q * p.theta0.transpose() + shift.matrix.transpose() * (&q * p.theta1.transpose());
        }
        blocks.push((d0, d1));
    }
    let mut grad = Vec::with_capacity(params.param_count());
    for (d0, d1) in blocks.iter().rev() {
        push_row_major(&mut grad, d0);
        push_row_major(&mut grad, d1);
    }
    Ok(grad)
}

/// Central finite differences of the MSE loss, one coordinate at a time.
pub fn numerical_gradient(
    params: &ParamSet,
    shift: &ShiftOperator,
    features: &DMatrix<f64>,
    y: &[f64],
    step: f64,
) -> Result<Vec<f64>> {
    let base = params.flatten();
    let specs = params.specs();
    let loss_at = |theta: &[f64]| -> Result<f64> {
        let p = ParamSet::unflatten(specs, theta)?;
        let (yhat, _) = forward(&p, shift, features)?;
        mse_loss(y, yhat.as_slice())
    };
    let mut theta = base.clone();
    let mut grad = Vec::with_capacity(base.len());
    for k in 0..base.len() {
        theta[k] = base[k] + step;
        let up = loss_at(&theta)?;
        theta[k] = base[k] - step;
        let down = loss_at(&theta)?;
        theta[k] = base[k];
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// Largest coordinatewise relative error `|a - b| / |b|` over coordinates with
/// `|b| > floor`.
pub fn max_relative_error(actual: &[f64], reference: &[f64], floor: f64) -> f64 {
    actual
        .iter()
        .zip(reference)
        .filter(|(_, b)| b.abs() > floor)
        .map(|(a, b)| (a - b).abs() / b.abs())
        .fold(0.0, f64::max)
}
