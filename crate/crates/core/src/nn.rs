//! Dense multilayer perceptrons with scalar output.
//!
//! Parameters live in one flat vector. Each layer stores its weight matrix
//! row-major (`out x in`) followed by its bias vector, layers in input to
//! output order.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            // x == 0 takes the positive branch, here and in `derivative`.
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Architecture of a network. The output layer is always affine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    layer_widths: Vec<usize>,
    hidden_activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, hidden_activation: Activation) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least input and output widths, got {layer_widths:?}"
            )));
        }
        if layer_widths.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "layer widths must be positive, got {layer_widths:?}"
            )));
        }
        if let Activation::LeakyRelu { slope } = hidden_activation {
            if !slope.is_finite() {
                return Err(Error::InvalidSpec("leaky relu slope must be finite".into()));
            }
        }
        Ok(Self {
            layer_widths,
            hidden_activation,
        })
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// `(fan_in, fan_out, offset)` for every layer, offset pointing at the
    /// first weight of the layer in the flat vector.
    pub fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.layer_widths.windows(2).scan(0usize, |offset, w| {
            let start = *offset;
            *offset += w[0] * w[1] + w[1];
            Some((w[0], w[1], start))
        })
    }

    fn check_valid_for_eval(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_width() {
            return Err(Error::DimensionMismatch {
                what: "network input",
                expected: self.input_width(),
                got: input.len(),
            });
        }
        if self.output_width() != 1 {
            return Err(Error::DimensionMismatch {
                what: "network output width",
                expected: 1,
                got: self.output_width(),
            });
        }
        Ok(())
    }
}

/// Flat parameter vector tied to the spec it parameterizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    spec: Arc<MlpSpec>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(spec: Arc<MlpSpec>, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.n_params() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: spec.n_params(),
                got: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "parameter vector",
                index,
            });
        }
        Ok(Self { spec, values })
    }

    pub fn zeros(spec: Arc<MlpSpec>) -> Self {
        let n = spec.n_params();
        Self {
            spec,
            values: vec![0.0; n],
        }
    }

    pub fn spec(&self) -> &Arc<MlpSpec> {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Same spec, new values. Values are validated like [`ParamVector::new`].
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.spec.clone(), values)
    }

    pub fn norm_inf(&self) -> f64 {
        norm_inf(&self.values)
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

pub(crate) fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Every parameter drawn from `U(-a, a)`.
    Uniform(f64),
    /// Weights from `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    Kaiming,
}

pub fn init_params(spec: &Arc<MlpSpec>, seed: u64, scheme: InitScheme) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; spec.n_params()];
    match scheme {
        InitScheme::Uniform(a) => {
            let a = a.abs();
            if a > 0.0 {
                for v in &mut values {
                    *v = rng.random_range(-a..a);
                }
            }
        }
        InitScheme::Kaiming => {
            for (fan_in, fan_out, offset) in spec.layers() {
                let bound = (6.0 / fan_in as f64).sqrt();
                for v in &mut values[offset..offset + fan_in * fan_out] {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
    }
    ParamVector {
        spec: spec.clone(),
        values,
    }
}

/// Per-layer buffers reused across forward/backward passes.
#[derive(Debug, Clone)]
pub struct Workspace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
    layers: Vec<(usize, usize, usize)>,
}

impl Workspace {
    pub fn new(spec: &MlpSpec) -> Self {
        let widths = spec.layer_widths();
        let max_width = widths.iter().copied().max().unwrap_or(1);
        Self {
            pre: widths[1..].iter().map(|&w| vec![0.0; w]).collect(),
            post: widths.iter().map(|&w| vec![0.0; w]).collect(),
            delta: Vec::with_capacity(max_width),
            delta_prev: Vec::with_capacity(max_width),
            layers: spec.layers().collect(),
        }
    }
}

/// Unchecked forward pass over raw values. Leaves the activations in `ws`
/// for a subsequent [`backward_raw`].
pub(crate) fn forward_raw(spec: &MlpSpec, values: &[f64], input: &[f64], ws: &mut Workspace) -> f64 {
    let act = spec.hidden_activation();
    let n_layers = ws.layers.len();
    // Layers are tiny, so plain indexed loops (no memcpy, no chunk
    // division) are noticeably faster than the slice helpers.
    for (p, &v) in ws.post[0].iter_mut().zip(input) {
        *p = v;
    }
    for l in 0..n_layers {
        let (fan_in, fan_out, offset) = ws.layers[l];
        let weights = &values[offset..offset + fan_in * fan_out + fan_out];
        let (head, tail) = ws.post.split_at_mut(l + 1);
        let x = &head[l][..fan_in];
        let pre = &mut ws.pre[l][..fan_out];
        for o in 0..fan_out {
            let row = &weights[o * fan_in..o * fan_in + fan_in];
            let mut acc = weights[fan_in * fan_out + o];
            for i in 0..fan_in {
                acc += row[i] * x[i];
            }
            pre[o] = acc;
        }
        let out = &mut tail[0][..fan_out];
        if l + 1 == n_layers {
            for o in 0..fan_out {
                out[o] = pre[o];
            }
        } else {
            for o in 0..fan_out {
                out[o] = act.apply(pre[o]);
            }
        }
    }
    ws.post[n_layers][0]
}

/// Adds `upstream * d(output)/d(params)` into `out`, using the activations
/// left by the last [`forward_raw`] on `ws`.
pub(crate) fn backward_raw(
    spec: &MlpSpec,
    values: &[f64],
    ws: &mut Workspace,
    upstream: f64,
    out: &mut [f64],
) {
    let act = spec.hidden_activation();
    ws.delta.clear();
    ws.delta.push(upstream);
    for l in (0..ws.layers.len()).rev() {
        let (fan_in, fan_out, offset) = ws.layers[l];
        let x = &ws.post[l];
        let (gw, rest) = out[offset..].split_at_mut(fan_in * fan_out);
        let gb = &mut rest[..fan_out];
        for o in 0..fan_out {
            let d = ws.delta[o];
            gb[o] += d;
            if d != 0.0 {
                for (g, xi) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(x.iter()) {
                    *g += d * xi;
                }
            }
        }
        if l > 0 {
            let weights = &values[offset..offset + fan_in * fan_out];
            let pre_prev = &ws.pre[l - 1];
            ws.delta_prev.clear();
            ws.delta_prev.resize(fan_in, 0.0);
            for o in 0..fan_out {
                let d = ws.delta[o];
                if d == 0.0 {
                    continue;
                }
                for (dp, w) in ws.delta_prev.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in]) {
                    *dp += w * d;
                }
            }
            for (dp, &p) in ws.delta_prev.iter_mut().zip(pre_prev.iter()) {
                *dp *= act.derivative(p);
            }
            std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
        }
    }
}

/// Evaluates the network at `input`.
pub fn forward(params: &ParamVector, input: &[f64]) -> Result<f64> {
    params.spec.check_valid_for_eval(input)?;
    let mut ws = Workspace::new(&params.spec);
    Ok(forward_raw(&params.spec, &params.values, input, &mut ws))
}

/// `upstream * d forward(params, input) / d params`, aligned with `params`.
pub fn grad_params(params: &ParamVector, input: &[f64], upstream: f64) -> Result<ParamVector> {
    params.spec.check_valid_for_eval(input)?;
    let mut ws = Workspace::new(&params.spec);
    forward_raw(&params.spec, &params.values, input, &mut ws);
    let mut out = vec![0.0; params.len()];
    backward_raw(&params.spec, &params.values, &mut ws, upstream, &mut out);
    Ok(ParamVector {
        spec: params.spec.clone(),
        values: out,
    })
}

/// Hessian-vector product of a scalar loss, given its exact gradient.
///
/// Central difference of gradients along `vector` with step
/// `1e-4 * (1 + |params|_inf)`.
pub fn hvp<G>(params: &[f64], grad: G, vector: &[f64]) -> Result<Vec<f64>>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if vector.len() != params.len() {
        return Err(Error::DimensionMismatch {
            what: "hvp direction",
            expected: params.len(),
            got: vector.len(),
        });
    }
    if vector.iter().all(|&v| v == 0.0) {
        return Ok(vec![0.0; params.len()]);
    }
    let h = 1e-4 * (1.0 + norm_inf(params));
    let plus: Vec<f64> = params.iter().zip(vector).map(|(p, v)| p + h * v).collect();
    let minus: Vec<f64> = params.iter().zip(vector).map(|(p, v)| p - h * v).collect();
    let g_plus = grad(&plus)?;
    let g_minus = grad(&minus)?;
    if g_plus.len() != params.len() || g_minus.len() != params.len() {
        return Err(Error::DimensionMismatch {
            what: "hvp gradient",
            expected: params.len(),
            got: g_plus.len().min(g_minus.len()),
        });
    }
    let out: Vec<f64> = g_plus
        .iter()
        .zip(&g_minus)
        .map(|(a, b)| (a - b) / (2.0 * h))
        .collect();
    if let Some(index) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "hessian-vector product",
            index,
        });
    }
    Ok(out)
}
