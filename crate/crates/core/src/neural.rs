//! Small dense feed-forward network used as the reconciliation combiner.
//!
//! Hidden layers apply a fixed activation; the output layer maps each unit
//! either through the identity or through `u_i * sigmoid(z_i)`, which keeps
//! every output inside `[0, u_i]` for any parameter values.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation value.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Output layer transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OutputBound {
    Identity,
    /// `h_i = capacity_i * sigmoid(z_i)`.
    ScaledSigmoid(Vec<f64>),
}

/// Dense layer `z = W a + b`, `W` stored row-major as `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    #[inline]
    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, &b) in self.weights.chunks_exact(self.in_dim).zip(&self.bias) {
            let mut z = b;
            for (w, x) in row.iter().zip(input) {
                z += w * x;
            }
            out.push(z);
        }
    }
}

/// Network parameters `theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layers: Vec<Dense>,
    hidden: Activation,
    output: OutputBound,
}

/// Gradient with the same shape as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<Dense>,
}

impl GradientBundle {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Dense::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|g| *g *= factor);
            l.bias.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &GradientBundle) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |acc, g| acc.max(g.abs()))
    }

    /// Euclidean norm over all parameters.
    pub fn norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Rescales to Euclidean norm at most `max_norm`; returns the norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    /// Input of every layer; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Output-layer pre-activation.
    pre_output: Vec<f64>,
    pub output: Vec<f64>,
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: OutputBound,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("invalid layer dims {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], rng))
            .collect();
        Self::from_layers(layers, hidden, output)
    }

    pub fn zeros(dims: &[usize], hidden: Activation, output: OutputBound) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("invalid layer dims {dims:?}")));
        }
        let layers = dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Self::from_layers(layers, hidden, output)
    }

    pub fn from_layers(layers: Vec<Dense>, hidden: Activation, output: OutputBound) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for l in &layers {
            check_dim(l.in_dim * l.out_dim, l.weights.len(), "layer weights")?;
            check_dim(l.out_dim, l.bias.len(), "layer bias")?;
            if l.weights.iter().chain(&l.bias).any(|x| !x.is_finite()) {
                return Err(Error::Config("non-finite network parameter".into()));
            }
        }
        for pair in layers.windows(2) {
            check_dim(pair[0].out_dim, pair[1].in_dim, "layer chaining")?;
        }
        if let OutputBound::ScaledSigmoid(caps) = &output {
            check_dim(layers.last().unwrap().out_dim, caps.len(), "output capacities")?;
            if caps.iter().any(|&u| !(u.is_finite() && u >= 0.0)) {
                return Err(Error::Config("capacities must be finite and >= 0".into()));
            }
        }
        Ok(Self {
            layers,
            hidden,
            output,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn hidden(&self) -> Activation {
        self.hidden
    }

    pub fn output_bound(&self) -> &OutputBound {
        &self.output
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        check_dim(self.param_count(), values.len(), "flat parameters")?;
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = it.next().unwrap();
            }
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.output)
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        check_dim(self.input_dim(), input.len(), "network input")?;
        let mut trace = ForwardTrace::default();
        self.forward_into(input, &mut trace);
        Ok(trace)
    }

    /// Forward pass reusing the buffers of `trace`. Input length is not checked.
    pub(crate) fn forward_into(&self, input: &[f64], trace: &mut ForwardTrace) {
        let n_layers = self.layers.len();
        trace.inputs.resize_with(n_layers, Vec::new);
        trace.inputs[0].clear();
        trace.inputs[0].extend_from_slice(input);
        let mut z = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.affine(&trace.inputs[l], &mut z);
            if l + 1 < n_layers {
                let next = &mut trace.inputs[l + 1];
                next.clear();
                next.extend(z.iter().map(|&v| self.hidden.apply(v)));
            }
        }
        trace.output.clear();
        match &self.output {
            OutputBound::Identity => trace.output.extend_from_slice(&z),
            OutputBound::ScaledSigmoid(caps) => trace
                .output
                .extend(z.iter().zip(caps).map(|(&v, &u)| u * sigmoid(v))),
        }
        trace.pre_output = z;
    }

    /// Gradient of a loss with `dLoss/d output = output_grad`.
    pub fn backward(&self, trace: &ForwardTrace, output_grad: &[f64]) -> Result<GradientBundle> {
        check_dim(self.output_dim(), output_grad.len(), "output gradient")?;
        let mut grads = GradientBundle::zeros_like(self);
        self.backward_accumulate(trace, output_grad, &mut grads);
        Ok(grads)
    }

    /// Adds this sample's gradient into `grads`.
    pub(crate) fn backward_accumulate(
        &self,
        trace: &ForwardTrace,
        output_grad: &[f64],
        grads: &mut GradientBundle,
    ) {
        let mut delta: Vec<f64> = match &self.output {
            OutputBound::Identity => output_grad.to_vec(),
            OutputBound::ScaledSigmoid(caps) => output_grad
                .iter()
                .zip(&trace.pre_output)
                .zip(caps)
                .map(|((&g, &z), &u)| {
                    let s = sigmoid(z);
                    g * u * s * (1.0 - s)
                })
                .collect(),
        };
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &trace.inputs[l];
            let g = &mut grads.layers[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (gw, &x) in row.iter_mut().zip(input) {
                    *gw += d * x;
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; layer.in_dim];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (p, &w) in prev.iter_mut().zip(row) {
                        *p += w * d;
                    }
                }
                for (p, &a) in prev.iter_mut().zip(input) {
                    *p *= self.hidden.derivative_from_output(a);
                }
                delta = prev;
            }
        }
    }

    /// In-place `theta <- theta - step * grads`.
    pub fn apply_sgd(&mut self, grads: &GradientBundle, step: f64) -> Result<()> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::Config(format!("step size must be > 0, got {step}")));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Dimension {
                expected: self.layers.len(),
                got: grads.layers.len(),
                context: "gradient layers",
            });
        }
        for (l, g) in self.layers.iter().zip(&grads.layers) {
            check_dim(l.weights.len(), g.weights.len(), "gradient weights")?;
            check_dim(l.bias.len(), g.bias.len(), "gradient bias")?;
        }
        if !grads.is_finite() {
            return Err(Error::Divergence {
                epoch: 0,
                reason: "non-finite gradient".into(),
            });
        }
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            l.weights
                .iter_mut()
                .zip(&g.weights)
                .for_each(|(w, d)| *w -= step * d);
            l.bias.iter_mut().zip(&g.bias).for_each(|(w, d)| *w -= step * d);
        }
        Ok(())
    }

    pub fn sgd_step(&self, grads: &GradientBundle, step: f64) -> Result<MlpParams> {
        let mut next = self.clone();
        next.apply_sgd(grads, step)?;
        Ok(next)
    }
}

/// Compares backprop against central differences for a loss of the network
/// output. `loss` returns the value and its gradient with respect to the
/// output. Returns `max |analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn finite_diff_check(
    params: &MlpParams,
    input: &[f64],
    loss: &dyn Fn(&[f64]) -> (f64, Vec<f64>),
    eps: f64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("perturbation {eps} outside [1e-7, 1e-3]")));
    }
    let trace = params.forward_trace(input)?;
    let (_, dloss) = loss(&trace.output);
    let analytic: Vec<f64> = params.backward(&trace, &dloss)?.iter().collect();
    let base = params.flat();
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (k, &a) in analytic.iter().enumerate() {
        let mut shifted = base.clone();
        shifted[k] = base[k] + eps;
        probe.set_flat(&shifted)?;
        let up = loss(&probe.forward(input)?).0;
        shifted[k] = base[k] - eps;
        probe.set_flat(&shifted)?;
        let down = loss(&probe.forward(input)?).0;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-12)
}

/// Per-feature standardization fitted on training inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Columns with zero spread get unit scale.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for row in rows {
            if count == 0 {
                sum = vec![0.0; row.len()];
                sq = vec![0.0; row.len()];
            }
            check_dim(sum.len(), row.len(), "standardizer row")?;
            for (j, &x) in row.iter().enumerate() {
                sum[j] += x;
                sq[j] += x * x;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::Data("cannot standardize an empty set".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                let sd = var.sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            x.iter()
                .zip(self.mean.iter().zip(&self.std))
                .map(|(v, (m, s))| (v - m) / s),
        );
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        self.apply_into(x, &mut out);
        out
    }
}

/// Network, its input scaler and the seed that initialized it.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkFile {
    pub params: MlpParams,
    pub scaler: Standardizer,
    pub seed: u64,
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

impl NetworkFile {
    /// Text block: header lines then row-major weight blocks, every number in
    /// shortest round-trip decimal form.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let p = &self.params;
        writeln!(out, "network 1")?;
        writeln!(
            out,
            "dims {}",
            p.dims()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        )?;
        writeln!(out, "activation {}", p.hidden)?;
        match &p.output {
            OutputBound::Identity => writeln!(out, "output identity")?,
            OutputBound::ScaledSigmoid(caps) => {
                writeln!(out, "output scaled_sigmoid {}", join(caps))?
            }
        }
        writeln!(out, "scaler_mean {}", join(&self.scaler.mean))?;
        writeln!(out, "scaler_std {}", join(&self.scaler.std))?;
        writeln!(out, "seed {}", self.seed)?;
        for (i, layer) in p.layers.iter().enumerate() {
            writeln!(out, "layer {i} {} {}", layer.out_dim, layer.in_dim)?;
            for row in layer.weights.chunks_exact(layer.in_dim) {
                writeln!(out, "{}", join(row))?;
            }
            writeln!(out, "{}", join(&layer.bias))?;
        }
        writeln!(out, "end")?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: &mut R) -> Result<Self> {
        let mut lines = input.lines();
        let mut next = |what: &str| -> Result<String> {
            match lines.next() {
                Some(line) => Ok(line?),
                None => Err(Error::ModelFormat(format!("unexpected end of file, expected {what}"))),
            }
        };
        fn keyed<'a>(line: &'a str, key: &str) -> Result<&'a str> {
            line.strip_prefix(key)
                .map(str::trim)
                .ok_or_else(|| Error::ModelFormat(format!("expected {key:?}, found {line:?}")))
        }
        fn numbers<T: FromStr>(s: &str) -> Result<Vec<T>> {
            s.split_whitespace()
                .map(|t| {
                    t.parse::<T>()
                        .map_err(|_| Error::ModelFormat(format!("bad number {t:?}")))
                })
                .collect()
        }
        let header = next("header")?;
        if header.trim() != "network 1" {
            return Err(Error::ModelFormat(format!("unsupported header {header:?}")));
        }
        let dims: Vec<usize> = numbers(keyed(&next("dims")?, "dims")?)?;
        if dims.len() < 2 {
            return Err(Error::ModelFormat("need at least two dims".into()));
        }
        let hidden: Activation = keyed(&next("activation")?, "activation")?.parse()?;
        let out_line = next("output")?;
        let out_spec = keyed(&out_line, "output")?;
        let output = if out_spec == "identity" {
            OutputBound::Identity
        } else if let Some(rest) = out_spec.strip_prefix("scaled_sigmoid") {
            OutputBound::ScaledSigmoid(numbers(rest)?)
        } else {
            return Err(Error::ModelFormat(format!("unknown output {out_spec:?}")));
        };
        let mean = numbers(keyed(&next("scaler_mean")?, "scaler_mean")?)?;
        let std = numbers(keyed(&next("scaler_std")?, "scaler_std")?)?;
        let seed = keyed(&next("seed")?, "seed")?
            .parse()
            .map_err(|_| Error::ModelFormat("bad seed".into()))?;
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let (in_dim, out_dim) = (w[0], w[1]);
            let head = next("layer")?;
            if head.trim() != format!("layer {i} {out_dim} {in_dim}") {
                return Err(Error::ModelFormat(format!("unexpected layer header {head:?}")));
            }
            let mut weights = Vec::with_capacity(in_dim * out_dim);
            for _ in 0..out_dim {
                let row: Vec<f64> = numbers(&next("weight row")?)?;
                if row.len() != in_dim {
                    return Err(Error::ModelFormat(format!("layer {i}: bad row width")));
                }
                weights.extend(row);
            }
            let bias: Vec<f64> = numbers(&next("bias")?)?;
            layers.push(Dense {
                in_dim,
                out_dim,
                weights,
                bias,
            });
        }
        if next("end")?.trim() != "end" {
            return Err(Error::ModelFormat("missing end marker".into()));
        }
        let params = MlpParams::from_layers(layers, hidden, output)?;
        let scaler = Standardizer { mean, std };
        if scaler.dim() != params.input_dim() || scaler.std.len() != scaler.dim() {
            return Err(Error::ModelFormat("scaler does not match input width".into()));
        }
        Ok(Self {
            params,
            scaler,
            seed,
        })
    }
}
