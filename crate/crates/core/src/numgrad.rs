//! Flat-parameter multilayer perceptrons with hand-rolled derivatives.
//!
//! Networks are described by a [`NetSpec`] and their weights live in a single
//! flat [`ParamVector`], which is the coordinate system every solver in this
//! crate works in. Three derivative routes are provided:
//!
//! - [`gradient`]: reverse mode, `d(c^T f(params, x)) / d(params)`;
//! - [`input_gradient`]: reverse mode with respect to the input;
//! - [`jvp`]: forward mode, the directional derivative of the output along a
//!   parameter tangent.
//!
//! No graphs are built; the layer sizes come from the spec and the passes are
//! straight loops over slices. Everything is `f64`.

use crate::error::{Error, Result};
use crate::vecmath::{axpy, dot};
use rand::Rng;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative evaluated from the pre-activation value. ReLU takes
    /// derivative 0 at exactly 0.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::invalid(
                "Activation::parse",
                format!("unknown activation `{other}`"),
            )),
        }
    }
}

/// Shape of a fully connected network: input, one or more hidden layers with
/// the given activation, and a linear output layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl NetSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        output_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("NetSpec::new", "all dims must be >= 1"));
        }
        if hidden_dims.is_empty() {
            return Err(Error::invalid("NetSpec::new", "at least one hidden layer"));
        }
        Ok(Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation,
        })
    }

    /// Layer sizes as `(fan_in, fan_out)` pairs, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    /// Total number of weights and biases.
    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(i, o)| i * o + o)
            .sum()
    }
}

/// Flat vector of all weights and biases of one network, laid out layer by
/// layer as `[W (out x in, row-major), b (out)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        ParamVector(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn check_for(&self, spec: &NetSpec, context: &'static str) -> Result<()> {
        if self.0.len() != spec.param_count() {
            return Err(Error::DimensionMismatch {
                context,
                expected: spec.param_count(),
                got: self.0.len(),
            });
        }
        Ok(())
    }
}

/// Glorot-uniform weights (`+-sqrt(6 / (fan_in + fan_out))`), zero biases.
pub fn init_params(spec: &NetSpec, rng: &mut impl Rng) -> ParamVector {
    let mut values = Vec::with_capacity(spec.param_count());
    for (fan_in, fan_out) in spec.layer_dims() {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            values.push(rng.gen_range(-limit..limit));
        }
        values.extend(std::iter::repeat(0.0).take(fan_out));
    }
    ParamVector(values)
}

/// Intermediate activations of one forward pass, kept for backward passes.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input followed by each layer's post-activation output.
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activation values of the hidden layers.
    pre_activations: Vec<Vec<f64>>,
    /// Final (linear) output.
    pub output: Vec<f64>,
}

fn check_input(spec: &NetSpec, input: &[f64]) -> Result<()> {
    if input.len() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            context: "numgrad input",
            expected: spec.input_dim,
            got: input.len(),
        });
    }
    Ok(())
}

/// Forward pass that records the activations needed by the backward passes.
pub fn forward_trace(spec: &NetSpec, params: &ParamVector, input: &[f64]) -> Result<Trace> {
    params.check_for(spec, "numgrad::forward")?;
    check_input(spec, input)?;
    let dims = spec.layer_dims();
    let n_layers = dims.len();
    let mut layer_inputs = Vec::with_capacity(n_layers);
    let mut pre_activations = Vec::with_capacity(n_layers - 1);
    let mut x = input.to_vec();
    let mut offset = 0;
    for (layer, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let w = &params.0[offset..offset + fan_in * fan_out];
        let b = &params.0[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let mut pre = vec![0.0; fan_out];
        for o in 0..fan_out {
            pre[o] = dot(&w[o * fan_in..(o + 1) * fan_in], &x) + b[o];
        }
        layer_inputs.push(x);
        if layer + 1 < n_layers {
            let post: Vec<f64> = pre.iter().map(|&v| spec.activation.apply(v)).collect();
            pre_activations.push(pre);
            x = post;
        } else {
            x = pre;
        }
    }
    Ok(Trace {
        layer_inputs,
        pre_activations,
        output: x,
    })
}

/// Deterministic forward evaluation.
pub fn forward(spec: &NetSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    Ok(forward_trace(spec, params, input)?.output)
}

/// Reverse pass from a recorded trace. Returns the parameter gradient of
/// `cotangent . output` and, when requested, the input gradient.
pub fn backward_trace(
    spec: &NetSpec,
    params: &ParamVector,
    trace: &Trace,
    cotangent: &[f64],
    want_input_grad: bool,
) -> Result<(ParamVector, Option<Vec<f64>>)> {
    if cotangent.len() != spec.output_dim {
        return Err(Error::DimensionMismatch {
            context: "numgrad cotangent",
            expected: spec.output_dim,
            got: cotangent.len(),
        });
    }
    let dims = spec.layer_dims();
    let mut grad = vec![0.0; spec.param_count()];
    // Offsets of each layer's block in the flat vector.
    let mut offsets = Vec::with_capacity(dims.len());
    let mut off = 0;
    for &(fan_in, fan_out) in &dims {
        offsets.push(off);
        off += fan_in * fan_out + fan_out;
    }

    let mut delta = cotangent.to_vec();
    for layer in (0..dims.len()).rev() {
        let (fan_in, fan_out) = dims[layer];
        let offset = offsets[layer];
        let x = &trace.layer_inputs[layer];
        let w = &params.0[offset..offset + fan_in * fan_out];
        {
            let (gw, gb) = grad[offset..offset + fan_in * fan_out + fan_out]
                .split_at_mut(fan_in * fan_out);
            for o in 0..fan_out {
                axpy(delta[o], x, &mut gw[o * fan_in..(o + 1) * fan_in]);
                gb[o] += delta[o];
            }
        }
        if layer == 0 && !want_input_grad {
            break;
        }
        let mut prev_delta = vec![0.0; fan_in];
        for o in 0..fan_out {
            axpy(delta[o], &w[o * fan_in..(o + 1) * fan_in], &mut prev_delta);
        }
        if layer > 0 {
            let pre = &trace.pre_activations[layer - 1];
            for (d, &p) in prev_delta.iter_mut().zip(pre) {
                *d *= spec.activation.derivative(p);
            }
        }
        delta = prev_delta;
    }
    let input_grad = want_input_grad.then_some(delta);
    Ok((ParamVector(grad), input_grad))
}

/// Gradient of `cotangent . output` with respect to the parameters.
pub fn gradient(
    spec: &NetSpec,
    params: &ParamVector,
    input: &[f64],
    cotangent: &[f64],
) -> Result<ParamVector> {
    let trace = forward_trace(spec, params, input)?;
    Ok(backward_trace(spec, params, &trace, cotangent, false)?.0)
}

/// Gradient of `cotangent . output` with respect to the input.
pub fn input_gradient(
    spec: &NetSpec,
    params: &ParamVector,
    input: &[f64],
    cotangent: &[f64],
) -> Result<Vec<f64>> {
    let trace = forward_trace(spec, params, input)?;
    input_gradient_trace(spec, params, &trace, cotangent)
}

/// Input gradient from a recorded trace without materializing the parameter
/// gradient; the hot path for frozen networks.
pub fn input_gradient_trace(
    spec: &NetSpec,
    params: &ParamVector,
    trace: &Trace,
    cotangent: &[f64],
) -> Result<Vec<f64>> {
    if cotangent.len() != spec.output_dim {
        return Err(Error::DimensionMismatch {
            context: "numgrad cotangent",
            expected: spec.output_dim,
            got: cotangent.len(),
        });
    }
    let dims = spec.layer_dims();
    let mut offsets = Vec::with_capacity(dims.len());
    let mut off = 0;
    for &(fan_in, fan_out) in &dims {
        offsets.push(off);
        off += fan_in * fan_out + fan_out;
    }
    let mut delta = cotangent.to_vec();
    for layer in (0..dims.len()).rev() {
        let (fan_in, fan_out) = dims[layer];
        let w = &params.0[offsets[layer]..offsets[layer] + fan_in * fan_out];
        let mut prev = vec![0.0; fan_in];
        for o in 0..fan_out {
            axpy(delta[o], &w[o * fan_in..(o + 1) * fan_in], &mut prev);
        }
        if layer > 0 {
            let pre = &trace.pre_activations[layer - 1];
            for (d, &p) in prev.iter_mut().zip(pre) {
                *d *= spec.activation.derivative(p);
            }
        }
        delta = prev;
    }
    Ok(delta)
}

/// Forward-mode directional derivative of the output along a parameter
/// tangent, from a recorded trace.
pub fn jvp_trace(
    spec: &NetSpec,
    params: &ParamVector,
    trace: &Trace,
    tangent: &ParamVector,
) -> Result<Vec<f64>> {
    tangent.check_for(spec, "numgrad::jvp tangent")?;
    let dims = spec.layer_dims();
    let mut offset = 0;
    let mut t_x: Vec<f64> = vec![0.0; spec.input_dim];
    for (layer, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let w = &params.0[offset..offset + fan_in * fan_out];
        let tw = &tangent.0[offset..offset + fan_in * fan_out];
        let tb = &tangent.0[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let x = &trace.layer_inputs[layer];
        let mut t_pre = vec![0.0; fan_out];
        for o in 0..fan_out {
            t_pre[o] = dot(&tw[o * fan_in..(o + 1) * fan_in], x)
                + dot(&w[o * fan_in..(o + 1) * fan_in], &t_x)
                + tb[o];
        }
        if layer + 1 < dims.len() {
            let pre = &trace.pre_activations[layer];
            for (t, &p) in t_pre.iter_mut().zip(pre) {
                *t *= spec.activation.derivative(p);
            }
        }
        t_x = t_pre;
    }
    Ok(t_x)
}

/// Forward-mode directional derivative of the output along a parameter
/// tangent: `lim_h (f(params + h v, x) - f(params, x)) / h`.
pub fn jvp(
    spec: &NetSpec,
    params: &ParamVector,
    input: &[f64],
    tangent: &ParamVector,
) -> Result<Vec<f64>> {
    let trace = forward_trace(spec, params, input)?;
    jvp_trace(spec, params, &trace, tangent)
}

// --- checkpoint format ------------------------------------------------------
//
// Header line `netspec <input> <hidden...> <output> <activation>` followed by
// one decimal value per line. Values are printed in the shortest form that
// round-trips f64 exactly, so save/load is bit-exact.

/// Serializes a spec and parameter vector into the text checkpoint format.
pub fn write_checkpoint_string(spec: &NetSpec, params: &ParamVector) -> Result<String> {
    params.check_for(spec, "numgrad::write_checkpoint")?;
    let mut s = String::new();
    s.push_str("netspec ");
    write!(s, "{}", spec.input_dim).unwrap();
    for h in &spec.hidden_dims {
        write!(s, " {h}").unwrap();
    }
    write!(s, " {} {}\n", spec.output_dim, spec.activation.name()).unwrap();
    for v in &params.0 {
        writeln!(s, "{v}").unwrap();
    }
    Ok(s)
}

/// Parses one checkpoint block from an iterator of lines. Consumes exactly
/// the header plus the parameter lines of that block.
pub fn read_checkpoint_block<'a, I>(lines: &mut I) -> Result<(NetSpec, ParamVector)>
where
    I: Iterator<Item = &'a str>,
{
    let header = lines
        .next()
        .ok_or_else(|| Error::CheckpointFormat("missing header line".into()))?;
    let mut tokens = header.split_whitespace();
    if tokens.next() != Some("netspec") {
        return Err(Error::CheckpointFormat(format!(
            "expected `netspec` header, got `{header}`"
        )));
    }
    let rest: Vec<&str> = tokens.collect();
    if rest.len() < 3 {
        return Err(Error::CheckpointFormat("header too short".into()));
    }
    let activation = Activation::parse(rest[rest.len() - 1])?;
    let dims: Vec<usize> = rest[..rest.len() - 1]
        .iter()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::CheckpointFormat(format!("bad dim `{t}`")))
        })
        .collect::<Result<_>>()?;
    if dims.len() < 3 {
        return Err(Error::CheckpointFormat(
            "need input, at least one hidden, output".into(),
        ));
    }
    let spec = NetSpec::new(
        dims[0],
        dims[1..dims.len() - 1].to_vec(),
        dims[dims.len() - 1],
        activation,
    )?;
    let n = spec.param_count();
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| Error::CheckpointFormat("truncated parameter block".into()))?;
        let v: f64 = line
            .trim()
            .parse()
            .map_err(|_| Error::CheckpointFormat(format!("bad value `{line}`")))?;
        values.push(v);
    }
    Ok((spec, ParamVector(values)))
}

pub fn save_checkpoint(path: &Path, spec: &NetSpec, params: &ParamVector) -> Result<()> {
    std::fs::write(path, write_checkpoint_string(spec, params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(NetSpec, ParamVector)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    read_checkpoint_block(&mut lines)
}
