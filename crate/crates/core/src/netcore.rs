//! Fully connected networks with hand-derived backpropagation, plus the
//! optimizers and penalties used to train them.
//!
//! Every trainable object exposes its parameters as one flat `f64` vector
//! through [`FlatParams`]. Optimizers and the snapshot penalty work on
//! those flat vectors, so several models can be stacked and trained jointly
//! without the optimizer knowing about their structure.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Softmax,
    Linear,
    /// Affine map followed by row-wise Euclidean normalization.
    LinearLengthNorm,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Sigmoid => 0,
            Activation::Tanh => 1,
            Activation::Softmax => 2,
            Activation::Linear => 3,
            Activation::LinearLengthNorm => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::Sigmoid,
            1 => Activation::Tanh,
            2 => Activation::Softmax,
            3 => Activation::Linear,
            4 => Activation::LinearLengthNorm,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Parameter containers that can be viewed as one flat vector.
pub trait FlatParams {
    fn flat_len(&self) -> usize;

    fn extend_flat(&self, out: &mut Vec<f64>);

    /// Reads parameters from the front of `src`, returning how many were used.
    fn load_flat(&mut self, src: &[f64]) -> Result<usize>;

    fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.flat_len());
        self.extend_flat(&mut v);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Everything `forward` keeps around for `backward`.
#[derive(Debug, Clone)]
pub struct Trace {
    input: Array2<f64>,
    outputs: Vec<Array2<f64>>,
    /// Row norms of the pre-normalization output, for length-norm layers.
    norms: Vec<Option<Array1<f64>>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().unwrap_or(&self.input)
    }

    pub fn layer_outputs(&self) -> &[Array2<f64>] {
        &self.outputs
    }

    /// Number of stored activation values (excluding the input).
    pub fn stored_values(&self) -> usize {
        self.outputs.iter().map(|o| o.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrad>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn extend_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        self.extend_flat(&mut v);
        v
    }
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::input("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::shape(format!(
                    "layer {i}: bias length {} does not match {} outputs",
                    l.bias.len(),
                    l.out_dim()
                )));
            }
            if i + 1 < layers.len() {
                let next = &layers[i + 1];
                if next.in_dim() != l.out_dim() {
                    return Err(Error::shape(format!(
                        "layer {} expects {} inputs but layer {i} produces {}",
                        i + 1,
                        next.in_dim(),
                        l.out_dim()
                    )));
                }
                if l.activation == Activation::Softmax {
                    return Err(Error::input("softmax is only allowed on the output layer"));
                }
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::input(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Self { layers })
    }

    /// Uniform `±sqrt(6 / (in + out))` weights and zero biases.
    ///
    /// `dims` lists the widths from input to output; `activations` has one
    /// entry per layer.
    pub fn random<R: Rng + ?Sized>(
        dims: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || activations.len() + 1 != dims.len() {
            return Err(Error::input(format!(
                "{} widths need {} activations, got {}",
                dims.len(),
                dims.len().saturating_sub(1),
                activations.len()
            )));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (n_in, n_out) = (w[0], w[1]);
                let bound = (6.0 / (n_in + n_out) as f64).sqrt();
                Layer {
                    weight: Array2::from_shape_fn((n_out, n_in), |_| {
                        rng.random_range(-bound..=bound)
                    }),
                    bias: Array1::zeros(n_out),
                    activation,
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> Result<Trace> {
        if input.ncols() != self.input_dim() {
            return Err(Error::shape(format!(
                "network expects {} input columns, got {}",
                self.input_dim(),
                input.ncols()
            )));
        }
        if input.nrows() == 0 {
            return Err(Error::input("empty input batch"));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("non-finite network input"));
        }
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut norms = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x = outputs
                .last()
                .map(|o: &Array2<f64>| o.view())
                .unwrap_or(input);
            let mut z = x.dot(&layer.weight.t());
            z += &layer.bias;
            let norm = apply_activation(layer.activation, &mut z);
            outputs.push(z);
            norms.push(norm);
        }
        Ok(Trace {
            input: input.to_owned(),
            outputs,
            norms,
        })
    }

    /// Forward pass that keeps only the final output.
    pub fn predict(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut trace = self.forward(input)?;
        Ok(trace.outputs.pop().expect("at least one layer"))
    }

    /// Backpropagates `grad_output` (dL/d output) through the network.
    ///
    /// Returns parameter gradients and dL/d input.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_output: ArrayView2<f64>,
    ) -> Result<(MlpGrads, Array2<f64>)> {
        self.backward_impl(trace, grad_output, false)
    }

    /// Like [`Mlp::backward`], but the gradient is taken with respect to the
    /// last layer's pre-activation (e.g. softmax logits).
    pub fn backward_from_logits(
        &self,
        trace: &Trace,
        grad_logits: ArrayView2<f64>,
    ) -> Result<(MlpGrads, Array2<f64>)> {
        self.backward_impl(trace, grad_logits, true)
    }

    fn backward_impl(
        &self,
        trace: &Trace,
        grad_output: ArrayView2<f64>,
        from_logits: bool,
    ) -> Result<(MlpGrads, Array2<f64>)> {
        if trace.outputs.len() != self.layers.len()
            || trace.input.ncols() != self.input_dim()
            || trace
                .outputs
                .iter()
                .zip(&self.layers)
                .any(|(o, l)| o.ncols() != l.out_dim() || o.nrows() != trace.input.nrows())
        {
            return Err(Error::State(
                "activation trace does not belong to this network".into(),
            ));
        }
        if grad_output.dim() != trace.output().dim() {
            return Err(Error::shape(format!(
                "output gradient is {:?}, network output is {:?}",
                grad_output.dim(),
                trace.output().dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_output.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let dz = if from_logits && i + 1 == self.layers.len() {
                g
            } else {
                activation_backward(
                    layer.activation,
                    &trace.outputs[i],
                    trace.norms[i].as_ref(),
                    g,
                )
            };
            let x = if i == 0 {
                trace.input.view()
            } else {
                trace.outputs[i - 1].view()
            };
            grads.push(LayerGrad {
                weight: dz.t().dot(&x),
                bias: dz.sum_axis(Axis(0)),
            });
            g = dz.dot(&layer.weight);
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, g))
    }
}

impl FlatParams for Mlp {
    fn flat_len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    fn extend_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
    }

    fn load_flat(&mut self, src: &[f64]) -> Result<usize> {
        let need = self.flat_len();
        if src.len() < need {
            return Err(Error::shape(format!(
                "need {need} parameters, got {}",
                src.len()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = src[at];
                at += 1;
            }
        }
        Ok(at)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn apply_activation(act: Activation, z: &mut Array2<f64>) -> Option<Array1<f64>> {
    match act {
        Activation::Sigmoid => {
            z.mapv_inplace(sigmoid);
            None
        }
        Activation::Tanh => {
            z.mapv_inplace(f64::tanh);
            None
        }
        Activation::Linear => None,
        Activation::Softmax => {
            for mut row in z.rows_mut() {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|v| (v - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|v| v / sum);
            }
            None
        }
        Activation::LinearLengthNorm => {
            let norms = crate::linalg::row_norms(&z.view());
            for (mut row, &n) in z.rows_mut().into_iter().zip(norms.iter()) {
                if n > 0.0 {
                    row.mapv_inplace(|v| v / n);
                } else {
                    row.fill(0.0);
                }
            }
            Some(norms)
        }
    }
}

/// dL/dz from dL/dy, given the activation output `y`.
fn activation_backward(
    act: Activation,
    y: &Array2<f64>,
    norms: Option<&Array1<f64>>,
    mut g: Array2<f64>,
) -> Array2<f64> {
    match act {
        Activation::Linear => g,
        Activation::Sigmoid => {
            Zip::from(&mut g)
                .and(y)
                .for_each(|g, &y| *g *= y * (1.0 - y));
            g
        }
        Activation::Tanh => {
            Zip::from(&mut g).and(y).for_each(|g, &y| *g *= 1.0 - y * y);
            g
        }
        Activation::Softmax => {
            for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                let dot = grow.dot(&yrow);
                Zip::from(&mut grow)
                    .and(&yrow)
                    .for_each(|g, &y| *g = y * (*g - dot));
            }
            g
        }
        Activation::LinearLengthNorm => {
            let norms = norms.expect("length-norm layers record their norms");
            for ((mut grow, yrow), &n) in g.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                if n > 0.0 {
                    let dot = grow.dot(&yrow);
                    Zip::from(&mut grow)
                        .and(&yrow)
                        .for_each(|g, &y| *g = (*g - y * dot) / n);
                } else {
                    grow.fill(0.0);
                }
            }
            g
        }
    }
}

fn check_step_inputs(params: &[f64], grads: &[f64]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Optimizer(format!(
            "non-finite gradient at index {i}"
        )));
    }
    Ok(())
}

/// Plain SGD with an L1 penalty: `θ ← θ − lr·(g + l1·sign(θ))`, `sign(0) = 0`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64, l1_weight: f64) -> Result<()> {
    check_step_inputs(params, grads)?;
    if !(lr > 0.0) || !(l1_weight >= 0.0) {
        return Err(Error::Optimizer(format!(
            "invalid SGD settings lr={lr} l1={l1_weight}"
        )));
    }
    for (p, &g) in params.iter_mut().zip(grads) {
        let sign = if *p > 0.0 {
            1.0
        } else if *p < 0.0 {
            -1.0
        } else {
            0.0
        };
        *p -= lr * (g + l1_weight * sign);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_step_inputs(params, grads)?;
        if params.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer state holds {} moments, got {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// A contiguous slice of the flat parameter vector sharing one penalty weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub range: Range<usize>,
    pub weight: f64,
}

/// Reference parameters for an L2 pull `Σ λ_g ‖θ_g − θ₀_g‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot {
    values: Vec<f64>,
    groups: Vec<ParamGroup>,
}

impl ParamSnapshot {
    pub fn new(values: Vec<f64>, groups: Vec<ParamGroup>) -> Result<Self> {
        let mut covered = 0;
        for g in &groups {
            if g.range.start != covered || g.range.end < g.range.start {
                return Err(Error::input(format!(
                    "penalty group {} does not continue at offset {covered}",
                    g.name
                )));
            }
            if !(g.weight >= 0.0) {
                return Err(Error::input(format!(
                    "penalty group {} has negative weight",
                    g.name
                )));
            }
            covered = g.range.end;
        }
        if covered != values.len() {
            return Err(Error::shape(format!(
                "penalty groups cover {covered} of {} parameters",
                values.len()
            )));
        }
        Ok(Self { values, groups })
    }

    /// One group covering everything.
    pub fn uniform(values: Vec<f64>, weight: f64) -> Result<Self> {
        let n = values.len();
        Self::new(
            values,
            vec![ParamGroup {
                name: "all".into(),
                range: 0..n,
                weight,
            }],
        )
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn set_weight(&mut self, group: &str, weight: f64) -> Result<()> {
        let g = self
            .groups
            .iter_mut()
            .find(|g| g.name == group)
            .ok_or_else(|| Error::input(format!("no penalty group named {group}")))?;
        g.weight = weight;
        Ok(())
    }

    pub fn set_all_weights(&mut self, weight: f64) {
        for g in &mut self.groups {
            g.weight = weight;
        }
    }

    /// Penalty value and its gradient with respect to `params`.
    pub fn penalty(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        if params.len() != self.values.len() {
            return Err(Error::shape(format!(
                "snapshot has {} parameters, model has {}",
                self.values.len(),
                params.len()
            )));
        }
        let mut total = 0.0;
        let mut grad = vec![0.0; params.len()];
        for g in &self.groups {
            if g.weight == 0.0 {
                continue;
            }
            let mut sq = 0.0;
            for i in g.range.clone() {
                let d = params[i] - self.values[i];
                sq += d * d;
                grad[i] = 2.0 * g.weight * d;
            }
            total += g.weight * sq;
        }
        Ok((total, grad))
    }

    /// Largest absolute deviation of `params` from the snapshot.
    pub fn max_drift(&self, params: &[f64]) -> f64 {
        params
            .iter()
            .zip(&self.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
