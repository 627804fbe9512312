use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::rng::CounterRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative given the pre-activation and the activation value.
    fn derivative(self, pre: f64, act: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - act * act,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Position of one dense layer inside a flat parameter vector. The weight
/// block is `fan_in x fan_out` row-major, followed by `fan_out` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpan {
    pub fan_in: usize,
    pub fan_out: usize,
    pub offset: usize,
}

impl LayerSpan {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    layers: Vec<LayerSpan>,
    len: usize,
}

impl Layout {
    pub fn from_dims(dims: &[usize]) -> Self {
        let mut offset = 0;
        let layers = dims
            .windows(2)
            .map(|w| {
                let span = LayerSpan {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset += w[0] * w[1] + w[1];
                span
            })
            .collect();
        Layout {
            layers,
            len: offset,
        }
    }

    pub fn layers(&self) -> &[LayerSpan] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Flat model parameters with their layer-offset table.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        ParamVector {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::LayoutMismatch);
        }
        Ok(ParamVector { values, layout })
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector::zeros(self.layout.clone())
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub fn check_layout(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch)
        }
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &ParamVector) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_layout(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(ParamVector {
            values,
            layout: self.layout.clone(),
        })
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Layer widths plus activation; everything needed to interpret a
/// [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    dims: Vec<usize>,
    activation: Activation,
    layout: Arc<Layout>,
}

impl Architecture {
    /// `dims` runs input -> hidden... -> classes and needs at least two
    /// entries, all positive.
    pub fn new(dims: Vec<usize>, activation: Activation) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!("bad layer dims {dims:?}")));
        }
        let layout = Arc::new(Layout::from_dims(&dims));
        Ok(Architecture {
            dims,
            activation,
            layout,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    /// Width of the penultimate activation.
    pub fn latent_dim(&self) -> usize {
        self.dims[self.dims.len() - 2]
    }

    /// Xavier-uniform weights, `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`,
    /// drawn from stream `(seed, layer)`; zero biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut params = ParamVector::zeros(self.layout.clone());
        for (l, span) in self.layout.layers().iter().enumerate() {
            let bound = (6.0 / (span.fan_in + span.fan_out) as f64).sqrt();
            let mut rng = CounterRng::from_path(seed, &[l as u64]);
            for w in &mut params.values[span.weight_range()] {
                *w = rng.uniform(-bound, bound);
            }
        }
        params
    }

    pub fn model(&self, params: ParamVector) -> Result<MlpModel> {
        if *params.layout != *self.layout {
            return Err(Error::LayoutMismatch);
        }
        Ok(MlpModel {
            arch: self.clone(),
            params,
        })
    }
}

/// Fully connected network; hidden layers use the architecture's activation,
/// the output layer is linear and produces logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    arch: Architecture,
    params: ParamVector,
}

impl MlpModel {
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let params = arch.init_params(seed);
        MlpModel { arch, params }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn into_params(self) -> ParamVector {
        self.params
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    pub fn logits(&self, batch: &Matrix) -> Result<Matrix> {
        forward(self, batch).map(ForwardTrace::into_logits)
    }
}

/// Activations recorded by [`forward`]. `activations[0]` is the input and
/// `activations[L]` the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    layout: Arc<Layout>,
    pre_activations: Vec<Matrix>,
    activations: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Matrix {
        self.activations.last().expect("trace has an output layer")
    }

    pub fn into_logits(mut self) -> Matrix {
        self.activations.pop().expect("trace has an output layer")
    }

    /// Penultimate activation (the input itself for a single-layer model).
    pub fn latent(&self) -> &Matrix {
        &self.activations[self.activations.len() - 2]
    }

    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre_activations
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].rows()
    }
}

fn dense(input: &Matrix, params: &[f64], span: &LayerSpan) -> Matrix {
    let weights = &params[span.weight_range()];
    let bias = &params[span.bias_range()];
    let mut out = Matrix::zeros(input.rows(), span.fan_out);
    for (r, x) in input.iter_rows().enumerate() {
        let row = out.row_mut(r);
        row.copy_from_slice(bias);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let w = &weights[i * span.fan_out..(i + 1) * span.fan_out];
            for (o, wij) in row.iter_mut().zip(w) {
                *o += xi * wij;
            }
        }
    }
    out
}

pub fn forward(model: &MlpModel, batch: &Matrix) -> Result<ForwardTrace> {
    if batch.cols() != model.arch.input_dim() {
        return Err(Error::shape(format!(
            "batch has {} columns, model expects {}",
            batch.cols(),
            model.arch.input_dim()
        )));
    }
    let layers = model.params.layout.layers();
    let mut pre_activations = Vec::with_capacity(layers.len());
    let mut activations = Vec::with_capacity(layers.len() + 1);
    activations.push(batch.clone());
    for (l, span) in layers.iter().enumerate() {
        let pre = dense(&activations[l], model.params.values(), span);
        let act = if l + 1 == layers.len() {
            pre.clone()
        } else {
            let mut a = pre.clone();
            let f = model.arch.activation;
            a.data_mut().iter_mut().for_each(|v| *v = f.apply(*v));
            a
        };
        pre_activations.push(pre);
        activations.push(act);
    }
    Ok(ForwardTrace {
        layout: model.params.layout.clone(),
        pre_activations,
        activations,
    })
}

/// Parameter gradient given the loss gradient on the logits.
pub fn backward(model: &MlpModel, trace: &ForwardTrace, grad_logits: &Matrix) -> Result<ParamVector> {
    backward_with_latent(model, trace, grad_logits, None)
}

/// Like [`backward`], with an extra gradient injected at the latent
/// (penultimate) activation, for losses defined on features.
pub fn backward_with_latent(
    model: &MlpModel,
    trace: &ForwardTrace,
    grad_logits: &Matrix,
    grad_latent: Option<&Matrix>,
) -> Result<ParamVector> {
    if *trace.layout != *model.params.layout {
        return Err(Error::LayoutMismatch);
    }
    let logits = trace.logits();
    if grad_logits.rows() != logits.rows() || grad_logits.cols() != logits.cols() {
        return Err(Error::shape("logit gradient does not match trace"));
    }
    if let Some(g) = grad_latent {
        let latent = trace.latent();
        if g.rows() != latent.rows() || g.cols() != latent.cols() {
            return Err(Error::shape("latent gradient does not match trace"));
        }
    }

    let layers = model.params.layout.layers();
    let num_layers = layers.len();
    let weights_all = model.params.values();
    let mut grad = ParamVector::zeros(model.params.layout.clone());
    let mut delta = grad_logits.clone();

    for l in (0..num_layers).rev() {
        let span = &layers[l];
        let input = &trace.activations[l];
        {
            let gw = &mut grad.values[span.weight_range()];
            for (x, d) in input.iter_rows().zip(delta.iter_rows()) {
                for (i, &xi) in x.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    let row = &mut gw[i * span.fan_out..(i + 1) * span.fan_out];
                    for (g, dj) in row.iter_mut().zip(d) {
                        *g += xi * dj;
                    }
                }
            }
        }
        {
            let gb = &mut grad.values[span.bias_range()];
            for d in delta.iter_rows() {
                for (g, dj) in gb.iter_mut().zip(d) {
                    *g += dj;
                }
            }
        }
        if l == 0 {
            break;
        }

        // Gradient with respect to this layer's input activation.
        let weights = &weights_all[span.weight_range()];
        let mut upstream = Matrix::zeros(delta.rows(), span.fan_in);
        for (r, d) in delta.iter_rows().enumerate() {
            let out = upstream.row_mut(r);
            for (i, o) in out.iter_mut().enumerate() {
                let w = &weights[i * span.fan_out..(i + 1) * span.fan_out];
                *o = w.iter().zip(d).map(|(a, b)| a * b).sum();
            }
        }
        if l == num_layers - 1 {
            if let Some(g) = grad_latent {
                upstream.add_scaled(g, 1.0)?;
            }
        }
        let pre = &trace.pre_activations[l - 1];
        let act = &trace.activations[l];
        let f = model.arch.activation;
        for ((u, &p), &a) in upstream
            .data_mut()
            .iter_mut()
            .zip(pre.data())
            .zip(act.data())
        {
            *u *= f.derivative(p, a);
        }
        delta = upstream;
    }
    Ok(grad)
}
