//! One-hidden-layer tanh MLP with a softmax head, over a flat parameter vector.
//!
//! Parameters live in a single `Vec<f64>` partitioned into named layers:
//!
//! | layer           | shape                     |
//! |-----------------|---------------------------|
//! | `hidden.weight` | `hidden × input_dim`      |
//! | `hidden.bias`   | `hidden`                  |
//! | `output.weight` | `num_classes × hidden`    |
//! | `output.bias`   | `num_classes`             |
//!
//! Weight matrices are row-major. Gradients are computed by hand and share the
//! same layout as the parameters.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose, NO_CLIENT};

/// Lower bound applied to the label probability inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Half-width of the uniform initialization interval.
pub const INIT_RANGE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpan {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl LayerSpan {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Ordered, contiguous partition of `[0, total_dim)` into named layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    layers: Vec<LayerSpan>,
    total_dim: usize,
}

impl LayerLayout {
    /// Builds a layout by laying `(name, len)` pairs end to end.
    pub fn from_sizes<S: Into<String>>(sizes: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        let mut layers = Vec::new();
        let mut offset = 0;
        for (name, len) in sizes {
            let name = name.into();
            if len == 0 {
                return Err(Error::Config(format!("layer {name} has zero length")));
            }
            layers.push(LayerSpan { name, offset, len });
            offset += len;
        }
        if layers.is_empty() {
            return Err(Error::Config("layout has no layers".into()));
        }
        Ok(Self {
            layers,
            total_dim: offset,
        })
    }

    pub fn layers(&self) -> &[LayerSpan] {
        &self.layers
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpan> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Index of the layer containing coordinate `j`.
    pub fn layer_of(&self, j: usize) -> Option<usize> {
        self.layers.iter().position(|l| l.range().contains(&j))
    }
}

/// Flat model parameters (or a same-shaped quantity such as a gradient or an
/// update) tied to a layer layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: Arc<LayerLayout>,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, layout: Arc<LayerLayout>) -> Result<Self> {
        if values.len() != layout.total_dim() {
            return Err(Error::Config(format!(
                "parameter length {} does not match layout dimension {}",
                values.len(),
                layout.total_dim()
            )));
        }
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("parameter {j} is not finite")));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<LayerLayout>) -> Self {
        Self {
            values: vec![0.0; layout.total_dim()],
            layout,
        }
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

    pub fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layer(&self, name: &str) -> Option<&[f64]> {
        self.layout.layer(name).map(|l| &self.values[l.range()])
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_layout(&self, other: &ParameterVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    /// Returns `self - other` with the layout of `self`.
    pub fn sub(&self, other: &ParameterVector) -> Result<ParameterVector> {
        self.check_layout(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(Self {
            values,
            layout: self.layout.clone(),
        })
    }

    /// Returns `self + other` with the layout of `self`.
    pub fn add(&self, other: &ParameterVector) -> Result<ParameterVector> {
        self.check_layout(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Ok(Self {
            values,
            layout: self.layout.clone(),
        })
    }

    pub(crate) fn check_layout(&self, other: &ParameterVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Config("parameter layouts differ".into()))
        }
    }

    pub(crate) fn with_values(&self, values: Vec<f64>) -> ParameterVector {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            values,
            layout: self.layout.clone(),
        }
    }
}

/// A set of labelled samples, inputs stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    input_dim: usize,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, input_dim: usize, labels: Vec<usize>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Argument("input dimension must be positive".into()));
        }
        if inputs.len() != input_dim * labels.len() {
            return Err(Error::Config(format!(
                "{} input values do not form {} rows of width {}",
                inputs.len(),
                labels.len(),
                input_dim
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("batch inputs must be finite".into()));
        }
        Ok(Self {
            inputs,
            input_dim,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpShape {
    pub input_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
}

/// Row-major `rows × num_classes` matrix of class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Probabilities {
    pub num_classes: usize,
    pub values: Vec<f64>,
}

impl Probabilities {
    pub fn rows(&self) -> usize {
        self.values.len() / self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.num_classes..(i + 1) * self.num_classes]
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct Mlp {
    shape: MlpShape,
    layout: Arc<LayerLayout>,
}

// Scratch buffers for a single-sample pass.
struct Activations {
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

impl Mlp {
    pub fn new(shape: MlpShape) -> Result<Self> {
        if shape.input_dim == 0 || shape.hidden == 0 || shape.num_classes < 2 {
            return Err(Error::Config(format!(
                "invalid MLP shape {shape:?}: need input_dim, hidden >= 1 and num_classes >= 2"
            )));
        }
        let layout = LayerLayout::from_sizes([
            ("hidden.weight", shape.hidden * shape.input_dim),
            ("hidden.bias", shape.hidden),
            ("output.weight", shape.num_classes * shape.hidden),
            ("output.bias", shape.num_classes),
        ])?;
        Ok(Self {
            shape,
            layout: Arc::new(layout),
        })
    }

    pub fn shape(&self) -> MlpShape {
        self.shape
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total_dim()
    }

    pub fn zeros(&self) -> ParameterVector {
        ParameterVector::zeros(self.layout.clone())
    }

    /// Uniform initialization in `[-INIT_RANGE, INIT_RANGE]` from the
    /// experiment seed.
    pub fn init(&self, seed: u64) -> ParameterVector {
        let mut rng = rng::stream(seed, Purpose::ModelInit, NO_CLIENT, 0);
        let values = (0..self.num_params())
            .map(|_| INIT_RANGE * (2.0 * rng::uniform(&mut rng) - 1.0))
            .collect();
        ParameterVector {
            values,
            layout: self.layout.clone(),
        }
    }

    fn check(&self, params: &ParameterVector, batch: &Batch) -> Result<()> {
        if **params.layout() != *self.layout {
            return Err(Error::Config("parameter layout does not match the model".into()));
        }
        if batch.input_dim() != self.shape.input_dim {
            return Err(Error::Config(format!(
                "batch input dimension {} does not match model input dimension {}",
                batch.input_dim(),
                self.shape.input_dim
            )));
        }
        if batch.is_empty() {
            return Err(Error::Argument("batch is empty".into()));
        }
        if let Some(&y) = batch.labels().iter().find(|&&y| y >= self.shape.num_classes) {
            return Err(Error::Config(format!(
                "label {y} out of range for {} classes",
                self.shape.num_classes
            )));
        }
        Ok(())
    }

    fn sample_forward(&self, w: &[f64], x: &[f64], act: &mut Activations) {
        let MlpShape {
            input_dim,
            hidden,
            num_classes,
        } = self.shape;
        let (w1, rest) = w.split_at(hidden * input_dim);
        let (b1, rest) = rest.split_at(hidden);
        let (w2, b2) = rest.split_at(num_classes * hidden);

        for h in 0..hidden {
            let row = &w1[h * input_dim..(h + 1) * input_dim];
            let a = row.iter().zip(x).fold(b1[h], |acc, (wi, xi)| acc + wi * xi);
            act.hidden[h] = a.tanh();
        }
        for c in 0..num_classes {
            let row = &w2[c * hidden..(c + 1) * hidden];
            act.probs[c] = row.iter().zip(&act.hidden).fold(b2[c], |acc, (wi, hi)| acc + wi * hi);
        }
        let max = act.probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for p in act.probs.iter_mut() {
            *p = (*p - max).exp();
            sum += *p;
        }
        for p in act.probs.iter_mut() {
            *p /= sum;
        }
    }

    /// Adds `scale * d loss_i / d w` for one sample into `grad`, where
    /// `loss_i = -ln max(p_y, PROB_FLOOR)`.
    fn sample_backward(&self, w: &[f64], x: &[f64], y: usize, act: &Activations, scale: f64, grad: &mut [f64]) {
        if act.probs[y] < PROB_FLOOR {
            // loss is flat in the floored region
            return;
        }
        let MlpShape {
            input_dim,
            hidden,
            num_classes,
        } = self.shape;
        let w2_off = hidden * input_dim + hidden;
        let b2_off = w2_off + num_classes * hidden;
        let w2 = &w[w2_off..b2_off];

        let mut dhidden = vec![0.0; hidden];
        for c in 0..num_classes {
            let dz = scale * (act.probs[c] - if c == y { 1.0 } else { 0.0 });
            grad[b2_off + c] += dz;
            let row = c * hidden;
            for h in 0..hidden {
                grad[w2_off + row + h] += dz * act.hidden[h];
                dhidden[h] += dz * w2[row + h];
            }
        }
        let b1_off = hidden * input_dim;
        for h in 0..hidden {
            let da = dhidden[h] * (1.0 - act.hidden[h] * act.hidden[h]);
            grad[b1_off + h] += da;
            let row = h * input_dim;
            for (i, xi) in x.iter().enumerate() {
                grad[row + i] += da * xi;
            }
        }
    }

    fn activations(&self) -> Activations {
        Activations {
            hidden: vec![0.0; self.shape.hidden],
            probs: vec![0.0; self.shape.num_classes],
        }
    }

    pub fn forward(&self, params: &ParameterVector, batch: &Batch) -> Result<Probabilities> {
        self.check(params, batch)?;
        let mut act = self.activations();
        let mut values = Vec::with_capacity(batch.len() * self.shape.num_classes);
        for i in 0..batch.len() {
            self.sample_forward(params.values(), batch.row(i), &mut act);
            values.extend_from_slice(&act.probs);
        }
        Ok(Probabilities {
            num_classes: self.shape.num_classes,
            values,
        })
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, params: &ParameterVector, batch: &Batch) -> Result<f64> {
        Ok(self.evaluate(params, batch)?.loss)
    }

    /// Fraction of samples whose arg-max class equals the label.
    pub fn accuracy(&self, params: &ParameterVector, batch: &Batch) -> Result<f64> {
        Ok(self.evaluate(params, batch)?.accuracy)
    }

    /// Loss and accuracy from a single forward pass.
    pub fn evaluate(&self, params: &ParameterVector, batch: &Batch) -> Result<Evaluation> {
        self.check(params, batch)?;
        let mut act = self.activations();
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (i, &y) in batch.labels().iter().enumerate() {
            self.sample_forward(params.values(), batch.row(i), &mut act);
            loss -= act.probs[y].max(PROB_FLOOR).ln();
            if argmax(&act.probs) == y {
                correct += 1;
            }
        }
        let n = batch.len() as f64;
        Ok(Evaluation {
            loss: loss / n,
            accuracy: correct as f64 / n,
        })
    }

    /// Exact gradient of the mean cross-entropy.
    pub fn gradient(&self, params: &ParameterVector, batch: &Batch) -> Result<ParameterVector> {
        self.check(params, batch)?;
        let mut act = self.activations();
        let mut grad = vec![0.0; self.num_params()];
        let scale = 1.0 / batch.len() as f64;
        for (i, &y) in batch.labels().iter().enumerate() {
            let x = batch.row(i);
            self.sample_forward(params.values(), x, &mut act);
            self.sample_backward(params.values(), x, y, &act, scale, &mut grad);
        }
        Ok(params.with_values(grad))
    }

    /// Calls `f` with the gradient of the per-sample log-likelihood
    /// `ln p(y_i | x_i, w)` for every sample in order.
    pub fn for_each_sample_gradient(
        &self,
        params: &ParameterVector,
        batch: &Batch,
        mut f: impl FnMut(&[f64]),
    ) -> Result<()> {
        self.check(params, batch)?;
        let mut act = self.activations();
        let mut grad = vec![0.0; self.num_params()];
        for (i, &y) in batch.labels().iter().enumerate() {
            let x = batch.row(i);
            grad.iter_mut().for_each(|g| *g = 0.0);
            self.sample_forward(params.values(), x, &mut act);
            self.sample_backward(params.values(), x, y, &act, -1.0, &mut grad);
            f(&grad);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}
