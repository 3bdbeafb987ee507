use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::consent::UserRecord;
use crate::error::{Error, Result};
use crate::labels::LabelSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation; ReLU uses 0 at the kink.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    SoftmaxCrossEntropy { num_classes: usize },
    SigmoidBinaryCrossEntropy { num_labels: usize },
}

impl Head {
    pub fn output_dim(&self) -> usize {
        match *self {
            Head::SoftmaxCrossEntropy { num_classes } => num_classes,
            Head::SigmoidBinaryCrossEntropy { num_labels } => num_labels,
        }
    }

    /// Whether this head can be trained on `labels`.
    pub fn accepts(&self, labels: &LabelSet) -> bool {
        match (self, labels) {
            (Head::SoftmaxCrossEntropy { num_classes }, LabelSet::MultiClass { num_classes: n, .. }) => {
                num_classes == n
            }
            (Head::SigmoidBinaryCrossEntropy { num_labels }, LabelSet::MultiLabel { active, .. }) => {
                *num_labels == active.len()
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArchitecture {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub head: Head,
}

impl ModelArchitecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.head.output_dim() == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("architecture dimensions must be positive".into()));
        }
        if matches!(self.head, Head::SigmoidBinaryCrossEntropy { num_labels } if num_labels < 2) {
            return Err(Error::Config("a sigmoid head needs at least two labels".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every dense layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.head.output_dim());
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Checks that records of this label space and width can be fed to the model.
    pub fn check_data(&self, input_dim: usize, labels: &LabelSet) -> Result<()> {
        if input_dim != self.input_dim {
            return Err(Error::Config(format!(
                "data has {input_dim} features but the model expects {}",
                self.input_dim
            )));
        }
        if !self.head.accepts(labels) {
            return Err(Error::Config(format!(
                "model head {:?} does not match the data's label space",
                self.head
            )));
        }
        Ok(())
    }
}

/// One dense layer; `weights` is `fan_in x fan_out` so that `z = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Array2::zeros((fan_in, fan_out)),
            biases: Array1::zeros(fan_out),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.biases.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub architecture: ModelArchitecture,
    pub layers: Vec<Dense>,
}

/// Gradients share the parameter layout.
pub type Gradients = Vec<Dense>;

impl Network {
    pub fn zeros(architecture: ModelArchitecture) -> Result<Self> {
        architecture.validate()?;
        let layers = architecture
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Dense::zeros(i, o))
            .collect();
        Ok(Self {
            architecture,
            layers,
        })
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn init(architecture: ModelArchitecture, rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(architecture)?;
        let gain = match net.architecture.activation {
            Activation::Relu => 6.0,
            Activation::Tanh => 3.0,
        };
        for layer in &mut net.layers {
            let bound = (gain / layer.weights.nrows() as f64).sqrt();
            layer
                .weights
                .mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        Ok(net)
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }
}

/// Logits plus what backpropagation needs: each layer's input and the hidden pre-activations.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Array2<f64>,
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

pub fn forward(net: &Network, batch: &Array2<f64>) -> Result<ForwardPass> {
    if batch.ncols() != net.architecture.input_dim {
        return Err(Error::Input(format!(
            "batch has {} features, model expects {}",
            batch.ncols(),
            net.architecture.input_dim
        )));
    }
    if batch.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("batch contains non-finite features".into()));
    }
    let act = net.architecture.activation;
    let last = net.layers.len() - 1;
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut pre_activations = Vec::with_capacity(last);
    let mut a = batch.clone();
    for (i, layer) in net.layers.iter().enumerate() {
        let z = a.dot(&layer.weights) + &layer.biases;
        inputs.push(a);
        if i == last {
            return Ok(ForwardPass {
                logits: z,
                inputs,
                pre_activations,
            });
        }
        a = z.mapv(|v| act.apply(v));
        pre_activations.push(z);
    }
    unreachable!("a network has at least one layer")
}

/// Row-wise softmax, computed from max-shifted logits.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Descent,
    /// Gradients of the negated loss, for unlearning by loss maximisation.
    Ascent,
}

/// Mean loss over the batch and its gradient. Softmax heads use cross-entropy
/// via log-sum-exp; sigmoid heads use per-label binary cross-entropy in logit
/// space, averaged over batch and labels. The returned loss is always the
/// (non-negative) loss itself; only the gradients flip for `Ascent`.
pub fn loss_and_gradients(
    net: &Network,
    batch: &Array2<f64>,
    targets: &Array2<f64>,
    direction: Direction,
) -> Result<(f64, Gradients)> {
    let pass = forward(net, batch)?;
    let (rows, cols) = pass.logits.dim();
    if targets.dim() != (rows, cols) {
        return Err(Error::Input(format!(
            "targets are {:?}, logits are {:?}",
            targets.dim(),
            (rows, cols)
        )));
    }
    let (loss, mut delta) = match net.architecture.head {
        Head::SoftmaxCrossEntropy { .. } => {
            let mut loss = 0.0;
            for (z, y) in pass.logits.rows().into_iter().zip(targets.rows()) {
                let max = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += z.iter().zip(y).map(|(zi, yi)| yi * (lse - zi)).sum::<f64>();
            }
            let probs = softmax_rows(&pass.logits);
            (loss / rows as f64, (probs - targets) / rows as f64)
        }
        Head::SigmoidBinaryCrossEntropy { .. } => {
            let n = (rows * cols) as f64;
            let loss: f64 = pass
                .logits
                .iter()
                .zip(targets)
                .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
                .sum();
            let mut delta = pass.logits.mapv(sigmoid);
            delta -= targets;
            delta /= n;
            (loss / n, delta)
        }
    };
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("loss is {loss}")));
    }
    let act = net.architecture.activation;
    let mut grads: Gradients = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate().rev() {
        grads.push(Dense {
            weights: pass.inputs[i].t().dot(&delta),
            biases: delta.sum_axis(Axis(0)),
        });
        if i > 0 {
            let mut upstream = delta.dot(&layer.weights.t());
            upstream.zip_mut_with(&pass.pre_activations[i - 1], |d, &z| *d *= act.derivative(z));
            delta = upstream;
        }
    }
    grads.reverse();
    if direction == Direction::Ascent {
        for g in &mut grads {
            g.weights.mapv_inplace(|v| -v);
            g.biases.mapv_inplace(|v| -v);
        }
    }
    if !grads.iter().all(Dense::is_finite) {
        return Err(Error::Divergence("gradient is not finite".into()));
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Predictions {
    Classes(Vec<usize>),
    Labels(Vec<Vec<u8>>),
}

/// Argmax class (lowest index on ties) or labels whose sigmoid probability is strictly above 0.5.
pub fn predict(net: &Network, batch: &Array2<f64>) -> Result<Predictions> {
    let logits = forward(net, batch)?.logits;
    Ok(match net.architecture.head {
        Head::SoftmaxCrossEntropy { .. } => Predictions::Classes(
            logits
                .rows()
                .into_iter()
                .map(|row| {
                    let mut best = 0;
                    for (i, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = i;
                        }
                    }
                    best
                })
                .collect(),
        ),
        Head::SigmoidBinaryCrossEntropy { .. } => Predictions::Labels(
            logits
                .rows()
                .into_iter()
                .map(|row| row.iter().map(|&z| u8::from(sigmoid(z) > 0.5)).collect())
                .collect(),
        ),
    })
}

/// Stacks record features into a `batch x dim` matrix.
pub fn batch_matrix<'a>(records: impl ExactSizeIterator<Item = &'a UserRecord>, dim: usize) -> Array2<f64> {
    let n = records.len();
    let mut out = Array2::zeros((n, dim));
    for (mut row, r) in out.rows_mut().into_iter().zip(records) {
        row.iter_mut().zip(&r.features).for_each(|(o, &f)| *o = f);
    }
    out
}

/// One-hot / multi-hot targets for `records`.
pub fn target_matrix<'a>(records: impl ExactSizeIterator<Item = &'a UserRecord>, width: usize) -> Array2<f64> {
    let n = records.len();
    let mut out = Array2::zeros((n, width));
    for (mut row, r) in out.rows_mut().into_iter().zip(records) {
        if let Some(slice) = row.as_slice_mut() {
            r.labels.write_target(slice);
        }
    }
    out
}
