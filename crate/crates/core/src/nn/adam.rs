use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::network::{Dense, Gradients, Network};
use crate::error::{Error, Result};
use crate::format::{self, FORMAT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Bias-corrected Adam moments, shaped like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Dense>,
    pub second_moment: Vec<Dense>,
}

impl AdamState {
    pub fn new(config: AdamConfig, net: &Network) -> Self {
        let zeros: Vec<Dense> = net
            .layers
            .iter()
            .map(|l| Dense::zeros(l.weights.nrows(), l.weights.ncols()))
            .collect();
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        let doc = AdamDoc {
            format_version: FORMAT_VERSION,
            config: self.config,
            step: self.step,
            first_moment: self.first_moment.iter().map(TensorDoc::from).collect(),
            second_moment: self.second_moment.iter().map(TensorDoc::from).collect(),
        };
        format::to_json_bytes(&doc)
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let doc: AdamDoc = serde_json::from_slice(bytes)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::load(
                "format_version",
                format!("unsupported version {}", doc.format_version),
            ));
        }
        let convert = |name: &str, ts: Vec<TensorDoc>| -> Result<Vec<Dense>> {
            ts.into_iter()
                .enumerate()
                .map(|(i, t)| t.into_dense(&format!("{name}[{i}]")))
                .collect()
        };
        Ok(Self {
            config: doc.config,
            step: doc.step,
            first_moment: convert("first_moment", doc.first_moment)?,
            second_moment: convert("second_moment", doc.second_moment)?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct AdamDoc {
    format_version: u32,
    config: AdamConfig,
    step: u64,
    first_moment: Vec<TensorDoc>,
    second_moment: Vec<TensorDoc>,
}

/// Row-major `fan_in x fan_out` weights plus biases, as written to disk.
#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct TensorDoc {
    pub fan_in: usize,
    pub fan_out: usize,
    #[serde(serialize_with = "format::serialize_reals")]
    pub weights: Vec<f64>,
    #[serde(serialize_with = "format::serialize_reals")]
    pub biases: Vec<f64>,
}

impl From<&Dense> for TensorDoc {
    fn from(d: &Dense) -> Self {
        Self {
            fan_in: d.weights.nrows(),
            fan_out: d.weights.ncols(),
            weights: d.weights.iter().copied().collect(),
            biases: d.biases.to_vec(),
        }
    }
}

impl TensorDoc {
    pub(crate) fn into_dense(self, field: &str) -> Result<Dense> {
        if self.biases.len() != self.fan_out {
            return Err(Error::load(
                format!("{field}.biases"),
                format!("{} values for fan_out {}", self.biases.len(), self.fan_out),
            ));
        }
        if self.weights.iter().chain(&self.biases).any(|v| !v.is_finite()) {
            return Err(Error::load(field, "non-finite value"));
        }
        let weights = Array2::from_shape_vec((self.fan_in, self.fan_out), self.weights)
            .map_err(|e| Error::load(format!("{field}.weights"), e.to_string()))?;
        Ok(Dense {
            weights,
            biases: Array1::from(self.biases),
        })
    }
}

/// One bias-corrected Adam update of `net` in place. Non-finite gradients
/// leave both the network and the state untouched.
pub fn adam_step(state: &mut AdamState, net: &mut Network, grads: &Gradients) -> Result<()> {
    if grads.len() != net.layers.len() || state.first_moment.len() != net.layers.len() {
        return Err(Error::Invariant("gradient/state layout does not match the network".into()));
    }
    for (g, l) in grads.iter().zip(&net.layers) {
        if g.weights.dim() != l.weights.dim() || g.biases.dim() != l.biases.dim() {
            return Err(Error::Invariant("gradient shape does not match the network".into()));
        }
    }
    if !grads.iter().all(Dense::is_finite) {
        return Err(Error::Divergence("non-finite gradient passed to Adam".into()));
    }
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let update = |w: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    };
    for (((layer, g), m), v) in net
        .layers
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        ndarray::Zip::from(&mut layer.weights)
            .and(&mut m.weights)
            .and(&mut v.weights)
            .and(&g.weights)
            .for_each(|w, m, v, &g| update(w, m, v, g));
        ndarray::Zip::from(&mut layer.biases)
            .and(&mut m.biases)
            .and(&mut v.biases)
            .and(&g.biases)
            .for_each(|w, m, v, &g| update(w, m, v, g));
    }
    Ok(())
}
