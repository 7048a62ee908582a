//! Feedforward neural-network metamodel.
//!
//! Layers alternate an affine map `z = W a + b` with an elementwise
//! activation. Hidden layers use the logistic sigmoid; the output layer is
//! linear by default. The model works in the scaled space of its training
//! design and carries the scalers needed to talk in natural units.

mod train;

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::doe::Scaler;
use crate::rng::{substream, tag};
use crate::{Error, Result};

pub use train::{train, validate, LrDecay, TrainOptions, TrainReport, Validation};

/// Model file format version.
pub const MODEL_VERSION: u32 = 1;

/// Numerically stable logistic function `1 / (1 + e^-z)`.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Logistic,
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Logistic => logistic(z),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the activation's output `a`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Logistic => a * (1.0 - a),
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnConfig {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl Default for AnnConfig {
    fn default() -> Self {
        AnnConfig {
            input_dim: 9,
            hidden_layers: vec![100, 100],
            output_dim: 36,
            hidden_activation: Activation::Logistic,
            output_activation: Activation::Linear,
        }
    }
}

impl AnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_layers.iter().any(|&w| w == 0) {
            return Err(Error::Argument(format!("all layer widths must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// Widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden_layers);
        w.push(self.output_dim);
        w
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer == self.hidden_layers.len() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// out × in
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnModel {
    pub config: AnnConfig,
    pub layers: Vec<Layer>,
    pub input_scaler: Scaler,
    pub output_scaler: Scaler,
}

/// Layer outputs recorded during a forward pass, needed for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    activations: Vec<Array1<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Array1<f64> {
        self.activations.last().expect("trace has an output layer")
    }
}

impl AnnModel {
    /// Network with every coefficient zero.
    pub fn zeros(config: AnnConfig, input_scaler: Scaler, output_scaler: Scaler) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        let layers = widths
            .windows(2)
            .map(|w| Layer {
                weights: Array2::zeros((w[1], w[0])),
                biases: Array1::zeros(w[1]),
            })
            .collect();
        Ok(AnnModel {
            config,
            layers,
            input_scaler,
            output_scaler,
        })
    }

    /// Weights uniform on ±sqrt(6 / (fan_in + fan_out)), biases zero.
    pub fn initialized(config: AnnConfig, input_scaler: Scaler, output_scaler: Scaler, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config, input_scaler, output_scaler)?;
        let mut rng = substream(seed, tag::ANN_INIT, 0);
        for layer in &mut model.layers {
            let (fan_out, fan_in) = layer.weights.dim();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            layer.weights.mapv_inplace(|_| rng.random_range(-limit..limit));
        }
        Ok(model)
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.config.input_dim {
            return Err(Error::Argument(format!(
                "network expects {} inputs, got {len}",
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Forward pass on a scaled input, keeping every layer's output.
    pub fn forward_trace(&self, x: ArrayView1<f64>) -> Result<ForwardTrace> {
        self.check_input(x.len())?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_owned());
        for (k, layer) in self.layers.iter().enumerate() {
            let act = self.config.activation(k);
            let mut z = layer.weights.dot(activations.last().unwrap()) + &layer.biases;
            z.mapv_inplace(|v| act.apply(v));
            activations.push(z);
        }
        Ok(ForwardTrace { activations })
    }

    /// Scaled output for a scaled input.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(ArrayView1::from(x))?.output().to_vec())
    }

    /// Row-wise forward pass over an n × input_dim matrix.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let mut a = x.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let act = self.config.activation(k);
            a = a.dot(&layer.weights.t()) + &layer.biases;
            a.mapv_inplace(|v| act.apply(v));
        }
        Ok(a)
    }

    /// Vector-Jacobian product `v^T J` at the traced input: the gradient of
    /// `v · output` with respect to the scaled input.
    pub fn backprop(&self, trace: &ForwardTrace, v: &[f64]) -> Array1<f64> {
        let mut delta = Array1::from(v.to_vec());
        for k in (0..self.layers.len()).rev() {
            let act = self.config.activation(k);
            let out = &trace.activations[k + 1];
            if act != Activation::Linear {
                delta.zip_mut_with(out, |d, &a| *d *= act.derivative_from_output(a));
            }
            delta = self.layers[k].weights.t().dot(&delta);
        }
        delta
    }

    /// Jacobian of the scaled output with respect to the scaled input
    /// (output_dim × input_dim).
    pub fn input_gradient(&self, x: &[f64]) -> Result<Array2<f64>> {
        let trace = self.forward_trace(ArrayView1::from(x))?;
        let mut jac = Array2::<f64>::eye(self.config.input_dim);
        for (k, layer) in self.layers.iter().enumerate() {
            let act = self.config.activation(k);
            jac = layer.weights.dot(&jac);
            if act != Activation::Linear {
                let out = &trace.activations[k + 1];
                for (mut row, &a) in jac.axis_iter_mut(Axis(0)).zip(out) {
                    row *= act.derivative_from_output(a);
                }
            }
        }
        Ok(jac)
    }

    /// Natural-unit output at a natural-unit input.
    pub fn predict(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let y = self.forward(&self.input_scaler.scale(theta))?;
        Ok(self.output_scaler.unscale(&y))
    }

    pub fn n_coefficients(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.biases.iter()).all(|v| v.is_finite()))
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let file = ModelFile {
            version: MODEL_VERSION,
            config: self.config.clone(),
            input_scaler: self.input_scaler.clone(),
            output_scaler: self.output_scaler.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerFile {
                    rows: l.weights.nrows(),
                    cols: l.weights.ncols(),
                    weights: l.weights.iter().cloned().collect(),
                    biases: l.biases.to_vec(),
                })
                .collect(),
            meta,
        };
        let json = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if file.version > MODEL_VERSION {
            return Err(Error::format(path, format!("unsupported model version {}", file.version)));
        }
        file.config.validate()?;
        let widths = file.config.widths();
        if file.layers.len() + 1 != widths.len() {
            return Err(Error::format(path, "layer count does not match the config"));
        }
        let layers = file
            .layers
            .into_iter()
            .zip(widths.windows(2))
            .map(|(l, w)| {
                if (l.rows, l.cols) != (w[1], w[0]) || l.biases.len() != w[1] {
                    return Err(Error::format(path, "layer shape does not match the config"));
                }
                Ok(Layer {
                    weights: Array2::from_shape_vec((l.rows, l.cols), l.weights)
                        .map_err(|e| Error::format(path, e.to_string()))?,
                    biases: Array1::from(l.biases),
                })
            })
            .collect::<Result<_>>()?;
        Ok(AnnModel {
            config: file.config,
            layers,
            input_scaler: file.input_scaler,
            output_scaler: file.output_scaler,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    rows: usize,
    cols: usize,
    /// row-major
    weights: Vec<f64>,
    biases: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    config: AnnConfig,
    input_scaler: Scaler,
    output_scaler: Scaler,
    layers: Vec<LayerFile>,
    #[serde(default)]
    meta: serde_json::Value,
}
