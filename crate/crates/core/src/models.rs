//! Small seeded MLP classifiers used as teacher/student pairs.
//!
//! Architecture is deliberately plain — linear layers with ReLU or tanh
//! between them, logits out — because the distillation mechanism under
//! study lives entirely at the logit/probability level. Teacher capacity
//! above the student is expressed through wider or deeper `hidden_dims`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("input dimension mismatch: model expects {expected}, batch has {got}")]
    InputDim { expected: usize, got: usize },
    #[error("checkpoint does not match its spec: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Declarative MLP description; `(spec, seed)` fully determines the
/// initialized parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 {
            return Err(ModelError::InvalidSpec("input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidSpec(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.hidden_dims.contains(&0) {
            return Err(ModelError::InvalidSpec(
                "hidden_dims must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every linear layer, input to logits.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.num_classes));
        dims
    }

    /// Total parameter count: `Σ_layers (fan_in + 1)·fan_out`.
    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    /// `fan_in × fan_out` weight matrix.
    pub weight: Tensor,
    /// `1 × fan_out` bias row.
    pub bias: Tensor,
}

/// Trainable parameters of an MLP, all leaves with `requires_grad = true`.
#[derive(Debug, Clone)]
pub struct ModelParams {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

impl ModelParams {
    /// Kaiming-uniform initialization: weights uniform in
    /// `±√(6 / fan_in)`, biases zero, drawn from a ChaCha stream seeded
    /// by `spec.seed`. The same spec always yields bit-identical
    /// parameters.
    pub fn init(spec: &MlpSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
        let mut layers = Vec::new();
        for (fan_in, fan_out) in spec.layer_dims() {
            let bound = (6.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect();
            layers.push(Layer {
                weight: Tensor::param(vec![fan_in, fan_out], w)?,
                bias: Tensor::param(vec![1, fan_out], vec![0.0; fan_out])?,
            });
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Logits for a `B × input_dim` batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        if !x.is_matrix() {
            return Err(ModelError::InputDim {
                expected: self.spec.input_dim,
                got: 0,
            });
        }
        if x.cols() != self.spec.input_dim {
            return Err(ModelError::InputDim {
                expected: self.spec.input_dim,
                got: x.cols(),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight)?.add(&layer.bias)?;
            if idx < last {
                h = match self.spec.activation {
                    Activation::Relu => h.relu(),
                    Activation::Tanh => h.tanh(),
                };
            }
        }
        Ok(h)
    }

    /// All parameter leaves, layer by layer (weight, then bias).
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn zero_grad(&self) {
        for p in self.parameters() {
            p.zero_grad();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.parameters()
            .iter()
            .all(|p| p.data().iter().all(|v| v.is_finite()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerData {
                    weight: l.weight.to_vec(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        ck.spec.validate()?;
        let dims = ck.spec.layer_dims();
        if ck.layers.len() != dims.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} layers stored, spec defines {}",
                ck.layers.len(),
                dims.len()
            )));
        }
        let mut layers = Vec::new();
        for (ld, (fan_in, fan_out)) in ck.layers.iter().zip(dims) {
            if ld.weight.len() != fan_in * fan_out || ld.bias.len() != fan_out {
                return Err(ModelError::Checkpoint(format!(
                    "layer sized {}+{} does not match spec dims {}x{}",
                    ld.weight.len(),
                    ld.bias.len(),
                    fan_in,
                    fan_out
                )));
            }
            layers.push(Layer {
                weight: Tensor::param(vec![fan_in, fan_out], ld.weight.clone())?,
                bias: Tensor::param(vec![1, fan_out], ld.bias.clone())?,
            });
        }
        Ok(Self {
            spec: ck.spec.clone(),
            layers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let json = serde_json::to_string_pretty(&self.to_checkpoint())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let json = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&json)?;
        Self::from_checkpoint(&ck)
    }
}

/// Serializable parameter snapshot: the model spec plus flattened layer
/// arrays. JSON round-trips are bit-exact for finite values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: MlpSpec,
    pub layers: Vec<LayerData>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerData {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}
