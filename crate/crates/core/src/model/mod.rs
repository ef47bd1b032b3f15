//! Minimal pre-norm decoder-only transformer with full instrumentation.
//!
//! Each layer computes
//!
//! ```text
//! h      = x + Attn(rms_norm(x))
//! x_next = h + W_V · f(W_K · rms_norm(h))
//! ```
//!
//! with causal softmax attention and a two-matrix MLP, so the MLP output is
//! exactly the sum of value-vector sub-updates `m_i · v_i`.

mod forward;

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Map;

use crate::container::{Container, Tensor};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use forward::{mean_pool, next_token_distribution, ForwardTrace, SubUpdate};

pub const RMS_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Silu,
}

impl Activation {
    /// GELU uses the tanh approximation.
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Gelu => {
                const C: f32 = 0.797_884_6; // sqrt(2/pi)
                0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
            }
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub activation: Activation,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("mlp_dim", self.mlp_dim),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::ModelConfig(format!("{name} must be at least 1")));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::ModelConfig(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.mlp_dim < self.model_dim {
            return Err(Error::ModelConfig(format!(
                "mlp_dim {} is smaller than model_dim {}",
                self.mlp_dim, self.model_dim
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Vec<f32>,
    /// `W_K`: d_mlp × d, rows are key vectors.
    pub mlp_keys: Matrix,
    /// `W_Vᵀ`: d_mlp × d, rows are value vectors (columns of `W_V`).
    pub mlp_values: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// |V| × d
    pub embed: Matrix,
    /// max_seq_len × d
    pub pos_embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    /// `E`: |V| × d, rows are unembedding vectors.
    pub unembed: Matrix,
}

/// Transformer weights plus config. Immutable once built and `Sync`, so a
/// single instance can serve concurrent forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentedModel {
    config: ModelConfig,
    weights: ModelWeights,
}

/// Human-readable label for a container tensor name, used in load errors.
pub fn tensor_label(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["embed"] => "token embeddings".into(),
        ["pos_embed"] => "positional embeddings".into(),
        ["unembed"] => "unembedding E".into(),
        ["final_norm"] => "final norm scale".into(),
        ["layer", l, "wk"] => format!("W_K layer {l}"),
        ["layer", l, "wv"] => format!("W_V layer {l}"),
        ["layer", l, "attn_norm"] => format!("attention norm layer {l}"),
        ["layer", l, "mlp_norm"] => format!("MLP norm layer {l}"),
        ["layer", l, "attn", w] => format!("attention {} layer {l}", w.to_uppercase()),
        _ => name.into(),
    }
}

impl InstrumentedModel {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        let model = Self { config, weights };
        model.check_shapes()?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    /// Mutable access for constructing edited copies (e.g. corrupted heads).
    pub fn weights_mut(&mut self) -> &mut ModelWeights {
        &mut self.weights
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    /// Column `neuron` of `W_V` at `layer`.
    pub fn value_vector(&self, layer: usize, neuron: usize) -> &[f32] {
        self.weights.layers[layer].mlp_values.row(neuron)
    }

    /// Row `neuron` of `W_K` at `layer`.
    pub fn key_vector(&self, layer: usize, neuron: usize) -> &[f32] {
        self.weights.layers[layer].mlp_keys.row(neuron)
    }

    fn expected_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.config;
        let (v, d, m, s) = (c.vocab_size, c.model_dim, c.mlp_dim, c.max_seq_len);
        let mut out = vec![
            ("embed".to_string(), vec![v, d]),
            ("pos_embed".to_string(), vec![s, d]),
            ("unembed".to_string(), vec![v, d]),
            ("final_norm".to_string(), vec![d]),
        ];
        for l in 0..c.num_layers {
            out.push((format!("layer.{l}.attn_norm"), vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("layer.{l}.attn.{w}"), vec![d, d]));
            }
            out.push((format!("layer.{l}.mlp_norm"), vec![d]));
            out.push((format!("layer.{l}.wk"), vec![m, d]));
            out.push((format!("layer.{l}.wv"), vec![d, m]));
        }
        out
    }

    fn check_shapes(&self) -> Result<()> {
        let container = self.to_container();
        for (name, expected) in self.expected_shapes() {
            let t = &container.tensors[&name];
            if t.shape != expected {
                return Err(Error::Shape {
                    label: tensor_label(&name),
                    name,
                    expected,
                    found: t.shape.clone(),
                });
            }
            if let Some(index) = t.data.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    label: tensor_label(&name),
                    name,
                    index,
                });
            }
        }
        if self.weights.layers.len() != self.config.num_layers {
            return Err(Error::ModelConfig(format!(
                "{} layers present, config declares {}",
                self.weights.layers.len(),
                self.config.num_layers
            )));
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut meta = Map::new();
        meta.insert(
            "config".into(),
            serde_json::to_value(&self.config).expect("config serializes"),
        );
        let mut c = Container::new(meta);
        let mat = |m: &Matrix| Tensor::new(m.shape().to_vec(), m.as_slice().to_vec());
        let vec = |v: &[f32]| Tensor::new(vec![v.len()], v.to_vec());
        let w = &self.weights;
        c.insert("embed", mat(&w.embed));
        c.insert("pos_embed", mat(&w.pos_embed));
        c.insert("unembed", mat(&w.unembed));
        c.insert("final_norm", vec(&w.final_norm));
        for (l, lw) in w.layers.iter().enumerate() {
            c.insert(format!("layer.{l}.attn_norm"), vec(&lw.attn_norm));
            c.insert(format!("layer.{l}.attn.wq"), mat(&lw.wq));
            c.insert(format!("layer.{l}.attn.wk"), mat(&lw.wk));
            c.insert(format!("layer.{l}.attn.wv"), mat(&lw.wv));
            c.insert(format!("layer.{l}.attn.wo"), mat(&lw.wo));
            c.insert(format!("layer.{l}.mlp_norm"), vec(&lw.mlp_norm));
            c.insert(format!("layer.{l}.wk"), mat(&lw.mlp_keys));
            c.insert(format!("layer.{l}.wv"), mat(&lw.mlp_values.transpose()));
        }
        c
    }

    pub fn from_container(container: &Container) -> Result<Self> {
        let config: ModelConfig = container
            .metadata
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Container("metadata has no `config` entry".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::json("model config", e)))?;
        config.validate()?;

        let shapes: std::collections::HashMap<String, Vec<usize>> = {
            let probe = Self {
                config: config.clone(),
                weights: ModelWeights {
                    embed: Matrix::zeros(0, 0),
                    pos_embed: Matrix::zeros(0, 0),
                    layers: Vec::new(),
                    final_norm: Vec::new(),
                    unembed: Matrix::zeros(0, 0),
                },
            };
            probe.expected_shapes().into_iter().collect()
        };
        let fetch = |name: &str| -> Result<&Tensor> {
            let t = container.tensors.get(name).ok_or_else(|| Error::MissingTensor {
                name: name.into(),
                label: tensor_label(name),
            })?;
            let expected = &shapes[name];
            if &t.shape != expected {
                return Err(Error::Shape {
                    name: name.into(),
                    label: tensor_label(name),
                    expected: expected.clone(),
                    found: t.shape.clone(),
                });
            }
            if let Some(index) = t.data.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    name: name.into(),
                    label: tensor_label(name),
                    index,
                });
            }
            Ok(t)
        };
        let mat = |name: &str| -> Result<Matrix> {
            let t = fetch(name)?;
            Matrix::from_vec(t.shape[0], t.shape[1], t.data.clone())
        };
        let vec = |name: &str| -> Result<Vec<f32>> { Ok(fetch(name)?.data.clone()) };

        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            layers.push(LayerWeights {
                attn_norm: vec(&format!("layer.{l}.attn_norm"))?,
                wq: mat(&format!("layer.{l}.attn.wq"))?,
                wk: mat(&format!("layer.{l}.attn.wk"))?,
                wv: mat(&format!("layer.{l}.attn.wv"))?,
                wo: mat(&format!("layer.{l}.attn.wo"))?,
                mlp_norm: vec(&format!("layer.{l}.mlp_norm"))?,
                mlp_keys: mat(&format!("layer.{l}.wk"))?,
                mlp_values: mat(&format!("layer.{l}.wv"))?.transpose(),
            });
        }
        let weights = ModelWeights {
            embed: mat("embed")?,
            pos_embed: mat("pos_embed")?,
            layers,
            final_norm: vec("final_norm")?,
            unembed: mat("unembed")?,
        };
        Ok(Self { config, weights })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes)?)
    }

    /// Loads and validates a weights container.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    /// Weights with unit norms, zero attention and identity-free MLPs. Mostly
    /// useful as a starting point in tests.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (v, d, m, s) = (
            config.vocab_size,
            config.model_dim,
            config.mlp_dim,
            config.max_seq_len,
        );
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; d],
                wq: Matrix::zeros(d, d),
                wk: Matrix::zeros(d, d),
                wv: Matrix::zeros(d, d),
                wo: Matrix::zeros(d, d),
                mlp_norm: vec![1.0; d],
                mlp_keys: Matrix::zeros(m, d),
                mlp_values: Matrix::zeros(m, d),
            })
            .collect();
        let weights = ModelWeights {
            embed: Matrix::zeros(v, d),
            pos_embed: Matrix::zeros(s, d),
            layers,
            final_norm: vec![1.0; d],
            unembed: Matrix::zeros(v, d),
        };
        Self::new(config, weights)
    }

    /// Gaussian-initialized model for tests and fuzz seeds.
    pub fn random(config: ModelConfig, seed: u64, scale: f32) -> Result<Self> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, scale).expect("finite scale");
        let mut model = Self::zeroed(config)?;
        let mut fill = |m: &mut Matrix| {
            for x in m.as_mut_slice() {
                *x = normal.sample(&mut rng);
            }
        };
        let w = &mut model.weights;
        fill(&mut w.embed);
        fill(&mut w.pos_embed);
        fill(&mut w.unembed);
        for lw in &mut w.layers {
            fill(&mut lw.wq);
            fill(&mut lw.wk);
            fill(&mut lw.wv);
            fill(&mut lw.wo);
            fill(&mut lw.mlp_keys);
            fill(&mut lw.mlp_values);
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_config(layers: usize) -> ModelConfig {
        ModelConfig {
            num_layers: layers,
            model_dim: 8,
            mlp_dim: 16,
            num_heads: 2,
            vocab_size: 11,
            activation: Activation::Gelu,
            max_seq_len: 12,
        }
    }

    #[test]
    fn round_trip_four_layer_model() {
        let model = InstrumentedModel::random(toy_config(4), 3, 0.3).unwrap();
        let back = InstrumentedModel::from_bytes(&model.to_bytes()).unwrap();
        assert_eq!(back.num_layers(), 4);
        assert_eq!(back, model);
    }

    #[test]
    fn wrong_value_width_names_tensor() {
        let model = InstrumentedModel::random(toy_config(4), 3, 0.3).unwrap();
        let mut c = model.to_container();
        c.insert("layer.2.wv", Tensor::new(vec![8, 15], vec![0.0; 120]));
        let err = InstrumentedModel::from_container(&c).unwrap_err();
        assert!(err.to_string().contains("W_V layer 2"), "{err}");
    }

    #[test]
    fn nan_in_unembedding_rejected() {
        let model = InstrumentedModel::random(toy_config(2), 3, 0.3).unwrap();
        let mut c = model.to_container();
        c.tensors.get_mut("unembed").unwrap().data[5] = f32::NAN;
        let err = InstrumentedModel::from_container(&c).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert!(err.to_string().contains("unembed"), "{err}");
    }

    #[test]
    fn config_invariants() {
        let mut c = toy_config(2);
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = toy_config(2);
        c.mlp_dim = 4;
        assert!(c.validate().is_err());
        let mut c = toy_config(2);
        c.vocab_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn gelu_and_silu_reference_points() {
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
        assert!((Activation::Gelu.apply(3.0) - 2.996_363_6).abs() < 1e-5);
        assert!((Activation::Silu.apply(1.0) - 0.731_058_6).abs() < 1e-6);
    }
}
