//! Decoder-only transformer over multi-modal tokens, trained with manual
//! backpropagation.

pub mod checkpoint;
pub mod gradcheck;
pub mod layout;
pub mod loss;
pub mod network;
pub mod ops;
pub mod optim;
pub mod scalar;
pub mod select;
pub mod train;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tokenizer::{Token, TokenFields};

pub use checkpoint::Checkpoint;
pub use layout::{Layout, TensorInfo};
pub use loss::{loss, loss_terms, next_token_targets, LossBreakdown, LossWeights};
pub use network::{Batch, HeadOutputs};
pub use train::{evaluate_loss, finetune, train, EpochStats, TrainConfig, TrainOutcome};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_token: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub mlp_hidden: usize,
    pub n_heads: usize,
    pub max_context: usize,
    pub distribution_head: bool,
    /// Hidden width of each output head.
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_token: 9,
            d_model: 128,
            n_blocks: 2,
            mlp_hidden: 1024,
            n_heads: 4,
            max_context: 500,
            distribution_head: true,
            head_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_token < 4 {
            return bad(format!("d_token {} leaves no room for an event vocabulary", self.d_token));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_context < 2 {
            return bad(format!("max_context {} must be at least 2", self.max_context));
        }
        if self.mlp_hidden == 0 || self.head_hidden == 0 {
            return bad("hidden sizes must be positive".into());
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.d_token - 3
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn arrival_outputs(&self) -> usize {
        if self.distribution_head {
            2
        } else {
            1
        }
    }
}

/// Weights plus the layout that names them.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f32>,
}

impl PartialEq for Model {
    /// Bitwise weight equality.
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Model {
    pub fn from_params(config: ModelConfig, params: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Shape(format!(
                "{} parameters supplied, layout needs {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Model { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.layout
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.params[t.range()])
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::Empty("forward needs at least one token"));
        }
        if len > self.config.max_context {
            return Err(Error::Shape(format!(
                "sequence of {len} tokens exceeds max_context {}",
                self.config.max_context
            )));
        }
        Ok(())
    }

    pub fn forward(&self, tokens: &[Token]) -> Result<HeadOutputs<f32>> {
        self.check_len(tokens.len())?;
        let d = self.config.d_token;
        if let Some(t) = tokens.iter().find(|t| t.values().len() != d) {
            return Err(Error::Shape(format!("token of width {} for d_token {d}", t.values().len())));
        }
        let rows: Vec<&[f64]> = tokens.iter().map(|t| t.values()).collect();
        let batch = Batch::from_values(&rows, d);
        Ok(network::forward(&self.config, &self.layout, &self.params, &batch).0)
    }

    pub fn forward_fields(&self, fields: &[TokenFields]) -> Result<HeadOutputs<f32>> {
        self.check_len(fields.len())?;
        let batch = Batch::from_fields(&[fields], self.config.vocab_size());
        Ok(network::forward(&self.config, &self.layout, &self.params, &batch).0)
    }
}

/// Seeded initialization: normal(0, 0.02) weights with residual projections
/// scaled by `1/sqrt(2·n_blocks)`, zero biases, unit norm gains.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut params = vec![0f32; layout.total];
    let mut rng = seeded(seed);
    let resid_std = INIT_STD / (2.0 * config.n_blocks.max(1) as f64).sqrt();
    for t in &layout.tensors {
        let slot = &mut params[t.range()];
        if t.name.ends_with(".gain") {
            slot.fill(1.0);
        } else if t.name.ends_with(".bias") {
            slot.fill(0.0);
        } else {
            let std = if t.name.ends_with("attn.proj.weight") || t.name.ends_with("mlp.out.weight") {
                resid_std
            } else {
                INIT_STD
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in slot.iter_mut() {
                *v = normal.sample(&mut rng) as f32;
            }
        }
    }
    Model::from_params(config.clone(), params)
}
