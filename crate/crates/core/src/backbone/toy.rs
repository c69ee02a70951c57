//! A small deterministic denoiser for exercising the injection machinery
//! without pretrained weights.
//!
//! Every pixel of an 8×8×4 latent is a token. Tokens are lifted to `d = 8`
//! features, given a positional code, and pass through a stack of residual
//! multi-head attention blocks before a linear head estimates the clean
//! latent `x̂0`. The noise prediction is the one consistent with that estimate
//! under the 1000-step training schedule,
//! `ε = (x_t − √ᾱ·x̂0) / √(1 − ᾱ)`, which keeps sampling stable the way a
//! trained denoiser does.
//! Each block stands in for one U-Net self-attention layer and carries that
//! layer's resolution tag in the catalog, so plans address it exactly as they
//! would a real model.
//!
//! The positional code puts each head's two features on a circle indexed by
//! the pixel's column (even heads) or row (odd heads), and the query and key
//! projections are per-head blocks sharing their dominant term. Same-position queries and keys
//! therefore align, which gives the toy a meaningful notion of
//! correspondence.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    process_attention_layer, AttentionPlan, Captures, Conditioning, Denoiser, LayerFeatures,
    LayerInfo, Location,
};
use crate::error::{Error, Result};
use crate::latent::LatentGrid;
use crate::schedule::{
    make_schedule, Spacing, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_TRAIN_STEPS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub seed: u64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub heads: usize,
    /// `(id, nominal resolution, location)` for each attention block, in order.
    pub layers: Vec<(String, usize, Location)>,
    /// Scale of the attention output projection.
    pub attention_gain: f32,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            channels: 4,
            height: 8,
            width: 8,
            dim: 8,
            heads: 4,
            layers: vec![
                ("down_blocks.2.attentions.0".into(), 32, Location::Encoder),
                ("up_blocks.1.attentions.0".into(), 32, Location::Decoder),
                ("up_blocks.2.attentions.0".into(), 64, Location::Decoder),
            ],
            attention_gain: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLayerWeights {
    pub wq: Array2<f32>,
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
    pub wo: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyWeights {
    /// `dim × channels`
    pub w_in: Array2<f32>,
    pub b_in: Array1<f32>,
    /// `tokens × dim`
    pub position: Array2<f32>,
    pub layers: Vec<ToyLayerWeights>,
    /// `channels × dim`
    pub w_out: Array2<f32>,
    pub b_out: Array1<f32>,
}

impl ToyWeights {
    pub fn generate(config: &ToyConfig) -> Result<Self> {
        let (c, d, heads) = (config.channels, config.dim, config.heads);
        if heads == 0 || d % heads != 0 || d / heads != 2 {
            return Err(Error::config(format!(
                "toy denoiser needs two features per head, got dim {d} with {heads} heads"
            )));
        }
        let tokens = config.height * config.width;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut normal = |std: f32, shape: (usize, usize)| -> Array2<f32> {
            let dist = Normal::new(0.0, std).unwrap();
            Array2::from_shape_simple_fn(shape, || dist.sample(&mut rng))
        };

        let w_in = normal(0.15, (d, c));
        let b_in = normal(0.02, (1, d)).remove_axis(Axis(0));
        let w_out = normal(0.5, (c, d));
        let b_out = normal(0.02, (1, c)).remove_axis(Axis(0));

        let mut layers = Vec::with_capacity(config.layers.len());
        for _ in &config.layers {
            // per-head 2×2 blocks so heads do not mix positional codes
            let block_mask = Array2::from_shape_fn((d, d), |(i, j)| {
                if i / 2 == j / 2 { 1.0f32 } else { 0.0 }
            });
            let shared = Array2::<f32>::eye(d) * 1.5 + normal(0.05, (d, d)) * &block_mask;
            let wq = &shared + &(normal(0.02, (d, d)) * &block_mask);
            let wk = &shared + &(normal(0.02, (d, d)) * &block_mask);
            let wv = normal(1.0 / (d as f32).sqrt(), (d, d));
            let wo = normal(config.attention_gain, (d, d));
            layers.push(ToyLayerWeights { wq, wk, wv, wo });
        }

        let mut position = Array2::zeros((tokens, d));
        for y in 0..config.height {
            for x in 0..config.width {
                let row = y * config.width + x;
                for h in 0..heads {
                    let (coord, extent) = if h % 2 == 0 {
                        (x, config.width)
                    } else {
                        (y, config.height)
                    };
                    let freq = if h < 2 { 2.0 } else { 1.0 };
                    let angle = std::f32::consts::PI * freq * coord as f32 / extent as f32;
                    let radius = 3.0 + 0.1 * h as f32 + 0.01 * rng.random::<f32>();
                    position[[row, 2 * h]] = radius * angle.cos();
                    position[[row, 2 * h + 1]] = radius * angle.sin();
                }
            }
        }

        Ok(Self {
            w_in,
            b_in,
            position,
            layers,
            w_out,
            b_out,
        })
    }
}

/// Deterministic toy denoiser.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    config: ToyConfig,
    weights: ToyWeights,
    catalog: Vec<LayerInfo>,
    ablated: BTreeSet<String>,
    train_alpha_bars: Vec<f64>,
}

impl ToyDenoiser {
    pub fn new(config: ToyConfig) -> Result<Self> {
        let weights = ToyWeights::generate(&config)?;
        Self::with_weights(config, weights)
    }

    pub fn seeded(seed: u64) -> Self {
        Self::new(ToyConfig {
            seed,
            ..ToyConfig::default()
        })
        .expect("default toy config is valid")
    }

    pub fn with_weights(config: ToyConfig, weights: ToyWeights) -> Result<Self> {
        let tokens = config.height * config.width;
        if weights.layers.len() != config.layers.len()
            || weights.position.dim() != (tokens, config.dim)
            || weights.w_in.dim() != (config.dim, config.channels)
            || weights.w_out.dim() != (config.channels, config.dim)
        {
            return Err(Error::config("toy weights do not match toy config"));
        }
        let catalog = config
            .layers
            .iter()
            .map(|(id, resolution, location)| LayerInfo {
                id: id.clone(),
                resolution: *resolution,
                location: *location,
                tokens,
                dim: config.dim,
                value_dim: config.dim,
                heads: config.heads,
            })
            .collect();
        Ok(Self {
            config,
            weights,
            catalog,
            ablated: BTreeSet::new(),
            train_alpha_bars: make_schedule(
                DEFAULT_TRAIN_STEPS,
                DEFAULT_BETA_START,
                DEFAULT_BETA_END,
                Spacing::Linear,
            )?
            .alpha_bars()
            .to_vec(),
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn weights(&self) -> &ToyWeights {
        &self.weights
    }

    /// Turns the named layer into an identity block.
    pub fn ablate(mut self, layer_id: &str) -> Result<Self> {
        if !self.catalog.iter().any(|l| l.id == layer_id) {
            return Err(Error::Plan(format!("unknown layer '{layer_id}'")));
        }
        self.ablated.insert(layer_id.to_string());
        Ok(self)
    }

    fn alpha_bar(&self, timestep: usize) -> f64 {
        self.train_alpha_bars[timestep.min(self.train_alpha_bars.len() - 1)]
    }

    fn time_bias(timestep: usize) -> f32 {
        0.1 * (timestep as f32 * 0.01).sin()
    }

    fn prompt_bias(prompt: &str) -> f32 {
        // FNV-1a
        let mut hash: u64 = 0xcbf29ce484222325;
        for b in prompt.bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        ((hash % 10_001) as f32 / 10_000.0 - 0.5) * 0.1
    }
}

impl Denoiser for ToyDenoiser {
    fn name(&self) -> &str {
        "toy"
    }

    fn layer_catalog(&self) -> &[LayerInfo] {
        &self.catalog
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        (self.config.channels, self.config.height, self.config.width)
    }

    fn forward(
        &self,
        latent: &LatentGrid,
        timestep: usize,
        conditioning: &Conditioning,
        plan: &AttentionPlan,
    ) -> Result<(LatentGrid, Captures)> {
        let w = &self.weights;
        let tokens = latent.to_tokens();
        let bias = Self::time_bias(timestep) + Self::prompt_bias(&conditioning.prompt);
        let mut h = tokens.dot(&w.w_in.t()) + &w.b_in + &w.position;
        h.mapv_inplace(|v| v + bias);

        let mut captures = Captures::new();
        for (layer, lw) in self.catalog.iter().zip(&w.layers) {
            let own = LayerFeatures {
                queries: h.dot(&lw.wq.t()),
                keys: h.dot(&lw.wk.t()),
                values: h.dot(&lw.wv.t()),
            };
            let ablated = self.ablated.contains(&layer.id);
            if let Some(attn) = process_attention_layer(layer, own, plan, &mut captures, ablated)? {
                h += &attn.dot(&lw.wo.t());
            }
        }

        let x0 = h.mapv(f32::tanh).dot(&w.w_out.t()) + &w.b_out;
        let ab = self.alpha_bar(timestep);
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let eps = (tokens - x0 * a) / b;
        let mut out = LatentGrid::from_tokens(&eps, self.config.height, self.config.width)?;
        out.timestep_index = latent.timestep_index;
        Ok((out, captures))
    }
}
