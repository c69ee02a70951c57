//! Integration surface for pretrained latent-diffusion backbones.
//!
//! A model binding implements [`HookedModel`]: it owns the weights, runs its
//! own U-Net, and calls the supplied [`AttentionHook`] at every
//! self-attention layer it reports in [`HookedModel::attention_layers`]. The
//! hook receives that layer's Q/K/V and returns the attention output, so all
//! plan handling (key/value substitution, contrast, captures) stays in this
//! crate. [`AdapterDenoiser`] turns such a binding into a [`Denoiser`].
//!
//! Layer catalog schema (JSON, one object per layer):
//!
//! ```text
//! { "id": "up_blocks.1.attentions.0.transformer_blocks.0.attn1",
//!   "resolution": 32, "location": "decoder",
//!   "tokens": 1024, "dim": 640, "value_dim": 640, "heads": 8 }
//! ```
//!
//! Capture schema: per layer, `queries`/`keys`/`values` as `tokens × dim`
//! row-major f32 matrices and, when maps are requested, one
//! `tokens × tokens` map per head.

use ndarray::Array2;

use super::{
    process_attention_layer, AttentionPlan, Captures, Conditioning, Denoiser, LayerFeatures,
    LayerInfo,
};
use crate::error::{Error, Result};
use crate::latent::LatentGrid;

/// Called by a model binding at every cataloged self-attention layer.
pub trait AttentionHook {
    fn attend(&mut self, layer_id: &str, features: LayerFeatures) -> Result<Array2<f32>>;
}

/// Options forwarded untouched to the binding.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AdapterOptions {
    /// Ask the binding to apply FreeU skip/backbone re-weighting.
    pub freeu: bool,
}

/// A pretrained model exposing its self-attention layers through a hook.
pub trait HookedModel: Send + Sync {
    fn name(&self) -> &str;

    fn attention_layers(&self) -> Vec<LayerInfo>;

    fn latent_shape(&self) -> (usize, usize, usize);

    /// One U-Net evaluation. Must call `hook.attend` for every layer in
    /// [`HookedModel::attention_layers`] and use its return value as that
    /// layer's attention output.
    fn denoise(
        &self,
        latent: &LatentGrid,
        timestep: usize,
        conditioning: &Conditioning,
        options: AdapterOptions,
        hook: &mut dyn AttentionHook,
    ) -> Result<LatentGrid>;
}

struct PlanHook<'a> {
    catalog: &'a [LayerInfo],
    plan: &'a AttentionPlan,
    captures: Captures,
    visited: usize,
}

impl AttentionHook for PlanHook<'_> {
    fn attend(&mut self, layer_id: &str, features: LayerFeatures) -> Result<Array2<f32>> {
        let layer = self
            .catalog
            .iter()
            .find(|l| l.id == layer_id)
            .ok_or_else(|| Error::Backbone(format!("model reported unknown layer '{layer_id}'")))?;
        self.visited += 1;
        let own_values = features.values.clone();
        let queries = features.queries.nrows();
        match process_attention_layer(layer, features, self.plan, &mut self.captures, false)? {
            Some(out) => Ok(out),
            None => Ok(Array2::zeros((queries, own_values.ncols()))),
        }
    }
}

/// [`Denoiser`] over a [`HookedModel`].
pub struct AdapterDenoiser<M> {
    model: M,
    catalog: Vec<LayerInfo>,
    options: AdapterOptions,
}

impl<M: HookedModel> AdapterDenoiser<M> {
    pub fn new(model: M, options: AdapterOptions) -> Result<Self> {
        let catalog = model.attention_layers();
        if catalog.is_empty() {
            return Err(Error::Backbone(format!(
                "model '{}' reports no attention layers",
                model.name()
            )));
        }
        Ok(Self {
            model,
            catalog,
            options,
        })
    }

    /// Parses a layer catalog in the documented JSON schema.
    pub fn parse_catalog(json: &str) -> Result<Vec<LayerInfo>> {
        serde_json::from_str(json).map_err(|e| Error::Format(format!("layer catalog: {e}")))
    }
}

impl<M: HookedModel> Denoiser for AdapterDenoiser<M> {
    fn name(&self) -> &str {
        self.model.name()
    }

    fn layer_catalog(&self) -> &[LayerInfo] {
        &self.catalog
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        self.model.latent_shape()
    }

    fn forward(
        &self,
        latent: &LatentGrid,
        timestep: usize,
        conditioning: &Conditioning,
        plan: &AttentionPlan,
    ) -> Result<(LatentGrid, Captures)> {
        let mut hook = PlanHook {
            catalog: &self.catalog,
            plan,
            captures: Captures::new(),
            visited: 0,
        };
        let eps = self
            .model
            .denoise(latent, timestep, conditioning, self.options, &mut hook)?;
        if hook.visited < self.catalog.len() {
            return Err(Error::Backbone(format!(
                "model '{}' visited {} of {} attention layers",
                self.model.name(),
                hook.visited,
                self.catalog.len()
            )));
        }
        Ok((eps, hook.captures))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionMode;
    use crate::backbone::{predict, predict_with_plan, LayerDirective, Location};
    use ndarray::Array3;

    /// Single attention layer over a 2×2 latent with identity projections.
    struct Mock;

    impl HookedModel for Mock {
        fn name(&self) -> &str {
            "mock"
        }

        fn attention_layers(&self) -> Vec<LayerInfo> {
            vec![LayerInfo {
                id: "up.attn".into(),
                resolution: 64,
                location: Location::Decoder,
                tokens: 4,
                dim: 2,
                value_dim: 2,
                heads: 1,
            }]
        }

        fn latent_shape(&self) -> (usize, usize, usize) {
            (2, 2, 2)
        }

        fn denoise(
            &self,
            latent: &LatentGrid,
            _timestep: usize,
            _conditioning: &Conditioning,
            options: AdapterOptions,
            hook: &mut dyn AttentionHook,
        ) -> Result<LatentGrid> {
            let tokens = latent.to_tokens();
            let out = hook.attend(
                "up.attn",
                LayerFeatures {
                    queries: tokens.clone(),
                    keys: tokens.clone(),
                    values: tokens.clone(),
                },
            )?;
            let scale = if options.freeu { 2.0 } else { 1.0 };
            LatentGrid::from_tokens(&(out * scale), 2, 2)
        }
    }

    fn latent() -> LatentGrid {
        LatentGrid::new(Array3::from_shape_fn((2, 2, 2), |(c, y, x)| {
            (c as f32 - 0.5) * (y as f32 + 2.0 * x as f32)
        }))
        .unwrap()
    }

    #[test]
    fn plans_route_through_hook() {
        let den = AdapterDenoiser::new(Mock, AdapterOptions::default()).unwrap();
        let cond = Conditioning::new("A photo of a cake");
        let plain = predict(&den, &latent(), 10, &cond).unwrap();

        let mut plan = AttentionPlan::capturing(["up.attn"]);
        let (same, caps) = predict_with_plan(&den, &latent(), 10, &cond, &plan).unwrap();
        assert_eq!(plain.epsilon, same.epsilon);
        let f = caps["up.attn"].features.clone().unwrap();

        plan.directives.insert(
            "up.attn".into(),
            LayerDirective {
                mode: AttentionMode::CrossImageAppearance,
                keys: f.keys.clone(),
                values: f.values.mapv(|v| v + 1.0),
                contrast_factor: 1.0,
            },
        );
        let (shifted, _) = predict_with_plan(&den, &latent(), 10, &cond, &plan).unwrap();
        for (a, b) in shifted.epsilon.data.iter().zip(plain.epsilon.data.iter()) {
            assert!((a - b - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn freeu_flag_is_forwarded() {
        let on = AdapterDenoiser::new(Mock, AdapterOptions { freeu: true }).unwrap();
        let off = AdapterDenoiser::new(Mock, AdapterOptions::default()).unwrap();
        let cond = Conditioning::new("");
        let a = predict(&on, &latent(), 1, &cond).unwrap();
        let b = predict(&off, &latent(), 1, &cond).unwrap();
        assert_eq!(a.epsilon.data, b.epsilon.data.mapv(|v| v * 2.0));
    }

    #[test]
    fn catalog_schema_parses() {
        let json = r#"[{"id":"up_blocks.1.attentions.0","resolution":32,"location":"decoder",
            "tokens":1024,"dim":640,"value_dim":640,"heads":8}]"#;
        let cat = AdapterDenoiser::<Mock>::parse_catalog(json).unwrap();
        assert_eq!(cat[0].location, Location::Decoder);
        assert!(AdapterDenoiser::<Mock>::parse_catalog("{").is_err());
    }
}
