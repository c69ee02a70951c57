//! Denoiser abstraction with swappable attention processing.
//!
//! A [`Denoiser`] exposes a catalog of its self-attention layers and runs a
//! forward pass under an [`AttentionPlan`]. The plan can replace the keys and
//! values of any cataloged layer with external features (cross-image
//! attention), contrast the resulting maps, and request captures of the
//! projected features or attention maps.

mod toy;

#[cfg(feature = "adapter")]
pub mod adapter;

pub use toy::{ToyConfig, ToyDenoiser, ToyWeights};

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_attention, AttentionContext, AttentionMap, AttentionMode};
use crate::error::{Error, Result};
use crate::guidance::NoisePrediction;
use crate::latent::LatentGrid;

/// Where an attention layer sits in the U-Net.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Location {
    Encoder,
    Decoder,
}

/// One entry of a denoiser's layer catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub id: String,
    /// Output resolution of the U-Net block (e.g. 32 for 32×32).
    pub resolution: usize,
    pub location: Location,
    pub tokens: usize,
    /// Query/key feature width.
    pub dim: usize,
    pub value_dim: usize,
    pub heads: usize,
}

/// Opaque conditioning forwarded to the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub prompt: String,
    /// Text classifier-free guidance scale, used only by backbones that support it.
    pub text_guidance_scale: f32,
}

impl Conditioning {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            text_guidance_scale: 1.0,
        }
    }

    /// Conditioning built from the `"A photo of a {domain}"` template.
    pub fn for_domain(domain: &str) -> Self {
        Self::new(domain_prompt(domain))
    }
}

pub fn domain_prompt(domain: &str) -> String {
    format!("A photo of a {domain}")
}

/// Query, key, and value projections of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatures {
    pub queries: Array2<f32>,
    pub keys: Array2<f32>,
    pub values: Array2<f32>,
}

/// Replacement keys/values for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDirective {
    pub mode: AttentionMode,
    pub keys: Array2<f32>,
    pub values: Array2<f32>,
    pub contrast_factor: f32,
}

impl LayerDirective {
    pub fn from_features(mode: AttentionMode, features: &LayerFeatures, contrast_factor: f32) -> Self {
        Self {
            mode,
            keys: features.keys.clone(),
            values: features.values.clone(),
            contrast_factor,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionPlan {
    pub directives: BTreeMap<String, LayerDirective>,
    /// Layers whose Q/K/V should be returned.
    pub capture_features: BTreeSet<String>,
    /// Layers whose per-head attention maps (before contrast) should be returned.
    pub capture_maps: BTreeSet<String>,
}

impl AttentionPlan {
    pub fn is_empty(&self) -> bool {
        self.directives.is_empty()
    }

    pub fn capturing(layer_ids: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            capture_features: layer_ids.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }

    /// Mode the plan runs in: the appearance mode wins over structure.
    pub fn mode(&self) -> AttentionMode {
        let has = |mode| self.directives.values().any(|d| d.mode == mode);
        if has(AttentionMode::CrossImageAppearance) {
            AttentionMode::CrossImageAppearance
        } else if has(AttentionMode::CrossImageStructure) {
            AttentionMode::CrossImageStructure
        } else {
            AttentionMode::SelfAttention
        }
    }

    /// Checks every referenced layer exists and external features fit it.
    pub fn validate(&self, catalog: &[LayerInfo]) -> Result<()> {
        let find = |id: &str| {
            catalog
                .iter()
                .find(|l| l.id == id)
                .ok_or_else(|| Error::Plan(format!("unknown layer '{id}'")))
        };
        for (id, d) in &self.directives {
            let layer = find(id)?;
            if d.keys.ncols() != layer.dim || d.values.ncols() != layer.value_dim {
                return Err(Error::shape(format!(
                    "layer '{id}' expects key/value widths {}/{}, got {}/{}",
                    layer.dim,
                    layer.value_dim,
                    d.keys.ncols(),
                    d.values.ncols()
                )));
            }
            if d.keys.nrows() != d.values.nrows() || d.keys.nrows() == 0 {
                return Err(Error::shape(format!(
                    "layer '{id}' has {} keys and {} values",
                    d.keys.nrows(),
                    d.values.nrows()
                )));
            }
            if !(d.contrast_factor >= 0.0) {
                return Err(Error::Plan(format!(
                    "layer '{id}' has negative contrast factor {}",
                    d.contrast_factor
                )));
            }
        }
        for id in self.capture_features.iter().chain(&self.capture_maps) {
            find(id)?;
        }
        Ok(())
    }
}

/// Per-layer captures returned by a forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CapturedLayer {
    pub features: Option<LayerFeatures>,
    pub maps: Option<Vec<AttentionMap>>,
}

pub type Captures = BTreeMap<String, CapturedLayer>;

/// A noise-predicting network with a self-attention layer catalog.
///
/// Implementations must be deterministic in their inputs and must not keep
/// captures on the instance, so a shared reference can be used from several
/// threads at once.
pub trait Denoiser: Send + Sync {
    fn name(&self) -> &str;

    fn layer_catalog(&self) -> &[LayerInfo];

    /// `(channels, height, width)` of the latents this denoiser accepts.
    fn latent_shape(&self) -> (usize, usize, usize);

    /// Runs one forward pass. `plan` has already been validated.
    fn forward(
        &self,
        latent: &LatentGrid,
        timestep: usize,
        conditioning: &Conditioning,
        plan: &AttentionPlan,
    ) -> Result<(LatentGrid, Captures)>;
}

/// Runs the denoiser with the plan's directives and captures applied.
pub fn predict_with_plan(
    denoiser: &dyn Denoiser,
    latent: &LatentGrid,
    timestep: usize,
    conditioning: &Conditioning,
    plan: &AttentionPlan,
) -> Result<(NoisePrediction, Captures)> {
    plan.validate(denoiser.layer_catalog())?;
    if latent.shape() != denoiser.latent_shape() {
        return Err(Error::shape(format!(
            "denoiser '{}' expects latents {:?}, got {:?}",
            denoiser.name(),
            denoiser.latent_shape(),
            latent.shape()
        )));
    }
    let (eps, captures) = denoiser.forward(latent, timestep, conditioning, plan)?;
    Ok((NoisePrediction::new(eps, plan.mode()), captures))
}

/// Plain forward pass.
pub fn predict(
    denoiser: &dyn Denoiser,
    latent: &LatentGrid,
    timestep: usize,
    conditioning: &Conditioning,
) -> Result<NoisePrediction> {
    predict_with_plan(denoiser, latent, timestep, conditioning, &AttentionPlan::default())
        .map(|(p, _)| p)
}

/// Q/K/V of the requested layers from a plain forward pass.
pub fn capture_features(
    denoiser: &dyn Denoiser,
    latent: &LatentGrid,
    timestep: usize,
    conditioning: &Conditioning,
    layer_ids: &[String],
) -> Result<BTreeMap<String, LayerFeatures>> {
    let plan = AttentionPlan::capturing(layer_ids.iter().cloned());
    let (_, captures) = predict_with_plan(denoiser, latent, timestep, conditioning, &plan)?;
    Ok(captures
        .into_iter()
        .filter_map(|(id, c)| c.features.map(|f| (id, f)))
        .collect())
}

/// Decoder layers at the given resolution.
pub fn decoder_layers_at(catalog: &[LayerInfo], resolution: usize) -> Vec<&LayerInfo> {
    catalog
        .iter()
        .filter(|l| l.location == Location::Decoder && l.resolution == resolution)
        .collect()
}

/// Attention processor shared by backbones: evaluates one layer given its own
/// projections, honoring the plan's directive and capture flags.
///
/// Returns `None` when the layer is ablated (acts as identity).
pub fn process_attention_layer(
    layer: &LayerInfo,
    own: LayerFeatures,
    plan: &AttentionPlan,
    captures: &mut Captures,
    ablated: bool,
) -> Result<Option<Array2<f32>>> {
    let keep_maps = plan.capture_maps.contains(&layer.id);
    let keep_features = plan.capture_features.contains(&layer.id);
    let features = keep_features.then(|| own.clone());
    if ablated {
        if keep_features {
            captures.entry(layer.id.clone()).or_default().features = features;
        }
        return Ok(None);
    }
    let (keys, values, contrast) = match plan.directives.get(&layer.id) {
        Some(d) => (d.keys.clone(), d.values.clone(), d.contrast_factor),
        None => (own.keys, own.values, 1.0),
    };
    let ctx = AttentionContext::new(own.queries, keys, values, layer.heads)?;
    let out = multi_head_attention(&ctx, contrast, keep_maps)?;
    if keep_features || keep_maps {
        let entry = captures.entry(layer.id.clone()).or_default();
        entry.features = features;
        entry.maps = out.maps;
    }
    Ok(Some(out.output))
}
