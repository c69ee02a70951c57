//! Which layers attend across images at a given denoising iteration.

use std::collections::BTreeMap;

use super::config::TransferConfig;
use crate::attention::AttentionMode;
use crate::backbone::{AttentionPlan, LayerDirective, LayerFeatures, LayerInfo, Location};
use crate::error::{Error, Result};

/// Per-layer attention modes for one iteration, before features are bound.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub iteration: usize,
    pub layers: BTreeMap<String, AttentionMode>,
    pub contrast_factor: f32,
}

impl StepPlan {
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn mode(&self) -> AttentionMode {
        let has = |m| self.layers.values().any(|&v| v == m);
        if has(AttentionMode::CrossImageStructure) {
            AttentionMode::CrossImageStructure
        } else if has(AttentionMode::CrossImageAppearance) {
            AttentionMode::CrossImageAppearance
        } else {
            AttentionMode::SelfAttention
        }
    }

    pub fn layer_ids(&self) -> Vec<String> {
        self.layers.keys().cloned().collect()
    }

    /// Fills in keys and values: appearance layers read `appearance`,
    /// structure layers read `structure`.
    pub fn bind(
        &self,
        appearance: &BTreeMap<String, LayerFeatures>,
        structure: &BTreeMap<String, LayerFeatures>,
    ) -> Result<AttentionPlan> {
        let mut plan = AttentionPlan::default();
        for (id, &mode) in &self.layers {
            let source = match mode {
                AttentionMode::CrossImageAppearance => appearance,
                AttentionMode::CrossImageStructure => structure,
                AttentionMode::SelfAttention => continue,
            };
            let features = source.get(id).ok_or_else(|| {
                Error::Plan(format!("no {} features captured for layer '{id}'", mode.as_str()))
            })?;
            plan.directives.insert(
                id.clone(),
                LayerDirective::from_features(mode, features, self.contrast_factor),
            );
        }
        Ok(plan)
    }
}

fn window_for(layer: &LayerInfo, config: &TransferConfig) -> Option<super::config::StepWindow> {
    if layer.location != Location::Decoder {
        return None;
    }
    match layer.resolution {
        32 => Some(config.injection_window_32),
        64 => Some(config.injection_window_64),
        _ => None,
    }
}

/// Layer modes for iteration `iteration` (0 = first, noisiest step).
///
/// Decoder layers at 32×32 and 64×64 are directed inside their windows. On
/// iterations divisible by the structure period they take the structure
/// branch's keys and values, otherwise the appearance branch's.
pub fn step_plan(iteration: usize, config: &TransferConfig, catalog: &[LayerInfo]) -> StepPlan {
    let structure_step = config
        .structure_injection_period
        .is_some_and(|p| iteration.is_multiple_of(p));
    let mode = if structure_step {
        AttentionMode::CrossImageStructure
    } else {
        AttentionMode::CrossImageAppearance
    };
    let layers = catalog
        .iter()
        .filter(|l| window_for(l, config).is_some_and(|w| w.contains(iteration)))
        .map(|l| (l.id.clone(), mode))
        .collect();
    StepPlan {
        iteration,
        layers,
        contrast_factor: config.contrast_beta,
    }
}

/// Errors when a non-empty injection window has no decoder layers to act on.
pub fn check_catalog(config: &TransferConfig, catalog: &[LayerInfo]) -> Result<()> {
    for (res, w) in [(32, config.injection_window_32), (64, config.injection_window_64)] {
        let present = catalog
            .iter()
            .any(|l| l.location == Location::Decoder && l.resolution == res);
        if !w.is_empty() && !present {
            return Err(Error::config(format!(
                "injection window {w} targets {res}×{res} decoder layers, but the backbone has none"
            )));
        }
    }
    Ok(())
}
