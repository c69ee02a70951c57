//! Appearance transfer: dual inversion followed by three-branch denoising.
//!
//! The structure and appearance latents are inverted with the same seed.
//! Denoising then advances three latents in lockstep: the appearance and
//! structure branches replay their inversions untouched, while the output
//! branch starts from the structure terminal latent and, inside the
//! injection windows, queries the appearance branch's keys and values.

mod config;
mod masks;
mod plan;

pub use config::{StepWindow, TransferConfig};
pub use masks::{otsu_mask, otsu_threshold, token_grid, MaskPair, MaskProvider, SalienceAccumulator};
pub use plan::{check_catalog, step_plan, StepPlan};

use std::collections::BTreeMap;
use std::fmt;

use image::RgbImage;

use crate::attention::{mean_over_heads, AttentionMap, AttentionMode};
use crate::backbone::{predict, predict_with_plan, AttentionPlan, Conditioning, Denoiser, LayerFeatures};
use crate::error::{Error, Result};
use crate::guidance::combine;
use crate::io::image::LatentCodec;
use crate::latent::{adain, LatentGrid};
use crate::schedule::{invert, replay, sampling_step, DiffusionSchedule, InversionRecord};

/// The three latents advanced together, with the features captured from the
/// appearance and structure branches at the current step.
#[derive(Debug, Clone)]
pub struct BranchState {
    pub out: LatentGrid,
    pub app: LatentGrid,
    pub structure: LatentGrid,
    /// Schedule step `t` the latents are at (`T` down to 0).
    pub step: usize,
    pub app_features: BTreeMap<String, LayerFeatures>,
    pub structure_features: BTreeMap<String, LayerFeatures>,
}

impl BranchState {
    pub fn new(structure: &InversionRecord, appearance: &InversionRecord) -> Result<Self> {
        structure
            .terminal
            .check_same_shape(&appearance.terminal, "branch latents")?;
        if structure.num_steps() != appearance.num_steps() {
            return Err(Error::config("inversion records differ in step count"));
        }
        Ok(Self {
            out: structure.terminal.clone(),
            app: appearance.terminal.clone(),
            structure: structure.terminal.clone(),
            step: structure.num_steps(),
            app_features: BTreeMap::new(),
            structure_features: BTreeMap::new(),
        })
    }
}

/// What happened at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub iteration: usize,
    pub step: usize,
    pub timestep: usize,
    pub mode: AttentionMode,
    pub layers: Vec<String>,
    pub guided: bool,
    pub adain: AdainUse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdainUse {
    Off,
    Unmasked,
    Masked,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let adain = match self.adain {
            AdainUse::Off => "off",
            AdainUse::Unmasked => "unmasked",
            AdainUse::Masked => "masked",
        };
        write!(
            f,
            "iteration={} step={} timestep={} mode={} layers={} guided={} adain={}",
            self.iteration,
            self.step,
            self.timestep,
            self.mode.as_str(),
            if self.layers.is_empty() { "-".into() } else { self.layers.join(",") },
            self.guided,
            adain
        )
    }
}

/// Head-averaged cross-image attention (before contrast) at one layer and
/// appearance iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedAttention {
    pub iteration: usize,
    pub layer_id: String,
    pub map: AttentionMap,
}

#[derive(Debug, Clone)]
pub struct TransferResult {
    pub output: LatentGrid,
    /// Final appearance-branch latent.
    pub appearance: LatentGrid,
    pub structure: LatentGrid,
    /// Max-abs gap between the appearance branch and its input latent.
    pub drift: f32,
    pub drift_warning: Option<String>,
    pub steps: Vec<StepRecord>,
    pub attention: Vec<CapturedAttention>,
    /// Masks used by the last masked AdaIN call.
    pub masks: MaskPair,
}

impl TransferResult {
    /// Per-step echo, one line per iteration.
    pub fn step_log(&self) -> String {
        self.steps.iter().map(|s| format!("{s}\n")).collect()
    }
}

fn conditioning(config: &TransferConfig) -> Conditioning {
    Conditioning {
        prompt: config.prompt(),
        text_guidance_scale: config.text_guidance_scale,
    }
}

/// Edit-friendly inversion of one latent under the config's schedule, seed and prompt.
pub fn invert_latent(
    x0: &LatentGrid,
    config: &TransferConfig,
    denoiser: &dyn Denoiser,
) -> Result<InversionRecord> {
    config.validate()?;
    let schedule = DiffusionSchedule::inference(config.num_steps)?;
    let cond = conditioning(config);
    invert(x0, &schedule, &cond.prompt, config.seed, config.eta, |x, t| {
        predict(denoiser, x, schedule.timestep_value(t), &cond).map(|p| p.epsilon)
    })
}

/// Replays a record with plain attention.
pub fn replay_record(
    record: &InversionRecord,
    config: &TransferConfig,
    denoiser: &dyn Denoiser,
) -> Result<LatentGrid> {
    let schedule = DiffusionSchedule::inference(record.num_steps())?;
    let cond = Conditioning {
        prompt: record.prompt.clone(),
        text_guidance_scale: config.text_guidance_scale,
    };
    replay(record, &schedule, |x, t| {
        predict(denoiser, x, schedule.timestep_value(t), &cond).map(|p| p.epsilon)
    })
}

/// Inverts `x0` and replays it without any attention plan.
pub fn reconstruct_latent(
    x0: &LatentGrid,
    config: &TransferConfig,
    denoiser: &dyn Denoiser,
) -> Result<LatentGrid> {
    let record = invert_latent(x0, config, denoiser)?;
    replay_record(&record, config, denoiser)
}

pub fn reconstruct(
    image: &RgbImage,
    config: &TransferConfig,
    denoiser: &dyn Denoiser,
    codec: &dyn LatentCodec,
) -> Result<RgbImage> {
    codec.decode(&reconstruct_latent(&codec.encode(image)?, config, denoiser)?)
}

/// Inverts both latents and runs the transfer.
pub fn transfer_latents(
    structure: &LatentGrid,
    appearance: &LatentGrid,
    config: &TransferConfig,
    denoiser: &dyn Denoiser,
    masks: &MaskProvider,
) -> Result<TransferResult> {
    structure.check_same_shape(appearance, "transfer inputs")?;
    let s = invert_latent(structure, config, denoiser)?;
    let a = invert_latent(appearance, config, denoiser)?;
    transfer_records(&s, &a, appearance, config, denoiser, masks)
}

pub fn transfer(
    image_struct: &RgbImage,
    image_app: &RgbImage,
    config: &TransferConfig,
    denoiser: &dyn Denoiser,
    codec: &dyn LatentCodec,
    masks: &MaskProvider,
) -> Result<(RgbImage, TransferResult)> {
    let result = transfer_latents(
        &codec.encode(image_struct)?,
        &codec.encode(image_app)?,
        config,
        denoiser,
        masks,
    )?;
    Ok((codec.decode(&result.output)?, result))
}

/// Runs the transfer from precomputed inversions. `appearance_input` is the
/// latent the appearance record was inverted from, used for the drift check.
pub fn transfer_records(
    structure: &InversionRecord,
    appearance: &InversionRecord,
    appearance_input: &LatentGrid,
    config: &TransferConfig,
    denoiser: &dyn Denoiser,
    masks: &MaskProvider,
) -> Result<TransferResult> {
    config.validate()?;
    check_catalog(config, denoiser.layer_catalog())?;
    if structure.num_steps() != config.num_steps {
        return Err(Error::config(format!(
            "inversion has {} steps, config asks for {}",
            structure.num_steps(),
            config.num_steps
        )));
    }
    let schedule = DiffusionSchedule::inference(config.num_steps)?;
    let cond = conditioning(config);
    let eta = config.eta;
    let mut state = BranchState::new(structure, appearance)?;
    let (_, h, w) = state.out.shape();
    let mut salience = SalienceAccumulator::new(h, w);
    let track_salience = config.use_masks && matches!(masks, MaskProvider::AttentionDerived);
    let keep_maps = track_salience || config.capture_attention;

    let mut steps = Vec::with_capacity(config.num_steps);
    let mut attention = Vec::new();
    let mut last_masks = None;

    for iteration in 0..config.num_steps {
        let t = state.step;
        let timestep = schedule.timestep_value(t);
        let plan = step_plan(iteration, config, denoiser.layer_catalog());
        let mode = plan.mode();
        let ids = plan.layer_ids();

        let app_capture = if mode == AttentionMode::CrossImageAppearance {
            AttentionPlan::capturing(ids.iter().cloned())
        } else {
            AttentionPlan::default()
        };
        let struct_capture = if mode == AttentionMode::CrossImageStructure {
            AttentionPlan::capturing(ids.iter().cloned())
        } else {
            AttentionPlan::default()
        };
        let (eps_app, caps) = predict_with_plan(denoiser, &state.app, timestep, &cond, &app_capture)?;
        state.app_features = features_of(caps);
        let (eps_struct, caps) =
            predict_with_plan(denoiser, &state.structure, timestep, &cond, &struct_capture)?;
        state.structure_features = features_of(caps);

        let mut guided = false;
        let eps_out = match mode {
            AttentionMode::SelfAttention => predict(denoiser, &state.out, timestep, &cond)?,
            AttentionMode::CrossImageStructure => {
                let bound = plan.bind(&state.app_features, &state.structure_features)?;
                predict_with_plan(denoiser, &state.out, timestep, &cond, &bound)?.0
            }
            AttentionMode::CrossImageAppearance => {
                let mut bound = plan.bind(&state.app_features, &state.structure_features)?;
                if keep_maps {
                    bound.capture_maps = ids.iter().cloned().collect();
                }
                let (eps_cross, caps) =
                    predict_with_plan(denoiser, &state.out, timestep, &cond, &bound)?;
                for (id, layer) in caps {
                    if let Some(map) = layer.maps.as_deref().and_then(mean_over_heads) {
                        if track_salience {
                            salience.add(&map)?;
                        }
                        if config.capture_attention {
                            attention.push(CapturedAttention {
                                iteration,
                                layer_id: id,
                                map,
                            });
                        }
                    }
                }
                let eps_self = predict(denoiser, &state.out, timestep, &cond)?;
                guided = true;
                combine(&eps_self, &eps_cross, config.guidance_alpha)?
            }
        };

        let noise_s = &structure.noise_maps[t - 1];
        let noise_a = &appearance.noise_maps[t - 1];
        state.app = sampling_step(&state.app, &eps_app.epsilon, t, &schedule, Some(noise_a), eta)?;
        state.structure =
            sampling_step(&state.structure, &eps_struct.epsilon, t, &schedule, Some(noise_s), eta)?;
        state.out = sampling_step(&state.out, &eps_out.epsilon, t, &schedule, Some(noise_s), eta)?;
        state.step = t - 1;

        let mut adain_use = AdainUse::Off;
        if config.adain_window.contains(iteration) {
            let pair = if config.use_masks {
                masks.resolve(h, w, Some(&salience))
            } else {
                None
            };
            let (tm, rm) = match &pair {
                Some((o, a)) => (Some(o), Some(a)),
                None => (None, None),
            };
            state.out = adain(&state.out, &state.app, tm, rm, config.adain_epsilon)?;
            state.out.timestep_index = state.step;
            adain_use = if pair.is_some() {
                AdainUse::Masked
            } else {
                AdainUse::Unmasked
            };
            if pair.is_some() {
                last_masks = pair;
            }
        }

        steps.push(StepRecord {
            iteration,
            step: t,
            timestep,
            mode,
            layers: ids,
            guided,
            adain: adain_use,
        });
    }

    let drift = state.app.max_abs_diff(appearance_input);
    let drift_warning = (drift > config.drift_tolerance).then(|| {
        format!(
            "appearance branch drifted {drift:.3e} from its input (tolerance {:.1e})",
            config.drift_tolerance
        )
    });
    Ok(TransferResult {
        output: state.out,
        appearance: state.app,
        structure: state.structure,
        drift,
        drift_warning,
        steps,
        attention,
        masks: last_masks,
    })
}

fn features_of(captures: crate::backbone::Captures) -> BTreeMap<String, LayerFeatures> {
    captures
        .into_iter()
        .filter_map(|(id, c)| c.features.map(|f| (id, f)))
        .collect()
}

/// Cross-image attention maps (per head, before contrast) from structure
/// queries to appearance keys at `iteration`, after replaying both
/// inversions plainly up to that point.
pub fn cross_attention_maps(
    structure: &InversionRecord,
    appearance: &InversionRecord,
    config: &TransferConfig,
    denoiser: &dyn Denoiser,
    iteration: usize,
    layer_ids: &[String],
) -> Result<BTreeMap<String, Vec<AttentionMap>>> {
    if iteration >= structure.num_steps() {
        return Err(Error::config(format!(
            "iteration {iteration} is outside 0..{}",
            structure.num_steps()
        )));
    }
    if layer_ids.is_empty() {
        return Err(Error::config("no layers selected for correspondence"));
    }
    let schedule = DiffusionSchedule::inference(structure.num_steps())?;
    let cond = conditioning(config);
    let mut state = BranchState::new(structure, appearance)?;
    for _ in 0..iteration {
        let t = state.step;
        let ts = schedule.timestep_value(t);
        let ea = predict(denoiser, &state.app, ts, &cond)?;
        let es = predict(denoiser, &state.structure, ts, &cond)?;
        state.app = sampling_step(&state.app, &ea.epsilon, t, &schedule, Some(&appearance.noise_maps[t - 1]), appearance.eta)?;
        state.structure = sampling_step(&state.structure, &es.epsilon, t, &schedule, Some(&structure.noise_maps[t - 1]), structure.eta)?;
        state.step = t - 1;
    }
    let ts = schedule.timestep_value(state.step);
    let (_, caps) = predict_with_plan(
        denoiser,
        &state.app,
        ts,
        &cond,
        &AttentionPlan::capturing(layer_ids.iter().cloned()),
    )?;
    let feats = features_of(caps);
    let mut plan = AttentionPlan {
        capture_maps: layer_ids.iter().cloned().collect(),
        ..AttentionPlan::default()
    };
    for id in layer_ids {
        let f = feats
            .get(id)
            .ok_or_else(|| Error::Plan(format!("no features captured for '{id}'")))?;
        plan.directives.insert(
            id.clone(),
            crate::backbone::LayerDirective::from_features(AttentionMode::CrossImageAppearance, f, 1.0),
        );
    }
    let (_, caps) = predict_with_plan(denoiser, &state.structure, ts, &cond, &plan)?;
    Ok(caps
        .into_iter()
        .filter_map(|(id, c)| c.maps.map(|m| (id, m)))
        .collect())
}
