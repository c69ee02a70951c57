//! Appearance guidance: extrapolates from the self-attention noise prediction
//! toward the cross-image one, in the manner of classifier-free guidance.

use ndarray::Zip;

use crate::attention::AttentionMode;
use crate::error::{Error, Result};
use crate::latent::LatentGrid;

pub const DEFAULT_GUIDANCE_ALPHA: f32 = 3.5;

/// A noise estimate tagged with the attention mode that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePrediction {
    pub epsilon: LatentGrid,
    pub source_mode: AttentionMode,
}

impl NoisePrediction {
    pub fn new(epsilon: LatentGrid, source_mode: AttentionMode) -> Self {
        Self {
            epsilon,
            source_mode,
        }
    }
}

/// `eps_self + alpha * (eps_cross - eps_self)`.
pub fn combine(
    eps_self: &NoisePrediction,
    eps_cross: &NoisePrediction,
    alpha: f32,
) -> Result<NoisePrediction> {
    if eps_self.source_mode != AttentionMode::SelfAttention {
        return Err(Error::config(format!(
            "guidance base must come from self-attention, got {:?}",
            eps_self.source_mode
        )));
    }
    if eps_cross.source_mode != AttentionMode::CrossImageAppearance {
        return Err(Error::config(format!(
            "guidance target must come from an appearance pass, got {:?}",
            eps_cross.source_mode
        )));
    }
    eps_self
        .epsilon
        .check_same_shape(&eps_cross.epsilon, "guidance")?;
    let data = Zip::from(&eps_self.epsilon.data)
        .and(&eps_cross.epsilon.data)
        .map_collect(|&s, &x| if alpha == 1.0 { x } else { s + alpha * (x - s) });
    Ok(NoisePrediction {
        epsilon: LatentGrid {
            data,
            timestep_index: eps_self.epsilon.timestep_index,
        },
        source_mode: eps_cross.source_mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn pred(v: &[f32], mode: AttentionMode) -> NoisePrediction {
        let data = Array3::from_shape_vec((1, 1, v.len()), v.to_vec()).unwrap();
        NoisePrediction::new(LatentGrid::new(data).unwrap(), mode)
    }

    #[test]
    fn collapses_at_zero_and_one() {
        let s = pred(&[0.3, -1.7, 2.5], AttentionMode::SelfAttention);
        let x = pred(&[1.1, 0.4, -0.9], AttentionMode::CrossImageAppearance);
        assert_eq!(combine(&s, &x, 0.0).unwrap().epsilon, s.epsilon);
        assert_eq!(combine(&s, &x, 1.0).unwrap().epsilon, x.epsilon);
    }

    #[test]
    fn hand_example() {
        let s = pred(&[1.0, 0.0], AttentionMode::SelfAttention);
        let x = pred(&[0.0, 1.0], AttentionMode::CrossImageAppearance);
        let out = combine(&s, &x, 3.5).unwrap();
        assert_eq!(out.epsilon.data.as_slice().unwrap(), &[-2.5, 3.5]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = pred(&[1.0, 0.0], AttentionMode::SelfAttention);
        let x = pred(&[0.0, 1.0, 2.0], AttentionMode::CrossImageAppearance);
        assert!(matches!(combine(&s, &x, 2.0), Err(Error::InvalidShape(_))));
        assert!(combine(&s, &s, 2.0).is_err());
        let x2 = pred(&[0.0, 1.0], AttentionMode::CrossImageAppearance);
        assert!(combine(&x2, &x2, 2.0).is_err());
        let st = pred(&[0.0, 1.0], AttentionMode::CrossImageStructure);
        assert!(combine(&s, &st, 2.0).is_err());
    }

    proptest! {
        #[test]
        fn equal_inputs_are_fixed_points(v in prop::collection::vec(-5.0f32..5.0, 1..16), alpha in -2.0f32..8.0) {
            let s = pred(&v, AttentionMode::SelfAttention);
            let x = pred(&v, AttentionMode::CrossImageAppearance);
            prop_assert_eq!(combine(&s, &x, alpha).unwrap().epsilon, s.epsilon);
        }

        #[test]
        fn extrapolation_distance_scales_with_alpha(
            a in prop::collection::vec(-1.0f32..1.0, 8),
            b in prop::collection::vec(-1.0f32..1.0, 8),
            alpha in 0.0f32..5.0,
        ) {
            let s = pred(&a, AttentionMode::SelfAttention);
            let x = pred(&b, AttentionMode::CrossImageAppearance);
            let out = combine(&s, &x, alpha).unwrap();
            let norm = |p: &LatentGrid, q: &LatentGrid| -> f64 {
                p.data.iter().zip(q.data.iter()).map(|(u, v)| ((u - v) as f64).powi(2)).sum::<f64>().sqrt()
            };
            let lhs = norm(&out.epsilon, &s.epsilon);
            let rhs = alpha as f64 * norm(&x.epsilon, &s.epsilon);
            prop_assert!((lhs - rhs).abs() < 1e-6 * rhs.max(1.0));
        }
    }
}
