//! Structure and appearance scores: mask IoU and Gram-matrix distance.

use ndarray::{Array2, Array3, Zip};

use crate::error::{Error, Result};
use crate::latent::MaskGrid;

/// `|A ∩ B| / |A ∪ B|`, and 1 when both masks are empty.
pub fn structure_iou(mask_out: &MaskGrid, mask_struct: &MaskGrid) -> Result<f64> {
    if mask_out.shape() != mask_struct.shape() {
        return Err(Error::shape(format!(
            "mask shapes differ: {:?} vs {:?}",
            mask_out.shape(),
            mask_struct.shape()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    Zip::from(&mask_out.data)
        .and(&mask_struct.data)
        .for_each(|&a, &b| {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        });
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// `F·Fᵀ / (C·H·W)` of a `C × H × W` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub matrix: Array2<f64>,
    pub normalization: f64,
}

impl GramMatrix {
    pub fn of(features: &Array3<f32>) -> Self {
        let (c, h, w) = features.dim();
        let f = features
            .view()
            .into_shape_with_order((c, h * w))
            .expect("contiguous features")
            .mapv(f64::from);
        let normalization = (c * h * w) as f64;
        Self {
            matrix: f.dot(&f.t()) / normalization,
            normalization,
        }
    }

    pub fn channels(&self) -> usize {
        self.matrix.nrows()
    }

    /// Frobenius norm of `self − other`.
    pub fn distance(&self, other: &GramMatrix) -> Result<f64> {
        if self.matrix.dim() != other.matrix.dim() {
            return Err(Error::shape(format!(
                "Gram matrices of {} and {} channels",
                self.channels(),
                other.channels()
            )));
        }
        Ok(Zip::from(&self.matrix)
            .and(&other.matrix)
            .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b))
            .sqrt())
    }
}

/// `Σ_l w_l · ‖G_l(a) − G_l(b)‖_F` over matching feature stacks.
pub fn gram_distance(
    features_a: &[Array3<f32>],
    features_b: &[Array3<f32>],
    layer_weights: &[f64],
) -> Result<f64> {
    if features_a.len() != features_b.len() || features_a.len() != layer_weights.len() {
        return Err(Error::shape(format!(
            "layer counts differ: {} / {} features, {} weights",
            features_a.len(),
            features_b.len(),
            layer_weights.len()
        )));
    }
    features_a
        .iter()
        .zip(features_b)
        .zip(layer_weights)
        .try_fold(0.0, |acc, ((a, b), &w)| {
            Ok(acc + w * GramMatrix::of(a).distance(&GramMatrix::of(b))?)
        })
}
