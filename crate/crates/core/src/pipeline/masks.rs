//! Foreground masks that restrict AdaIN statistics.

use ndarray::Array2;

use crate::attention::{key_mass, AttentionMap};
use crate::error::{Error, Result};
use crate::io::image::resize_mask;
use crate::latent::MaskGrid;

#[derive(Debug, Clone, PartialEq, Default)]
pub enum MaskProvider {
    /// Unmasked AdaIN.
    #[default]
    None,
    /// Masks supplied by the caller, resampled to the latent grid.
    UserFile {
        structure: MaskGrid,
        appearance: MaskGrid,
    },
    /// Otsu split of the cross-image attention mass accumulated so far.
    AttentionDerived,
}

/// `(output mask, appearance mask)` resolved for one AdaIN call.
pub type MaskPair = Option<(MaskGrid, MaskGrid)>;

/// Otsu threshold over `values`: the split maximizing between-class variance.
/// Values strictly above the returned threshold form the foreground.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n < 2 {
        return sorted.first().copied().unwrap_or(0.0);
    }
    let total: f64 = sorted.iter().sum();
    let mut best = (f64::NEG_INFINITY, sorted[0]);
    let mut below = 0.0;
    for k in 1..n {
        below += sorted[k - 1];
        if sorted[k] == sorted[k - 1] {
            continue;
        }
        let (w0, w1) = (k as f64, (n - k) as f64);
        let m0 = below / w0;
        let m1 = (total - below) / w1;
        let score = w0 * w1 * (m0 - m1).powi(2);
        if score > best.0 {
            best = (score, sorted[k - 1]);
        }
    }
    best.1
}

pub fn otsu_mask(values: &Array2<f64>) -> MaskGrid {
    let th = otsu_threshold(values.as_slice().expect("standard layout"));
    MaskGrid::new(values.mapv(|v| v > th))
}

/// Token grid `(h, w)` of a layer with `tokens` tokens whose aspect ratio
/// matches a `height × width` latent.
pub fn token_grid(tokens: usize, height: usize, width: usize) -> Result<(usize, usize)> {
    let f = ((height * width) as f64 / tokens as f64).sqrt();
    let (h, w) = (
        (height as f64 / f).round() as usize,
        (width as f64 / f).round() as usize,
    );
    if h * w != tokens || h == 0 {
        return Err(Error::shape(format!(
            "{tokens} tokens do not tile a {height}×{width} latent"
        )));
    }
    Ok((h, w))
}

fn upsample(values: &[f64], grid: (usize, usize), height: usize, width: usize) -> Array2<f64> {
    Array2::from_shape_fn((height, width), |(y, x)| {
        values[(y * grid.0 / height) * grid.1 + x * grid.1 / width]
    })
}

/// Running per-pixel attention mass for [`MaskProvider::AttentionDerived`].
///
/// For a head-averaged map `A` (output queries × appearance keys), the
/// appearance salience of key `j` is its received mass `Σ_i A_ij`, and the
/// output salience of query `i` is `Σ_j A_ij · mass_j`, the salience it reads.
#[derive(Debug, Clone)]
pub struct SalienceAccumulator {
    height: usize,
    width: usize,
    output: Array2<f64>,
    appearance: Array2<f64>,
    count: usize,
}

impl SalienceAccumulator {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            output: Array2::zeros((height, width)),
            appearance: Array2::zeros((height, width)),
            count: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add(&mut self, map: &AttentionMap) -> Result<()> {
        let q_grid = token_grid(map.num_queries(), self.height, self.width)?;
        let k_grid = token_grid(map.num_keys(), self.height, self.width)?;
        let mass: Vec<f64> = key_mass(map).into_iter().map(f64::from).collect();
        let read: Vec<f64> = map
            .weights
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(&mass).map(|(&a, &m)| a as f64 * m).sum())
            .collect();
        self.appearance += &upsample(&mass, k_grid, self.height, self.width);
        self.output += &upsample(&read, q_grid, self.height, self.width);
        self.count += 1;
        Ok(())
    }

    /// Otsu masks of the averaged salience; `None` until something was added
    /// or when either split selects fewer than two pixels.
    pub fn masks(&self) -> MaskPair {
        if self.count == 0 {
            return None;
        }
        let out = otsu_mask(&self.output);
        let app = otsu_mask(&self.appearance);
        (out.count() >= 2 && app.count() >= 2).then_some((out, app))
    }
}

impl MaskProvider {
    /// Masks for the current AdaIN call on a `height × width` latent.
    pub fn resolve(
        &self,
        height: usize,
        width: usize,
        salience: Option<&SalienceAccumulator>,
    ) -> MaskPair {
        match self {
            MaskProvider::None => None,
            MaskProvider::UserFile {
                structure,
                appearance,
            } => Some((
                resize_mask(structure, height, width),
                resize_mask(appearance, height, width),
            )),
            MaskProvider::AttentionDerived => salience.and_then(SalienceAccumulator::masks),
        }
    }
}
