//! Latent grids, binary masks, and AdaIN statistics alignment.

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};

/// Default stabilizer added to the target standard deviation.
pub const ADAIN_EPSILON: f32 = 1e-5;

/// A `channels × height × width` latent at some denoising step.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub data: Array3<f32>,
    pub timestep_index: usize,
}

impl LatentGrid {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        Self::at_step(data, 0)
    }

    pub fn at_step(data: Array3<f32>, timestep_index: usize) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("empty latent {c}x{h}x{w}")));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::shape("latent contains non-finite entries"));
        }
        Ok(Self {
            data,
            timestep_index,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((channels, height, width)),
            timestep_index: 0,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }

    /// Token view: one row per pixel (row-major), one column per channel.
    pub fn to_tokens(&self) -> Array2<f32> {
        let (c, h, w) = self.data.dim();
        let mut out = Array2::zeros((h * w, c));
        for ((ch, y, x), v) in self.data.indexed_iter() {
            out[[y * w + x, ch]] = *v;
        }
        out
    }

    pub fn from_tokens(tokens: &Array2<f32>, height: usize, width: usize) -> Result<Self> {
        if tokens.nrows() != height * width {
            return Err(Error::shape(format!(
                "{} tokens cannot fill a {height}x{width} grid",
                tokens.nrows()
            )));
        }
        let c = tokens.ncols();
        let data = Array3::from_shape_fn((c, height, width), |(ch, y, x)| tokens[[y * width + x, ch]]);
        LatentGrid::new(data)
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> f32 {
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn mean_abs_diff(&self, other: &LatentGrid) -> f32 {
        let n = self.data.len().max(1) as f64;
        let s: f64 = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        (s / n) as f32
    }

    pub(crate) fn check_same_shape(&self, other: &LatentGrid, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{what}: latent shapes {:?} and {:?} differ",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// A binary `height × width` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    pub data: Array2<bool>,
}

impl MaskGrid {
    pub fn new(data: Array2<bool>) -> Self {
        Self { data }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            data: Array2::from_elem((height, width), true),
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            data: Array2::from_elem((height, width), false),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Per-channel mean and population standard deviation over the selected pixels.
pub fn channel_statistics(
    latent: &LatentGrid,
    mask: Option<&MaskGrid>,
) -> Result<(Vec<f32>, Vec<f32>)> {
    if let Some(m) = mask {
        check_mask(latent, m)?;
    }
    let mut means = Vec::with_capacity(latent.channels());
    let mut stds = Vec::with_capacity(latent.channels());
    for channel in latent.data.axis_iter(Axis(0)) {
        let selected = channel
            .indexed_iter()
            .filter(|(idx, _)| mask.is_none_or(|m| m.data[*idx]))
            .map(|(_, &v)| v as f64);
        let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
        for v in selected.clone() {
            n += 1;
            sum += v;
        }
        let mean = sum / n as f64;
        for v in selected {
            sq += (v - mean) * (v - mean);
        }
        means.push(mean as f32);
        stds.push((sq / n as f64).sqrt() as f32);
    }
    Ok((means, stds))
}

fn check_mask(latent: &LatentGrid, mask: &MaskGrid) -> Result<()> {
    if mask.shape() != latent.spatial() {
        return Err(Error::shape(format!(
            "mask {:?} does not match latent spatial shape {:?}",
            mask.shape(),
            latent.spatial()
        )));
    }
    let n = mask.count();
    if n < 2 {
        return Err(Error::DegenerateMask(format!(
            "mask selects {n} pixel(s); at least 2 required"
        )));
    }
    Ok(())
}

/// Re-normalizes `target` so each channel has the mean and standard deviation
/// of the matching `reference` channel.
///
/// Statistics are taken under each latent's own mask. With a target mask only
/// the selected target pixels are rewritten; the rest are copied through.
pub fn adain(
    target: &LatentGrid,
    reference: &LatentGrid,
    target_mask: Option<&MaskGrid>,
    reference_mask: Option<&MaskGrid>,
    epsilon: f32,
) -> Result<LatentGrid> {
    if target.channels() != reference.channels() {
        return Err(Error::shape(format!(
            "adain channel mismatch: {} vs {}",
            target.channels(),
            reference.channels()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::config(format!("adain epsilon must be > 0, got {epsilon}")));
    }
    let (t_mean, t_std) = channel_statistics(target, target_mask)?;
    let (r_mean, r_std) = channel_statistics(reference, reference_mask)?;

    let mut out = target.clone();
    for (c, mut channel) in out.data.axis_iter_mut(Axis(0)).enumerate() {
        let gain = r_std[c] as f64 / (t_std[c] as f64 + epsilon as f64);
        let (tm, rm) = (t_mean[c] as f64, r_mean[c] as f64);
        for (idx, v) in channel.indexed_iter_mut() {
            if target_mask.is_none_or(|m| m.data[idx]) {
                *v = ((*v as f64 - tm) * gain + rm) as f32;
            }
        }
    }
    Ok(out)
}
