//! Feature extractors feeding the Gram-matrix appearance score.

use image::RgbImage;
use ndarray::{s, Array1, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Produces one `C × H × W` feature map per scored layer.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;

    fn layer_names(&self) -> Vec<String>;

    fn extract(&self, image: &Array3<f32>) -> Result<Vec<Array3<f32>>>;
}

/// `3 × H × W` tensor of an RGB image, values in [0, 1].
pub fn image_tensor(image: &RgbImage) -> Array3<f32> {
    let (w, h) = image.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        image.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
    })
}

#[derive(Debug, Clone)]
struct Conv {
    weight: Array4<f32>,
    bias: Array1<f32>,
    pool_after: bool,
}

/// Five 3×3 convolution + ReLU layers with He-initialized weights drawn from
/// a fixed seed; the output of each layer is scored. A 2×2 average pool
/// follows layers 2 and 4 while the map is at least 2×2.
#[derive(Debug, Clone)]
pub struct SeededConvStack {
    seed: u64,
    in_channels: usize,
    layers: Vec<Conv>,
}

impl SeededConvStack {
    pub const WIDTHS: [usize; 5] = [8, 16, 16, 32, 32];

    pub fn new(seed: u64, in_channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prev = in_channels;
        let layers = Self::WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &out)| {
                let std = (2.0 / (prev * 9) as f32).sqrt();
                let n = Normal::new(0.0, std).expect("positive std");
                let weight = Array4::from_shape_simple_fn((out, prev, 3, 3), || n.sample(&mut rng));
                let bias = Array1::from_shape_simple_fn(out, || 0.01 * n.sample(&mut rng));
                prev = out;
                Conv {
                    weight,
                    bias,
                    pool_after: i == 1 || i == 3,
                }
            })
            .collect();
        Self {
            seed,
            in_channels,
            layers,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

fn conv_relu(x: &Array3<f32>, conv: &Conv) -> Array3<f32> {
    let (_, h, w) = x.dim();
    let out_c = conv.weight.dim().0;
    let mut padded = Array3::zeros((x.dim().0, h + 2, w + 2));
    padded.slice_mut(s![.., 1..h + 1, 1..w + 1]).assign(x);
    Array3::from_shape_fn((out_c, h, w), |(o, y, xx)| {
        let patch = padded.slice(s![.., y..y + 3, xx..xx + 3]);
        let k = conv.weight.slice(s![o, .., .., ..]);
        let v = (&patch * &k).sum() + conv.bias[o];
        v.max(0.0)
    })
}

fn avg_pool(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    if h < 2 || w < 2 {
        return x.clone();
    }
    Array3::from_shape_fn((c, h / 2, w / 2), |(ch, y, xx)| {
        x.slice(s![ch, 2 * y..2 * y + 2, 2 * xx..2 * xx + 2]).sum() / 4.0
    })
}

impl FeatureExtractor for SeededConvStack {
    fn name(&self) -> &str {
        "seeded-conv5"
    }

    fn layer_names(&self) -> Vec<String> {
        (1..=self.layers.len()).map(|i| format!("conv{i}")).collect()
    }

    fn extract(&self, image: &Array3<f32>) -> Result<Vec<Array3<f32>>> {
        if image.dim().0 != self.in_channels {
            return Err(Error::shape(format!(
                "extractor expects {} channels, got {}",
                self.in_channels,
                image.dim().0
            )));
        }
        let mut x = image.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for conv in &self.layers {
            x = conv_relu(&x, conv);
            out.push(x.clone());
            if conv.pool_after {
                x = avg_pool(&x);
            }
        }
        Ok(out)
    }
}
