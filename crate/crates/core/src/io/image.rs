//! PNG and mask I/O plus the latent codecs that bridge pixels and latents.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use super::container::{container_latent, TensorContainer};
use crate::error::{Error, Result};
use crate::latent::{LatentGrid, MaskGrid};

/// Extension of tensor container files.
pub const TENSOR_EXT: &str = "xtsr";

/// Maps RGB images to latents and back.
pub trait LatentCodec: Send + Sync {
    fn encode(&self, image: &RgbImage) -> Result<LatentGrid>;

    fn decode(&self, latent: &LatentGrid) -> Result<RgbImage>;
}

/// Pixel-space codec used with the toy backbone.
///
/// Channels 0..3 hold R, G, B rescaled to [-1, 1]; channel 3 holds their
/// mean. Decoding reads channels 0..3 back and clamps, so
/// `decode(encode(img)) == img` for every 8-bit image.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyCodec;

impl ToyCodec {
    pub const CHANNELS: usize = 4;
}

fn to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

fn to_byte(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

impl LatentCodec for ToyCodec {
    fn encode(&self, image: &RgbImage) -> Result<LatentGrid> {
        let (w, h) = image.dimensions();
        let data = Array3::from_shape_fn((4, h as usize, w as usize), |(c, y, x)| {
            let px = image.get_pixel(x as u32, y as u32).0;
            if c < 3 {
                to_unit(px[c])
            } else {
                px.iter().map(|&v| to_unit(v)).sum::<f32>() / 3.0
            }
        });
        LatentGrid::new(data)
    }

    fn decode(&self, latent: &LatentGrid) -> Result<RgbImage> {
        let (c, h, w) = latent.shape();
        if c < 3 {
            return Err(Error::shape(format!(
                "toy decoding needs at least 3 channels, got {c}"
            )));
        }
        Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let px = |ch: usize| to_byte(latent.data[[ch, y as usize, x as usize]]);
            Rgb([px(0), px(1), px(2)])
        }))
    }
}

fn is_tensor_file(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == TENSOR_EXT)
}

pub fn read_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn write_rgb(path: impl AsRef<Path>, image: &RgbImage) -> Result<()> {
    image.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Loads a transfer input: tensor containers are taken as latents verbatim,
/// anything else is read as an image and passed through `codec`.
pub fn load_latent(path: impl AsRef<Path>, codec: &dyn LatentCodec) -> Result<LatentGrid> {
    let path = path.as_ref();
    if is_tensor_file(path) {
        container_latent(&TensorContainer::load(path)?)
    } else {
        codec.encode(&read_rgb(path)?)
    }
}

/// Loads a mask from an 8-bit image (luma ≥ 128 is foreground) or from a
/// tensor container holding a `mask` tensor (> 0.5 is foreground).
pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskGrid> {
    let path = path.as_ref();
    if is_tensor_file(path) {
        let c = TensorContainer::load(path)?;
        let t = c
            .get("mask")
            .ok_or_else(|| Error::Format("container has no 'mask' tensor".into()))?;
        let t: Array2<f32> = t
            .clone()
            .into_dimensionality()
            .map_err(|_| Error::Format(format!("mask must be 2-d, got {:?}", t.shape())))?;
        Ok(MaskGrid::new(t.mapv(|v| v > 0.5)))
    } else {
        Ok(mask_from_gray(&image::open(path)?.to_luma8()))
    }
}

pub fn mask_from_gray(image: &GrayImage) -> MaskGrid {
    let (w, h) = image.dimensions();
    MaskGrid::new(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        image.get_pixel(x as u32, y as u32).0[0] >= 128
    }))
}

pub fn mask_to_gray(mask: &MaskGrid) -> GrayImage {
    let (h, w) = mask.shape();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask.data[[y as usize, x as usize]] { 255 } else { 0 }])
    })
}

pub fn save_mask(path: impl AsRef<Path>, mask: &MaskGrid) -> Result<()> {
    mask_to_gray(mask).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Nearest-neighbour resampling to `(height, width)`.
pub fn resize_mask(mask: &MaskGrid, height: usize, width: usize) -> MaskGrid {
    let (h, w) = mask.shape();
    if (h, w) == (height, width) {
        return mask.clone();
    }
    MaskGrid::new(Array2::from_shape_fn((height, width), |(y, x)| {
        mask.data[[y * h / height, x * w / width]]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::container::latent_container;

    #[test]
    fn toy_codec_roundtrips_pixels() {
        let img = ImageBuffer::from_fn(8, 8, |x, y| {
            Rgb([(x * 31) as u8, (y * 29 + 3) as u8, ((x * y) % 256) as u8])
        });
        let z = ToyCodec.encode(&img).unwrap();
        assert_eq!(z.shape(), (4, 8, 8));
        assert_eq!(ToyCodec.decode(&z).unwrap(), img);
    }

    #[test]
    fn files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuffer::from_fn(3, 2, |x, y| Rgb([x as u8 * 80, y as u8 * 200, 7]));
        let png = dir.path().join("a.png");
        write_rgb(&png, &img).unwrap();
        assert_eq!(read_rgb(&png).unwrap(), img);
        assert_eq!(load_latent(&png, &ToyCodec).unwrap(), ToyCodec.encode(&img).unwrap());

        let z = LatentGrid::new(Array3::from_elem((4, 2, 3), 0.25)).unwrap();
        let t = dir.path().join("z.xtsr");
        latent_container(&z).save(&t).unwrap();
        assert_eq!(load_latent(&t, &ToyCodec).unwrap(), z);
    }

    #[test]
    fn mask_threshold_and_resize() {
        let dir = tempfile::tempdir().unwrap();
        let gray = ImageBuffer::from_fn(4, 1, |x, _| image::Luma([[0u8, 127, 128, 255][x as usize]]));
        let p = dir.path().join("m.png");
        gray.save(&p).unwrap();
        let m = load_mask(&p).unwrap();
        assert_eq!(m.data.row(0).to_vec(), vec![false, false, true, true]);

        let up = resize_mask(&m, 2, 8);
        assert_eq!(up.count(), 8);
        assert_eq!(resize_mask(&up, 1, 4), m);

        let mut c = TensorContainer::new();
        c.push("mask", Array2::from_shape_vec((1, 2), vec![0.9f32, 0.1]).unwrap().into_dyn());
        let t = dir.path().join("m.xtsr");
        c.save(&t).unwrap();
        assert_eq!(load_mask(&t).unwrap().data.row(0).to_vec(), vec![true, false]);
    }
}
