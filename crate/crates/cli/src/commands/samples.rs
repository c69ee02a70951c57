//! Bundled 8×8 sample pair: a red disc on sky blue (structure) and a
//! yellow-green striped blob on dark soil (appearance), with masks.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::CliResult;

#[derive(Debug, Args)]
pub struct SamplesArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

fn disc(x: u32, y: u32, cx: f32, cy: f32, r: f32) -> bool {
    let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
    dx * dx + dy * dy <= r * r
}

pub fn structure_image() -> RgbImage {
    RgbImage::from_fn(8, 8, |x, y| {
        if disc(x, y, 4.0, 4.5, 2.6) {
            Rgb([200 + 6 * x as u8, 40 + 5 * y as u8, 30])
        } else {
            Rgb([90, 150 + 8 * y as u8, 230])
        }
    })
}

pub fn structure_mask() -> GrayImage {
    GrayImage::from_fn(8, 8, |x, y| Luma([if disc(x, y, 4.0, 4.5, 2.6) { 255 } else { 0 }]))
}

pub fn appearance_image() -> RgbImage {
    RgbImage::from_fn(8, 8, |x, y| {
        if disc(x, y, 3.2, 3.6, 2.9) {
            if (x + y) % 2 == 0 {
                Rgb([230, 210, 40])
            } else {
                Rgb([90, 170, 50])
            }
        } else {
            Rgb([70 + 3 * x as u8, 45, 25 + 2 * y as u8])
        }
    })
}

pub fn appearance_mask() -> GrayImage {
    GrayImage::from_fn(8, 8, |x, y| Luma([if disc(x, y, 3.2, 3.6, 2.9) { 255 } else { 0 }]))
}

pub fn write_samples(dir: &Path) -> CliResult {
    fs::create_dir_all(dir)?;
    let save = |name: &str, r: Result<(), image::ImageError>| {
        r.map_err(|e| crate::error::CliError::new(1, format!("{name}: {e}")))
    };
    save("struct.png", structure_image().save(dir.join("struct.png")))?;
    save("app.png", appearance_image().save(dir.join("app.png")))?;
    save("struct_mask.png", structure_mask().save(dir.join("struct_mask.png")))?;
    save("app_mask.png", appearance_mask().save(dir.join("app_mask.png")))?;
    Ok(())
}

pub fn run(args: &SamplesArgs) -> CliResult {
    write_samples(&args.out)?;
    println!("wrote struct.png, app.png, struct_mask.png, app_mask.png to {}", args.out.display());
    Ok(())
}
