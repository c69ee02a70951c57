use std::fs;
use std::path::PathBuf;

use clap::Args;
use xattn_core::io::image::{load_latent, load_mask, save_mask, write_rgb, LatentCodec, ToyCodec};
use xattn_core::io::{latent_container, TensorContainer};
use xattn_core::pipeline::{transfer_records, MaskProvider};

use super::{load_config, require_file, with_manifest, Backbone};
use crate::cache::invert_cached;
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;

pub const OUTPUT_IMAGE: &str = "output.png";
pub const OUTPUT_LATENT: &str = "output.xtsr";
pub const STEP_LOG: &str = "steps.txt";
pub const CONFIG_ECHO: &str = "config.txt";
pub const DRIFT_LOG: &str = "drift.log";
pub const ATTENTION_FILE: &str = "attention.xtsr";

#[derive(Debug, Args)]
pub struct TransferArgs {
    /// Structure image (PNG) or latent (.xtsr).
    #[arg(long = "struct", value_name = "PATH")]
    pub structure: PathBuf,
    /// Appearance image (PNG) or latent (.xtsr).
    #[arg(long, value_name = "PATH")]
    pub app: PathBuf,
    /// Key-value config file; defaults apply to missing keys.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Run directory for the output and its artifacts.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "toy")]
    pub backbone: Backbone,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Foreground mask of the structure image; enables masked AdaIN.
    #[arg(long, value_name = "PATH", requires = "mask_app")]
    pub mask_struct: Option<PathBuf>,
    #[arg(long, value_name = "PATH", requires = "mask_struct")]
    pub mask_app: Option<PathBuf>,
    /// Save head-averaged cross-image attention maps.
    #[arg(long)]
    pub capture_attention: bool,
}

pub fn run(args: &TransferArgs) -> CliResult {
    let mut config = load_config(args.config.as_deref(), args.seed)?;
    require_file(&args.structure)?;
    require_file(&args.app)?;
    for m in [&args.mask_struct, &args.mask_app].into_iter().flatten() {
        require_file(m)?;
    }
    if args.mask_struct.is_some() {
        config.use_masks = true;
    }
    if args.capture_attention {
        config.capture_attention = true;
    }

    let mut manifest = RunManifest::new("transfer");
    manifest.set("backbone", args.backbone.as_str());
    manifest.set("seed", config.seed);
    manifest.config(&config);

    with_manifest(&args.out, manifest, |manifest, timings| {
        manifest.input("struct", &args.structure)?;
        manifest.input("app", &args.app)?;
        let provider = match (&args.mask_struct, &args.mask_app) {
            (Some(s), Some(a)) => {
                manifest.input("mask_struct", s)?;
                manifest.input("mask_app", a)?;
                MaskProvider::UserFile {
                    structure: load_mask(s)?,
                    appearance: load_mask(a)?,
                }
            }
            _ if config.use_masks => MaskProvider::AttentionDerived,
            _ => MaskProvider::None,
        };
        manifest.set(
            "mask_provider",
            match provider {
                MaskProvider::None => "none",
                MaskProvider::UserFile { .. } => "user_file",
                MaskProvider::AttentionDerived => "attention_derived",
            },
        );

        let denoiser = args.backbone.build()?;
        let codec = ToyCodec;
        let structure = load_latent(&args.structure, &codec)?;
        let appearance = load_latent(&args.app, &codec)?;
        if structure.shape() != denoiser.latent_shape() || appearance.shape() != denoiser.latent_shape() {
            return Err(CliError::config(format!(
                "inputs encode to {:?} and {:?}; the {} backbone expects {:?}",
                structure.shape(),
                appearance.shape(),
                denoiser.name(),
                denoiser.latent_shape()
            )));
        }
        timings.lap("load");

        let (rec_s, hit_s) = invert_cached(&structure, &config, denoiser.as_ref()).map_err(inversion)?;
        let (rec_a, hit_a) = invert_cached(&appearance, &config, denoiser.as_ref()).map_err(inversion)?;
        if crate::cache::cache_dir().is_some() {
            eprintln!("inversion cache: struct {}, app {}", hit_or_miss(hit_s), hit_or_miss(hit_a));
        }
        timings.lap("inversion");

        let result = transfer_records(&rec_s, &rec_a, &appearance, &config, denoiser.as_ref(), &provider)?;
        timings.lap("denoising");

        let out = &args.out;
        write_rgb(out.join(OUTPUT_IMAGE), &codec.decode(&result.output)?)?;
        latent_container(&result.output).save(out.join(OUTPUT_LATENT))?;
        fs::write(out.join(STEP_LOG), result.step_log())?;
        fs::write(out.join(CONFIG_ECHO), config.to_text())?;
        let drift_line = match &result.drift_warning {
            Some(w) => format!("drift = {:e}\nwarning = {w}\n", result.drift),
            None => format!("drift = {:e}\n", result.drift),
        };
        fs::write(out.join(DRIFT_LOG), drift_line)?;
        if let Some(w) = &result.drift_warning {
            eprintln!("warning: {w}");
        }
        let mut artifacts = vec![OUTPUT_IMAGE, OUTPUT_LATENT, STEP_LOG, CONFIG_ECHO, DRIFT_LOG];
        if let Some((mo, ma)) = &result.masks {
            save_mask(out.join("mask_out.png"), mo)?;
            save_mask(out.join("mask_app.png"), ma)?;
            artifacts.extend(["mask_out.png", "mask_app.png"]);
        }
        if config.capture_attention {
            let mut c = TensorContainer::new().with_meta("kind", "attention");
            for cap in &result.attention {
                c.push(
                    format!("{:03}.{}", cap.iteration, cap.layer_id),
                    cap.map.weights.clone().into_dyn(),
                );
            }
            c.save(out.join(ATTENTION_FILE))?;
            artifacts.push(ATTENTION_FILE);
        }
        for a in artifacts {
            manifest.artifact(out, a)?;
        }
        manifest.set("drift", format!("{:e}", result.drift));
        manifest.set("drift_warning", result.drift_warning.is_some());
        timings.lap("write");
        Ok(())
    })
}

fn hit_or_miss(hit: bool) -> &'static str {
    if hit {
        "hit"
    } else {
        "miss"
    }
}

/// Failures while inverting map to exit code 3 unless the backbone itself failed.
pub fn inversion(err: xattn_core::Error) -> CliError {
    let mut e = CliError::from(err);
    if e.code != 4 {
        e.code = 3;
        e.message = format!("inversion failed: {}", e.message);
    }
    e
}
