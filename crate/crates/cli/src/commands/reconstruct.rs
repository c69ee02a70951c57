use std::path::PathBuf;

use clap::Args;
use xattn_core::io::image::{load_latent, write_rgb, LatentCodec, ToyCodec};
use xattn_core::io::latent_container;
use xattn_core::pipeline::replay_record;

use super::transfer::inversion;
use super::{load_config, require_file, with_manifest, Backbone};
use crate::cache::invert_cached;
use crate::error::CliResult;
use crate::manifest::RunManifest;

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Image (PNG) or latent (.xtsr).
    #[arg(long, value_name = "PATH")]
    pub image: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "toy")]
    pub backbone: Backbone,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(args: &ReconstructArgs) -> CliResult {
    let config = load_config(args.config.as_deref(), args.seed)?;
    require_file(&args.image)?;
    let mut manifest = RunManifest::new("reconstruct");
    manifest.set("backbone", args.backbone.as_str());
    manifest.set("seed", config.seed);
    manifest.config(&config);
    with_manifest(&args.out, manifest, |manifest, timings| {
        manifest.input("image", &args.image)?;
        let denoiser = args.backbone.build()?;
        let x0 = load_latent(&args.image, &ToyCodec)?;
        let (record, _) = invert_cached(&x0, &config, denoiser.as_ref()).map_err(inversion)?;
        timings.lap("inversion");
        let rec = replay_record(&record, &config, denoiser.as_ref())?;
        timings.lap("replay");
        write_rgb(args.out.join("reconstruction.png"), &ToyCodec.decode(&rec)?)?;
        latent_container(&rec).save(args.out.join("reconstruction.xtsr"))?;
        manifest.artifact(&args.out, "reconstruction.png")?;
        manifest.artifact(&args.out, "reconstruction.xtsr")?;
        manifest.set("max_abs_error", format!("{:e}", rec.max_abs_diff(&x0)));
        Ok(())
    })
}
