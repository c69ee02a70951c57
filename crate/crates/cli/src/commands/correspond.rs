use std::path::PathBuf;

use clap::Args;
use ndarray::Array2;
use xattn_core::analysis::{
    default_colormap, extract_correspondences, render_correspondence, Aggregation, CorrespondenceMap,
};
use xattn_core::attention::log_mean_over_heads;
use xattn_core::backbone::decoder_layers_at;
use xattn_core::io::image::{load_latent, write_rgb, ToyCodec};
use xattn_core::io::TensorContainer;
use xattn_core::pipeline::{cross_attention_maps, token_grid};

use super::transfer::inversion;
use super::{load_config, require_file, with_manifest, Backbone};
use crate::cache::invert_cached;
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;

pub const RENDER: &str = "correspondence.png";
pub const INDICES: &str = "correspondence.xtsr";

#[derive(Debug, Args)]
pub struct CorrespondArgs {
    #[arg(long = "struct", value_name = "PATH")]
    pub structure: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub app: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "toy")]
    pub backbone: Backbone,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Denoising iteration to read attention at [default: num_steps / 2].
    #[arg(long)]
    pub iteration: Option<usize>,
    /// Layers to average [default: every 32×32 decoder layer].
    #[arg(long = "layer", value_name = "ID")]
    pub layers: Vec<String>,
    /// Paint low-confidence matches gray.
    #[arg(long)]
    pub gray_low_confidence: bool,
}

/// Identity statistics over confident pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityShare {
    pub confident: usize,
    /// Matched to their own position.
    pub exact: f64,
    /// Matched within one pixel of their own position.
    pub near: f64,
}

pub fn identity_share(map: &CorrespondenceMap) -> IdentityShare {
    let (mut confident, mut exact, mut near) = (0usize, 0usize, 0usize);
    for (((y, x), &(r, c)), &low) in map.mapping.indexed_iter().zip(map.low_confidence.iter()) {
        if !low {
            confident += 1;
            exact += ((r, c) == (y, x)) as usize;
            near += (r.abs_diff(y) <= 1 && c.abs_diff(x) <= 1) as usize;
        }
    }
    let n = confident.max(1) as f64;
    IdentityShare {
        confident,
        exact: exact as f64 / n,
        near: near as f64 / n,
    }
}

pub fn run(args: &CorrespondArgs) -> CliResult {
    let config = load_config(args.config.as_deref(), args.seed)?;
    require_file(&args.structure)?;
    require_file(&args.app)?;
    let iteration = args.iteration.unwrap_or(config.num_steps / 2);
    let mut manifest = RunManifest::new("correspond");
    manifest.set("backbone", args.backbone.as_str());
    manifest.set("seed", config.seed);
    manifest.set("iteration", iteration);
    manifest.config(&config);

    with_manifest(&args.out, manifest, |manifest, timings| {
        manifest.input("struct", &args.structure)?;
        manifest.input("app", &args.app)?;
        let denoiser = args.backbone.build()?;
        let s = load_latent(&args.structure, &ToyCodec)?;
        let a = load_latent(&args.app, &ToyCodec)?;
        let layers: Vec<String> = if args.layers.is_empty() {
            decoder_layers_at(denoiser.layer_catalog(), 32)
                .into_iter()
                .map(|l| l.id.clone())
                .collect()
        } else {
            args.layers.clone()
        };
        manifest.set("layers", layers.join(","));
        let (rs, _) = invert_cached(&s, &config, denoiser.as_ref()).map_err(inversion)?;
        let (ra, _) = invert_cached(&a, &config, denoiser.as_ref()).map_err(inversion)?;
        timings.lap("inversion");

        let maps = cross_attention_maps(&rs, &ra, &config, denoiser.as_ref(), iteration, &layers)?;
        let per_layer: Vec<_> = layers
            .iter()
            .map(|id| {
                maps.get(id)
                    .and_then(|m| log_mean_over_heads(m))
                    .ok_or_else(|| CliError::new(4, format!("no attention captured for '{id}'")))
            })
            .collect::<CliResult<_>>()?;
        let (_, h, w) = s.shape();
        let grid = token_grid(per_layer[0].num_queries(), h, w)?;
        let key_grid = token_grid(per_layer[0].num_keys(), h, w)?;
        let selection = Aggregation::MeanOverSelected((0..per_layer.len()).collect());
        let corr = extract_correspondences(&per_layer, &selection, grid, key_grid)?;
        timings.lap("correspondence");

        let render = render_correspondence(&corr, &default_colormap(key_grid.0, key_grid.1), args.gray_low_confidence)?;
        write_rgb(args.out.join(RENDER), &render)?;
        let mut c = TensorContainer::new()
            .with_meta("kind", "correspondence")
            .with_meta("key_grid", format!("{}x{}", key_grid.0, key_grid.1));
        let as_f32 = |f: &dyn Fn(usize, usize) -> f32| Array2::from_shape_fn(grid, |(y, x)| f(y, x)).into_dyn();
        c.push("rows", as_f32(&|y, x| corr.mapping[[y, x]].0 as f32));
        c.push("cols", as_f32(&|y, x| corr.mapping[[y, x]].1 as f32));
        c.push("confidence", corr.confidence.clone().into_dyn());
        c.push("low_confidence", as_f32(&|y, x| corr.low_confidence[[y, x]] as u8 as f32));
        c.save(args.out.join(INDICES))?;
        manifest.artifact(&args.out, RENDER)?;
        manifest.artifact(&args.out, INDICES)?;
        let share = identity_share(&corr);
        manifest.set("confident_pixels", share.confident);
        manifest.set("identity_share", format!("{:.6}", share.exact));
        manifest.set("near_identity_share", format!("{:.6}", share.near));
        Ok(())
    })
}
