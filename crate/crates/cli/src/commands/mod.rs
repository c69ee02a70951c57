pub mod config;
pub mod correspond;
pub mod evaluate;
pub mod reconstruct;
pub mod samples;
pub mod transfer;

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use xattn_core::backbone::{Denoiser, ToyDenoiser};
use xattn_core::pipeline::TransferConfig;

use crate::error::{CliError, CliResult};
use crate::manifest::{RunManifest, Timings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Backbone {
    /// Weight-free deterministic toy denoiser.
    Toy,
    /// Pretrained model binding (not linked into this binary).
    Adapter,
}

impl Backbone {
    pub fn as_str(&self) -> &'static str {
        match self {
            Backbone::Toy => "toy",
            Backbone::Adapter => "adapter",
        }
    }

    pub fn build(&self) -> CliResult<Box<dyn Denoiser>> {
        match self {
            Backbone::Toy => Ok(Box::new(ToyDenoiser::seeded(0))),
            Backbone::Adapter => Err(CliError::new(
                4,
                "no pretrained model binding is linked into this build; \
                 implement HookedModel in a crate using xattn-core's `adapter` feature",
            )),
        }
    }
}

pub fn require_file(path: &Path) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::config(format!("input file not found: {}", path.display())))
    }
}

/// Defaults, overridden by the config file, then by `--seed`.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<TransferConfig> {
    let mut config = match path {
        Some(p) => {
            require_file(p)?;
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            TransferConfig::parse(&text)
                .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
        }
        None => TransferConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

/// Runs `body` with a manifest that is written to `out` whatever the outcome.
pub fn with_manifest(
    out: &Path,
    mut manifest: RunManifest,
    body: impl FnOnce(&mut RunManifest, &mut Timings) -> CliResult,
) -> CliResult {
    fs::create_dir_all(out)
        .map_err(|e| CliError::config(format!("cannot create {}: {e}", out.display())))?;
    let mut timings = Timings::start();
    let result = body(&mut manifest, &mut timings);
    match &result {
        Ok(()) => manifest.set("status", "ok"),
        Err(e) => {
            manifest.set("status", "failed");
            manifest.set("exit_code", e.code);
            manifest.set("error", &e.message);
        }
    }
    manifest.set("timings", crate::manifest::TIMINGS_FILE);
    manifest.write(out)?;
    timings.write(out)?;
    result
}

pub fn out_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
