//! Inversion-record cache keyed by latent content and inversion settings.
//! Enabled by pointing `XATTN_CACHE_DIR` at a directory.

use std::path::PathBuf;

use xattn_core::backbone::Denoiser;
use xattn_core::io::{container_record, record_container, TensorContainer};
use xattn_core::latent::LatentGrid;
use xattn_core::pipeline::{invert_latent, TransferConfig};
use xattn_core::schedule::InversionRecord;
use xattn_core::Result;

use crate::manifest::sha256_bytes;

pub const CACHE_ENV: &str = "XATTN_CACHE_DIR";

pub fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

pub fn cache_key(latent: &LatentGrid, config: &TransferConfig, backbone: &str) -> String {
    let mut bytes = Vec::new();
    let (c, h, w) = latent.shape();
    for d in [c, h, w] {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in latent.data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let settings = format!(
        "{backbone}|{}|{}|{}|{}",
        config.num_steps,
        config.seed,
        config.eta,
        config.prompt()
    );
    bytes.extend_from_slice(settings.as_bytes());
    sha256_bytes(&bytes)
}

/// Inverts `latent`, reusing a cached record when one exists. Returns the
/// record and whether it came from the cache.
pub fn invert_cached(
    latent: &LatentGrid,
    config: &TransferConfig,
    denoiser: &dyn Denoiser,
) -> Result<(InversionRecord, bool)> {
    let Some(dir) = cache_dir() else {
        return Ok((invert_latent(latent, config, denoiser)?, false));
    };
    let path = dir.join(format!("inv-{}.xtsr", &cache_key(latent, config, denoiser.name())[..32]));
    if let Ok(record) = TensorContainer::load(&path).and_then(|c| container_record(&c)) {
        if record.num_steps() == config.num_steps
            && record.seed == config.seed
            && record.terminal.shape() == latent.shape()
        {
            return Ok((record, true));
        }
    }
    let record = invert_latent(latent, config, denoiser)?;
    std::fs::create_dir_all(&dir)?;
    let tmp = path.with_extension("tmp");
    record_container(&record).save(&tmp)?;
    std::fs::rename(&tmp, &path)?;
    Ok((record, false))
}
