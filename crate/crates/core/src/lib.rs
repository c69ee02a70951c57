//! Zero-shot appearance transfer with cross-image attention.
//!
//! Two images are inverted into a diffusion model's noise space and denoised
//! side by side. In selected decoder self-attention layers the output branch
//! queries the appearance branch's keys and values, so appearance flows along
//! semantic correspondences. Attention contrasting, appearance guidance,
//! masked AdaIN, and periodic structure injection refine the result.
//!
//! [`backbone::ToyDenoiser`] provides a weight-free backbone for tests and
//! demos; pretrained models attach through the `adapter` feature.

pub mod analysis;
pub mod attention;
pub mod backbone;
pub mod error;
pub mod guidance;
pub mod io;
pub mod latent;
pub mod pipeline;
pub mod schedule;

pub use error::{Error, Result};
