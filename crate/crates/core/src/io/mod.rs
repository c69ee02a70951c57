//! File formats: the binary tensor container, PNG images, and masks.

pub mod container;
pub mod image;

pub use self::container::{
    container_latent, container_record, latent_container, record_container, TensorContainer,
};
pub use self::image::{load_latent, load_mask, read_rgb, write_rgb, LatentCodec, ToyCodec};
