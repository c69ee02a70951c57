//! Correspondence extraction and the structure/appearance scores.

mod correspondence;
mod features;
mod metrics;

pub use correspondence::{
    aggregate, argmax, correspondences_from_features, default_colormap, extract_correspondences,
    render_correspondence, Aggregation, CorrespondenceMap, LOW_CONFIDENCE_FACTOR,
};
pub use features::{image_tensor, FeatureExtractor, SeededConvStack};
pub use metrics::{gram_distance, structure_iou, GramMatrix};
