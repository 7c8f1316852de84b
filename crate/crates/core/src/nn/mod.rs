//! Encoders: convolutional backbone + projection head for patches, affine
//! map + projection head for spots.

pub mod backbone;
pub mod head;
pub mod layers;
pub mod model;
pub mod optim;
pub mod params;

pub use backbone::{Backbone, BackboneConfig};
pub use head::{Mode, ProjectionHead, DROPOUT_RATE};
pub use layers::FeatureMap;
pub use model::{DualEncoder, EmbeddingBatch, ImageSource, ModelConfig};
pub use optim::AdamW;
pub use params::Module;
