//! Miniature vision-language model.

mod config;
mod embed;
mod model;

pub use config::VlmConfig;
pub use embed::{sinusoid_table, ImageEmbedder, TextEmbedding, ToyImage, VisionProjector, PAD_ID};
pub use model::{BatchTrace, Block, ForwardTrace, NamedTensor, ParamGroup, Vlm};

#[cfg(test)]
mod tests;
