//! Encoder, five-level decoder and prediction fusion.

pub mod backbone;
pub mod decoder;
pub mod model;

pub use backbone::{load_pretrained, BackboneSpec, Encoder};
pub use decoder::{Ablation, AblationFlags, DecoderLevel, LevelOutput};
pub use model::{ForwardVars, Model, ModelConfig, SideOutputs, LEVELS};
