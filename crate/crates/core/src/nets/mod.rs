//! TransUNet variants over candle tensors.

mod checkpoint;
mod config;
pub mod conv;
mod layers;
mod model;
pub mod norm;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{ModelConfig, Variant, ENCODER_STAGES, INPUT_HW};
pub use model::{ParameterGroup, SegModel, Stage};
pub use params::{Group, Param};
