//! The DCCRN network: configuration, offline and streaming inference and
//! checkpoints.

mod checkpoint;
mod config;
mod dccrn;
mod engine;
mod mask;
mod stream;

pub use checkpoint::{FORMAT_VERSION, MAGIC};
pub use config::{ModelConfig, Variant, MAX_LOOKAHEAD_MS};
pub use dccrn::{reconstruct, Analysis, Dccrn, Enhanced, Mode, Output};
pub use mask::{apply_mask, apply_mask_graph, MaskActivation};
pub use stream::{FrameStream, WaveStream};
