pub mod data;
pub mod error;
pub mod kv;
pub mod model;
pub mod targets;
pub mod latency;
pub mod layers;
pub mod stft;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use stft::{ComplexSpectrogram, FrameLayout, Stft, StftConfig, Window};
pub use tensor::{ComplexTensor, ConvGeometry, Gradients, Graph, ParamId, ParamStore, Scalar, Var};
pub use model::{Dccrn, MaskActivation, ModelConfig, Variant};
pub use targets::ComplexMask;
pub use data::{AudioClip, DynamicMixer, Manifest, MixConfig, Mixture, SyntheticCorpus};
pub use train::{RunConfig, Trainer};
