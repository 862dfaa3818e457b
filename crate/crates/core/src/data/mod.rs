//! Audio files, mixing and dataset iteration.

pub mod dynamic;
pub mod mix;
pub mod synth;
pub mod wav;

pub use dynamic::{ClipRef, DynamicMixer, Manifest, MixCursor, MixConfig, NoiseRir, SnrPolicy, SyntheticCorpus, EVAL_SNRS, TRAIN_SNR};
pub use mix::{convolve_rir, mix_at_snr, Mixture};
pub use wav::{read_wav, write_wav, AudioClip, WavFormat, SAMPLE_RATE};
