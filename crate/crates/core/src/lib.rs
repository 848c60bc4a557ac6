//! Conditional piano-roll diffusion for video background music.
//!
//! The crate covers the whole pipeline: MIDI <-> piano-roll codec
//! ([`codec`]), Gaussian diffusion machinery ([`diffusion`]), the
//! noise-prediction network with segment-aware cross-attention and the
//! timestep-gated feature selector ([`denoiser`]), condition-feature I/O
//! ([`conditioning`]) and the objective metrics ([`metrics`]).

pub mod autograd;
pub mod checkpoint;
pub mod codec;
pub mod conditioning;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod rng;
pub mod tensor;

pub use codec::{NoteEvent, PianoRoll, Segment};
pub use conditioning::ConditionFeatures;
pub use denoiser::{ArchDescriptor, DenoiserNet, Modality, SegmentMask};
pub use diffusion::NoiseSchedule;
pub use error::{Error, Result};
pub use metrics::MusicFeatureVector;
pub use tensor::Tensor;
