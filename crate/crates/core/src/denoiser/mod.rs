//! The noise-prediction network and its conditioning mechanisms.

mod attention;
mod mask;
mod net;
mod selector;
mod train;

pub use attention::{attention_weights, segment_cross_attention, AttentionParams};
pub use mask::{build_mask, SegmentMask};
pub use net::{positional_encoding, timestep_embedding, ArchDescriptor, Conditioning, DenoiserNet, ParamSpec};
pub use selector::{select_condition, select_modality, Modality};
pub use train::{train, Adam, TrainConfig, TrainFailure, TrainItem};
