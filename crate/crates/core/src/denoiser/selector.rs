use crate::conditioning::ConditionFeatures;
use crate::tensor::Tensor;

/// Which condition stream drives a denoising step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    /// Per-frame video features (`Fv`), used at and below the key timestep.
    Dynamic,
    /// Caption features (`Fl`), used above the key timestep.
    Semantic,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Dynamic => "dynamic",
            Modality::Semantic => "semantic",
        }
    }
}

/// Early (noisy) steps follow the captions; from `t0` down the video
/// dynamics take over.
pub fn select_modality(timestep: usize, t0: usize) -> Modality {
    if timestep > t0 {
        Modality::Semantic
    } else {
        Modality::Dynamic
    }
}

pub fn select_condition(features: &ConditionFeatures, timestep: usize, t0: usize) -> (&Tensor, Modality) {
    match select_modality(timestep, t0) {
        Modality::Semantic => (&features.fl, Modality::Semantic),
        Modality::Dynamic => (&features.fv, Modality::Dynamic),
    }
}
