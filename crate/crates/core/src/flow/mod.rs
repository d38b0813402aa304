//! Invertible coupling flows in GIN (volume preserving) and RNVP modes.

mod coupling;
mod model;
mod subnet;

pub use coupling::{effective_scale, effective_scale_values, CouplingBlock, FlowMode, ScaleConstraint};
pub use model::{build_random_mixer, FlowConfig, FlowHeader, FlowModel};
pub use subnet::{FinalLayerInit, Mlp, SubnetSpec, WeightInit};
