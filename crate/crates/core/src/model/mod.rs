//! Network descriptions and the two executable networks: the main network
//! whose feature maps are channel-weighted, and the pruner network that
//! produces those weights.

mod mask;
mod network;
pub mod params;
mod spec;

pub use mask::{apply_mask_groups, derive_inference_mask, tie_mask_vars, ChannelWeights, MaskGroup};
pub use network::{build_main_network, build_pruner_network, MainNetwork, PrunerNetwork};
pub use params::{BoundParams, ParameterSet};
pub use spec::{
    ClassifierSpec, ConvLayerSpec, InputShape, LayerGeometry, NetworkSpec, PoolSpec, ResidualLink,
};
