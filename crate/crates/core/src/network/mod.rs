//! The planar segmentation network: recurrent conv layers, residual blocks,
//! attention gates and the U-Net that wires them together.

pub mod gradcheck;
mod layers;
mod params;
mod unet;

pub use layers::{AttentionGate, Conv2d, GateTrace, Rcl, RclTrace, RrcnnBlock, RrcnnTrace, UpConv};
pub use params::Parameters;
pub use unet::{ForwardTrace, NetworkConfig, NetworkParams, NormKind, UpsampleKind};

use crate::error::Result;
use crate::tensor::{self, FeatureMap};

pub fn rcl_forward(u: &FeatureMap, params: &Rcl) -> Result<FeatureMap> {
    params.forward(u)
}

pub fn rrcnn_block_forward(x: &FeatureMap, block: &RrcnnBlock) -> Result<FeatureMap> {
    block.forward(x)
}

pub fn attention_gate_forward(
    skip: &FeatureMap,
    gate: &FeatureMap,
    params: &AttentionGate,
) -> Result<FeatureMap> {
    params.forward(skip, gate)
}

pub fn instance_normalize(x: &FeatureMap) -> FeatureMap {
    tensor::instance_norm(x).0
}

pub fn network_forward(batch: &FeatureMap, params: &NetworkParams) -> Result<FeatureMap> {
    params.forward(batch)
}

pub fn extract_bottleneck(batch: &FeatureMap, params: &NetworkParams) -> Result<FeatureMap> {
    params.bottleneck(batch)
}
