//! The encoder-decoder: pointwise embedding of image and mask, CA modules
//! with down/up-sampling and skip fusion, regional-attention bottleneck, and
//! a residual output head.

mod arch;
mod config;
mod layers;
mod params;

pub use arch::{conv2d_macs, count_flops, count_params, Architecture, Init, LayerCost, ParamSpec};
pub use config::{AttentionKind, BottleneckAttention, ModelConfig};
pub use layers::{
    bottleneck_attention_map, ca_block, channel_attention, downsample, linear_proj, predict, ram_block, rasm_forward, upsample,
};
pub use params::{Bound, ParameterSet, INIT_STD};
