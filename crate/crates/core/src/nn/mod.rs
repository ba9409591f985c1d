//! Conv blocks, residual blocks with optional ScaleNorm, and the ResNet-9 /
//! WRN-16/4 architectures.

mod model;
mod params;
mod spec;
mod text;

pub use model::{forward, predictions, Model, TapRecorder, TapValues, GN_EPS};
pub use params::{Init, ParamInfo, ParamSet};
pub use spec::{
    canonical_tap, mlp, resnet9, tiny, wrn16_4, ClassifierSpec, ConvBlockConfig, Flow, GroupSpec, LayerSpec,
    NetworkSpec, ResidualBlockConfig, WideBlockConfig, TAP_CONV_PATH, TAP_RESIDUAL, TAP_SCALE_NORM, TAP_SUM,
};
