//! Declarative architecture descriptions.

use std::fmt;
use std::str::FromStr;

use crate::{Error, Result};

/// Number of GroupNorm groups, or one group per channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupSpec {
    Count(usize),
    PerChannel,
}

impl GroupSpec {
    /// Effective group count for a layer with `channels` channels. Counts
    /// above the channel count clamp to it.
    pub fn resolve(self, channels: usize) -> Result<usize> {
        let g = match self {
            GroupSpec::PerChannel => channels,
            GroupSpec::Count(0) => return Err(Error::config("group count must be positive")),
            GroupSpec::Count(g) => g.min(channels),
        };
        if !channels.is_multiple_of(g) {
            return Err(Error::config(format!(
                "{channels} channels not divisible into {g} groups"
            )));
        }
        Ok(g)
    }
}

impl fmt::Display for GroupSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupSpec::Count(g) => write!(f, "{g}"),
            GroupSpec::PerChannel => f.write_str("channels"),
        }
    }
}

impl FromStr for GroupSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "channels" | "per-channel" => Ok(GroupSpec::PerChannel),
            other => match other.parse::<usize>() {
                Ok(0) | Err(_) => Err(Error::config(format!("invalid group count `{s}`"))),
                Ok(g) => Ok(GroupSpec::Count(g)),
            },
        }
    }
}

/// conv → Mish → GroupNorm, optionally followed by a max pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvBlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: GroupSpec,
    pub pool_after: Option<usize>,
}

impl ConvBlockConfig {
    /// 3×3, stride 1, padding 1.
    pub fn new(in_channels: usize, out_channels: usize, groups: GroupSpec) -> Self {
        ConvBlockConfig {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
            groups,
            pool_after: None,
        }
    }

    pub fn pooled(mut self, window: usize) -> Self {
        self.pool_after = Some(window);
        self
    }

    pub fn param_count(&self) -> usize {
        self.kernel * self.kernel * self.in_channels * self.out_channels + self.out_channels + 2 * self.out_channels
    }
}

/// Identity-shortcut residual block whose convolutional path is two conv
/// blocks; with `scale_norm` the sum is group-normalised again.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResidualBlockConfig {
    pub channels: usize,
    pub groups: GroupSpec,
    pub scale_norm: bool,
}

impl ResidualBlockConfig {
    pub fn path(&self) -> ConvBlockConfig {
        ConvBlockConfig::new(self.channels, self.channels, self.groups)
    }

    pub fn param_count(&self) -> usize {
        2 * self.path().param_count() + if self.scale_norm { 2 * self.channels } else { 0 }
    }
}

/// Pre-activation wide-ResNet block: GN → Mish → conv → GN → Mish → conv.
///
/// Downsampling blocks halve the spatial extent with a 2×2 max pool after the
/// first conv and on the shortcut; the shortcut is a 1×1 conv whenever the
/// width or resolution changes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WideBlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub downsample: bool,
    pub groups: GroupSpec,
    pub scale_norm: bool,
}

impl WideBlockConfig {
    pub fn has_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.downsample
    }

    pub fn param_count(&self) -> usize {
        let (i, o) = (self.in_channels, self.out_channels);
        let mut n = 2 * i + (9 * i * o + o) + 2 * o + (9 * o * o + o);
        if self.has_projection() {
            n += i * o + o;
        }
        if self.scale_norm {
            n += 2 * o;
        }
        n
    }
}

/// Fully connected head, with an optional Mish hidden layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassifierSpec {
    pub in_features: usize,
    pub hidden: Option<usize>,
    pub classes: usize,
}

impl ClassifierSpec {
    pub fn param_count(&self) -> usize {
        match self.hidden {
            None => self.in_features * self.classes + self.classes,
            Some(h) => self.in_features * h + h + h * self.classes + self.classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    ConvBlock(ConvBlockConfig),
    Residual(ResidualBlockConfig),
    WideBlock(WideBlockConfig),
    /// Bare convolution with bias.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
    },
    /// GroupNorm followed by Mish.
    NormAct {
        channels: usize,
        groups: GroupSpec,
    },
    GlobalMaxPool,
    GlobalAvgPool,
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Mish,
    Classifier(ClassifierSpec),
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        match self {
            LayerSpec::ConvBlock(c) => c.param_count(),
            LayerSpec::Residual(r) => r.param_count(),
            LayerSpec::WideBlock(w) => w.param_count(),
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => kernel * kernel * in_channels * out_channels + out_channels,
            LayerSpec::NormAct { channels, .. } => 2 * channels,
            LayerSpec::Linear {
                in_features,
                out_features,
            } => in_features * out_features + out_features,
            LayerSpec::Classifier(c) => c.param_count(),
            LayerSpec::GlobalMaxPool | LayerSpec::GlobalAvgPool | LayerSpec::Flatten | LayerSpec::Mish => 0,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::ConvBlock(_) => "conv_block",
            LayerSpec::Residual(_) => "residual",
            LayerSpec::WideBlock(_) => "wide_block",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::NormAct { .. } => "norm_act",
            LayerSpec::GlobalMaxPool => "global_max_pool",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Mish => "mish",
            LayerSpec::Classifier(_) => "classifier",
        }
    }

    fn has_taps(&self) -> Option<bool> {
        match self {
            LayerSpec::Residual(r) => Some(r.scale_norm),
            LayerSpec::WideBlock(w) => Some(w.scale_norm),
            _ => None,
        }
    }
}

/// Residual-path tap names within a block.
pub const TAP_RESIDUAL: &str = "V_R";
pub const TAP_CONV_PATH: &str = "V_F";
pub const TAP_SUM: &str = "V_A";
pub const TAP_SCALE_NORM: &str = "V_AS";

/// Canonical tap name (`<layer>.<tap>`); accepts `V_A^S` as an alias.
pub fn canonical_tap(name: &str) -> String {
    name.replace("V_A^S", TAP_SCALE_NORM)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub name: String,
    /// Per-sample input extent `C×H×W`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// Activation extent flowing out of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl NetworkSpec {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Registered activation taps, in layer order.
    pub fn taps(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(sn) = layer.has_taps() {
                for t in [TAP_RESIDUAL, TAP_CONV_PATH, TAP_SUM] {
                    out.push(format!("{i}.{t}"));
                }
                if sn {
                    out.push(format!("{i}.{TAP_SCALE_NORM}"));
                }
            }
        }
        out
    }

    pub fn has_tap(&self, name: &str) -> bool {
        let name = canonical_tap(name);
        self.taps().contains(&name)
    }

    /// GroupNorm group count of the block that owns `tap`.
    pub fn tap_groups(&self, tap: &str) -> Result<usize> {
        if !self.has_tap(tap) {
            return Err(Error::UnknownTap(tap.to_string()));
        }
        let layer: usize = tap
            .split('.')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::UnknownTap(tap.to_string()))?;
        match &self.layers[layer] {
            LayerSpec::Residual(r) => r.groups.resolve(r.channels),
            LayerSpec::WideBlock(w) => w.groups.resolve(w.out_channels),
            _ => Err(Error::UnknownTap(tap.to_string())),
        }
    }

    pub fn classes(&self) -> Result<usize> {
        match self.validate()? {
            Flow::Flat(k) => Ok(k),
            Flow::Map { .. } => Err(Error::config("network does not end in a flat output")),
        }
    }

    /// Checks channel/feature compatibility between adjacent layers and the
    /// legality of every group count and pooling window.
    pub fn validate(&self) -> Result<Flow> {
        let [c, h, w] = self.input;
        let mut flow = Flow::Map { c, h, w };
        let map = |flow: Flow, i: usize| match flow {
            Flow::Map { c, h, w } => Ok((c, h, w)),
            Flow::Flat(_) => Err(Error::config(format!("layer {i} needs a spatial input"))),
        };
        let flat = |flow: Flow, i: usize| match flow {
            Flow::Flat(d) => Ok(d),
            Flow::Map { .. } => Err(Error::config(format!("layer {i} needs a flat input"))),
        };
        let want = |got: usize, need: usize, i: usize| {
            if got == need {
                Ok(())
            } else {
                Err(Error::config(format!(
                    "layer {i} expects {need} input channels/features, receives {got}"
                )))
            }
        };
        let pool = |h: usize, w: usize, win: usize, i: usize| {
            if win == 0 || win > h || win > w {
                Err(Error::config(format!(
                    "layer {i}: pool window {win} does not fit {h}×{w}"
                )))
            } else {
                Ok(((h - win) / win + 1, (w - win) / win + 1))
            }
        };
        let conv_extent = |e: usize, k: usize, s: usize, p: usize, i: usize| {
            let span = e + 2 * p;
            if s == 0 || span < k || !(span - k).is_multiple_of(s) {
                Err(Error::config(format!("layer {i}: non-integral conv output extent")))
            } else {
                Ok((span - k) / s + 1)
            }
        };
        for (i, layer) in self.layers.iter().enumerate() {
            flow = match layer {
                LayerSpec::ConvBlock(cb) => {
                    let (c, h, w) = map(flow, i)?;
                    want(c, cb.in_channels, i)?;
                    cb.groups.resolve(cb.out_channels)?;
                    let mut h = conv_extent(h, cb.kernel, cb.stride, cb.padding, i)?;
                    let mut w = conv_extent(w, cb.kernel, cb.stride, cb.padding, i)?;
                    if let Some(win) = cb.pool_after {
                        (h, w) = pool(h, w, win, i)?;
                    }
                    Flow::Map {
                        c: cb.out_channels,
                        h,
                        w,
                    }
                }
                LayerSpec::Residual(r) => {
                    let (c, h, w) = map(flow, i)?;
                    want(c, r.channels, i)?;
                    r.groups.resolve(r.channels)?;
                    Flow::Map { c, h, w }
                }
                LayerSpec::WideBlock(wb) => {
                    let (c, mut h, mut w) = map(flow, i)?;
                    want(c, wb.in_channels, i)?;
                    wb.groups.resolve(wb.in_channels)?;
                    wb.groups.resolve(wb.out_channels)?;
                    if wb.downsample {
                        (h, w) = pool(h, w, 2, i)?;
                    }
                    Flow::Map {
                        c: wb.out_channels,
                        h,
                        w,
                    }
                }
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    padding,
                } => {
                    let (c, h, w) = map(flow, i)?;
                    want(c, *in_channels, i)?;
                    let h = conv_extent(h, *kernel, 1, *padding, i)?;
                    let w = conv_extent(w, *kernel, 1, *padding, i)?;
                    Flow::Map { c: *out_channels, h, w }
                }
                LayerSpec::NormAct { channels, groups } => {
                    let (c, h, w) = map(flow, i)?;
                    want(c, *channels, i)?;
                    groups.resolve(*channels)?;
                    Flow::Map { c, h, w }
                }
                LayerSpec::GlobalMaxPool | LayerSpec::GlobalAvgPool => {
                    let (c, _, _) = map(flow, i)?;
                    Flow::Flat(c)
                }
                LayerSpec::Flatten => match flow {
                    Flow::Map { c, h, w } => Flow::Flat(c * h * w),
                    f @ Flow::Flat(_) => f,
                },
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => {
                    want(flat(flow, i)?, *in_features, i)?;
                    Flow::Flat(*out_features)
                }
                LayerSpec::Mish => flow,
                LayerSpec::Classifier(cs) => {
                    want(flat(flow, i)?, cs.in_features, i)?;
                    Flow::Flat(cs.classes)
                }
            };
        }
        Ok(flow)
    }

    /// Replace the input extent (e.g. for small synthetic images).
    pub fn with_input(mut self, input: [usize; 3]) -> Self {
        self.input = input;
        self
    }

    /// Resize the final classifier to `classes` outputs.
    pub fn with_classes(mut self, classes: usize) -> Self {
        for layer in self.layers.iter_mut().rev() {
            match layer {
                LayerSpec::Classifier(c) => {
                    c.classes = classes;
                    break;
                }
                LayerSpec::Linear { out_features, .. } => {
                    *out_features = classes;
                    break;
                }
                _ => {}
            }
        }
        self
    }
}

/// ResNet-9: two conv blocks (64, 128), a 128-channel residual block, two
/// 256-channel conv blocks, a 256-channel residual block, global max pool and
/// a linear classifier. Max pools follow the second, fourth and fifth block.
pub fn resnet9(scale_norm: bool, groups: GroupSpec) -> NetworkSpec {
    let g = groups;
    NetworkSpec {
        name: "resnet9".into(),
        input: [3, 32, 32],
        layers: vec![
            LayerSpec::ConvBlock(ConvBlockConfig::new(3, 64, g)),
            LayerSpec::ConvBlock(ConvBlockConfig::new(64, 128, g).pooled(2)),
            LayerSpec::Residual(ResidualBlockConfig {
                channels: 128,
                groups: g,
                scale_norm,
            }),
            LayerSpec::ConvBlock(ConvBlockConfig::new(128, 256, g).pooled(2)),
            LayerSpec::ConvBlock(ConvBlockConfig::new(256, 256, g).pooled(2)),
            LayerSpec::Residual(ResidualBlockConfig {
                channels: 256,
                groups: g,
                scale_norm,
            }),
            LayerSpec::GlobalMaxPool,
            LayerSpec::Classifier(ClassifierSpec {
                in_features: 256,
                hidden: None,
                classes: 10,
            }),
        ],
    }
}

/// WRN-16/4 with GroupNorm: a 16-channel stem and three groups of two
/// pre-activation blocks at widths 64, 128, 256.
pub fn wrn16_4(scale_norm: bool, groups: GroupSpec) -> NetworkSpec {
    let block = |i, o, downsample| {
        LayerSpec::WideBlock(WideBlockConfig {
            in_channels: i,
            out_channels: o,
            downsample,
            groups,
            scale_norm,
        })
    };
    NetworkSpec {
        name: "wrn16_4".into(),
        input: [3, 32, 32],
        layers: vec![
            LayerSpec::Conv {
                in_channels: 3,
                out_channels: 16,
                kernel: 3,
                padding: 1,
            },
            block(16, 64, false),
            block(64, 64, false),
            block(64, 128, true),
            block(128, 128, false),
            block(128, 256, true),
            block(256, 256, false),
            LayerSpec::NormAct { channels: 256, groups },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Classifier(ClassifierSpec {
                in_features: 256,
                hidden: None,
                classes: 10,
            }),
        ],
    }
}

/// Three-block network for desk-scale runs on small images.
pub fn tiny(scale_norm: bool, groups: GroupSpec, width: usize) -> NetworkSpec {
    NetworkSpec {
        name: "tiny".into(),
        input: [3, 8, 8],
        layers: vec![
            LayerSpec::ConvBlock(ConvBlockConfig::new(3, width, groups).pooled(2)),
            LayerSpec::Residual(ResidualBlockConfig {
                channels: width,
                groups,
                scale_norm,
            }),
            LayerSpec::ConvBlock(ConvBlockConfig::new(width, 2 * width, groups).pooled(2)),
            LayerSpec::GlobalMaxPool,
            LayerSpec::Classifier(ClassifierSpec {
                in_features: 2 * width,
                hidden: None,
                classes: 2,
            }),
        ],
    }
}

/// One-hidden-layer Mish perceptron over flattened inputs.
pub fn mlp(input: [usize; 3], hidden: usize, classes: usize) -> NetworkSpec {
    let d = input.iter().product();
    NetworkSpec {
        name: "mlp".into(),
        input,
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::Linear {
                in_features: d,
                out_features: hidden,
            },
            LayerSpec::Mish,
            LayerSpec::Linear {
                in_features: hidden,
                out_features: classes,
            },
        ],
    }
}
