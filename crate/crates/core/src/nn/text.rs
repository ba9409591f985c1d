//! Line-oriented text form of [`NetworkSpec`], stored inside checkpoints.

use std::collections::HashMap;

use crate::{Error, Result};

use super::spec::*;

fn flag(b: bool) -> u8 {
    u8::from(b)
}

impl NetworkSpec {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "name {}\ninput {} {} {}\n",
            self.name, self.input[0], self.input[1], self.input[2]
        );
        for layer in &self.layers {
            let line = match layer {
                LayerSpec::ConvBlock(c) => format!(
                    "conv_block in={} out={} kernel={} stride={} padding={} groups={} pool={}",
                    c.in_channels,
                    c.out_channels,
                    c.kernel,
                    c.stride,
                    c.padding,
                    c.groups,
                    c.pool_after.map_or("none".to_string(), |p| p.to_string())
                ),
                LayerSpec::Residual(r) => format!(
                    "residual channels={} groups={} scale_norm={}",
                    r.channels,
                    r.groups,
                    flag(r.scale_norm)
                ),
                LayerSpec::WideBlock(w) => format!(
                    "wide_block in={} out={} downsample={} groups={} scale_norm={}",
                    w.in_channels,
                    w.out_channels,
                    flag(w.downsample),
                    w.groups,
                    flag(w.scale_norm)
                ),
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    padding,
                } => format!("conv in={in_channels} out={out_channels} kernel={kernel} padding={padding}"),
                LayerSpec::NormAct { channels, groups } => {
                    format!("norm_act channels={channels} groups={groups}")
                }
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => format!("linear in={in_features} out={out_features}"),
                LayerSpec::Classifier(c) => format!(
                    "classifier in={} hidden={} out={}",
                    c.in_features,
                    c.hidden.map_or("none".to_string(), |h| h.to_string()),
                    c.classes
                ),
                other => other.kind().to_string(),
            };
            s.push_str(&line);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Format(format!("architecture text: {msg}"));
        let mut name = None;
        let mut input = None;
        let mut layers = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let mut words = line.split_whitespace();
            let kind = words.next().unwrap_or_default();
            if kind == "name" {
                name = words.next().map(str::to_string);
                continue;
            }
            if kind == "input" {
                let v: Vec<usize> = words
                    .map(|w| w.parse().map_err(|_| bad(format!("bad input extent `{w}`"))))
                    .collect::<Result<_>>()?;
                let arr: [usize; 3] = v.try_into().map_err(|_| bad("input needs three extents".into()))?;
                input = Some(arr);
                continue;
            }
            let mut kv = HashMap::new();
            for w in words {
                let (k, v) = w
                    .split_once('=')
                    .ok_or_else(|| bad(format!("expected key=value, got `{w}`")))?;
                kv.insert(k, v);
            }
            let get = |k: &str| -> Result<&str> {
                kv.get(k)
                    .copied()
                    .ok_or_else(|| bad(format!("`{kind}` is missing `{k}`")))
            };
            let num = |k: &str| -> Result<usize> {
                let v = get(k)?;
                v.parse().map_err(|_| bad(format!("`{k}={v}` is not a count")))
            };
            let opt = |k: &str| -> Result<Option<usize>> {
                match get(k)? {
                    "none" => Ok(None),
                    v => v
                        .parse()
                        .map(Some)
                        .map_err(|_| bad(format!("`{k}={v}` is not a count"))),
                }
            };
            let boolean = |k: &str| -> Result<bool> {
                match get(k)? {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    v => Err(bad(format!("`{k}={v}` is not 0/1"))),
                }
            };
            let groups = || -> Result<GroupSpec> { get("groups")?.parse() };
            let layer = match kind {
                "conv_block" => LayerSpec::ConvBlock(ConvBlockConfig {
                    in_channels: num("in")?,
                    out_channels: num("out")?,
                    kernel: num("kernel")?,
                    stride: num("stride")?,
                    padding: num("padding")?,
                    groups: groups()?,
                    pool_after: opt("pool")?,
                }),
                "residual" => LayerSpec::Residual(ResidualBlockConfig {
                    channels: num("channels")?,
                    groups: groups()?,
                    scale_norm: boolean("scale_norm")?,
                }),
                "wide_block" => LayerSpec::WideBlock(WideBlockConfig {
                    in_channels: num("in")?,
                    out_channels: num("out")?,
                    downsample: boolean("downsample")?,
                    groups: groups()?,
                    scale_norm: boolean("scale_norm")?,
                }),
                "conv" => LayerSpec::Conv {
                    in_channels: num("in")?,
                    out_channels: num("out")?,
                    kernel: num("kernel")?,
                    padding: num("padding")?,
                },
                "norm_act" => LayerSpec::NormAct {
                    channels: num("channels")?,
                    groups: groups()?,
                },
                "linear" => LayerSpec::Linear {
                    in_features: num("in")?,
                    out_features: num("out")?,
                },
                "classifier" => LayerSpec::Classifier(ClassifierSpec {
                    in_features: num("in")?,
                    hidden: opt("hidden")?,
                    classes: num("out")?,
                }),
                "global_max_pool" => LayerSpec::GlobalMaxPool,
                "global_avg_pool" => LayerSpec::GlobalAvgPool,
                "flatten" => LayerSpec::Flatten,
                "mish" => LayerSpec::Mish,
                other => return Err(bad(format!("unknown layer kind `{other}`"))),
            };
            layers.push(layer);
        }
        let spec = NetworkSpec {
            name: name.ok_or_else(|| bad("missing name".into()))?,
            input: input.ok_or_else(|| bad("missing input".into()))?,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }
}
