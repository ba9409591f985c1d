//! Run configuration: a flat `key = value` file with `#` comments.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use dpsc::data::BlobConfig;
use dpsc::nn::{mlp, resnet9, tiny, wrn16_4, GroupSpec, NetworkSpec};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Resnet9,
    Wrn16_4,
    /// Small residual net for desk-scale runs.
    Tiny,
    /// One-hidden-layer perceptron.
    Mlp,
}

impl Arch {
    /// Network for `input`-shaped samples and `classes` outputs. `width` is
    /// the channel width of `tiny` and the hidden size of `mlp`.
    pub fn build(
        self,
        scale_norm: bool,
        groups: GroupSpec,
        width: usize,
        input: [usize; 3],
        classes: usize,
    ) -> NetworkSpec {
        let spec = match self {
            Arch::Resnet9 => resnet9(scale_norm, groups),
            Arch::Wrn16_4 => wrn16_4(scale_norm, groups),
            Arch::Tiny => tiny(scale_norm, groups, width),
            Arch::Mlp => return mlp(input, width, classes),
        };
        spec.with_input(input).with_classes(classes)
    }

    pub fn default_width(self) -> usize {
        match self {
            Arch::Mlp => 16,
            _ => 8,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Resnet9 => "resnet9",
            Arch::Wrn16_4 => "wrn16_4",
            Arch::Tiny => "tiny",
            Arch::Mlp => "mlp",
        })
    }
}

impl FromStr for Arch {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "resnet9" => Ok(Arch::Resnet9),
            "wrn16_4" => Ok(Arch::Wrn16_4),
            "tiny" => Ok(Arch::Tiny),
            "mlp" => Ok(Arch::Mlp),
            _ => Err(CliError::config(format!(
                "unknown architecture `{s}` (resnet9, wrn16_4, tiny, mlp)"
            ))),
        }
    }
}

/// Where the samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Directory holding the five binary training batches and the test batch.
    Cifar10(PathBuf),
    /// Tensor container with `images` and `labels`.
    Raw(PathBuf),
    Synth(BlobConfig),
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Cifar10(p) => write!(f, "cifar10:{}", p.display()),
            DataSource::Raw(p) => write!(f, "raw:{}", p.display()),
            DataSource::Synth(c) => write!(
                f,
                "synth:n={},classes={},size={},noise={},seed={}",
                c.n, c.classes, c.size, c.noise, c.seed
            ),
        }
    }
}

impl FromStr for DataSource {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        let bad = |m: String| CliError::config(format!("data source `{s}`: {m}"));
        if let Some(p) = s.strip_prefix("cifar10:") {
            return Ok(DataSource::Cifar10(PathBuf::from(p)));
        }
        if let Some(p) = s.strip_prefix("raw:") {
            return Ok(DataSource::Raw(PathBuf::from(p)));
        }
        let opts = match s.strip_prefix("synth") {
            Some("") => "",
            Some(rest) => rest
                .strip_prefix(':')
                .ok_or_else(|| bad("expected `synth:key=value,…`".into()))?,
            None => return Err(bad("expected cifar10:<dir>, raw:<path> or synth[:…]".into())),
        };
        let mut cfg = BlobConfig::default();
        for kv in opts.split(',').filter(|kv| !kv.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| bad(format!("`{kv}` is not key=value")))?;
            let num = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("`{k}` needs an integer")));
            match k {
                "n" => cfg.n = num(v)?,
                "classes" => cfg.classes = num(v)?,
                "size" => cfg.size = num(v)?,
                "noise" => cfg.noise = v.parse().map_err(|_| bad("`noise` needs a number".into()))?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad("`seed` needs an integer".into()))?,
                _ => return Err(bad(format!("unknown option `{k}`"))),
            }
        }
        Ok(DataSource::Synth(cfg))
    }
}

/// Source of the loss that drives the learning-rate schedule and the
/// best-checkpoint choice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Validation {
    /// Training loss on the full training set.
    None,
    /// The source's test split (CIFAR-10 only).
    Test,
    /// A seeded fraction of the training set, removed before training.
    Holdout(f64),
}

impl fmt::Display for Validation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Validation::None => f.write_str("none"),
            Validation::Test => f.write_str("test"),
            Validation::Holdout(p) => write!(f, "holdout:{p}"),
        }
    }
}

impl FromStr for Validation {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "none" => Ok(Validation::None),
            "test" => Ok(Validation::Test),
            _ => {
                let p: f64 = s.strip_prefix("holdout:").and_then(|p| p.parse().ok()).ok_or_else(|| {
                    CliError::config(format!("validation `{s}`: expected none, test or holdout:<fraction>"))
                })?;
                if !(p > 0.0 && p < 1.0) {
                    return Err(CliError::config(format!("holdout fraction {p} must lie in (0, 1)")));
                }
                Ok(Validation::Holdout(p))
            }
        }
    }
}

/// Exactly one way of fixing the noise multiplier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Noise {
    Sigma(f64),
    TargetEpsilon(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub architecture: Arch,
    pub scale_norm: bool,
    pub groups: GroupSpec,
    pub width: usize,
    pub data: DataSource,
    /// Seeded subset of the training split; `None` keeps all of it.
    pub train_subset: Option<usize>,
    pub validation: Validation,
    pub epochs: usize,
    pub lot_size: usize,
    pub clip: f64,
    pub noise: Noise,
    pub delta: f64,
    /// Stop with exit code 4 before a step would spend more than this.
    pub epsilon_ceiling: Option<f64>,
    /// False trains without clipping or noise.
    pub dp: bool,
    pub lr: f64,
    pub multiplicity: usize,
    /// EMA decay; `None` disables the average.
    pub ema_tau: Option<f64>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

const KEYS: [&str; 20] = [
    "architecture",
    "scale_norm",
    "groups",
    "width",
    "data",
    "train_subset",
    "validation",
    "epochs",
    "lot_size",
    "clip",
    "sigma",
    "target_epsilon",
    "delta",
    "epsilon_ceiling",
    "dp",
    "lr",
    "multiplicity",
    "ema_tau",
    "seed",
    "out_dir",
];

fn parse_bool(k: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(CliError::config(format!("`{k}` must be true or false, got `{v}`"))),
    }
}

fn parse_num<N: FromStr>(k: &str, v: &str) -> Result<N, CliError> {
    v.parse()
        .map_err(|_| CliError::config(format!("`{k}`: cannot parse `{v}`")))
}

fn positive(k: &str, v: f64) -> Result<f64, CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::config(format!("`{k}` must be positive and finite, got {v}")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut seen = HashSet::new();
        let mut values: Vec<(String, String)> = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("line {}: expected key = value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(CliError::config(format!("line {}: unknown key `{k}`", no + 1)));
            }
            if !seen.insert(k.to_string()) {
                return Err(CliError::config(format!("line {}: duplicate key `{k}`", no + 1)));
            }
            values.push((k.to_string(), v.to_string()));
        }
        let get = |k: &str| values.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
        let require = |k: &str| get(k).ok_or_else(|| CliError::config(format!("missing key `{k}`")));

        let architecture: Arch = require("architecture")?.parse()?;
        let noise = match (get("sigma"), get("target_epsilon")) {
            (Some(s), None) => {
                let s: f64 = parse_num("sigma", s)?;
                if !(s >= 0.0 && s.is_finite()) {
                    return Err(CliError::config(format!("`sigma` must be non-negative, got {s}")));
                }
                Noise::Sigma(s)
            }
            (None, Some(e)) => Noise::TargetEpsilon(positive("target_epsilon", parse_num("target_epsilon", e)?)?),
            _ => return Err(CliError::config("give exactly one of `sigma` and `target_epsilon`")),
        };
        let delta: f64 = get("delta").map_or(Ok(1e-5), |v| parse_num("delta", v))?;
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(CliError::config(format!("`delta` {delta} outside (0, 1]")));
        }
        let ema_tau = match get("ema_tau") {
            None | Some("none") => None,
            Some(v) => {
                let t: f64 = parse_num("ema_tau", v)?;
                if !(0.0..1.0).contains(&t) {
                    return Err(CliError::config(format!("`ema_tau` {t} outside [0, 1)")));
                }
                Some(t)
            }
        };
        let cfg = RunConfig {
            architecture,
            scale_norm: get("scale_norm").map_or(Ok(false), |v| parse_bool("scale_norm", v))?,
            groups: get("groups")
                .map_or(Ok(GroupSpec::Count(32)), |v| v.parse())
                .map_err(|e: dpsc::Error| CliError::config(e.to_string()))?,
            width: get("width").map_or(Ok(architecture.default_width()), |v| parse_num("width", v))?,
            data: require("data")?.parse()?,
            train_subset: get("train_subset").map(|v| parse_num("train_subset", v)).transpose()?,
            validation: get("validation").map_or(Ok(Validation::None), str::parse)?,
            epochs: parse_num("epochs", require("epochs")?)?,
            lot_size: parse_num("lot_size", require("lot_size")?)?,
            clip: positive("clip", get("clip").map_or(Ok(1.5), |v| parse_num("clip", v))?)?,
            noise,
            delta,
            epsilon_ceiling: get("epsilon_ceiling")
                .map(|v| parse_num("epsilon_ceiling", v).and_then(|e| positive("epsilon_ceiling", e)))
                .transpose()?,
            dp: get("dp").map_or(Ok(true), |v| parse_bool("dp", v))?,
            lr: positive("lr", get("lr").map_or(Ok(1e-3), |v| parse_num("lr", v))?)?,
            multiplicity: get("multiplicity").map_or(Ok(1), |v| parse_num("multiplicity", v))?,
            ema_tau,
            seed: get("seed").map_or(Ok(0), |v| parse_num("seed", v))?,
            out_dir: PathBuf::from(require("out_dir")?),
        };
        if cfg.width == 0 || cfg.lot_size == 0 || cfg.multiplicity == 0 || cfg.train_subset == Some(0) {
            return Err(CliError::config(
                "width, lot_size, multiplicity and train_subset must be positive",
            ));
        }
        if cfg.validation == Validation::Test && !matches!(cfg.data, DataSource::Cifar10(_)) {
            return Err(CliError::config("`validation = test` needs a cifar10 source"));
        }
        Ok(cfg)
    }

    /// Canonical text; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("architecture", &self.architecture);
        kv("scale_norm", &self.scale_norm);
        kv("groups", &self.groups);
        kv("width", &self.width);
        kv("data", &self.data);
        if let Some(n) = self.train_subset {
            kv("train_subset", &n);
        }
        kv("validation", &self.validation);
        kv("epochs", &self.epochs);
        kv("lot_size", &self.lot_size);
        kv("clip", &self.clip);
        match self.noise {
            Noise::Sigma(v) => kv("sigma", &v),
            Noise::TargetEpsilon(v) => kv("target_epsilon", &v),
        }
        kv("delta", &self.delta);
        if let Some(e) = self.epsilon_ceiling {
            kv("epsilon_ceiling", &e);
        }
        kv("dp", &self.dp);
        kv("lr", &self.lr);
        kv("multiplicity", &self.multiplicity);
        match self.ema_tau {
            Some(t) => kv("ema_tau", &t),
            None => kv("ema_tau", &"none"),
        }
        kv("seed", &self.seed);
        kv("out_dir", &self.out_dir.display());
        s
    }
}
