use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result, Scalar, Tensor};

use super::spec::{LayerSpec, NetworkSpec};

/// How a parameter tensor is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    Kaiming {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn conv(prefix: &str, i: usize, o: usize, k: usize, out: &mut Vec<ParamInfo>) {
    out.push(ParamInfo {
        name: format!("{prefix}.weight"),
        shape: vec![o, i, k, k],
        init: Init::Kaiming { fan_in: i * k * k },
    });
    out.push(ParamInfo {
        name: format!("{prefix}.bias"),
        shape: vec![o],
        init: Init::Zeros,
    });
}

fn norm(prefix: &str, c: usize, out: &mut Vec<ParamInfo>) {
    out.push(ParamInfo {
        name: format!("{prefix}.weight"),
        shape: vec![c],
        init: Init::Ones,
    });
    out.push(ParamInfo {
        name: format!("{prefix}.bias"),
        shape: vec![c],
        init: Init::Zeros,
    });
}

fn linear(prefix: &str, i: usize, o: usize, out: &mut Vec<ParamInfo>) {
    out.push(ParamInfo {
        name: format!("{prefix}.weight"),
        shape: vec![i, o],
        init: Init::Kaiming { fan_in: i },
    });
    out.push(ParamInfo {
        name: format!("{prefix}.bias"),
        shape: vec![o],
        init: Init::Zeros,
    });
}

impl NetworkSpec {
    /// Parameter tensors in forward-consumption order, named
    /// `<layer-index>.<role>`.
    pub fn param_layout(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::ConvBlock(c) => {
                    conv(&format!("{i}.conv"), c.in_channels, c.out_channels, c.kernel, &mut out);
                    norm(&format!("{i}.gn"), c.out_channels, &mut out);
                }
                LayerSpec::Residual(r) => {
                    for path in ["f1", "f2"] {
                        conv(&format!("{i}.{path}.conv"), r.channels, r.channels, 3, &mut out);
                        norm(&format!("{i}.{path}.gn"), r.channels, &mut out);
                    }
                    if r.scale_norm {
                        norm(&format!("{i}.sn"), r.channels, &mut out);
                    }
                }
                LayerSpec::WideBlock(w) => {
                    norm(&format!("{i}.gn1"), w.in_channels, &mut out);
                    conv(&format!("{i}.conv1"), w.in_channels, w.out_channels, 3, &mut out);
                    norm(&format!("{i}.gn2"), w.out_channels, &mut out);
                    conv(&format!("{i}.conv2"), w.out_channels, w.out_channels, 3, &mut out);
                    if w.has_projection() {
                        conv(&format!("{i}.shortcut"), w.in_channels, w.out_channels, 1, &mut out);
                    }
                    if w.scale_norm {
                        norm(&format!("{i}.sn"), w.out_channels, &mut out);
                    }
                }
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => conv(&format!("{i}.conv"), *in_channels, *out_channels, *kernel, &mut out),
                LayerSpec::NormAct { channels, .. } => norm(&format!("{i}.gn"), *channels, &mut out),
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => linear(&format!("{i}.fc"), *in_features, *out_features, &mut out),
                LayerSpec::Classifier(c) => match c.hidden {
                    None => linear(&format!("{i}.fc"), c.in_features, c.classes, &mut out),
                    Some(h) => {
                        linear(&format!("{i}.fc1"), c.in_features, h, &mut out);
                        linear(&format!("{i}.fc2"), h, c.classes, &mut out);
                    }
                },
                LayerSpec::GlobalMaxPool | LayerSpec::GlobalAvgPool | LayerSpec::Flatten | LayerSpec::Mish => {}
            }
        }
        out
    }
}

/// Named parameter tensors of a network, in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::dim("parameter names and tensors differ in count"));
        }
        Ok(ParamSet { names, tensors })
    }

    /// Seeded initialisation following `spec.param_layout()`.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (names, tensors) = spec
            .param_layout()
            .into_iter()
            .map(|p| {
                let t = match p.init {
                    Init::Kaiming { fan_in } => Tensor::randn(&p.shape, (2.0 / fan_in as f64).sqrt(), &mut rng),
                    Init::Zeros => Tensor::zeros(&p.shape),
                    Init::Ones => Tensor::full(&p.shape, T::one()),
                };
                (p.name, t)
            })
            .unzip();
        ParamSet { names, tensors }
    }

    /// Checks names and shapes against a network's layout.
    pub fn check_layout(&self, spec: &NetworkSpec) -> Result<()> {
        let layout = spec.param_layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "architecture needs {} parameter tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for (info, (name, t)) in layout.iter().zip(self.iter()) {
            if info.name != name || info.shape != t.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` {:?} does not match `{}` {:?}",
                    t.shape(),
                    info.name,
                    info.shape
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.numel());
        for t in &self.tensors {
            v.extend_from_slice(t.data());
        }
        v
    }

    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::dim(format!(
                "flat vector of {} values for {} parameters",
                flat.len(),
                self.numel()
            )));
        }
        let mut at = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn with_flat(&self, flat: &[T]) -> Result<Self> {
        let mut out = self.clone();
        out.assign_flat(flat)?;
        Ok(out)
    }
}
