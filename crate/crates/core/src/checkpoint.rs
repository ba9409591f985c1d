//! Model checkpoints in the tensor container: raw weights under their
//! `<layer>.<role>` names, EMA weights under `ema.`, and the architecture as
//! text under `meta.arch`.

use std::path::Path;

use crate::container::{self, Entry, Payload};
use crate::nn::{Model, NetworkSpec, ParamSet};
use crate::{Error, Result, Scalar};

pub const ARCH_KEY: &str = "meta.arch";
pub const EMA_PREFIX: &str = "ema.";

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub ema: Option<ParamSet<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    /// The EMA weights when present, otherwise the raw ones.
    pub fn eval_model(&self) -> Model<T> {
        match &self.ema {
            Some(ema) => Model {
                spec: self.model.spec.clone(),
                params: ema.clone(),
            },
            None => self.model.clone(),
        }
    }
}

pub fn to_entries<T: Scalar>(model: &Model<T>, ema: Option<&ParamSet<T>>) -> Vec<Entry> {
    let mut entries = vec![Entry::new(ARCH_KEY, Payload::text(&model.spec.to_text()))];
    for (name, t) in model.params.iter() {
        entries.push(Entry::new(name, Payload::F32(t.cast())));
    }
    if let Some(ema) = ema {
        for (name, t) in ema.iter() {
            entries.push(Entry::new(format!("{EMA_PREFIX}{name}"), Payload::F32(t.cast())));
        }
    }
    entries
}

pub fn save<T: Scalar>(path: &Path, model: &Model<T>, ema: Option<&ParamSet<T>>) -> Result<()> {
    container::write(path, &to_entries(model, ema))
}

pub fn from_entries<T: Scalar>(entries: &[Entry]) -> Result<Checkpoint<T>> {
    let arch = match entries.iter().find(|e| e.name == ARCH_KEY) {
        Some(Entry {
            payload: Payload::U8 { bytes, .. },
            ..
        }) => std::str::from_utf8(bytes).map_err(|_| Error::Format("architecture text is not UTF-8".into()))?,
        _ => return Err(Error::Format(format!("checkpoint lacks `{ARCH_KEY}`"))),
    };
    let spec = NetworkSpec::from_text(arch)?;
    let layout = spec.param_layout();
    let gather = |prefix: &str| -> Result<ParamSet<T>> {
        let tensors = layout
            .iter()
            .map(|p| container::find_f32(entries, &format!("{prefix}{}", p.name)).map(|t| t.cast()))
            .collect::<Result<Vec<_>>>()?;
        let set = ParamSet::new(layout.iter().map(|p| p.name.clone()).collect(), tensors)?;
        set.check_layout(&spec)?;
        Ok(set)
    };
    let params = gather("")?;
    let ema = if entries.iter().any(|e| e.name.starts_with(EMA_PREFIX)) {
        Some(gather(EMA_PREFIX)?)
    } else {
        None
    };
    Ok(Checkpoint {
        model: Model::new(spec, params)?,
        ema,
    })
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    from_entries(&container::read(path)?)
}
