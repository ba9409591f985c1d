use std::path::Path;

use super::{sha256_hex, Dataset, Split};
use crate::container::{self, Entry, Payload};
use crate::{Error, Result, Tensor};

/// Loads `images` (`N×C×H×W`) and `labels` (length `N`, integral values
/// stored as floats) from a container file. Values are taken as stored.
pub fn load_raw_container(path: &Path) -> Result<Dataset<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let entries = container::decode(&bytes)?;
    let images = container::find_f32(&entries, "images")?.clone();
    let raw_labels = container::find_f32(&entries, "labels")?;
    if raw_labels.rank() != 1 {
        return Err(Error::Data(format!(
            "labels must be rank 1, got {:?}",
            raw_labels.shape()
        )));
    }
    let labels = raw_labels
        .data()
        .iter()
        .map(|&l| {
            if l >= 0.0 && l.fract() == 0.0 && l < 1e7 {
                Ok(l as usize)
            } else {
                Err(Error::Data(format!("label {l} is not a class index")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(images, labels, classes, Split::Train, sha256_hex(&bytes))
}

pub fn save_raw_container(path: &Path, data: &Dataset<f32>) -> Result<()> {
    let labels = Tensor::new(vec![data.len()], data.labels.iter().map(|&l| l as f32).collect())?;
    container::write(
        path,
        &[
            Entry::new("images", Payload::F32(data.images.clone())),
            Entry::new("labels", Payload::F32(labels)),
        ],
    )
}
