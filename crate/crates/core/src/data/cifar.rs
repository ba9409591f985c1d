use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{hex, standardize, Dataset, Split};
use crate::{Error, Result, Tensor};

/// One label byte followed by 32×32 red, green and blue planes.
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 1024;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Parses concatenated records into `N×3×32×32` pixels scaled to `[0, 1]`.
/// `first_index` offsets record numbers in error messages.
pub fn parse_cifar_records(bytes: &[u8], first_index: usize) -> Result<(Tensor<f32>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(Error::Format(format!(
            "CIFAR-10 batch of {} bytes is not a multiple of {CIFAR_RECORD_BYTES}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if rec[0] > 9 {
            return Err(Error::CorruptRecord {
                index: first_index + i,
                label: rec[0],
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| f32::from(b) / 255.0));
    }
    Ok((Tensor::new(vec![n, 3, 32, 32], pixels)?, labels))
}

fn load_files(dir: &Path, names: &[&str], split: Split) -> Result<Dataset<f32>> {
    let mut hasher = Sha256::new();
    let mut parts = Vec::new();
    let mut labels = Vec::new();
    for name in names {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        hasher.update(&bytes);
        let (imgs, labs) = parse_cifar_records(&bytes, labels.len())?;
        parts.push(imgs);
        labels.extend(labs);
    }
    let images = Tensor::concat(&parts)?;
    Dataset::new(images, labels, 10, split, hex(&hasher.finalize()))
}

/// Training and test splits of the binary CIFAR-10 distribution, standardised
/// per channel with training-split statistics.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset<f32>, Dataset<f32>)> {
    let mut train = load_files(dir, &CIFAR_TRAIN_FILES, Split::Train)?;
    let mut test = load_files(dir, &[CIFAR_TEST_FILE], Split::Test)?;
    standardize(&mut train, &mut [&mut test])?;
    Ok((train, test))
}
