use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, ImageShape};
use crate::error::{Error, Result};

/// One label byte followed by 1024 red, 1024 green and 1024 blue bytes.
pub const CIFAR_RECORD_BYTES: usize = 1 + 3072;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarSplit {
    Train,
    Test,
}

impl CifarSplit {
    fn files(self) -> Vec<&'static str> {
        match self {
            CifarSplit::Train => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            CifarSplit::Test => vec!["test_batch.bin"],
        }
    }
}

/// Parses concatenated CIFAR-10 binary records into `(features, labels)`
/// with pixels scaled to `[0, 1]`.
pub fn parse_cifar10(bytes: &[u8], source: &str) -> Result<(Vec<f64>, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Format(format!(
            "{source}: {} bytes is not a multiple of the {CIFAR_RECORD_BYTES}-byte record size",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut features = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if record[0] > 9 {
            return Err(Error::Format(format!("{source}: record {i} has label byte {}", record[0])));
        }
        labels.push(record[0] as usize);
        features.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((features, labels))
}

/// Inverse of [`parse_cifar10`] for one row.
pub fn encode_cifar_record(label: usize, pixels: &[f64]) -> Result<[u8; CIFAR_RECORD_BYTES]> {
    if label > 9 || pixels.len() != 3072 {
        return Err(Error::Format(format!(
            "cannot encode label {label} with {} pixels",
            pixels.len()
        )));
    }
    let mut out = [0u8; CIFAR_RECORD_BYTES];
    out[0] = label as u8;
    for (o, &p) in out[1..].iter_mut().zip(pixels) {
        *o = (p.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    Ok(out)
}

pub fn load_cifar10_files(paths: &[PathBuf], subset_per_class: Option<usize>, seed: u64) -> Result<Dataset> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (f, l) = parse_cifar10(&bytes, &path.display().to_string())?;
        features.extend(f);
        labels.extend(l);
    }
    let full = Dataset::new(features, 3072, labels, 10)?.with_image_shape(ImageShape::CIFAR)?;
    match subset_per_class {
        None => Ok(full),
        Some(per_class) => subsample_per_class(&full, per_class, seed),
    }
}

/// Loads the standard binary batches from `dir`, optionally keeping exactly
/// `subset_per_class` samples of every class (chosen by `seed`).
pub fn load_cifar10(dir: &Path, split: CifarSplit, subset_per_class: Option<usize>, seed: u64) -> Result<Dataset> {
    let paths: Vec<PathBuf> = split.files().into_iter().map(|f| dir.join(f)).collect();
    load_cifar10_files(&paths, subset_per_class, seed)
}

fn subsample_per_class(full: &Dataset, per_class: usize, seed: u64) -> Result<Dataset> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); full.num_classes()];
    for (i, &l) in full.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(per_class * by_class.len());
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.len() < per_class {
            return Err(Error::domain(format!(
                "class {class} has {} samples, fewer than the requested {per_class}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..per_class]);
    }
    keep.sort_unstable();
    full.subset(&keep)
}
