//! Locally regenerated common corruptions at severities 1 to 5.
//!
//! Severity tables (intensity is the per-kind parameter, 0 is the identity):
//!
//! | kind           | intensity                    | severity 1..5                  |
//! |----------------|------------------------------|--------------------------------|
//! | gaussian_noise | noise std                    | 0.04, 0.06, 0.08, 0.09, 0.10   |
//! | shot_noise     | 1 / photon count             | 1/60, 1/25, 1/12, 1/5, 1/3     |
//! | impulse_noise  | fraction of entries hit      | 0.01, 0.02, 0.03, 0.05, 0.07   |
//! | brightness     | additive shift               | 0.1, 0.2, 0.3, 0.4, 0.5        |
//! | contrast       | 1 - contrast factor          | 0.25, 0.5, 0.6, 0.7, 0.85      |
//! | pixelate       | 1 - resize factor            | 0.05, 0.1, 0.15, 0.25, 0.35    |

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, ImageShape, SplitTag};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    Brightness,
    Contrast,
    Pixelate,
}

pub const IMPLEMENTED_CORRUPTIONS: [CorruptionKind; 6] = [
    CorruptionKind::GaussianNoise,
    CorruptionKind::ShotNoise,
    CorruptionKind::ImpulseNoise,
    CorruptionKind::Brightness,
    CorruptionKind::Contrast,
    CorruptionKind::Pixelate,
];

const NOT_IMPLEMENTED: [&str; 12] = [
    "speckle_noise",
    "gaussian_blur",
    "defocus_blur",
    "motion_blur",
    "zoom_blur",
    "snow",
    "fog",
    "frost",
    "spatter",
    "saturate",
    "elastic_transform",
    "jpeg_compression",
];

impl CorruptionKind {
    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    /// Intensity for severity `1..=5`.
    pub fn intensity(self, severity: u8) -> Result<f64> {
        let table: [f64; 5] = match self {
            CorruptionKind::GaussianNoise => [0.04, 0.06, 0.08, 0.09, 0.10],
            CorruptionKind::ShotNoise => [1.0 / 60.0, 1.0 / 25.0, 1.0 / 12.0, 1.0 / 5.0, 1.0 / 3.0],
            CorruptionKind::ImpulseNoise => [0.01, 0.02, 0.03, 0.05, 0.07],
            CorruptionKind::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            CorruptionKind::Contrast => [0.25, 0.5, 0.6, 0.7, 0.85],
            CorruptionKind::Pixelate => [0.05, 0.1, 0.15, 0.25, 0.35],
        };
        match severity {
            1..=5 => Ok(table[severity as usize - 1]),
            _ => Err(Error::domain(format!("severity {severity} outside 1..=5"))),
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        IMPLEMENTED_CORRUPTIONS
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                if NOT_IMPLEMENTED.contains(&s) {
                    Error::UnsupportedCorruption(s.to_string())
                } else {
                    Error::UnsupportedCorruption(format!("{s} (unknown corruption type)"))
                }
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        kind.intensity(severity)?;
        Ok(CorruptionSpec { kind, severity })
    }
}

/// Applies `spec` to every row; labels pass through untouched.
pub fn corrupt(dataset: &Dataset, spec: CorruptionSpec, seed: u64) -> Result<Dataset> {
    let intensity = spec.kind.intensity(spec.severity)?;
    let out = corrupt_with_intensity(dataset, spec.kind, intensity, seed)?;
    Ok(out.with_split(SplitTag::Corrupted(format!("{}-{}", spec.kind, spec.severity))))
}

/// Applies a corruption at an explicit intensity (see the module table).
pub fn corrupt_with_intensity(dataset: &Dataset, kind: CorruptionKind, intensity: f64, seed: u64) -> Result<Dataset> {
    if !(intensity >= 0.0 && intensity.is_finite()) {
        return Err(Error::domain(format!("corruption intensity {intensity} must be finite and >= 0")));
    }
    let split = SplitTag::Corrupted(format!("{kind}@{intensity}"));
    if intensity == 0.0 {
        return Ok(dataset.with_features(dataset.features().to_vec(), split));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = dataset.features().to_vec();
    let dim = dataset.dim();
    match kind {
        CorruptionKind::GaussianNoise => {
            for v in &mut features {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += intensity * z;
            }
        }
        CorruptionKind::ShotNoise => {
            let photons = 1.0 / intensity;
            for v in &mut features {
                let mean = *v * photons;
                *v = if mean > 0.0 {
                    let poisson = Poisson::new(mean).map_err(|e| Error::domain(e.to_string()))?;
                    poisson.sample(&mut rng) / photons
                } else {
                    0.0
                };
            }
        }
        CorruptionKind::ImpulseNoise => {
            if intensity > 1.0 {
                return Err(Error::domain("impulse fraction must be <= 1"));
            }
            for v in &mut features {
                if rng.random_bool(intensity) {
                    *v = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                }
            }
        }
        CorruptionKind::Brightness => features.iter_mut().for_each(|v| *v += intensity),
        CorruptionKind::Contrast => {
            let factor = (1.0 - intensity).max(0.0);
            for row in features.chunks_exact_mut(dim) {
                let mean = row.iter().sum::<f64>() / dim as f64;
                row.iter_mut().for_each(|v| *v = (*v - mean) * factor + mean);
            }
        }
        CorruptionKind::Pixelate => {
            let shape = dataset
                .image_shape()
                .ok_or_else(|| Error::domain("pixelate needs image-shaped features"))?;
            let scale = (1.0 - intensity).max(0.0);
            for row in features.chunks_exact_mut(dim) {
                pixelate(row, shape, scale);
            }
        }
    }
    features.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(dataset.with_features(features, split))
}

/// Box-downsamples each channel to `round(scale * side)` and upsamples back
/// with nearest-neighbour lookup.
fn pixelate(row: &mut [f64], shape: ImageShape, scale: f64) {
    let (h, w) = (shape.height, shape.width);
    let sh = ((h as f64 * scale).round() as usize).clamp(1, h);
    let sw = ((w as f64 * scale).round() as usize).clamp(1, w);
    if sh == h && sw == w {
        return;
    }
    for plane in row.chunks_exact_mut(h * w) {
        let mut small = vec![0.0; sh * sw];
        for i in 0..sh {
            let (r0, r1) = (i * h / sh, ((i + 1) * h / sh).max(i * h / sh + 1));
            for j in 0..sw {
                let (c0, c1) = (j * w / sw, ((j + 1) * w / sw).max(j * w / sw + 1));
                let mut sum = 0.0;
                for r in r0..r1 {
                    sum += plane[r * w + c0..r * w + c1].iter().sum::<f64>();
                }
                small[i * sw + j] = sum / ((r1 - r0) * (c1 - c0)) as f64;
            }
        }
        for r in 0..h {
            let i = r * sh / h;
            for c in 0..w {
                plane[r * w + c] = small[i * sw + c * sw / w];
            }
        }
    }
}
