use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{min_max_scale, Dataset};
use crate::error::{Error, Result};

/// Centers of the three-class scenario before scaling: classes 0 and 1 sit
/// `separation_hard` apart on the x axis, class 2 sits `separation_easy`
/// away from both.
pub fn three_class_centers(separation_hard: f64, separation_easy: f64) -> Result<[[f64; 2]; 3]> {
    if !(separation_hard > 0.0 && separation_easy > 0.0) {
        return Err(Error::domain("separations must be positive"));
    }
    let height_sq = separation_easy * separation_easy - separation_hard * separation_hard / 4.0;
    if !(height_sq > 0.0) {
        return Err(Error::domain(format!(
            "separation_easy {separation_easy} must exceed half of separation_hard {separation_hard}; \
             otherwise class 2 coincides with the hard pair's midpoint"
        )));
    }
    let half = separation_hard / 2.0;
    Ok([[-half, 0.0], [half, 0.0], [0.0, height_sq.sqrt()]])
}

/// Two hard-to-separate Gaussian classes (0 and 1) and one distinctive
/// class (2) in 2D, min-max scaled to `[0, 1]`, `n_per_class` each.
pub fn make_three_class(
    n_per_class: usize,
    separation_hard: f64,
    separation_easy: f64,
    noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::domain("n_per_class must be positive"));
    }
    if !(noise_std > 0.0) {
        return Err(Error::domain("noise_std must be positive"));
    }
    let centers = three_class_centers(separation_hard, separation_easy)?;
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(3 * n_per_class * 2);
    let mut labels = Vec::with_capacity(3 * n_per_class);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            features.push(center[0] + noise.sample(&mut rng));
            features.push(center[1] + noise.sample(&mut rng));
            labels.push(class);
        }
    }
    min_max_scale(&mut features, 2);
    Dataset::new(features, 2, labels, 3)
}

/// `num_classes` isotropic Gaussian blobs in `dim` dimensions. Centers are
/// drawn from `N(0, center_spread^2 I)`; features are min-max scaled.
pub fn make_blobs(
    num_classes: usize,
    n_per_class: usize,
    dim: usize,
    center_spread: f64,
    noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || n_per_class == 0 || dim == 0 {
        return Err(Error::domain("blobs need K >= 2, n_per_class >= 1 and dim >= 1"));
    }
    if !(center_spread >= 0.0 && noise_std >= 0.0) {
        return Err(Error::domain("center_spread and noise_std must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    center_spread * z
                })
                .collect()
        })
        .collect();
    let mut features = Vec::with_capacity(num_classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * n_per_class);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            for &c in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(c + noise_std * z);
            }
            labels.push(class);
        }
    }
    min_max_scale(&mut features, dim);
    Dataset::new(features, dim, labels, num_classes)
}
