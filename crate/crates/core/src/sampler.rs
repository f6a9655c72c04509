//! Target-class priors and per-batch target sampling with ground-truth
//! exclusion.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// Proportional to class false-positive scores.
    Cfps,
    Uniform,
}

/// A multinomial over target classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDistribution {
    pub probs: Vec<f64>,
    pub kind: PriorKind,
    /// The score vector the prior was built from.
    pub source_stats: Vec<f64>,
}

impl TargetDistribution {
    pub fn uniform(num_classes: usize) -> Self {
        TargetDistribution {
            probs: vec![1.0 / num_classes as f64; num_classes],
            kind: PriorKind::Uniform,
            source_stats: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }
}

pub fn build_prior(scores: &[f64], kind: PriorKind) -> Result<TargetDistribution> {
    let k = scores.len();
    if k < 2 {
        return Err(Error::domain("a target prior needs at least 2 classes"));
    }
    if let Some(bad) = scores.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(Error::domain(format!("prior weight {bad} must be finite and >= 0")));
    }
    let total: f64 = scores.iter().sum();
    let probs = match kind {
        PriorKind::Cfps if total > 0.0 => scores.iter().map(|s| s / total).collect(),
        _ => vec![1.0 / k as f64; k],
    };
    Ok(TargetDistribution {
        probs,
        kind,
        source_stats: scores.to_vec(),
    })
}

/// What to do for a label whose complement carries no prior mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionFallback {
    Error,
    /// Sample uniformly among the other classes.
    UniformOthers,
}

/// Per-label samplers over the prior with the label's own mass removed.
#[derive(Debug, Clone)]
pub struct TargetSampler {
    per_label: Vec<std::result::Result<WeightedIndex<f64>, String>>,
}

impl TargetSampler {
    pub fn new(dist: &TargetDistribution, fallback: ExclusionFallback) -> Self {
        let k = dist.num_classes();
        let per_label = (0..k)
            .map(|label| {
                let mut weights = dist.probs.clone();
                weights[label] = 0.0;
                match WeightedIndex::new(&weights) {
                    Ok(w) => Ok(w),
                    Err(_) if fallback == ExclusionFallback::UniformOthers => {
                        let mut uniform = vec![1.0; k];
                        uniform[label] = 0.0;
                        Ok(WeightedIndex::new(&uniform).expect("k >= 2"))
                    }
                    Err(_) => Err(format!(
                        "no valid target for label {label}: the prior puts all its mass on the ground truth"
                    )),
                }
            })
            .collect();
        TargetSampler { per_label }
    }

    pub fn sample<R: Rng>(&self, label: usize, rng: &mut R) -> Result<usize> {
        match self.per_label.get(label) {
            Some(Ok(w)) => Ok(w.sample(rng)),
            Some(Err(msg)) => Err(Error::domain(msg.clone())),
            None => Err(Error::domain(format!("label {label} outside the prior's support"))),
        }
    }

    pub fn sample_all<R: Rng>(&self, labels: &[usize], rng: &mut R) -> Result<Vec<usize>> {
        labels.iter().map(|&y| self.sample(y, rng)).collect()
    }
}

/// Draws one target per label from `dist` renormalized after zeroing the
/// label's own class.
pub fn sample_targets<R: Rng>(labels: &[usize], dist: &TargetDistribution, rng: &mut R) -> Result<Vec<usize>> {
    TargetSampler::new(dist, ExclusionFallback::Error).sample_all(labels, rng)
}

/// Literal resample loop: draw from `dist`, redraw while the draw equals
/// the label. Same distribution as [`sample_targets`].
pub fn sample_targets_rejection<R: Rng>(labels: &[usize], dist: &TargetDistribution, rng: &mut R) -> Result<Vec<usize>> {
    let all = WeightedIndex::new(&dist.probs).map_err(|e| Error::domain(format!("invalid prior: {e}")))?;
    labels
        .iter()
        .map(|&y| {
            if y >= dist.num_classes() {
                return Err(Error::domain(format!("label {y} outside the prior's support")));
            }
            let others: f64 = dist.probs.iter().enumerate().filter(|&(c, _)| c != y).map(|(_, p)| p).sum();
            if others <= 0.0 {
                return Err(Error::domain(format!(
                    "no valid target for label {y}: the prior puts all its mass on the ground truth"
                )));
            }
            loop {
                let t = all.sample(rng);
                if t != y {
                    return Ok(t);
                }
            }
        })
        .collect()
}

/// Independent, reproducible random stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
