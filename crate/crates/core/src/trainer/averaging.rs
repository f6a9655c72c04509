use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::EvalAttack;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{class_recalls, clean_accuracy, robust_accuracy, worst_class_summary};
use crate::model::{average_update, ModelParams};

/// Running exponential average of parameter snapshots. The first fold
/// copies the snapshot; later folds apply `decay * avg + (1 - decay) * theta`.
#[derive(Debug, Clone)]
pub struct WeightAverager {
    decay: f64,
    average: Option<ModelParams>,
    folds: usize,
}

impl WeightAverager {
    pub fn new(decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::domain(format!("averaging decay {decay} outside [0, 1)")));
        }
        Ok(WeightAverager {
            decay,
            average: None,
            folds: 0,
        })
    }

    pub fn fold(&mut self, current: &ModelParams) -> Result<()> {
        self.average = Some(match self.average.take() {
            None => current.clone(),
            Some(avg) => average_update(&avg, current, self.decay)?,
        });
        self.folds += 1;
        Ok(())
    }

    pub fn average(&self) -> Option<&ModelParams> {
        self.average.as_ref()
    }

    pub fn into_average(self) -> Option<ModelParams> {
        self.average
    }

    pub fn folds(&self) -> usize {
        self.folds
    }
}

/// Outcome of the fairness gate for one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub accepted: bool,
    pub worst_class_robust: f64,
    pub overall_robust: f64,
    pub threshold: f64,
}

/// Gate predicate: the worst class must reach `threshold` times the overall
/// robust accuracy. A positive threshold also rejects a checkpoint whose
/// worst class is at zero. A zero threshold accepts everything. The
/// comparison allows a relative slack of [`GATE_TOLERANCE`] so that exact
/// ties such as `0.16` against `0.2 * 0.8` are accepted.
pub fn fawa_accepts(worst_class: f64, overall: f64, threshold: f64) -> bool {
    threshold == 0.0 || (worst_class >= threshold * overall * (1.0 - GATE_TOLERANCE) && worst_class > 0.0)
}

pub const GATE_TOLERANCE: f64 = 1e-12;

/// Evaluates `candidate` under `attack` on the validation split and applies
/// [`fawa_accepts`] to its worst-class robust recall.
pub fn fawa_gate<R: Rng>(
    candidate: &ModelParams,
    valid: &Dataset,
    attack: &EvalAttack,
    threshold: f64,
    rng: &mut R,
) -> Result<GateDecision> {
    if valid.is_empty() {
        return Err(Error::domain("fairness gate needs a non-empty validation split"));
    }
    let (_, log) = robust_accuracy(candidate, attack, valid, 256, rng)?;
    let recalls = class_recalls(&log)?;
    let worst = worst_class_summary(&recalls)?.min;
    let overall = clean_accuracy(&log)?;
    Ok(GateDecision {
        accepted: fawa_accepts(worst, overall, threshold),
        worst_class_robust: worst,
        overall_robust: overall,
        threshold,
    })
}
