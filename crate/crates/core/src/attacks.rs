//! L-infinity adversarial attacks: FGSM, untargeted PGD and targeted PGD.
//!
//! Every iterate is produced by the same step routine: move by
//! `step_size * sign(grad)`, clamp to the input range, project onto the
//! per-sample ball around the clean input, clamp again. `sign(0) = 0`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Slack allowed on ball containment checks.
pub const BALL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub num_steps: usize,
    pub random_start: bool,
    pub clamp: (f64, f64),
    /// Targeted PGD ascends the target-class loss instead of descending it,
    /// pushing samples away from the target.
    #[serde(default)]
    pub ascend_target_loss: bool,
}

impl Default for AttackConfig {
    /// PGD-10 with `epsilon = 8/255` and `step_size = 2/255` on `[0, 1]`.
    fn default() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            num_steps: 10,
            random_start: true,
            clamp: (0.0, 1.0),
            ascend_target_loss: false,
        }
    }
}

impl AttackConfig {
    /// Single-step FGSM semantics for the given margin.
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            step_size: epsilon,
            num_steps: 1,
            random_start: false,
            ..AttackConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.clamp;
        if !(lo < hi) {
            return Err(Error::domain(format!("clamp range [{lo}, {hi}] is empty")));
        }
        if !(self.epsilon >= 0.0 && self.epsilon <= hi - lo) {
            return Err(Error::domain(format!(
                "epsilon {} must lie in [0, {}]",
                self.epsilon,
                hi - lo
            )));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::domain("attack step size must be positive"));
        }
        if self.num_steps == 0 {
            return Err(Error::domain("attack needs at least one step"));
        }
        Ok(())
    }
}

/// Which attack an evaluation runs; carried into reports by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalAttack {
    pub kind: AttackKind,
    pub config: AttackConfig,
}

impl EvalAttack {
    pub fn name(&self) -> String {
        let eps = self.config.epsilon * 255.0;
        match self.kind {
            AttackKind::Fgsm => format!("fgsm(eps={eps:.4}/255)"),
            AttackKind::Pgd => format!(
                "pgd{}(eps={eps:.4}/255, step={:.4}/255{})",
                self.config.num_steps,
                self.config.step_size * 255.0,
                if self.config.random_start { ", random start" } else { "" }
            ),
        }
    }

    /// Untargeted attack of `x` with labels `y`.
    pub fn run<R: Rng>(&self, model: &ModelParams, x: &Tensor, y: &[usize], rng: &mut R) -> Result<AdvBatch> {
        match self.kind {
            AttackKind::Fgsm => fgsm(model, x, y, &self.config),
            AttackKind::Pgd => pgd_untargeted(model, x, y, &self.config, rng),
        }
    }
}

/// A batch of clean inputs and their perturbed counterparts.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvBatch {
    pub original: Tensor,
    pub perturbed: Tensor,
    pub labels: Vec<usize>,
    pub targets: Option<Vec<usize>>,
}

impl AdvBatch {
    /// Largest per-sample L-infinity distance between clean and perturbed rows.
    pub fn linf_distances(&self) -> Vec<f64> {
        let cols = self.original.shape()[1];
        self.original
            .values()
            .chunks_exact(cols)
            .zip(self.perturbed.values().chunks_exact(cols))
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max))
            .collect()
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clamp(center + clip(candidate - center, -epsilon, epsilon), lo, hi)`.
pub fn project_linf(candidate: f64, center: f64, epsilon: f64, clamp: (f64, f64)) -> f64 {
    let delta = (candidate - center).clamp(-epsilon, epsilon);
    (center + delta).clamp(clamp.0, clamp.1)
}

/// Elementwise [`project_linf`] with one margin per row.
pub fn project_linf_rows(candidate: &Tensor, center: &Tensor, margins: &[f64], clamp: (f64, f64)) -> Result<Tensor> {
    if !candidate.same_shape(center) {
        return Err(Error::shape(
            "project_linf",
            format!("{:?} vs {:?}", candidate.shape(), center.shape()),
        ));
    }
    let cols = center.shape()[center.shape().len() - 1];
    let values = candidate
        .values()
        .iter()
        .zip(center.values())
        .enumerate()
        .map(|(i, (&c, &x))| project_linf(c, x, margins[i / cols], clamp))
        .collect();
    Tensor::new(center.shape().to_vec(), values)
}

/// Gradient of the mean cross-entropy against `labels` with respect to the input.
fn input_gradient(model: &ModelParams, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false)?;
    let xv = tape.leaf(x.clone(), true)?;
    let logits = model.forward(&mut tape, &bound, xv)?;
    let per = tape.softmax_cross_entropy(logits, labels)?;
    let loss = tape.mean(per)?;
    tape.backward(loss)?;
    tape.grad(xv)
        .cloned()
        .ok_or_else(|| Error::contract("input gradient missing"))
}

fn attack_error(err: Error, cols: usize) -> Error {
    match err {
        Error::NonFinite { context } => {
            let sample = context
                .rsplit("flat index ")
                .next()
                .and_then(|s| s.parse::<usize>().ok())
                .map_or(0, |i| i / cols.max(1));
            Error::Attack {
                sample,
                detail: format!("non-finite gradient ({context})"),
            }
        }
        other => other,
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Direction {
    Ascend,
    Descend,
}

fn check_batch(model: &ModelParams, x: &Tensor, labels: &[usize], margins: &[f64], config: &AttackConfig) -> Result<usize> {
    config.validate()?;
    let (rows, cols) = x
        .dims2()
        .ok_or_else(|| Error::shape("attack", format!("expected a [batch, dim] input, got {:?}", x.shape())))?;
    if cols != model.dims().input_dim {
        return Err(Error::shape("attack", format!("input dim {cols} vs model {}", model.dims().input_dim)));
    }
    if labels.len() != rows || margins.len() != rows {
        return Err(Error::shape(
            "attack",
            format!("{rows} rows, {} labels, {} margins", labels.len(), margins.len()),
        ));
    }
    let k = model.num_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::domain(format!("label {bad} outside [0, {k})")));
    }
    let (lo, hi) = config.clamp;
    if let Some(i) = x.values().iter().position(|v| !(*v >= lo && *v <= hi)) {
        return Err(Error::domain(format!(
            "input entry {} (sample {}) outside clamp range [{lo}, {hi}]",
            x.values()[i],
            i / cols
        )));
    }
    if let Some(m) = margins.iter().find(|&&m| !(m >= 0.0 && m <= hi - lo)) {
        return Err(Error::domain(format!("per-sample margin {m} outside [0, {}]", hi - lo)));
    }
    Ok(cols)
}

fn run_pgd<R: Rng>(
    model: &ModelParams,
    x: &Tensor,
    loss_labels: &[usize],
    margins: &[f64],
    direction: Direction,
    config: &AttackConfig,
    rng: Option<&mut R>,
) -> Result<Tensor> {
    let cols = check_batch(model, x, loss_labels, margins, config)?;
    let clamp = config.clamp;
    let mut current = x.clone();
    if let Some(rng) = rng {
        if config.random_start {
            for (i, v) in current.values_mut().iter_mut().enumerate() {
                let m = margins[i / cols];
                let noise = if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
                *v = (*v + noise).clamp(clamp.0, clamp.1);
            }
        }
    }
    if margins.iter().all(|&m| m == 0.0) {
        // The ball is a point; every iterate projects back to x.
        return Ok(x.clone());
    }
    let step = match direction {
        Direction::Ascend => config.step_size,
        Direction::Descend => -config.step_size,
    };
    for _ in 0..config.num_steps {
        let grad = input_gradient(model, &current, loss_labels).map_err(|e| attack_error(e, cols))?;
        let moved = current
            .values()
            .iter()
            .zip(grad.values())
            .map(|(&v, &g)| (v + step * sign(g)).clamp(clamp.0, clamp.1))
            .collect();
        let candidate = Tensor::new(current.shape().to_vec(), moved)?;
        current = project_linf_rows(&candidate, x, margins, clamp)?;
    }
    Ok(current)
}

/// Fast gradient sign method: one step of size `epsilon`, no random start.
pub fn fgsm(model: &ModelParams, x: &Tensor, y: &[usize], config: &AttackConfig) -> Result<AdvBatch> {
    let single = AttackConfig {
        step_size: if config.epsilon > 0.0 { config.epsilon } else { config.step_size },
        num_steps: 1,
        random_start: false,
        ..config.clone()
    };
    let margins = vec![config.epsilon; y.len()];
    let perturbed = run_pgd::<rand_chacha::ChaCha8Rng>(model, x, y, &margins, Direction::Ascend, &single, None)?;
    Ok(AdvBatch {
        original: x.clone(),
        perturbed,
        labels: y.to_vec(),
        targets: None,
    })
}

/// Untargeted PGD: sign-gradient ascent on the loss of the true labels.
pub fn pgd_untargeted<R: Rng>(
    model: &ModelParams,
    x: &Tensor,
    y: &[usize],
    config: &AttackConfig,
    rng: &mut R,
) -> Result<AdvBatch> {
    let margins = vec![config.epsilon; y.len()];
    pgd_untargeted_with_margins(model, x, y, &margins, config, rng)
}

/// Untargeted PGD with one margin per sample.
pub fn pgd_untargeted_with_margins<R: Rng>(
    model: &ModelParams,
    x: &Tensor,
    y: &[usize],
    margins: &[f64],
    config: &AttackConfig,
    rng: &mut R,
) -> Result<AdvBatch> {
    let perturbed = run_pgd(model, x, y, margins, Direction::Ascend, config, Some(rng))?;
    Ok(AdvBatch {
        original: x.clone(),
        perturbed,
        labels: y.to_vec(),
        targets: None,
    })
}

/// Targeted PGD: sign-gradient descent on the loss of the target labels, so
/// the target class becomes more likely.
pub fn pgd_targeted<R: Rng>(
    model: &ModelParams,
    x: &Tensor,
    y: &[usize],
    targets: &[usize],
    config: &AttackConfig,
    rng: &mut R,
) -> Result<AdvBatch> {
    let margins = vec![config.epsilon; y.len()];
    pgd_targeted_with_margins(model, x, y, targets, &margins, config, rng)
}

/// Targeted PGD with one margin per sample.
pub fn pgd_targeted_with_margins<R: Rng>(
    model: &ModelParams,
    x: &Tensor,
    y: &[usize],
    targets: &[usize],
    margins: &[f64],
    config: &AttackConfig,
    rng: &mut R,
) -> Result<AdvBatch> {
    if targets.len() != y.len() {
        return Err(Error::shape(
            "pgd_targeted",
            format!("{} labels vs {} targets", y.len(), targets.len()),
        ));
    }
    let direction = if config.ascend_target_loss {
        Direction::Ascend
    } else {
        Direction::Descend
    };
    let perturbed = run_pgd(model, x, targets, margins, direction, config, Some(rng))?;
    Ok(AdvBatch {
        original: x.clone(),
        perturbed,
        labels: y.to_vec(),
        targets: Some(targets.to_vec()),
    })
}
