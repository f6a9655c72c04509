//! The training loop: targeted PGD adversarial training with target
//! sampling from a false-positive-score prior, per-class margin calibration
//! and weight averaging, plus untargeted PGD-AT as the baseline.

mod averaging;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use averaging::{fawa_accepts, fawa_gate, GateDecision, WeightAverager};

use crate::attacks::{pgd_targeted_with_margins, pgd_untargeted_with_margins, AttackConfig, AttackKind, EvalAttack};
use crate::data::{split, Dataset};
use crate::diffcore::Tape;
use crate::error::{Error, Result};
use crate::metrics::{cfps_vector, class_recalls, clean_accuracy, PredLog};
use crate::model::{argmax, sgd_step, ModelDims, ModelParams, SgdConfig, SgdState};
use crate::sampler::{build_prior, sample_targets_rejection, stream_rng, ExclusionFallback, PriorKind, TargetDistribution, TargetSampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    FairTat,
    UntargetedAt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossKind {
    CrossEntropy,
    /// `CE(f(x), y) + beta * KL(softmax f(x') || softmax f(x))`.
    Trades { beta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Averaging {
    None,
    Ema {
        decay: f64,
        start_epoch: usize,
    },
    /// EMA whose folds are gated, epoch by epoch, on worst-class validation
    /// robustness.
    Fawa {
        decay: f64,
        start_epoch: usize,
        threshold: f64,
        valid_fraction: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorRefresh {
    Epoch,
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSampling {
    Renormalize,
    Reject,
}

/// Which class indexes a sample's margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginKey {
    GroundTruth,
    Target,
}

/// Which training predictions feed the false-positive scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsSource {
    Adversarial,
    Clean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub sgd: SgdConfig,
    /// Base margin, step size and step count of the training attack.
    pub attack: AttackConfig,
    pub lambda1: f64,
    pub prior_kind: PriorKind,
    pub prior_refresh: PriorRefresh,
    pub target_sampling: TargetSampling,
    pub margin_key: MarginKey,
    pub cfps_source: StatsSource,
    pub averaging: Averaging,
    pub loss: LossKind,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 128,
            hidden: vec![64, 64],
            sgd: SgdConfig::default(),
            attack: AttackConfig::default(),
            lambda1: 0.5,
            prior_kind: PriorKind::Cfps,
            prior_refresh: PriorRefresh::Epoch,
            target_sampling: TargetSampling::Renormalize,
            margin_key: MarginKey::GroundTruth,
            cfps_source: StatsSource::Adversarial,
            averaging: Averaging::None,
            loss: LossKind::CrossEntropy,
            mode: Mode::FairTat,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.attack.validate()?;
        if self.batch_size == 0 {
            return Err(Error::domain("batch size must be positive"));
        }
        if !(self.lambda1 > 0.0) {
            return Err(Error::domain("lambda1 must be positive"));
        }
        let (lo, hi) = self.attack.clamp;
        if (self.lambda1 + 1.0) * self.attack.epsilon > hi - lo {
            return Err(Error::domain(
                "the largest calibrated margin (lambda1 + 1) * epsilon exceeds the input range",
            ));
        }
        if let LossKind::Trades { beta } = self.loss {
            if !(beta >= 0.0 && beta.is_finite()) {
                return Err(Error::domain("TRADES beta must be finite and >= 0"));
            }
        }
        match &self.averaging {
            Averaging::None => {}
            Averaging::Ema { decay, .. } => check_decay(*decay)?,
            Averaging::Fawa {
                decay,
                threshold,
                valid_fraction,
                ..
            } => {
                check_decay(*decay)?;
                if !(0.0..=1.0).contains(threshold) {
                    return Err(Error::domain("fairness threshold must lie in [0, 1]"));
                }
                if !(*valid_fraction > 0.0 && *valid_fraction < 0.5) {
                    return Err(Error::domain("validation fraction must lie in (0, 0.5)"));
                }
            }
        }
        Ok(())
    }

    fn start_epoch(&self) -> Option<usize> {
        match self.averaging {
            Averaging::None => None,
            Averaging::Ema { start_epoch, .. } | Averaging::Fawa { start_epoch, .. } => Some(start_epoch),
        }
    }
}

fn check_decay(decay: f64) -> Result<()> {
    if (0.0..1.0).contains(&decay) {
        Ok(())
    } else {
        Err(Error::domain(format!("averaging decay {decay} outside [0, 1)")))
    }
}

/// Per-class running statistics from the last training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    /// Robust training recall per class, `r_k`.
    pub robust_accuracy: Vec<f64>,
    /// False-positive score per class; `None` before the first epoch.
    pub cfps: Option<Vec<f64>>,
    /// Calibrated margins `epsilon_k`.
    pub epsilons: Vec<f64>,
}

impl ClassStats {
    /// Cold start: no scores yet, every margin at the base epsilon.
    pub fn cold(num_classes: usize, epsilon: f64) -> Self {
        ClassStats {
            robust_accuracy: vec![0.0; num_classes],
            cfps: None,
            epsilons: vec![epsilon; num_classes],
        }
    }
}

/// `epsilon_k = (lambda1 + r_k) * epsilon`.
pub fn update_epsilons(robust_accuracy: &[f64], epsilon: f64, lambda1: f64) -> Vec<f64> {
    robust_accuracy.iter().map(|r| (lambda1 + r) * epsilon).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragingEvent {
    /// `None` for plain EMA, which has no gate.
    pub gate: Option<GateDecision>,
    pub folds: usize,
}

/// Statistics of one completed training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss_mean: f64,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
    pub clean_recall: Vec<f64>,
    /// `r_k`: robust recall on this epoch's adversarial training batches.
    pub robust_recall: Vec<f64>,
    pub cfps: Vec<f64>,
    /// Margins used by this epoch's attacks.
    pub epsilons_used: Vec<f64>,
    /// Margins after this epoch's update.
    pub epsilons: Vec<f64>,
    /// Target prior at the start of the epoch (empty in untargeted mode).
    pub prior: Vec<f64>,
    pub averaging: Option<AveragingEvent>,
}

impl EpochRecord {
    pub fn worst_robust_recall(&self) -> f64 {
        self.robust_recall.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// One progress line: epoch, clean acc, robust acc, worst-class robust
    /// acc, min and max margin.
    pub fn progress_line(&self) -> String {
        let (lo, hi) = self
            .epsilons
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &e| (lo.min(e), hi.max(e)));
        format!(
            "epoch {:>4}  clean {:.4}  robust {:.4}  worst-robust {:.4}  eps_k [{:.3}/255, {:.3}/255]",
            self.epoch,
            self.clean_accuracy,
            self.robust_accuracy,
            self.worst_robust_recall(),
            lo * 255.0,
            hi * 255.0
        )
    }
}

pub type TrainHistory = Vec<EpochRecord>;

/// Random-stream domains under the run seed.
const SHUFFLE_STREAM: u64 = 1;
const TARGET_STREAM: u64 = 2;
const ATTACK_STREAM: u64 = 3;
const GATE_STREAM: u64 = 4;

/// Stream id for `(domain, epoch, batch)`.
pub fn stream_id(domain: u64, epoch: usize, batch: usize) -> u64 {
    (domain << 56) | ((epoch as u64 & 0x0fff_ffff) << 28) | (batch as u64 & 0x0fff_ffff)
}

/// Sample order of `epoch`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream_rng(seed, stream_id(SHUFFLE_STREAM, epoch, 0)));
    order
}

/// Random stream of the attack run on `batch` of `epoch`.
pub fn attack_rng(seed: u64, epoch: usize, batch: usize) -> ChaCha8Rng {
    stream_rng(seed, stream_id(ATTACK_STREAM, epoch, batch))
}

fn target_rng(seed: u64, epoch: usize, batch: usize) -> ChaCha8Rng {
    stream_rng(seed, stream_id(TARGET_STREAM, epoch, batch))
}

/// Mutable state carried from epoch to epoch.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ModelParams,
    pub sgd: SgdState,
    pub stats: ClassStats,
    pub averager: Option<WeightAverager>,
}

impl TrainState {
    pub fn new(model: ModelParams, config: &TrainConfig) -> Result<Self> {
        let averager = match config.averaging {
            Averaging::None => None,
            Averaging::Ema { decay, .. } | Averaging::Fawa { decay, .. } => Some(WeightAverager::new(decay)?),
        };
        let k = model.num_classes();
        Ok(TrainState {
            model,
            sgd: SgdState::new(),
            stats: ClassStats::cold(k, config.attack.epsilon),
            averager,
        })
    }
}

fn prior_from(cfps: Option<&[f64]>, kind: PriorKind, k: usize) -> Result<TargetDistribution> {
    match cfps {
        Some(scores) => build_prior(scores, kind),
        None => Ok(TargetDistribution::uniform(k)),
    }
}

/// Rejection sampling per label; a label whose complement carries no prior
/// mass draws uniformly among the other classes instead.
fn reject_with_fallback(labels: &[usize], prior: &TargetDistribution, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let k = prior.num_classes();
    labels
        .iter()
        .map(|&y| {
            let others: f64 = (0..k).filter(|&c| c != y).map(|c| prior.probs[c]).sum();
            if others > 0.0 {
                Ok(sample_targets_rejection(&[y], prior, rng)?[0])
            } else {
                let t = rng.random_range(0..k - 1);
                Ok(if t >= y { t + 1 } else { t })
            }
        })
        .collect()
}

/// Loss of one batch and the gradients of the parameters.
struct BatchStep {
    loss: f64,
    grads: ModelParams,
    adv_preds: Vec<usize>,
    clean_preds: Vec<usize>,
}

fn batch_step(model: &ModelParams, x: &crate::Tensor, x_adv: &crate::Tensor, y: &[usize], loss: LossKind) -> Result<BatchStep> {
    let k = model.num_classes();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true)?;
    let adv = tape.leaf(x_adv.clone(), false)?;
    let adv_logits = model.forward(&mut tape, &bound, adv)?;
    let (total, clean_preds) = match loss {
        LossKind::CrossEntropy => {
            let per = tape.softmax_cross_entropy(adv_logits, y)?;
            (tape.mean(per)?, model.predict(x)?)
        }
        LossKind::Trades { beta } => {
            let clean = tape.leaf(x.clone(), false)?;
            let clean_logits = model.forward(&mut tape, &bound, clean)?;
            let ce = tape.softmax_cross_entropy(clean_logits, y)?;
            let ce = tape.mean(ce)?;
            let kl = tape.kl_divergence(adv_logits, clean_logits)?;
            let kl = tape.mean(kl)?;
            let kl = tape.scale(kl, beta)?;
            let preds = tape.value(clean_logits).values().chunks_exact(k).map(argmax).collect();
            (tape.add(ce, kl)?, preds)
        }
    };
    let adv_preds = tape.value(adv_logits).values().chunks_exact(k).map(argmax).collect();
    let loss_value = tape.value(total).values()[0];
    tape.backward(total)?;
    Ok(BatchStep {
        loss: loss_value,
        grads: model.gradients(&tape, &bound)?,
        adv_preds,
        clean_preds,
    })
}

/// Runs one epoch over `train` and refreshes the class statistics.
///
/// `fold_average` folds every updated parameter vector into the running
/// average (when the state carries one).
pub fn train_epoch(
    state: &mut TrainState,
    train: &Dataset,
    config: &TrainConfig,
    epoch: usize,
    fold_average: bool,
) -> Result<EpochRecord> {
    let k = state.model.num_classes();
    let lr = config.sgd.learning_rate_at(epoch, config.epochs);
    let base_eps = config.attack.epsilon;
    let targeted = config.mode == Mode::FairTat;
    let margins_by_class = if targeted {
        state.stats.epsilons.clone()
    } else {
        vec![base_eps; k]
    };

    let mut prior = prior_from(state.stats.cfps.as_deref(), config.prior_kind, k)?;
    let epoch_prior = if targeted { prior.probs.clone() } else { Vec::new() };
    let mut adv_log = PredLog::empty(k);
    let mut clean_log = PredLog::empty(k);
    let mut loss_sum = 0.0;
    let mut folds = 0;

    let order = epoch_order(train.len(), config.seed, epoch);
    for (b, chunk) in order.chunks(config.batch_size).enumerate() {
        let (x, y) = train.batch(chunk)?;
        let mut arng = attack_rng(config.seed, epoch, b);
        let abort = |e: Error| Error::Training {
            epoch,
            batch: b,
            detail: e.to_string(),
        };
        let adv = if targeted {
            if config.prior_refresh == PriorRefresh::Batch && b > 0 {
                let source = match config.cfps_source {
                    StatsSource::Adversarial => &adv_log,
                    StatsSource::Clean => &clean_log,
                };
                prior = build_prior(&cfps_vector(source), config.prior_kind)?;
            }
            let mut trng = target_rng(config.seed, epoch, b);
            let targets = match config.target_sampling {
                TargetSampling::Renormalize => {
                    TargetSampler::new(&prior, ExclusionFallback::UniformOthers).sample_all(&y, &mut trng)?
                }
                TargetSampling::Reject => reject_with_fallback(&y, &prior, &mut trng)?,
            };
            let margins: Vec<f64> = match config.margin_key {
                MarginKey::GroundTruth => y.iter().map(|&c| margins_by_class[c]).collect(),
                MarginKey::Target => targets.iter().map(|&c| margins_by_class[c]).collect(),
            };
            pgd_targeted_with_margins(&state.model, &x, &y, &targets, &margins, &config.attack, &mut arng)
        } else {
            let margins = vec![base_eps; y.len()];
            pgd_untargeted_with_margins(&state.model, &x, &y, &margins, &config.attack, &mut arng)
        }
        .map_err(abort)?;

        let step = batch_step(&state.model, &x, &adv.perturbed, &y, config.loss).map_err(abort)?;
        if !step.loss.is_finite() {
            return Err(abort(Error::NonFinite {
                context: "training loss".into(),
            }));
        }
        loss_sum += step.loss * y.len() as f64;
        adv_log.extend(&step.adv_preds, &y)?;
        clean_log.extend(&step.clean_preds, &y)?;
        sgd_step(&mut state.model, &step.grads, &mut state.sgd, &config.sgd, lr).map_err(abort)?;
        if fold_average {
            if let Some(avg) = state.averager.as_mut() {
                avg.fold(&state.model)?;
                folds += 1;
            }
        }
    }

    let robust_recall = class_recalls(&adv_log)?;
    let clean_recall = class_recalls(&clean_log)?;
    let cfps = match config.cfps_source {
        StatsSource::Adversarial => cfps_vector(&adv_log),
        StatsSource::Clean => cfps_vector(&clean_log),
    };
    let epsilons = if targeted {
        update_epsilons(&robust_recall, base_eps, config.lambda1)
    } else {
        vec![base_eps; k]
    };
    state.stats = ClassStats {
        robust_accuracy: robust_recall.clone(),
        cfps: Some(cfps.clone()),
        epsilons: epsilons.clone(),
    };

    Ok(EpochRecord {
        epoch,
        learning_rate: lr,
        loss_mean: loss_sum / train.len().max(1) as f64,
        clean_accuracy: if clean_log.is_empty() { 0.0 } else { clean_accuracy(&clean_log)? },
        robust_accuracy: if adv_log.is_empty() { 0.0 } else { clean_accuracy(&adv_log)? },
        clean_recall,
        robust_recall,
        cfps,
        epsilons_used: margins_by_class,
        epsilons,
        prior: epoch_prior,
        averaging: fold_average.then_some(AveragingEvent { gate: None, folds }),
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_model: ModelParams,
    /// Equals `final_model` when no averaging ran.
    pub averaged_model: ModelParams,
    pub history: TrainHistory,
}

/// Trains from scratch on `dataset`; see [`fair_tat_train_with`].
pub fn fair_tat_train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    fair_tat_train_with(config, dataset, |_| {})
}

/// Trains from scratch, calling `on_epoch` after every epoch.
///
/// With FAWA averaging a stratified validation split is held out first and
/// the gate is evaluated on it at the start of every averaging epoch; a
/// rejected gate skips that epoch's folds.
pub fn fair_tat_train_with(
    config: &TrainConfig,
    dataset: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if !dataset.covers_all_classes() {
        return Err(Error::domain("every class must appear in the training data"));
    }
    let dims = ModelDims::new(dataset.dim(), config.hidden.clone(), dataset.num_classes())?;
    let model = ModelParams::init(dims, config.seed)?;

    let (train, valid) = match config.averaging {
        Averaging::Fawa { valid_fraction, .. } => {
            let (t, v) = split(dataset, valid_fraction, config.seed)?;
            (t, Some(v))
        }
        _ => (dataset.clone(), None),
    };

    let mut state = TrainState::new(model, config)?;
    let mut history = Vec::with_capacity(config.epochs);
    let start = config.start_epoch();
    let gate_attack = EvalAttack {
        kind: AttackKind::Pgd,
        config: config.attack.clone(),
    };

    for epoch in 0..config.epochs {
        let averaging_now = start.is_some_and(|s| epoch >= s);
        let gate = match (&config.averaging, &valid) {
            (Averaging::Fawa { threshold, .. }, Some(valid)) if averaging_now => {
                let mut rng = stream_rng(config.seed, stream_id(GATE_STREAM, epoch, 0));
                Some(fawa_gate(&state.model, valid, &gate_attack, *threshold, &mut rng)?)
            }
            _ => None,
        };
        let fold = averaging_now && gate.as_ref().is_none_or(|g| g.accepted);
        let mut record = train_epoch(&mut state, &train, config, epoch, fold)?;
        if averaging_now {
            record.averaging = Some(AveragingEvent {
                folds: record.averaging.map_or(0, |a| a.folds),
                gate,
            });
        }
        on_epoch(&record);
        history.push(record);
    }

    let final_model = state.model;
    let averaged_model = state
        .averager
        .and_then(WeightAverager::into_average)
        .unwrap_or_else(|| final_model.clone());
    Ok(TrainOutcome {
        final_model,
        averaged_model,
        history,
    })
}
