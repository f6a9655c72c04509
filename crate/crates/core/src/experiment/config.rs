//! Line-oriented `section.key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are
//! comma-separated, and real numbers accept fractions such as `8/255`.
//! Every key has a default; [`ExperimentConfig::resolved_text`] prints the
//! full resolved configuration in a form that parses back to the same value.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, AttackKind, EvalAttack};
use crate::data::{CorruptionKind, CorruptionSpec};
use crate::error::{Error, Result};
use crate::model::SgdConfig;
use crate::sampler::PriorKind;
use crate::trainer::{Averaging, LossKind, MarginKey, Mode, PriorRefresh, StatsSource, TargetSampling, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetSource {
    ThreeClass {
        n_per_class: usize,
        separation_hard: f64,
        separation_easy: f64,
        noise: f64,
    },
    Blobs {
        num_classes: usize,
        n_per_class: usize,
        dim: usize,
        center_spread: f64,
        noise: f64,
    },
    /// Binary batches under `path`; `train_per_class` and `test_per_class`
    /// draw class-balanced subsets (all samples when absent).
    Cifar10 {
        path: PathBuf,
        train_per_class: Option<usize>,
        test_per_class: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Held-out test fraction for generated data.
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub attacks: Vec<EvalAttack>,
    pub corruptions: Vec<CorruptionSpec>,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    /// `seed` inside is replaced by each entry of `seeds`.
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

const KEYS: &[&str] = &[
    "run.seeds",
    "run.mode",
    "output.dir",
    "dataset.kind",
    "dataset.n_per_class",
    "dataset.separation_hard",
    "dataset.separation_easy",
    "dataset.noise",
    "dataset.num_classes",
    "dataset.dim",
    "dataset.center_spread",
    "dataset.path",
    "dataset.train_per_class",
    "dataset.test_per_class",
    "dataset.test_fraction",
    "train.epochs",
    "train.batch_size",
    "train.hidden",
    "train.learning_rate",
    "train.momentum",
    "train.weight_decay",
    "train.lr_schedule",
    "train.lambda1",
    "train.prior",
    "train.prior_refresh",
    "train.target_sampling",
    "train.margin_key",
    "train.cfps_source",
    "train.loss",
    "train.trades_beta",
    "train.averaging",
    "train.averaging_decay",
    "train.averaging_start",
    "train.fawa_threshold",
    "train.fawa_valid_fraction",
    "attack.epsilon",
    "attack.step_size",
    "attack.num_steps",
    "attack.random_start",
    "attack.ascend_target_loss",
    "eval.attack",
    "eval.epsilons",
    "eval.step_size",
    "eval.num_steps",
    "eval.random_start",
    "eval.batch_size",
    "eval.corruptions",
    "eval.severities",
];

/// Raw `key -> (line, value)` entries; line 0 marks a command-line override.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, (usize, String)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(config_error(line_no, line, "expected `section.key = value`"));
            };
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(config_error(line_no, key, "unknown key"));
            }
            if let Some((first, _)) = raw.entries.get(key) {
                return Err(config_error(line_no, key, format!("duplicate key, first set on line {first}")));
            }
            raw.entries.insert(key.to_string(), (line_no, value.trim().to_string()));
        }
        Ok(raw)
    }

    /// Sets `key` regardless of what the file said.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(config_error(0, key, "unknown key"));
        }
        self.entries.insert(key.to_string(), (0, value.into()));
        Ok(())
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(default),
            Some((line, v)) => v.parse().map_err(|e| config_error(*line, key, format!("`{v}`: {e}"))),
        }
    }

    fn real(&self, key: &str, default: f64) -> Result<f64> {
        match self.entries.get(key) {
            None => Ok(default),
            Some((line, v)) => parse_real(v).map_err(|m| config_error(*line, key, m)),
        }
    }

    fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((_, v)) if v == "all" => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|e| config_error(*line, key, format!("`{v}`: {e}"))),
        }
    }

    fn list<T>(&self, key: &str, default: Vec<T>, item: impl Fn(&str) -> std::result::Result<T, String>) -> Result<Vec<T>> {
        match self.entries.get(key) {
            None => Ok(default),
            Some((line, v)) => {
                if v.is_empty() || v == "none" {
                    return Ok(Vec::new());
                }
                v.split(',')
                    .map(|s| item(s.trim()).map_err(|m| config_error(*line, key, m)))
                    .collect()
            }
        }
    }

    fn line(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |(l, _)| *l)
    }

    fn choice<T: Copy>(&self, key: &str, default: T, options: &[(&str, T)]) -> Result<T> {
        match self.entries.get(key) {
            None => Ok(default),
            Some((line, v)) => options.iter().find(|(name, _)| name == v).map(|(_, t)| *t).ok_or_else(|| {
                let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                config_error(*line, key, format!("`{v}` is not one of {}", names.join(", ")))
            }),
        }
    }
}

fn config_error(line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

/// Parses a real number or a fraction `a/b`.
pub fn parse_real(text: &str) -> std::result::Result<f64, String> {
    let value = match text.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|e| format!("`{text}`: {e}"))?;
            let b: f64 = b.trim().parse().map_err(|e| format!("`{text}`: {e}"))?;
            if b == 0.0 {
                return Err(format!("`{text}`: zero denominator"));
            }
            a / b
        }
        None => text.parse().map_err(|e| format!("`{text}`: {e}"))?,
    };
    if value.is_finite() {
        Ok(value)
    } else {
        Err(format!("`{text}` is not finite"))
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_raw(&RawConfig::parse(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let seeds = raw.list("run.seeds", vec![0], |s| s.parse::<u64>().map_err(|e| format!("`{s}`: {e}")))?;
        if seeds.is_empty() {
            return Err(config_error(raw.line("run.seeds"), "run.seeds", "at least one seed is required"));
        }
        let mode = raw.choice(
            "run.mode",
            Mode::FairTat,
            &[("fair_tat", Mode::FairTat), ("untargeted_at", Mode::UntargetedAt)],
        )?;
        let output_dir: PathBuf = raw.get("output.dir", PathBuf::from("runs"))?;

        #[derive(Clone, Copy)]
        enum Kind {
            Three,
            Blobs,
            Cifar,
        }
        let kind = raw.choice(
            "dataset.kind",
            Kind::Three,
            &[("three_class", Kind::Three), ("blobs", Kind::Blobs), ("cifar10", Kind::Cifar)],
        )?;
        let source = match kind {
            Kind::Three => DatasetSource::ThreeClass {
                n_per_class: raw.get("dataset.n_per_class", 200)?,
                separation_hard: raw.real("dataset.separation_hard", 1.0)?,
                separation_easy: raw.real("dataset.separation_easy", 3.0)?,
                noise: raw.real("dataset.noise", 1.0)?,
            },
            Kind::Blobs => DatasetSource::Blobs {
                num_classes: raw.get("dataset.num_classes", 10)?,
                n_per_class: raw.get("dataset.n_per_class", 200)?,
                dim: raw.get("dataset.dim", 16)?,
                center_spread: raw.real("dataset.center_spread", 1.0)?,
                noise: raw.real("dataset.noise", 1.0)?,
            },
            Kind::Cifar => {
                let path: PathBuf = raw.get("dataset.path", PathBuf::new())?;
                if path.as_os_str().is_empty() {
                    return Err(config_error(raw.line("dataset.kind"), "dataset.path", "cifar10 needs a data directory"));
                }
                DatasetSource::Cifar10 {
                    path,
                    train_per_class: raw.opt("dataset.train_per_class")?,
                    test_per_class: raw.opt("dataset.test_per_class")?,
                }
            }
        };
        let dataset = DatasetConfig {
            source,
            test_fraction: raw.real("dataset.test_fraction", 0.25)?,
        };
        if !(dataset.test_fraction > 0.0 && dataset.test_fraction < 1.0) {
            return Err(config_error(raw.line("dataset.test_fraction"), "dataset.test_fraction", "must lie in (0, 1)"));
        }

        let defaults = TrainConfig::default();
        let epochs: usize = raw.get("train.epochs", defaults.epochs)?;
        let sgd = SgdConfig {
            learning_rate: raw.real("train.learning_rate", defaults.sgd.learning_rate)?,
            momentum: raw.real("train.momentum", defaults.sgd.momentum)?,
            weight_decay: raw.real("train.weight_decay", defaults.sgd.weight_decay)?,
            lr_schedule: raw.list("train.lr_schedule", defaults.sgd.lr_schedule.clone(), |s| {
                let (f, d) = s.split_once(':').ok_or_else(|| format!("`{s}`: expected fraction:divisor"))?;
                Ok((parse_real(f)?, parse_real(d)?))
            })?,
        };
        let attack = AttackConfig {
            epsilon: raw.real("attack.epsilon", defaults.attack.epsilon)?,
            step_size: raw.real("attack.step_size", defaults.attack.step_size)?,
            num_steps: raw.get("attack.num_steps", defaults.attack.num_steps)?,
            random_start: raw.get("attack.random_start", defaults.attack.random_start)?,
            clamp: defaults.attack.clamp,
            ascend_target_loss: raw.get("attack.ascend_target_loss", false)?,
        };
        let loss = match raw.choice("train.loss", false, &[("cross_entropy", false), ("trades", true)])? {
            false => LossKind::CrossEntropy,
            true => LossKind::Trades {
                beta: raw.real("train.trades_beta", 2.0)?,
            },
        };
        let decay = raw.real("train.averaging_decay", 0.999)?;
        let start_epoch = raw.get("train.averaging_start", epochs / 2)?;
        let averaging = match raw.choice("train.averaging", 0, &[("none", 0), ("ema", 1), ("fawa", 2)])? {
            0 => Averaging::None,
            1 => Averaging::Ema { decay, start_epoch },
            _ => Averaging::Fawa {
                decay,
                start_epoch,
                threshold: raw.real("train.fawa_threshold", 0.2)?,
                valid_fraction: raw.real("train.fawa_valid_fraction", 0.02)?,
            },
        };
        let train = TrainConfig {
            epochs,
            batch_size: raw.get("train.batch_size", defaults.batch_size)?,
            hidden: raw.list("train.hidden", defaults.hidden.clone(), |s| {
                s.parse::<usize>().map_err(|e| format!("`{s}`: {e}"))
            })?,
            sgd,
            attack,
            lambda1: raw.real("train.lambda1", defaults.lambda1)?,
            prior_kind: raw.choice(
                "train.prior",
                PriorKind::Cfps,
                &[("cfps", PriorKind::Cfps), ("uniform", PriorKind::Uniform)],
            )?,
            prior_refresh: raw.choice(
                "train.prior_refresh",
                PriorRefresh::Epoch,
                &[("epoch", PriorRefresh::Epoch), ("batch", PriorRefresh::Batch)],
            )?,
            target_sampling: raw.choice(
                "train.target_sampling",
                TargetSampling::Renormalize,
                &[("renormalize", TargetSampling::Renormalize), ("reject", TargetSampling::Reject)],
            )?,
            margin_key: raw.choice(
                "train.margin_key",
                MarginKey::GroundTruth,
                &[("ground_truth", MarginKey::GroundTruth), ("target", MarginKey::Target)],
            )?,
            cfps_source: raw.choice(
                "train.cfps_source",
                StatsSource::Adversarial,
                &[("adversarial", StatsSource::Adversarial), ("clean", StatsSource::Clean)],
            )?,
            averaging,
            loss,
            mode,
            seed: seeds[0],
        };
        train.validate().map_err(|e| config_error(0, "train", e.to_string()))?;

        let eval_kind = raw.choice("eval.attack", AttackKind::Pgd, &[("pgd", AttackKind::Pgd), ("fgsm", AttackKind::Fgsm)])?;
        let epsilons = raw.list("eval.epsilons", vec![train.attack.epsilon], parse_real)?;
        if epsilons.is_empty() {
            return Err(config_error(raw.line("eval.epsilons"), "eval.epsilons", "at least one evaluation epsilon is required"));
        }
        let step_override = match raw.entries.get("eval.step_size") {
            None => None,
            Some((line, v)) => Some(parse_real(v).map_err(|m| config_error(*line, "eval.step_size", m))?),
        };
        let num_steps: usize = raw.get("eval.num_steps", train.attack.num_steps)?;
        let random_start: bool = raw.get("eval.random_start", true)?;
        let mut attacks = Vec::with_capacity(epsilons.len());
        for eps in epsilons {
            let config = match eval_kind {
                AttackKind::Fgsm => AttackConfig::fgsm(eps),
                AttackKind::Pgd => AttackConfig {
                    epsilon: eps,
                    step_size: step_override.unwrap_or(eps / 4.0),
                    num_steps,
                    random_start,
                    ..AttackConfig::default()
                },
            };
            config.validate().map_err(|e| config_error(raw.line("eval.epsilons"), "eval.epsilons", e.to_string()))?;
            attacks.push(EvalAttack { kind: eval_kind, config });
        }

        let kinds = raw.list("eval.corruptions", vec![CorruptionKind::GaussianNoise], |s| {
            s.parse::<CorruptionKind>().map_err(|e| e.to_string())
        })?;
        let severities = raw.list("eval.severities", vec![1, 2, 3, 4, 5], |s| {
            s.parse::<u8>().map_err(|e| format!("`{s}`: {e}"))
        })?;
        let mut corruptions = Vec::new();
        for kind in kinds {
            for &severity in &severities {
                corruptions.push(
                    CorruptionSpec::new(kind, severity)
                        .map_err(|e| config_error(raw.line("eval.severities"), "eval.severities", e.to_string()))?,
                );
            }
        }
        let eval = EvalConfig {
            attacks,
            corruptions,
            batch_size: raw.get("eval.batch_size", 256)?,
        };
        if eval.batch_size == 0 {
            return Err(config_error(raw.line("eval.batch_size"), "eval.batch_size", "must be positive"));
        }

        Ok(ExperimentConfig {
            seeds,
            output_dir,
            dataset,
            train,
            eval,
        })
    }

    /// Training configuration for one seed.
    pub fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    /// Every key with its resolved value, one `key = value` line each.
    pub fn resolved_text(&self) -> String {
        let mut out = Vec::new();
        let mut put = |k: &str, v: String| out.push(format!("{k} = {v}"));
        let join = |v: Vec<String>| if v.is_empty() { "none".to_string() } else { v.join(", ") };
        let t = &self.train;
        put("run.seeds", join(self.seeds.iter().map(u64::to_string).collect()));
        put("run.mode", match t.mode {
            Mode::FairTat => "fair_tat",
            Mode::UntargetedAt => "untargeted_at",
        }
        .into());
        put("output.dir", self.output_dir.display().to_string());
        match &self.dataset.source {
            DatasetSource::ThreeClass {
                n_per_class,
                separation_hard,
                separation_easy,
                noise,
            } => {
                put("dataset.kind", "three_class".into());
                put("dataset.n_per_class", n_per_class.to_string());
                put("dataset.separation_hard", separation_hard.to_string());
                put("dataset.separation_easy", separation_easy.to_string());
                put("dataset.noise", noise.to_string());
            }
            DatasetSource::Blobs {
                num_classes,
                n_per_class,
                dim,
                center_spread,
                noise,
            } => {
                put("dataset.kind", "blobs".into());
                put("dataset.num_classes", num_classes.to_string());
                put("dataset.n_per_class", n_per_class.to_string());
                put("dataset.dim", dim.to_string());
                put("dataset.center_spread", center_spread.to_string());
                put("dataset.noise", noise.to_string());
            }
            DatasetSource::Cifar10 {
                path,
                train_per_class,
                test_per_class,
            } => {
                let opt = |o: &Option<usize>| o.map_or("all".to_string(), |n| n.to_string());
                put("dataset.kind", "cifar10".into());
                put("dataset.path", path.display().to_string());
                put("dataset.train_per_class", opt(train_per_class));
                put("dataset.test_per_class", opt(test_per_class));
            }
        }
        put("dataset.test_fraction", self.dataset.test_fraction.to_string());
        put("train.epochs", t.epochs.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.hidden", join(t.hidden.iter().map(usize::to_string).collect()));
        put("train.learning_rate", t.sgd.learning_rate.to_string());
        put("train.momentum", t.sgd.momentum.to_string());
        put("train.weight_decay", t.sgd.weight_decay.to_string());
        put("train.lr_schedule", join(t.sgd.lr_schedule.iter().map(|(f, d)| format!("{f}:{d}")).collect()));
        put("train.lambda1", t.lambda1.to_string());
        put("train.prior", match t.prior_kind {
            PriorKind::Cfps => "cfps",
            PriorKind::Uniform => "uniform",
        }
        .into());
        put("train.prior_refresh", match t.prior_refresh {
            PriorRefresh::Epoch => "epoch",
            PriorRefresh::Batch => "batch",
        }
        .into());
        put("train.target_sampling", match t.target_sampling {
            TargetSampling::Renormalize => "renormalize",
            TargetSampling::Reject => "reject",
        }
        .into());
        put("train.margin_key", match t.margin_key {
            MarginKey::GroundTruth => "ground_truth",
            MarginKey::Target => "target",
        }
        .into());
        put("train.cfps_source", match t.cfps_source {
            StatsSource::Adversarial => "adversarial",
            StatsSource::Clean => "clean",
        }
        .into());
        match t.loss {
            LossKind::CrossEntropy => put("train.loss", "cross_entropy".into()),
            LossKind::Trades { beta } => {
                put("train.loss", "trades".into());
                put("train.trades_beta", beta.to_string());
            }
        }
        match &t.averaging {
            Averaging::None => put("train.averaging", "none".into()),
            Averaging::Ema { decay, start_epoch } => {
                put("train.averaging", "ema".into());
                put("train.averaging_decay", decay.to_string());
                put("train.averaging_start", start_epoch.to_string());
            }
            Averaging::Fawa {
                decay,
                start_epoch,
                threshold,
                valid_fraction,
            } => {
                put("train.averaging", "fawa".into());
                put("train.averaging_decay", decay.to_string());
                put("train.averaging_start", start_epoch.to_string());
                put("train.fawa_threshold", threshold.to_string());
                put("train.fawa_valid_fraction", valid_fraction.to_string());
            }
        }
        put("attack.epsilon", t.attack.epsilon.to_string());
        put("attack.step_size", t.attack.step_size.to_string());
        put("attack.num_steps", t.attack.num_steps.to_string());
        put("attack.random_start", t.attack.random_start.to_string());
        put("attack.ascend_target_loss", t.attack.ascend_target_loss.to_string());
        let first = &self.eval.attacks[0];
        put("eval.attack", match first.kind {
            AttackKind::Pgd => "pgd",
            AttackKind::Fgsm => "fgsm",
        }
        .into());
        put("eval.epsilons", join(self.eval.attacks.iter().map(|a| a.config.epsilon.to_string()).collect()));
        if first.kind == AttackKind::Pgd {
            let steps: Vec<f64> = self.eval.attacks.iter().map(|a| a.config.step_size).collect();
            let default_steps = self.eval.attacks.iter().all(|a| a.config.step_size == a.config.epsilon / 4.0);
            if !default_steps && steps.iter().all(|&s| s == steps[0]) {
                put("eval.step_size", steps[0].to_string());
            }
            put("eval.num_steps", first.config.num_steps.to_string());
            put("eval.random_start", first.config.random_start.to_string());
        }
        put("eval.batch_size", self.eval.batch_size.to_string());
        let mut kinds: Vec<CorruptionKind> = Vec::new();
        let mut severities: Vec<u8> = Vec::new();
        for c in &self.eval.corruptions {
            if !kinds.contains(&c.kind) {
                kinds.push(c.kind);
            }
            if !severities.contains(&c.severity) {
                severities.push(c.severity);
            }
        }
        put("eval.corruptions", join(kinds.iter().map(|k| k.name().to_string()).collect()));
        put("eval.severities", join(severities.iter().map(u8::to_string).collect()));
        out.push(String::new());
        out.join("\n")
    }
}
