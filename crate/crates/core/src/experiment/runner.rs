use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::{DatasetConfig, DatasetSource, EvalConfig, ExperimentConfig};
use crate::attacks::{AttackConfig, EvalAttack};
use crate::data::{corrupt, load_cifar10, make_blobs, make_three_class, stratified_split, CifarSplit, CorruptionKind, Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::metrics::{cfps_vector, class_accuracies, class_recalls, clean_accuracy, predict_log, robust_accuracy, worst_class_summary, PredLog, WorstClass};
use crate::model::{Checkpoint, ModelParams};
use crate::sampler::stream_rng;
use crate::trainer::{fair_tat_train_with, stream_id, EpochRecord, Mode, TrainHistory};

/// Largest absolute difference `verify` tolerates between a reported and a
/// recomputed number.
pub const VERIFY_TOLERANCE: f64 = 1e-9;

const EVAL_STREAM: u64 = 5;
const TEST_SPLIT_SALT: u64 = 0x7465_7374;

/// Accuracy tables of one model on one input distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTable {
    pub overall: f64,
    pub recall: Vec<f64>,
    /// `(TP + TN) / N` per class.
    pub class_accuracy: Vec<f64>,
    pub cfps: Vec<f64>,
    pub worst_recall: WorstClass,
    pub worst_class_accuracy: WorstClass,
}

impl ClassTable {
    pub fn from_log(log: &PredLog) -> Result<Self> {
        let recall = class_recalls(log)?;
        let class_accuracy = class_accuracies(log)?;
        Ok(ClassTable {
            overall: clean_accuracy(log)?,
            worst_recall: worst_class_summary(&recall)?,
            worst_class_accuracy: worst_class_summary(&class_accuracy)?,
            cfps: cfps_vector(log),
            recall,
            class_accuracy,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub attack: String,
    pub label: String,
    pub config: AttackConfig,
    pub table: ClassTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionResult {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub intensity: f64,
    pub overall: f64,
    pub recall: Vec<f64>,
    pub min_class: f64,
}

/// One row of the minimum-class-accuracy table: per corruption kind, the
/// lowest class recall after averaging over severities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSummary {
    pub kind: CorruptionKind,
    pub severities: Vec<u8>,
    pub mean_recall: Vec<f64>,
    pub min_class: f64,
    pub argmin: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    /// Checkpoint path relative to the report directory.
    pub checkpoint: String,
    pub checksum: String,
    pub clean: ClassTable,
    pub robust: Vec<AttackResult>,
    pub corruption: Vec<CorruptionResult>,
    pub corruption_summary: Vec<CorruptionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum RunStatus {
    Ok,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub mode: Mode,
    pub status: RunStatus,
    pub train_size: usize,
    pub test_size: usize,
    /// Per-epoch statistics, including the margin trajectories.
    pub history: TrainHistory,
    /// `final` then `averaged`.
    pub models: Vec<ModelReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub seed: u64,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// Resolved configuration, one `key = value` line per setting.
    pub config: String,
    pub runs: Vec<RunReport>,
    /// Wall-clock figures; the only part of a report that varies between
    /// identical runs.
    pub timings: Vec<RunTiming>,
}

impl ExperimentReport {
    pub fn succeeded(&self) -> bool {
        self.runs.iter().all(|r| r.status == RunStatus::Ok)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The report JSON with the timings removed.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Value::Object(map) = &mut value {
            map.remove("timings");
        }
        Ok(serde_json::to_string_pretty(&value)?)
    }
}

/// Train and test data of one seed.
pub fn load_data(config: &DatasetConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let generated = match &config.source {
        DatasetSource::ThreeClass {
            n_per_class,
            separation_hard,
            separation_easy,
            noise,
        } => make_three_class(*n_per_class, *separation_hard, *separation_easy, *noise, seed)?,
        DatasetSource::Blobs {
            num_classes,
            n_per_class,
            dim,
            center_spread,
            noise,
        } => make_blobs(*num_classes, *n_per_class, *dim, *center_spread, *noise, seed)?,
        DatasetSource::Cifar10 {
            path,
            train_per_class,
            test_per_class,
        } => {
            let train = load_cifar10(path, CifarSplit::Train, *train_per_class, seed)?;
            let test = load_cifar10(path, CifarSplit::Test, *test_per_class, seed)?;
            return Ok((train.with_split(SplitTag::Train), test.with_split(SplitTag::Test)));
        }
    };
    let (train, test) = stratified_split(&generated, config.test_fraction, seed ^ TEST_SPLIT_SALT)?;
    Ok((train.with_split(SplitTag::Train), test.with_split(SplitTag::Test)))
}

fn attack_label(attack: &EvalAttack) -> String {
    let kind = match attack.kind {
        crate::attacks::AttackKind::Fgsm => "fgsm",
        crate::attacks::AttackKind::Pgd => "pgd",
    };
    format!("{kind}@{:.4}/255", attack.config.epsilon * 255.0)
}

/// Shared by every severity of a kind, so a severity sweep perturbs the same
/// random draws with growing strength.
fn corruption_seed(seed: u64, kind: CorruptionKind) -> u64 {
    let k = crate::data::IMPLEMENTED_CORRUPTIONS.iter().position(|&c| c == kind).unwrap_or(0) as u64;
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (k + 1)
}

/// Evaluates `model` on `test`: clean, every attack and every corruption.
///
/// Randomness is keyed on `seed` and the attack or corruption only, so two
/// models of the same run see identical random starts and corruptions.
pub fn evaluate_model(
    model: &ModelParams,
    name: &str,
    checkpoint: &str,
    test: &Dataset,
    eval: &EvalConfig,
    seed: u64,
) -> Result<ModelReport> {
    if model.dims().input_dim != test.dim() || model.num_classes() != test.num_classes() {
        return Err(Error::contract(format!(
            "model expects {} inputs and {} classes; the data has {} and {}",
            model.dims().input_dim,
            model.num_classes(),
            test.dim(),
            test.num_classes()
        )));
    }
    let clean = ClassTable::from_log(&predict_log(model, test, eval.batch_size)?)?;
    let mut robust = Vec::with_capacity(eval.attacks.len());
    for (i, attack) in eval.attacks.iter().enumerate() {
        let mut rng = stream_rng(seed, stream_id(EVAL_STREAM, i, 0));
        let (_, log) = robust_accuracy(model, attack, test, eval.batch_size, &mut rng)?;
        robust.push(AttackResult {
            attack: attack.name(),
            label: attack_label(attack),
            config: attack.config.clone(),
            table: ClassTable::from_log(&log)?,
        });
    }
    let mut corruption = Vec::with_capacity(eval.corruptions.len());
    for spec in &eval.corruptions {
        let data = corrupt(test, *spec, corruption_seed(seed, spec.kind))?;
        let log = predict_log(model, &data, eval.batch_size)?;
        let recall = class_recalls(&log)?;
        corruption.push(CorruptionResult {
            kind: spec.kind,
            severity: spec.severity,
            intensity: spec.kind.intensity(spec.severity)?,
            overall: clean_accuracy(&log)?,
            min_class: worst_class_summary(&recall)?.min,
            recall,
        });
    }
    Ok(ModelReport {
        name: name.to_string(),
        checkpoint: checkpoint.to_string(),
        checksum: format!("{:016x}", model.checksum()),
        clean,
        robust,
        corruption_summary: summarize_corruption(&corruption)?,
        corruption,
    })
}

pub fn summarize_corruption(rows: &[CorruptionResult]) -> Result<Vec<CorruptionSummary>> {
    let mut kinds: Vec<CorruptionKind> = Vec::new();
    for r in rows {
        if !kinds.contains(&r.kind) {
            kinds.push(r.kind);
        }
    }
    kinds
        .into_iter()
        .map(|kind| {
            let of_kind: Vec<&CorruptionResult> = rows.iter().filter(|r| r.kind == kind).collect();
            let k = of_kind[0].recall.len();
            let n = of_kind.len() as f64;
            let mean_recall: Vec<f64> = (0..k).map(|c| of_kind.iter().map(|r| r.recall[c]).sum::<f64>() / n).collect();
            let worst = worst_class_summary(&mean_recall)?;
            Ok(CorruptionSummary {
                kind,
                severities: of_kind.iter().map(|r| r.severity).collect(),
                mean_recall,
                min_class: worst.min,
                argmin: worst.argmin,
            })
        })
        .collect()
}

/// Directory a run writes to: the configured output directory, then one
/// subdirectory per training mode so paired runs sit side by side.
pub fn run_dir(config: &ExperimentConfig) -> PathBuf {
    let mode = match config.train.mode {
        Mode::FairTat => "fair_tat",
        Mode::UntargetedAt => "untargeted_at",
    };
    config.output_dir.join(mode)
}

fn checkpoint_name(seed: u64, model: &str) -> String {
    format!("checkpoints/seed{seed}_{model}.ckpt")
}

fn run_one(
    config: &ExperimentConfig,
    seed: u64,
    dir: &Path,
    on_epoch: &mut impl FnMut(u64, &EpochRecord),
    timing: &mut RunTiming,
) -> (RunReport, Result<()>) {
    let mut report = RunReport {
        seed,
        mode: config.train.mode,
        status: RunStatus::Ok,
        train_size: 0,
        test_size: 0,
        history: Vec::new(),
        models: Vec::new(),
    };
    let result: Result<()> = (|| {
        let (train, test) = load_data(&config.dataset, seed)?;
        report.train_size = train.len();
        report.test_size = test.len();
        let tc = config.train_for(seed);
        let started = Instant::now();
        let mut history = Vec::new();
        let outcome = fair_tat_train_with(&tc, &train, |r| {
            on_epoch(seed, r);
            history.push(r.clone());
        });
        timing.train_seconds = started.elapsed().as_secs_f64();
        report.history = history;
        let outcome = outcome?;

        let started = Instant::now();
        for (name, model) in [("final", &outcome.final_model), ("averaged", &outcome.averaged_model)] {
            let rel = checkpoint_name(seed, name);
            Checkpoint {
                seed,
                epoch: tc.epochs as u64,
                params: model.clone(),
            }
            .save(&dir.join(&rel))?;
            report.models.push(evaluate_model(model, name, &rel, &test, &config.eval, seed)?);
        }
        timing.eval_seconds = started.elapsed().as_secs_f64();
        Ok(())
    })();
    if let Err(e) = &result {
        report.status = RunStatus::Failed { error: e.to_string() };
    }
    (report, result)
}

/// Runs every seed of `config` in order and writes the report files into
/// [`run_dir`]. A failing seed is recorded in the report and the remaining
/// seeds still run.
pub fn run_experiment(config: &ExperimentConfig, mut on_epoch: impl FnMut(u64, &EpochRecord)) -> Result<ExperimentReport> {
    let dir = run_dir(config);
    std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(&dir, e))?;
    let mut report = ExperimentReport {
        config: config.resolved_text(),
        runs: Vec::with_capacity(config.seeds.len()),
        timings: Vec::with_capacity(config.seeds.len()),
    };
    for &seed in &config.seeds {
        let mut timing = RunTiming {
            seed,
            train_seconds: 0.0,
            eval_seconds: 0.0,
        };
        let (run, _) = run_one(config, seed, &dir, &mut on_epoch, &mut timing);
        report.runs.push(run);
        report.timings.push(timing);
    }
    write_outputs(&report, &dir)?;
    Ok(report)
}

/// `class,cfps` rows sorted by class id.
pub fn report_cfps_bars(log: &PredLog) -> Result<String> {
    if log.is_empty() {
        return Err(Error::domain("false-positive bars of an empty prediction log"));
    }
    Ok(cfps_csv(&cfps_vector(log)))
}

fn cfps_csv(scores: &[f64]) -> String {
    let mut out = String::from("class,cfps\n");
    for (c, v) in scores.iter().enumerate() {
        let _ = writeln!(out, "{c},{v}");
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `per_class.csv`, `cfps.csv`, `cfps_all.csv`,
/// `corruption.csv` and `corruption_min.csv` into `dir`.
///
/// `cfps.csv` holds the attacked false-positive scores of the first
/// successful run's final model under the first attack; `cfps_all.csv` holds
/// every vector.
pub fn write_outputs(report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("report.json"), &report.to_json()?)?;

    let mut per_class = String::from("seed,model,evaluation,class,recall,class_accuracy,cfps\n");
    let mut cfps_all = String::from("seed,model,evaluation,class,cfps\n");
    let mut corruption = String::from("seed,model,kind,severity,intensity,class,accuracy\n");
    let mut corruption_min = String::from("seed,model,kind,min_class_accuracy,argmin\n");
    for run in &report.runs {
        for m in &run.models {
            let tables = std::iter::once(("clean", &m.clean)).chain(m.robust.iter().map(|a| (a.label.as_str(), &a.table)));
            for (label, t) in tables {
                for c in 0..t.recall.len() {
                    let _ = writeln!(
                        per_class,
                        "{},{},{label},{c},{},{},{}",
                        run.seed, m.name, t.recall[c], t.class_accuracy[c], t.cfps[c]
                    );
                    let _ = writeln!(cfps_all, "{},{},{label},{c},{}", run.seed, m.name, t.cfps[c]);
                }
            }
            for row in &m.corruption {
                for (c, acc) in row.recall.iter().enumerate() {
                    let _ = writeln!(
                        corruption,
                        "{},{},{},{},{},{c},{acc}",
                        run.seed, m.name, row.kind, row.severity, row.intensity
                    );
                }
            }
            for s in &m.corruption_summary {
                let _ = writeln!(corruption_min, "{},{},{},{},{}", run.seed, m.name, s.kind, s.min_class, s.argmin);
            }
        }
    }
    write_file(&dir.join("per_class.csv"), &per_class)?;
    write_file(&dir.join("cfps_all.csv"), &cfps_all)?;
    write_file(&dir.join("corruption.csv"), &corruption)?;
    write_file(&dir.join("corruption_min.csv"), &corruption_min)?;

    let bars = report
        .runs
        .iter()
        .find_map(|r| r.models.first())
        .map(|m| m.robust.first().map_or(&m.clean, |a| &a.table).cfps.clone());
    write_file(&dir.join("cfps.csv"), &cfps_csv(&bars.unwrap_or_default()))
}

/// Loads a checkpoint and evaluates it on the test data that `config`
/// produces for the checkpoint's seed.
pub fn eval_checkpoint(checkpoint: &Path, config: &ExperimentConfig) -> Result<ModelReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (_, test) = load_data(&config.dataset, ckpt.seed)?;
    evaluate_model(
        &ckpt.params,
        "checkpoint",
        &checkpoint.display().to_string(),
        &test,
        &config.eval,
        ckpt.seed,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub runs: usize,
    pub numbers_checked: usize,
    pub max_abs_difference: f64,
}

/// Recomputes every number of the report at `path`: the training history by
/// replaying the run, the checkpoints against the replayed parameters, and
/// every evaluation table from the checkpoints on disk.
pub fn verify_report(path: &Path) -> Result<VerifySummary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: ExperimentReport = serde_json::from_str(&text)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let config = ExperimentConfig::parse(&report.config)?;
    let mut summary = VerifySummary {
        runs: 0,
        numbers_checked: 0,
        max_abs_difference: 0.0,
    };
    for (i, run) in report.runs.iter().enumerate() {
        if run.status != RunStatus::Ok {
            continue;
        }
        let (train, test) = load_data(&config.dataset, run.seed)?;
        let tc = config.train_for(run.seed);
        let outcome = fair_tat_train_with(&tc, &train, |_| {})?;
        compare(
            &serde_json::to_value(&run.history)?,
            &serde_json::to_value(&outcome.history)?,
            &format!("runs[{i}].history"),
            &mut summary,
        )?;
        for (j, reported) in run.models.iter().enumerate() {
            let ckpt = Checkpoint::load(&dir.join(&reported.checkpoint))?;
            let replayed = if reported.name == "final" {
                &outcome.final_model
            } else {
                &outcome.averaged_model
            };
            if &ckpt.params != replayed {
                return Err(Error::Verify {
                    path: format!("runs[{i}].models[{j}].checkpoint"),
                    reported: reported.checkpoint.clone(),
                    recomputed: format!("replayed parameters with checksum {:016x}", replayed.checksum()),
                });
            }
            let recomputed = evaluate_model(&ckpt.params, &reported.name, &reported.checkpoint, &test, &config.eval, run.seed)?;
            compare(
                &serde_json::to_value(reported)?,
                &serde_json::to_value(&recomputed)?,
                &format!("runs[{i}].models[{j}]"),
                &mut summary,
            )?;
        }
        summary.runs += 1;
    }
    Ok(summary)
}

fn compare(reported: &Value, recomputed: &Value, path: &str, summary: &mut VerifySummary) -> Result<()> {
    let mismatch = || Error::Verify {
        path: path.to_string(),
        reported: reported.to_string(),
        recomputed: recomputed.to_string(),
    };
    match (reported, recomputed) {
        (Value::Number(a), Value::Number(b)) => {
            let (a, b) = (a.as_f64().ok_or_else(mismatch)?, b.as_f64().ok_or_else(mismatch)?);
            let diff = (a - b).abs();
            if !(diff <= VERIFY_TOLERANCE) {
                return Err(mismatch());
            }
            summary.numbers_checked += 1;
            summary.max_abs_difference = summary.max_abs_difference.max(diff);
            Ok(())
        }
        (Value::Array(a), Value::Array(b)) => {
            if a.len() != b.len() {
                return Err(mismatch());
            }
            a.iter()
                .zip(b)
                .enumerate()
                .try_for_each(|(i, (x, y))| compare(x, y, &format!("{path}[{i}]"), summary))
        }
        (Value::Object(a), Value::Object(b)) => {
            if a.len() != b.len() {
                return Err(mismatch());
            }
            a.iter().try_for_each(|(k, x)| match b.get(k) {
                Some(y) => compare(x, y, &format!("{path}.{k}"), summary),
                None => Err(mismatch()),
            })
        }
        (a, b) if a == b => Ok(()),
        _ => Err(mismatch()),
    }
}
