//! Accuracy, class-wise accuracy, class recall, class false-positive scores
//! and worst-class summaries over prediction logs.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::EvalAttack;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Predicted and true class for every evaluated sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredLog {
    num_classes: usize,
    preds: Vec<usize>,
    labels: Vec<usize>,
}

impl PredLog {
    pub fn new(num_classes: usize, preds: Vec<usize>, labels: Vec<usize>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::domain("a prediction log needs at least 2 classes"));
        }
        if preds.len() != labels.len() {
            return Err(Error::shape(
                "pred_log",
                format!("{} predictions vs {} labels", preds.len(), labels.len()),
            ));
        }
        if let Some(c) = preds.iter().chain(&labels).find(|&&c| c >= num_classes) {
            return Err(Error::domain(format!("class {c} outside [0, {num_classes})")));
        }
        Ok(PredLog {
            num_classes,
            preds,
            labels,
        })
    }

    pub fn empty(num_classes: usize) -> Self {
        PredLog {
            num_classes,
            preds: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, pred: usize, label: usize) -> Result<()> {
        if pred >= self.num_classes || label >= self.num_classes {
            return Err(Error::domain(format!(
                "record ({pred}, {label}) outside [0, {})",
                self.num_classes
            )));
        }
        self.preds.push(pred);
        self.labels.push(label);
        Ok(())
    }

    pub fn extend(&mut self, preds: &[usize], labels: &[usize]) -> Result<()> {
        if preds.len() != labels.len() {
            return Err(Error::shape("pred_log", "prediction/label length mismatch"));
        }
        preds.iter().zip(labels).try_for_each(|(&p, &l)| self.push(p, l))
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }

    pub fn preds(&self) -> &[usize] {
        &self.preds
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn non_empty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::domain("metric of an empty prediction log"))
        } else {
            Ok(())
        }
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes {
            Err(Error::domain(format!("class {class} outside [0, {})", self.num_classes)))
        } else {
            Ok(())
        }
    }

    /// `confusion[label][pred]` counts.
    pub fn confusion(&self) -> Vec<Vec<usize>> {
        let mut m = vec![vec![0; self.num_classes]; self.num_classes];
        for (&p, &l) in self.preds.iter().zip(&self.labels) {
            m[l][p] += 1;
        }
        m
    }

    pub fn misclassified(&self) -> usize {
        self.preds.iter().zip(&self.labels).filter(|(p, l)| p != l).count()
    }

    /// CSV with header `index,pred,label`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,pred,label\n");
        for (i, (p, l)) in self.preds.iter().zip(&self.labels).enumerate() {
            let _ = writeln!(out, "{i},{p},{l}");
        }
        out
    }

    pub fn from_csv(text: &str, num_classes: usize) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("index,pred,label") {
            return Err(Error::Format("prediction log CSV must start with `index,pred,label`".into()));
        }
        let mut log = PredLog::empty(num_classes);
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<_> = line.split(',').map(str::trim).collect();
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Format(format!("row {}: `{s}` is not a class index", n + 1)))
            };
            match fields.as_slice() {
                [idx, p, l] if parse(idx)? == n => log.push(parse(p)?, parse(l)?)?,
                _ => return Err(Error::Format(format!("row {}: expected `{n},pred,label`", n + 1))),
            }
        }
        Ok(log)
    }
}

/// Fraction of correctly classified samples.
pub fn clean_accuracy(log: &PredLog) -> Result<f64> {
    log.non_empty()?;
    Ok((log.len() - log.misclassified()) as f64 / log.len() as f64)
}

/// `(TP_c + TN_c) / N`: correct decisions about membership in class `c`.
pub fn class_accuracy(log: &PredLog, class: usize) -> Result<f64> {
    log.non_empty()?;
    log.check_class(class)?;
    let hits = log
        .preds
        .iter()
        .zip(&log.labels)
        .filter(|(&p, &l)| (p == class) == (l == class))
        .count();
    Ok(hits as f64 / log.len() as f64)
}

/// Fraction of class-`c` samples predicted as `c`.
pub fn class_recall(log: &PredLog, class: usize) -> Result<f64> {
    log.check_class(class)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (&p, &l) in log.preds.iter().zip(&log.labels) {
        if l == class {
            total += 1;
            hit += usize::from(p == class);
        }
    }
    if total == 0 {
        return Err(Error::domain(format!("class {class} has no samples in the log")));
    }
    Ok(hit as f64 / total as f64)
}

pub fn class_accuracies(log: &PredLog) -> Result<Vec<f64>> {
    (0..log.num_classes).map(|c| class_accuracy(log, c)).collect()
}

pub fn class_recalls(log: &PredLog) -> Result<Vec<f64>> {
    (0..log.num_classes).map(|c| class_recall(log, c)).collect()
}

/// Share of all misclassifications that landed on class `c`. Falls back to
/// `1/K` when the log holds no misclassification.
pub fn cfps(log: &PredLog, class: usize) -> Result<f64> {
    log.check_class(class)?;
    let wrong = log.misclassified();
    if wrong == 0 {
        return Ok(1.0 / log.num_classes as f64);
    }
    let into = log
        .preds
        .iter()
        .zip(&log.labels)
        .filter(|(&p, &l)| p == class && l != class)
        .count();
    Ok(into as f64 / wrong as f64)
}

pub fn cfps_vector(log: &PredLog) -> Vec<f64> {
    (0..log.num_classes)
        .map(|c| cfps(log, c).expect("class in range"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstClass {
    pub min: f64,
    pub argmin: usize,
    /// Mean over the worst `ceil(K/10)` classes; equals `min` for `K <= 10`.
    pub worst_decile_mean: f64,
}

pub fn worst_class_summary(per_class: &[f64]) -> Result<WorstClass> {
    if per_class.is_empty() {
        return Err(Error::domain("worst-class summary of an empty list"));
    }
    let mut argmin = 0;
    for (i, &v) in per_class.iter().enumerate() {
        if v < per_class[argmin] {
            argmin = i;
        }
    }
    let k = per_class.len();
    let count = if k <= 10 { 1 } else { k.div_ceil(10) };
    let mut sorted = per_class.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let worst_decile_mean = sorted[..count].iter().sum::<f64>() / count as f64;
    Ok(WorstClass {
        min: per_class[argmin],
        argmin,
        worst_decile_mean,
    })
}

/// Clean predictions of `model` on the whole dataset, in dataset order.
pub fn predict_log(model: &ModelParams, dataset: &Dataset, batch_size: usize) -> Result<PredLog> {
    let mut log = PredLog::empty(dataset.num_classes());
    for chunk in dataset.index_batches(batch_size) {
        let (x, y) = dataset.batch(&chunk)?;
        log.extend(&model.predict(&x)?, &y)?;
    }
    Ok(log)
}

/// Accuracy on attacked inputs; the attack stands in for the worst case over
/// the whole ball, so the figure is specific to `attack`.
pub fn robust_accuracy<R: Rng>(
    model: &ModelParams,
    attack: &EvalAttack,
    dataset: &Dataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<(f64, PredLog)> {
    if dataset.is_empty() {
        return Err(Error::domain("robust accuracy of an empty dataset"));
    }
    let mut log = PredLog::empty(dataset.num_classes());
    for chunk in dataset.index_batches(batch_size) {
        let (x, y) = dataset.batch(&chunk)?;
        let adv = attack.run(model, &x, &y, rng)?;
        log.extend(&model.predict(&adv.perturbed)?, &y)?;
    }
    Ok((clean_accuracy(&log)?, log))
}
