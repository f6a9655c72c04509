use std::fmt;

use serde::Serialize;

use super::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Gradients smaller than this in magnitude are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Coordinate {
    Weight { layer: usize, index: usize },
    Bias { layer: usize, index: usize },
    Input { index: usize },
}

impl fmt::Display for Coordinate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coordinate::Weight { layer, index } => write!(f, "layer {layer} weight[{index}]"),
            Coordinate::Bias { layer, index } => write!(f, "layer {layer} bias[{index}]"),
            Coordinate::Input { index } => write!(f, "input[{index}]"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub max_relative_error: f64,
    pub worst: Option<Coordinate>,
    pub compared: usize,
    /// Coordinates whose finite-difference stencil crosses a ReLU kink.
    pub non_comparable: Vec<Coordinate>,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares autodiff gradients of the mean cross-entropy loss against
/// central finite differences for every parameter and input coordinate.
pub fn finite_difference_check(
    model: &ModelParams,
    input: &Tensor,
    labels: &[usize],
    h: f64,
    tol: f64,
) -> Result<CheckReport> {
    if !(h > 0.0) || !(tol > 0.0) {
        return Err(Error::domain("finite-difference step and tolerance must be positive"));
    }

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true)?;
    let x = tape.leaf(input.clone(), true)?;
    let logits = model.forward(&mut tape, &bound, x)?;
    let per = tape.softmax_cross_entropy(logits, labels)?;
    let loss = tape.mean(per)?;
    tape.backward(loss)?;
    let param_grads = model.gradients(&tape, &bound)?;
    let input_grad = tape
        .grad(x)
        .ok_or_else(|| Error::contract("input gradient missing"))?
        .clone();

    let (_, base_pattern) = model.forward_with_preactivations(input)?;
    let active = |pre: &[f64]| pre.iter().map(|&v| v > 0.0).collect::<Vec<_>>();
    let base_active = active(&base_pattern);

    let mut report = CheckReport {
        max_relative_error: 0.0,
        worst: None,
        compared: 0,
        non_comparable: Vec::new(),
        tolerance: tol,
        passed: true,
    };

    let mut probe = |coord: Coordinate,
                     analytic: f64,
                     eval: &mut dyn FnMut(f64) -> Result<(f64, Vec<f64>)>|
     -> Result<()> {
        let (plus, pre_plus) = eval(h)?;
        let (minus, pre_minus) = eval(-h)?;
        if !plus.is_finite() || !minus.is_finite() || !analytic.is_finite() {
            return Err(Error::NonFinite {
                context: format!("finite-difference check at {coord}"),
            });
        }
        if active(&pre_plus) != base_active || active(&pre_minus) != base_active {
            report.non_comparable.push(coord);
            return Ok(());
        }
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic, numeric);
        report.compared += 1;
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = Some(coord);
        }
        Ok(())
    };

    let mut perturbed = model.clone();
    for layer in 0..model.layers().len() {
        for (is_bias, grad) in [
            (false, &param_grads.layers()[layer].weight),
            (true, &param_grads.layers()[layer].bias),
        ] {
            for index in 0..grad.len() {
                let coord = if is_bias {
                    Coordinate::Bias { layer, index }
                } else {
                    Coordinate::Weight { layer, index }
                };
                let mut eval = |delta: f64| {
                    let l = &mut perturbed.layers_mut()[layer];
                    let buf = if is_bias { l.bias.values_mut() } else { l.weight.values_mut() };
                    let orig = buf[index];
                    buf[index] = orig + delta;
                    let out = loss_and_preactivations(&perturbed, input, labels);
                    let l = &mut perturbed.layers_mut()[layer];
                    let buf = if is_bias { l.bias.values_mut() } else { l.weight.values_mut() };
                    buf[index] = orig;
                    out
                };
                probe(coord, grad.values()[index], &mut eval)?;
            }
        }
    }

    let mut shifted = input.clone();
    for index in 0..input.len() {
        let mut eval = |delta: f64| {
            let orig = shifted.values()[index];
            shifted.values_mut()[index] = orig + delta;
            let out = loss_and_preactivations(model, &shifted, labels);
            shifted.values_mut()[index] = orig;
            out
        };
        probe(Coordinate::Input { index }, input_grad.values()[index], &mut eval)?;
    }

    report.passed = report.max_relative_error < tol;
    Ok(report)
}

fn loss_and_preactivations(model: &ModelParams, x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (logits, pre) = model.forward_with_preactivations(x)?;
    let k = model.num_classes();
    let mut total = 0.0;
    for (row, &label) in logits.chunks_exact(k).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    Ok((total / labels.len() as f64, pre))
}
