//! Supervised, consistency and combined training objectives.

use ndarray::{Array3, ArrayD};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::segnet::Prediction;

/// Smoothing constant of the soft Dice term.
pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub delta_max: f64,
    pub ramp_length: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 10.0, beta: 1.0, delta_max: 1.0, ramp_length: 40 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("delta_max", self.delta_max)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be a finite nonnegative weight")));
            }
        }
        if self.ramp_length == 0 {
            return Err(Error::Config("ramp_length must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_binary(y: &Array3<f64>) -> Result<()> {
    match y.iter().find(|v| **v != 0.0 && **v != 1.0) {
        Some(v) => Err(Error::Validation(format!("mask value {v} is not binary"))),
        None => Ok(()),
    }
}

/// BCE + soft Dice from logits, as used in training.
pub fn supervised_loss_var(g: &Graph, logits: Var, y: &Tensor) -> Var {
    let bce = g.bce_with_logits(logits, y);
    let dice = g.soft_dice_loss(g.sigmoid(logits), y, DICE_SMOOTH);
    g.add(bce, dice)
}

/// BCE + soft Dice of predicted probabilities against a binary mask batch.
pub fn supervised_loss(pred: &Prediction, y: &Array3<f64>) -> Result<f64> {
    if pred.probs.shape() != y.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs mask {:?}", pred.probs.shape(), y.shape())));
    }
    check_binary(y)?;
    let g = Graph::new();
    let p = g.constant(pred.probs.clone().into_dyn());
    let y = y.clone().into_dyn();
    let l = g.add(g.bce_probs(p, &y), g.soft_dice_loss(p, &y, DICE_SMOOTH));
    Ok(g.scalar(l))
}

pub fn consistency_mse(student: &ArrayD<f64>, teacher: &ArrayD<f64>) -> Result<f64> {
    if student.shape() != teacher.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", student.shape(), teacher.shape())));
    }
    if student.is_empty() {
        return Ok(0.0);
    }
    Ok(student.iter().zip(teacher.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / student.len() as f64)
}

/// Gaussian warm-up `delta_max * exp(-5 (1 - min(epoch / ramp, 1))^2)`.
pub fn consistency_weight(epoch: usize, weights: &LossWeights) -> f64 {
    let t = (epoch as f64 / weights.ramp_length.max(1) as f64).min(1.0);
    weights.delta_max * (-5.0 * (1.0 - t).powi(2)).exp()
}

/// `alpha * sup + w(epoch) * cons + beta * dcp`.
pub fn total_loss(sup: f64, cons: f64, dcp: f64, epoch: usize, weights: &LossWeights) -> Result<f64> {
    for (name, v) in [("supervised", sup), ("consistency", cons), ("decomposition", dcp)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { epoch, step: 0, batch: String::new(), detail: format!("{name} loss = {v}") });
        }
    }
    Ok(weights.alpha * sup + consistency_weight(epoch, weights) * cons + weights.beta * dcp)
}

/// Graph form of [`total_loss`]; `None` components are absent from the sum.
pub fn total_loss_var(g: &Graph, sup: Var, cons: Option<Var>, dcp: Option<Var>, epoch: usize, weights: &LossWeights) -> Var {
    let mut total = g.scale(sup, weights.alpha);
    if let Some(c) = cons {
        total = g.add(total, g.scale(c, consistency_weight(epoch, weights)));
    }
    if let Some(d) = dcp {
        total = g.add(total, g.scale(d, weights.beta));
    }
    total
}
