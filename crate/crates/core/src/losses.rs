//! Differentiable training losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::DiffArray;
use crate::cloud::Point3;
use crate::emd::{emd_assignment, Assignment};
use crate::error::{Error, Result};

/// Weights of the combined objective
/// `alpha * emd + (1 - alpha) * vn + beta * rn`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            beta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = Self { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!(
                "beta {} must be non-negative",
                self.beta
            )));
        }
        Ok(())
    }
}

/// `alpha * emd + (1 - alpha) * vn + beta * rn`.
pub fn total_loss(emd: f64, vn: f64, rn: f64, w: LossWeights) -> f64 {
    w.alpha * emd + (1.0 - w.alpha) * vn + w.beta * rn
}

/// Graph version of [`total_loss`]; absent terms are skipped.
pub fn total_loss_diff(
    emd: Option<&DiffArray>,
    vn: Option<&DiffArray>,
    rn: Option<&DiffArray>,
    w: LossWeights,
) -> DiffArray {
    let terms = [(emd, w.alpha), (vn, 1.0 - w.alpha), (rn, w.beta)];
    terms
        .into_iter()
        .filter_map(|(t, weight)| t.map(|t| t.scale(weight)))
        .reduce(|a, b| a.add(&b))
        .unwrap_or_else(|| DiffArray::scalar(0.0))
}

/// Mean matched distance under the optimal assignment. The assignment is held
/// fixed in the backward pass. Returns the loss node and the assignment.
pub fn emd_loss(pred: &DiffArray, target: &[Point3]) -> Result<(DiffArray, Assignment)> {
    if pred.cols() != 3 {
        return Err(Error::invalid(format!(
            "EMD prediction must be [n, 3], got {:?}",
            pred.shape()
        )));
    }
    let assignment = emd_assignment(&pred.to_points(), target)?;
    let matched: Vec<Point3> = assignment.permutation.iter().map(|&j| target[j]).collect();
    let matched = DiffArray::from_points(&matched, false);
    let loss = pred.sub(&matched).row_norm().mean();
    Ok((loss, assignment))
}

/// Sign-invariant normal loss: `Σ min(|g - p|², |g + p|²)`. Ties take the
/// `g - p` branch.
pub fn rn_loss(pred: &DiffArray, gt: &[Point3]) -> Result<DiffArray> {
    if pred.cols() != 3 || pred.rows() != gt.len() {
        return Err(Error::invalid(format!(
            "{:?} predicted normals for {} targets",
            pred.shape(),
            gt.len()
        )));
    }
    let g = DiffArray::from_points(gt, false);
    let minus = g.sub(pred);
    let plus = g.add(pred);
    let minus = minus.mul(&minus).row_sum();
    let plus = plus.mul(&plus).row_sum();
    Ok(minus.min_select(&plus).sum())
}
