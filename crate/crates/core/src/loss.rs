//! Soft Jaccard distance per stage and the weighted deep-supervision sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Element, Graph, Tensor, Var};

/// Denominators below this are treated as an empty target matched by an
/// empty prediction (loss 0).
pub const EMPTY_DENOMINATOR: f64 = 1e-7;

/// Smoothing added to the denominator of the training loss.
pub const TRAIN_EPS: f64 = 1e-7;

/// Per-stage loss weights, one per cascade stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StageWeights(Vec<f64>);

impl StageWeights {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::Config("stage weights must not be empty".into()));
        }
        if alphas.iter().any(|&a| !(a.is_finite() && a > 0.0)) {
            return Err(Error::Config(format!(
                "stage weights must be finite and positive, got {alphas:?}"
            )));
        }
        let last = *alphas.last().unwrap();
        if alphas.iter().any(|&a| a > last) {
            return Err(Error::Config(format!(
                "the last stage weight must be the largest, got {alphas:?}"
            )));
        }
        Ok(StageWeights(alphas))
    }

    /// `[0.7, 0.8, 0.9, 1.0]`
    pub fn four_stage_default() -> Self {
        StageWeights(vec![0.7, 0.8, 0.9, 1.0])
    }

    /// The default ramp truncated to its last `stages` entries, or a flat
    /// `1.0` weighting when more than four stages are requested.
    pub fn for_stages(stages: usize) -> Self {
        let ramp = [0.7, 0.8, 0.9, 1.0];
        if stages <= ramp.len() {
            StageWeights(ramp[ramp.len() - stages..].to_vec())
        } else {
            StageWeights(vec![1.0; stages])
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.0.clone()).map(|_| ())
    }
}

/// `1 - sum(t*p) / (sum(t^2) + sum(p^2) - sum(t*p))` over every element.
///
/// Targets must be 0/1 and probabilities in `[0, 1]`. An empty target with
/// an empty prediction scores 0.
pub fn jaccard_distance_loss<T: Element>(target: &Tensor<T>, prob: &Tensor<T>) -> Result<f64> {
    if target.shape() != prob.shape() {
        return Err(Error::shape(format!(
            "jaccard loss needs matching shapes, got target {} and prob {}",
            target.shape(),
            prob.shape()
        )));
    }
    if !target.all_finite() || !prob.all_finite() {
        return Err(Error::NonFinite("jaccard loss input contains NaN or Inf".into()));
    }
    let (inter, tt, pp) = kernels::jaccard_terms(target.data(), prob.data());
    let denom = tt + pp - inter;
    if denom < EMPTY_DENOMINATOR {
        return Ok(0.0);
    }
    Ok(1.0 - inter / denom)
}

/// `sum_s alpha_s * L_s`.
pub fn weighted_loss(stage_losses: &[f64], weights: &StageWeights) -> Result<f64> {
    check_lengths(stage_losses.len(), weights)?;
    Ok(stage_losses
        .iter()
        .zip(weights.as_slice())
        .map(|(l, a)| l * a)
        .sum())
}

/// Supervise only the final stage.
pub fn loss_no_ds(stage_losses: &[f64]) -> Result<f64> {
    stage_losses
        .last()
        .copied()
        .ok_or_else(|| Error::InvalidArgument("no stage losses".into()))
}

fn check_lengths(stages: usize, weights: &StageWeights) -> Result<()> {
    if stages != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{stages} stage losses but {} stage weights",
            weights.len()
        )));
    }
    Ok(())
}

/// Records the training objective on the graph.
///
/// Returns the scalar loss node together with the per-stage Jaccard nodes.
/// With `deep_supervision` every stage is weighted by its alpha; without it
/// only the last stage contributes.
pub fn cascade_objective<T: Element>(
    g: &mut Graph<T>,
    stage_outputs: &[Var],
    target: Var,
    weights: &StageWeights,
    deep_supervision: bool,
) -> Result<(Var, Vec<Var>)> {
    if stage_outputs.is_empty() {
        return Err(Error::InvalidArgument("no stage outputs".into()));
    }
    check_lengths(stage_outputs.len(), weights)?;
    let per_stage = stage_outputs
        .iter()
        .map(|&y| g.jaccard_distance(y, target, TRAIN_EPS))
        .collect::<Result<Vec<_>>>()?;
    let terms: Vec<(Var, f64)> = if deep_supervision {
        per_stage
            .iter()
            .copied()
            .zip(weights.as_slice().iter().copied())
            .collect()
    } else {
        vec![(*per_stage.last().unwrap(), 1.0)]
    };
    let total = g.weighted_sum(&terms)?;
    Ok((total, per_stage))
}
