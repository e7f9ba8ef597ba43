//! Per-sample head selection for multi-head inference.
//!
//! Each head emits a probability vector over K+1 classes. A head's confidence
//! is summarized by two gaps: the difference between its two highest
//! probabilities (a confident head separates its top choice) and the
//! difference between its two lowest (a confident head also flattens the
//! tail). The head with the largest top gap answers; when the same head also
//! has the smallest bottom gap the two statistics agree and the decision is
//! flagged as such.

use crate::datahub::ClassLabel;
use crate::diffcore::Matrix;
use crate::error::{Error, Result};
use crate::meosda::MeosdaState;

/// Confidence summary of one head's probability vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadConfidence {
    pub head_index: usize,
    /// Highest probability minus second-highest.
    pub top_gap: f64,
    /// Second-lowest probability minus lowest.
    pub bottom_gap: f64,
}

/// One routed prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleDecision {
    pub chosen_head: usize,
    pub label: ClassLabel,
    /// The chosen head's full distribution.
    pub probs: Vec<f64>,
    /// True when the top-gap and bottom-gap statistics point at the same head.
    pub agreement: bool,
}

fn validate_probs(p: &[f64]) -> Result<()> {
    if p.len() < 2 {
        return Err(Error::contract("head_confidence", "need at least two classes"));
    }
    let mut sum = 0.0;
    for &v in p {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::contract("head_confidence", format!("bad probability {v}")));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::contract("head_confidence", format!("probabilities sum to {sum}")));
    }
    Ok(())
}

/// (top gap, bottom gap) of one probability vector.
pub fn head_confidence(probs: &[f64]) -> Result<(f64, f64)> {
    validate_probs(probs)?;
    let mut sorted = probs.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let n = sorted.len();
    Ok((sorted[0] - sorted[1], sorted[n - 2] - sorted[n - 1]))
}

fn argmax_lowest_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn argmin_lowest_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Routes one sample: the head with the largest top gap answers, flagged as
/// an agreement when the same head holds the smallest bottom gap. The label
/// is that head's argmax class; the last slot means Open. All ties resolve to
/// the lowest index.
pub fn ensemble_predict(per_head: &[Vec<f64>]) -> Result<EnsembleDecision> {
    if per_head.is_empty() {
        return Err(Error::contract("ensemble_predict", "need at least one head"));
    }
    let width = per_head[0].len();
    let mut top_gaps = Vec::with_capacity(per_head.len());
    let mut bottom_gaps = Vec::with_capacity(per_head.len());
    for p in per_head {
        if p.len() != width {
            return Err(Error::contract("ensemble_predict", "heads disagree on class count"));
        }
        let (t, b) = head_confidence(p)?;
        top_gaps.push(t);
        bottom_gaps.push(b);
    }
    let by_top = argmax_lowest_index(&top_gaps);
    let by_bottom = argmin_lowest_index(&bottom_gaps);
    let chosen = by_top;
    let probs = per_head[chosen].clone();
    let slot = argmax_lowest_index(&probs);
    let label = if slot == width - 1 { ClassLabel::Open } else { ClassLabel::Known(slot) };
    Ok(EnsembleDecision { chosen_head: chosen, label, probs, agreement: by_top == by_bottom })
}

/// Applies the routing rule to every row of a feature batch under all of a
/// trained state's heads.
pub fn batch_predict(state: &MeosdaState, features: &Matrix) -> Result<Vec<EnsembleDecision>> {
    let per_head: Vec<Matrix> = (0..state.heads.len())
        .map(|m| state.predict_head(m, features))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(features.rows());
    for r in 0..features.rows() {
        let rows: Vec<Vec<f64>> = per_head.iter().map(|p| p.row(r).to_vec()).collect();
        out.push(ensemble_predict(&rows)?);
    }
    Ok(out)
}
