//! The idealised hierarchical predictor.
//!
//! Scenario A restricts the argmax of the fine-feature scores to the labels
//! coupled with the coarse feature; scenario B takes the plain argmax. Ties
//! resolve to the lowest label.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::evaluation::LabelHierarchy;
use crate::imageset::{GroupKey, Label};

/// Class-conditional scores per fine input, any monotone transform of p(y'|x_c).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreTable {
    num_labels: usize,
    scores: BTreeMap<u64, Vec<f64>>,
}

impl ScoreTable {
    pub fn new(num_labels: usize) -> Self {
        ScoreTable {
            num_labels,
            scores: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, input: u64, scores: Vec<f64>) -> Result<()> {
        if scores.len() != self.num_labels {
            return Err(Error::spec(format!(
                "score vector has {} entries, expected {}",
                scores.len(),
                self.num_labels
            )));
        }
        if !scores.iter().any(|s| s.is_finite()) {
            return Err(Error::spec("score vector has no finite entry"));
        }
        self.scores.insert(input, scores);
        Ok(())
    }

    pub fn get(&self, input: u64) -> Option<&[f64]> {
        self.scores.get(&input).map(Vec::as_slice)
    }
}

fn argmax_over(scores: &[f64], candidates: impl Iterator<Item = Label>) -> Option<Label> {
    let mut best: Option<(Label, f64)> = None;
    for l in candidates {
        let s = scores[l as usize];
        // NaN never wins; strict `>` keeps the lowest index on ties.
        match best {
            Some((_, b)) if !(s > b) => {}
            _ if s.is_nan() => {}
            _ => best = Some((l, s)),
        }
    }
    best.map(|b| b.0)
}

/// Argmax of `scores` restricted to `Y_coarse`.
pub fn predict_scenario_a(
    h: &dyn LabelHierarchy,
    coarse: &GroupKey,
    scores: &[f64],
) -> Result<Label> {
    if scores.len() != h.num_labels() {
        return Err(Error::spec(format!(
            "score vector has {} entries, expected {}",
            scores.len(),
            h.num_labels()
        )));
    }
    let subset = h.subset(coarse).unwrap_or_default();
    if subset.is_empty() {
        return Err(Error::spec(format!("group {coarse} couples no labels")));
    }
    argmax_over(scores, subset.into_iter())
        .ok_or_else(|| Error::spec(format!("no comparable score inside group {coarse}")))
}

/// Unrestricted argmax.
pub fn predict_scenario_b(scores: &[f64]) -> Result<Label> {
    argmax_over(scores, 0..scores.len() as Label)
        .ok_or_else(|| Error::spec("no comparable score"))
}
