//! Metrics, pseudo-label diagnostics and the ablation/sweep harness.

mod harness;

pub use harness::{ablation_csv, ablation_suite, sweep, sweep_csv, AblationRow, CellOutcome, SweepAxis, SweepRow};
pub use crate::experiment::Summary;

use serde::{Deserialize, Serialize};

use crate::data::ShadowGold;
use crate::error::{Error, Result};
use crate::selftrain::PseudoLabel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `confusion[gold][pred]`.
    pub confusion: Vec<Vec<usize>>,
    /// Set when computed over zero items.
    pub empty: bool,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Micro precision, recall and F1 in which `no_relation` predictions never
/// count as correct.
pub fn micro_prf(predictions: &[usize], golds: &[usize], no_relation: Option<usize>) -> Result<Metrics> {
    if predictions.len() != golds.len() {
        return Err(Error::Shape(format!("{} predictions for {} gold labels", predictions.len(), golds.len())));
    }
    let k = predictions.iter().chain(golds).max().map_or(0, |m| m + 1);
    let mut confusion = vec![vec![0; k]; k];
    let (mut correct, mut predicted, mut gold) = (0, 0, 0);
    for (&p, &g) in predictions.iter().zip(golds) {
        confusion[g][p] += 1;
        let p_rel = Some(p) != no_relation;
        let g_rel = Some(g) != no_relation;
        predicted += p_rel as usize;
        gold += g_rel as usize;
        correct += (p_rel && p == g) as usize;
    }
    let precision = ratio(correct, predicted);
    let recall = ratio(correct, gold);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(Metrics { precision, recall, f1, confusion, empty: predictions.is_empty() })
}

/// Quality of pseudo labels against the hidden gold labels of their batch.
pub fn pseudo_label_f1(pseudo: &[PseudoLabel], shadow: &ShadowGold, no_relation: Option<usize>) -> Result<Metrics> {
    let mut preds = Vec::with_capacity(pseudo.len());
    let mut golds = Vec::with_capacity(pseudo.len());
    for p in pseudo {
        let g = shadow
            .get(p.mention_index)
            .ok_or_else(|| Error::Diagnostics(format!("no shadow gold label for mention {}", p.mention_index)))?;
        preds.push(p.label);
        golds.push(g);
    }
    micro_prf(&preds, &golds, no_relation)
}

/// Normalized class histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelDistribution(Vec<f64>);

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!("{probs:?}")));
        }
        Ok(Self(probs))
    }

    /// Histogram of `labels` over `classes`; all-zero when `labels` is empty.
    pub fn from_labels(labels: impl IntoIterator<Item = usize>, classes: usize) -> Result<Self> {
        let mut h = vec![0.0; classes];
        let mut n = 0usize;
        for l in labels {
            *h.get_mut(l).ok_or(Error::Index { index: l, len: classes })? += 1.0;
            n += 1;
        }
        if n > 0 {
            h.iter_mut().for_each(|x| *x /= n as f64);
        }
        Ok(Self(h))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }
}

/// L1 distance, in [0, 2].
pub fn distribution_l1(a: &LabelDistribution, b: &LabelDistribution) -> Result<f64> {
    if a.classes() != b.classes() {
        return Err(Error::Shape(format!("distributions over {} and {} classes", a.classes(), b.classes())));
    }
    Ok(a.0.iter().zip(&b.0).map(|(x, y)| (x - y).abs()).sum())
}
