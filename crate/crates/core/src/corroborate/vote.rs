use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// JPEG ensemble and team agreement settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    /// Extra JPEG copies predicted alongside the original.
    pub quality_factors: Vec<u8>,
    /// A team label needs surviving weight strictly above this fraction of the team total.
    pub agreement: f64,
    /// Only the highest-weighted member of each cluster votes.
    pub single_best_member: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { quality_factors: vec![90, 70, 50], agreement: 0.5, single_best_member: false }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(q) = self.quality_factors.iter().find(|q| !(1..=100).contains(*q)) {
            return Err(Error::Config(format!("quality factor {q} outside [1, 100]")));
        }
        if !(self.agreement > 0.0 && self.agreement <= 1.0) {
            return Err(Error::Config(format!("agreement threshold {} outside (0, 1]", self.agreement)));
        }
        Ok(())
    }
}

/// A surviving ensemble label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub label: usize,
    /// Mean probability of `label` across all copies.
    pub confidence: f64,
}

/// Strict-majority vote over per-copy class distributions; `None` when no
/// label is the argmax of more than half of the copies.
pub fn ensemble_vote(distributions: &[Vec<f64>]) -> Option<Vote> {
    let n = distributions.len();
    if n == 0 {
        return None;
    }
    let classes = distributions[0].len();
    let mut counts = vec![0usize; classes];
    for d in distributions {
        counts[ndgrad::argmax(d)] += 1;
    }
    let label = (0..classes).find(|&c| 2 * counts[c] > n)?;
    let confidence = distributions.iter().map(|d| d[label]).sum::<f64>() / n as f64;
    Some(Vote { label, confidence })
}

/// Weighted plurality over surviving votes.
///
/// With `require_agreement`, returns `None` when the surviving weight is at most
/// `agreement` times the total weight. Label ties go to the larger summed
/// confidence, then the lower label. All-zero weights count as equal weights.
pub fn team_vote(votes: &[Option<Vote>], weights: &[f64], agreement: f64, require_agreement: bool) -> Option<usize> {
    let uniform;
    let weights = if weights.iter().sum::<f64>() > 0.0 {
        weights
    } else {
        uniform = vec![1.0; votes.len()];
        &uniform
    };
    let total: f64 = weights.iter().sum();
    let surviving: f64 = votes.iter().zip(weights).filter(|(v, _)| v.is_some()).map(|(_, w)| w).sum();
    if require_agreement && surviving <= agreement * total {
        return None;
    }
    let mut tally: Vec<(usize, f64, f64)> = Vec::new();
    for (v, &w) in votes.iter().zip(weights) {
        let Some(v) = v else { continue };
        match tally.iter_mut().find(|t| t.0 == v.label) {
            Some(t) => {
                t.1 += w;
                t.2 += v.confidence;
            }
            None => tally.push((v.label, w, v.confidence)),
        }
    }
    tally
        .into_iter()
        .max_by(|a, b| a.1.total_cmp(&b.1).then(a.2.total_cmp(&b.2)).then(b.0.cmp(&a.0)))
        .map(|t| t.0)
}

/// Weights restricted to the single highest-weighted member (lowest index on ties).
pub fn single_best(weights: &[f64]) -> Vec<f64> {
    let best = (0..weights.len()).fold(0, |b, i| if weights[i] > weights[b] { i } else { b });
    weights.iter().enumerate().map(|(i, &w)| if i == best { w.max(f64::MIN_POSITIVE) } else { 0.0 }).collect()
}
