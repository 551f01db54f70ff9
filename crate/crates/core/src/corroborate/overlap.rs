use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::Metric;
use crate::error::{Error, Result};

/// Per-point O-metric ratios of an unlabeled cluster against one training cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport<T> {
    pub ratios: Vec<T>,
    /// Fraction of ratios strictly above 1.
    pub p_u: f64,
}

/// Ratio of the distance from `unlabeled[index]` to its nearest other point of
/// `unlabeled` over its distance to the nearest point of `training`.
/// A zero heterospecific distance gives `+∞`.
pub fn o_metric_point<T: Float>(index: usize, unlabeled: &[Vec<T>], training: &[Vec<T>], metric: Metric) -> Result<T> {
    if unlabeled.len() < 2 {
        return Err(Error::SingletonCluster);
    }
    if training.is_empty() {
        return Err(Error::EmptyCluster(0));
    }
    let u = &unlabeled[index];
    let conspecific = unlabeled
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != index)
        .map(|(_, v)| metric.distance(u, v))
        .fold(T::infinity(), T::min);
    let heterospecific = training.iter().map(|t| metric.distance(u, t)).fold(T::infinity(), T::min);
    if heterospecific == T::zero() {
        return Ok(T::infinity());
    }
    Ok(conspecific / heterospecific)
}

pub fn cluster_overlap<T: Float>(unlabeled: &[Vec<T>], training: &[Vec<T>], metric: Metric) -> Result<OverlapReport<T>> {
    let ratios = (0..unlabeled.len())
        .map(|i| o_metric_point(i, unlabeled, training, metric))
        .collect::<Result<Vec<T>>>()?;
    let above = ratios.iter().filter(|&&r| r > T::one()).count();
    Ok(OverlapReport { p_u: above as f64 / ratios.len() as f64, ratios })
}

/// `weights[i][m]` = max over member `m`'s training clusters `T_j` of `p_U(U_i, T_j)`.
///
/// A singleton unlabeled cluster has no conspecific distance; every member
/// gets weight 1 on it so its point falls back to an unweighted vote.
pub fn member_weights<T: Float>(
    unlabeled_clusters: &[Vec<Vec<T>>],
    member_clusters: &[Vec<Vec<Vec<T>>>],
    metric: Metric,
) -> Result<Vec<Vec<f64>>> {
    let mut weights = Vec::with_capacity(unlabeled_clusters.len());
    for (i, u) in unlabeled_clusters.iter().enumerate() {
        if u.is_empty() {
            return Err(Error::EmptyCluster(i));
        }
        let mut row = Vec::with_capacity(member_clusters.len());
        for clusters in member_clusters {
            if u.len() == 1 {
                row.push(1.0);
                continue;
            }
            let mut best = 0.0f64;
            for (j, t) in clusters.iter().enumerate() {
                if t.is_empty() {
                    return Err(Error::EmptyCluster(j));
                }
                best = best.max(cluster_overlap(u, t, metric)?.p_u);
            }
            row.push(best);
        }
        weights.push(row);
    }
    Ok(weights)
}
