use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distance used for clustering and the O-metric.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// `1 − cos(a, b)`; a zero vector is at distance 1 from everything.
    #[default]
    Cosine,
    Euclidean,
}

impl Metric {
    pub fn distance<T: Float>(self, a: &[T], b: &[T]) -> T {
        match self {
            Metric::Euclidean => crate::metrics::euclidean(a, b),
            Metric::Cosine => {
                let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
                for (&x, &y) in a.iter().zip(b) {
                    dot = dot + x * y;
                    na = na + x * x;
                    nb = nb + y * y;
                }
                if na == T::zero() || nb == T::zero() {
                    return T::one();
                }
                let cos = dot / (na.sqrt() * nb.sqrt());
                T::one() - cos.max(-T::one()).min(T::one())
            }
        }
    }
}

/// Lloyd clustering result. `assignments[i]` is the cluster of input point `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel<T> {
    pub l: usize,
    pub metric: Metric,
    pub centroids: Vec<Vec<T>>,
    pub assignments: Vec<usize>,
    /// Objective after seeding and after every iteration: summed squared
    /// distances (Euclidean) or summed cosine distances (cosine).
    pub objective: Vec<T>,
    pub iterations: usize,
}

impl<T: Float> ClusterModel<T> {
    /// Index of the centroid nearest to `point`; ties go to the lower index.
    pub fn assign(&self, point: &[T]) -> usize {
        nearest(&self.centroids, point, self.metric).0
    }

    /// Point indices grouped by cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.l];
        for (i, &c) in self.assignments.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    /// The points of each cluster.
    pub fn partition(&self, points: &[Vec<T>]) -> Vec<Vec<Vec<T>>> {
        self.members().into_iter().map(|ids| ids.into_iter().map(|i| points[i].clone()).collect()).collect()
    }
}

fn nearest<T: Float>(centroids: &[Vec<T>], point: &[T], metric: Metric) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (j, c) in centroids.iter().enumerate() {
        let d = metric.distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// The per-point cost minimized by the centroid update under `metric`.
fn cost<T: Float>(d: T, metric: Metric) -> T {
    match metric {
        Metric::Euclidean => d * d,
        Metric::Cosine => d,
    }
}

fn assign_all<T: Float>(points: &[Vec<T>], centroids: &[Vec<T>], metric: Metric) -> (Vec<usize>, T) {
    let mut total = T::zero();
    let assignments = points
        .iter()
        .map(|p| {
            let (j, d) = nearest(centroids, p, metric);
            total = total + cost(d, metric);
            j
        })
        .collect();
    (assignments, total)
}

/// Contribution of a point to its centroid: itself (Euclidean) or its unit direction (cosine).
fn update_term<T: Float>(p: &[T], metric: Metric) -> Vec<T> {
    match metric {
        Metric::Euclidean => p.to_vec(),
        Metric::Cosine => {
            let norm = p.iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
            if norm == T::zero() {
                p.to_vec()
            } else {
                p.iter().map(|&x| x / norm).collect()
            }
        }
    }
}

/// k-means++ seeding followed by Lloyd iterations until the assignment is a
/// fixpoint or 100 iterations have run. Cosine centroids are the mean of the
/// members' unit vectors. A cluster that empties keeps its centroid.
pub fn kmeans<T: Float>(points: &[Vec<T>], l: usize, metric: Metric, seed: u64) -> Result<ClusterModel<T>> {
    if l == 0 {
        return Err(Error::Config("kmeans needs l ≥ 1".into()));
    }
    if points.len() < l {
        return Err(Error::TooFewPoints { needed: l, got: points.len() });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Config("kmeans points have different dimensions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<Vec<T>> = vec![points[rng.gen_range(0..points.len())].clone()];
    while centroids.len() < l {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| nearest(&centroids, p, metric).1.to_f64().unwrap_or(0.0).powi(2))
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if r < *w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[pick].clone());
    }

    let (mut assignments, first) = assign_all(points, &centroids, metric);
    let mut objective = vec![first];
    let mut iterations = 0;
    while iterations < 100 {
        iterations += 1;
        let mut sums = vec![vec![T::zero(); dim]; l];
        let mut counts = vec![0usize; l];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(update_term(p, metric)) {
                *s = *s + x;
            }
        }
        for c in 0..l {
            if counts[c] > 0 {
                let n = T::from(counts[c]).unwrap();
                centroids[c] = sums[c].iter().map(|&s| s / n).collect();
            }
        }
        let (next, total) = assign_all(points, &centroids, metric);
        objective.push(total);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Ok(ClusterModel { l, metric, centroids, assignments, objective, iterations })
}
