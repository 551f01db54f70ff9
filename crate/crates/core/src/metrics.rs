//! Classification and retrieval metrics.

use std::cmp::Ordering;

use num_traits::Float;

use crate::error::{Error, Result};

/// Fraction of positions where `predicted == truth`.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// Average precision of one ranked relevance list (best first).
pub fn average_precision(ranked_relevance: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &relevant) in ranked_relevance.iter().enumerate() {
        if relevant {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

pub fn euclidean<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y)).sqrt()
}

/// Mean over queries of the average precision of the Euclidean-ranked gallery.
/// Ties in distance keep gallery order.
pub fn mean_average_precision<T: Float>(
    queries: &[Vec<T>],
    query_labels: &[usize],
    gallery: &[Vec<T>],
    gallery_labels: &[usize],
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (q, &label) in queries.iter().zip(query_labels) {
        if !gallery_labels.contains(&label) {
            return Err(Error::AbsentClass(label));
        }
        let mut order: Vec<(T, usize)> = gallery.iter().enumerate().map(|(i, g)| (euclidean(q, g), i)).collect();
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
        let relevance: Vec<bool> = order.iter().map(|&(_, i)| gallery_labels[i] == label).collect();
        total += average_precision(&relevance);
    }
    Ok(total / queries.len() as f64)
}
