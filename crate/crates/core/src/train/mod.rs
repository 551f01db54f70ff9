//! Losses, the training loop, metrics, convergence comparison and
//! knowledge-base driven correction.

mod convergence;
mod correct;
mod loss;
mod run;

pub use convergence::{compare_convergence, epochs_to_fraction_of_final, ConvergenceReport};
pub use correct::{match_correct, match_from, write_corrections, CorrectionEntry};
pub use loss::{
    branch_loss, compose_loss, fused_loss, harmonization_loss, total_step, triplet_loss, Batch, BranchLoss, LossConfig,
    LossReport,
};
pub use run::{
    accuracy_of, dataset_hash, evaluate_accuracy, save_run, train, EpochRecord, LossSummary, RunHistory, RunManifest,
    TrainConfig,
};

/// Mean average precision of embeddings: queries ranked against a gallery by Euclidean distance.
pub fn evaluate_map(
    queries: &[Vec<f64>],
    query_labels: &[usize],
    gallery: &[Vec<f64>],
    gallery_labels: &[usize],
) -> crate::Result<f64> {
    crate::metrics::mean_average_precision(queries, query_labels, gallery, gallery_labels)
}
