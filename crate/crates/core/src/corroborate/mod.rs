//! Completion of missing annotations by teams of models trained on the
//! datasets that do carry them.
//!
//! Each team member is trained on one source dataset. An unlabeled dataset is
//! clustered in the feature space of a fixed random embedder, and each member is
//! weighted per cluster by how much its own training clusters overlap that
//! cluster under the O-metric. A member's vote survives only if a strict
//! majority of the original image and its JPEG round trips agree; the team
//! label is the weighted plurality of surviving votes, kept only when they
//! carry more than half of the team weight.

mod augment;
mod embed;
mod integrate;
mod kmeans;
mod member;
mod overlap;
mod vote;

pub use augment::Augment;
pub use embed::{EmbedderConfig, FeatureEmbedder};
pub use integrate::{
    assess_target, build_team, ensemble_label, evaluate_stages, integrate, jpeg_copies, label_images, team_label,
    CoverageReport, IntegrationPlan, KindCoverage, KindPlan, StageRow, TargetAssessment, Team,
};
pub use kmeans::{kmeans, ClusterModel, Metric};
pub use member::{train_member, EarlyStopTrace, MemberConfig, MemberNet, MemberWeights, TeamMember};
pub use overlap::{cluster_overlap, member_weights, o_metric_point, OverlapReport};
pub use vote::{ensemble_vote, single_best, team_vote, EnsembleConfig, Vote};
