use std::collections::BTreeMap;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{
    ensemble_vote, kmeans, member_weights, single_best, team_vote, train_member, ClusterModel, EmbedderConfig,
    EnsembleConfig, FeatureEmbedder, MemberConfig, Metric, TeamMember, Vote,
};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::synth::{jpeg_roundtrip, AnnotationKind, Dataset, Schema};

/// Which datasets teach and which receive one annotation kind.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindPlan {
    pub kind: AnnotationKind,
    pub sources: Vec<String>,
    pub targets: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegrationPlan {
    /// Explicit per-kind routing; when empty, every fully labeled dataset is a
    /// source and every dataset with blanks is a target.
    pub kinds: Vec<KindPlan>,
    /// Number of k-means clusters `l`.
    pub clusters: usize,
    pub metric: Metric,
    pub ensemble: EnsembleConfig,
    pub member: MemberConfig,
    pub embedder: EmbedderConfig,
    pub seed: u64,
}

impl Default for IntegrationPlan {
    fn default() -> Self {
        Self {
            kinds: Vec::new(),
            clusters: 8,
            metric: Metric::Cosine,
            ensemble: EnsembleConfig::default(),
            member: MemberConfig::default(),
            embedder: EmbedderConfig::default(),
            seed: 0,
        }
    }
}

impl IntegrationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 {
            return Err(Error::Config("clusters must be ≥ 1".into()));
        }
        self.ensemble.validate()
    }

    /// The explicit routing, or the one derived from label coverage.
    pub fn routing(&self, datasets: &[Dataset]) -> Result<Vec<KindPlan>> {
        if !self.kinds.is_empty() {
            return Ok(self.kinds.clone());
        }
        let mut plans = Vec::new();
        for kind in AnnotationKind::INTERPRETABLE {
            let targets: Vec<String> =
                datasets.iter().filter(|d| !d.fully_labeled(kind)).map(|d| d.name.clone()).collect();
            if targets.is_empty() {
                continue;
            }
            let sources: Vec<String> =
                datasets.iter().filter(|d| d.fully_labeled(kind)).map(|d| d.name.clone()).collect();
            if sources.is_empty() {
                return Err(Error::NoSource(kind.name().into()));
            }
            plans.push(KindPlan { kind, sources, targets });
        }
        Ok(plans)
    }
}

/// The members labeling one annotation kind.
#[derive(Clone, Debug)]
pub struct Team {
    pub kind: AnnotationKind,
    pub members: Vec<TeamMember>,
}

/// Trains one member per source. Each member early-stops on the other sources;
/// a lone source validates on a fifth of its own records instead.
pub fn build_team(
    sources: &[&Dataset],
    kind: AnnotationKind,
    plan: &IntegrationPlan,
    embedder: &FeatureEmbedder,
) -> Result<Team> {
    let first = sources.first().ok_or_else(|| Error::NoSource(kind.name().into()))?;
    let schema = first.schema;
    let mut members = Vec::with_capacity(sources.len());
    for (m, source) in sources.iter().enumerate() {
        let config = MemberConfig { seed: derive_seed(plan.seed, (kind as u64) << 8 | m as u64), ..plan.member.clone() };
        let mut member = if sources.len() == 1 {
            let (train, held) = source.split(0.2, config.seed);
            let mut member = train_member(&train, &[&held], kind, &schema, &config)?;
            member.source = source.name.clone();
            member
        } else {
            let others: Vec<&Dataset> = sources.iter().enumerate().filter(|&(j, _)| j != m).map(|(_, d)| *d).collect();
            train_member(source, &others, kind, &schema, &config)?
        };
        let images: Vec<&RgbImage> =
            source.records.iter().filter(|r| r.labels.get(kind).is_some()).map(|r| &r.image).collect();
        let features = embedder.features(&images)?;
        let clusters = kmeans(&features, plan.clusters.min(features.len()), plan.metric, config.seed)?;
        member.training_clusters = clusters.partition(&features);
        members.push(member);
    }
    Ok(Team { kind, members })
}

/// Clusters of a target dataset and each member's weight on each cluster.
#[derive(Clone, Debug)]
pub struct TargetAssessment {
    pub clusters: ClusterModel<f64>,
    /// `weights[cluster][member]`.
    pub weights: Vec<Vec<f64>>,
}

pub fn assess_target(team: &Team, target: &Dataset, plan: &IntegrationPlan, embedder: &FeatureEmbedder) -> Result<TargetAssessment> {
    let images: Vec<&RgbImage> = target.records.iter().map(|r| &r.image).collect();
    let features = embedder.features(&images)?;
    let seed = derive_seed(plan.seed, 0x7a12 ^ team.kind as u64);
    let clusters = kmeans(&features, plan.clusters.min(features.len()), plan.metric, seed)?;
    let member_clusters: Vec<Vec<Vec<Vec<f64>>>> = team.members.iter().map(|m| m.training_clusters.clone()).collect();
    let weights = member_weights(&clusters.partition(&features), &member_clusters, plan.metric)?;
    Ok(TargetAssessment { clusters, weights })
}

/// The original images followed by one JPEG round trip per quality factor: `copies[c][i]`.
pub fn jpeg_copies(images: &[&RgbImage], quality_factors: &[u8]) -> Result<Vec<Vec<RgbImage>>> {
    let mut copies = vec![images.iter().map(|i| (*i).clone()).collect::<Vec<_>>()];
    for &q in quality_factors {
        copies.push(images.iter().map(|i| jpeg_roundtrip(i, q)).collect::<Result<Vec<_>>>()?);
    }
    Ok(copies)
}

/// Per-copy class distributions of one member: `out[c][i]`.
fn copy_predictions(member: &TeamMember, copies: &[Vec<RgbImage>]) -> Result<Vec<Vec<Vec<f64>>>> {
    copies.iter().map(|c| member.predict(&c.iter().collect::<Vec<_>>())).collect()
}

fn ensemble_from_copies(per_copy: &[Vec<Vec<f64>>], i: usize) -> Option<Vote> {
    let dists: Vec<Vec<f64>> = per_copy.iter().map(|c| c[i].clone()).collect();
    ensemble_vote(&dists)
}

/// One member's JPEG-ensemble label for one image.
pub fn ensemble_label(member: &TeamMember, image: &RgbImage, config: &EnsembleConfig) -> Result<Option<Vote>> {
    let copies = jpeg_copies(&[image], &config.quality_factors)?;
    Ok(ensemble_from_copies(&copy_predictions(member, &copies)?, 0))
}

/// Team label for one image whose cluster carries `weights` (one per member).
pub fn team_label(team: &Team, weights: &[f64], image: &RgbImage, config: &EnsembleConfig) -> Result<Option<usize>> {
    let votes = team.members.iter().map(|m| ensemble_label(m, image, config)).collect::<Result<Vec<_>>>()?;
    let weights = if config.single_best_member { single_best(weights) } else { weights.to_vec() };
    Ok(team_vote(&votes, &weights, config.agreement, true))
}

/// Team labels for many images at once: `votes[member][i]` plus the decision per image.
pub fn label_images(
    team: &Team,
    images: &[&RgbImage],
    cluster_of: &[usize],
    assessment: &TargetAssessment,
    config: &EnsembleConfig,
    require_agreement: bool,
) -> Result<Vec<Option<usize>>> {
    let copies = jpeg_copies(images, &config.quality_factors)?;
    let per_member: Vec<_> = team.members.iter().map(|m| copy_predictions(m, &copies)).collect::<Result<_>>()?;
    Ok((0..images.len())
        .map(|i| {
            let votes: Vec<Option<Vote>> = per_member.iter().map(|p| ensemble_from_copies(p, i)).collect();
            let w = &assessment.weights[cluster_of[i]];
            let w = if config.single_best_member { single_best(w) } else { w.clone() };
            team_vote(&votes, &w, config.agreement, require_agreement)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindCoverage {
    /// Fraction of target records carrying the kind after integration.
    pub labeled_fraction: f64,
    pub missing_before: usize,
    pub newly_labeled: usize,
    /// Precision of the newly assigned labels when ground truth is known.
    pub accepted_precision: Option<f64>,
    pub per_target: BTreeMap<String, f64>,
}

pub type CoverageReport = BTreeMap<String, KindCoverage>;

/// Completes missing annotations. Existing labels are never overwritten and
/// unresolved entries stay blank.
pub fn integrate(datasets: &[Dataset], plan: &IntegrationPlan) -> Result<(Vec<Dataset>, CoverageReport)> {
    plan.validate()?;
    let schema: Schema = datasets.first().ok_or(Error::EmptyDataset)?.schema;
    if datasets.iter().any(|d| d.schema != schema) {
        return Err(Error::Config("datasets disagree on the schema".into()));
    }
    let embedder = FeatureEmbedder::new(&plan.embedder);
    let mut out: Vec<Dataset> = datasets.to_vec();
    let mut report = CoverageReport::new();
    let find = |name: &str| {
        datasets.iter().position(|d| d.name == name).ok_or_else(|| Error::Config(format!("unknown dataset `{name}`")))
    };
    for route in plan.routing(datasets)? {
        let kind = route.kind;
        let sources: Vec<&Dataset> = route.sources.iter().map(|n| find(n).map(|i| &datasets[i])).collect::<Result<_>>()?;
        let targets: Vec<usize> = route.targets.iter().map(|n| find(n)).collect::<Result<_>>()?;
        let missing: usize = targets
            .iter()
            .map(|&t| datasets[t].records.iter().filter(|r| r.labels.get(kind).is_none()).count())
            .sum();
        let mut coverage = KindCoverage {
            labeled_fraction: 1.0,
            missing_before: missing,
            newly_labeled: 0,
            accepted_precision: None,
            per_target: BTreeMap::new(),
        };
        let mut correct = 0usize;
        let mut with_truth = 0usize;
        let team = if missing > 0 {
            if sources.is_empty() {
                return Err(Error::NoSource(kind.name().into()));
            }
            Some(build_team(&sources, kind, plan, &embedder)?)
        } else {
            None
        };
        let (mut labeled_total, mut records_total) = (0usize, 0usize);
        for &t in &targets {
            let target = &mut out[t];
            if let Some(team) = &team {
                let blanks: Vec<usize> = (0..target.records.len()).filter(|&i| target.records[i].labels.get(kind).is_none()).collect();
                if !blanks.is_empty() {
                    let assessment = assess_target(team, target, plan, &embedder)?;
                    let images: Vec<&RgbImage> = blanks.iter().map(|&i| &target.records[i].image).collect();
                    let cluster_of: Vec<usize> = blanks.iter().map(|&i| assessment.clusters.assignments[i]).collect();
                    let decided = label_images(team, &images, &cluster_of, &assessment, &plan.ensemble, true)?;
                    for (&i, label) in blanks.iter().zip(decided) {
                        let Some(label) = label else { continue };
                        let record = &mut target.records[i];
                        record.labels.set(kind, Some(label));
                        coverage.newly_labeled += 1;
                        if let Some(truth) = record.truth.and_then(|t| t.get(kind)) {
                            with_truth += 1;
                            correct += usize::from(truth == label);
                        }
                    }
                }
            }
            let labeled = target.records.iter().filter(|r| r.labels.get(kind).is_some()).count();
            coverage.per_target.insert(target.name.clone(), labeled as f64 / target.records.len().max(1) as f64);
            labeled_total += labeled;
            records_total += target.records.len();
        }
        if records_total > 0 {
            coverage.labeled_fraction = labeled_total as f64 / records_total as f64;
        }
        if with_truth > 0 {
            coverage.accepted_precision = Some(correct as f64 / with_truth as f64);
        }
        report.insert(kind.name().into(), coverage);
    }
    Ok((out, report))
}

/// Precision over accepted labels and the accepted fraction for one row of a staged evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: String,
    pub precision: f64,
    pub coverage: f64,
}

fn precision_of(decided: &[Option<usize>], truth: &[usize]) -> StageRow {
    let accepted: Vec<(usize, usize)> = decided.iter().zip(truth).filter_map(|(d, &t)| d.map(|d| (d, t))).collect();
    let precision = if accepted.is_empty() {
        0.0
    } else {
        accepted.iter().filter(|(d, t)| d == t).count() as f64 / accepted.len() as f64
    };
    StageRow { stage: String::new(), precision, coverage: accepted.len() as f64 / truth.len().max(1) as f64 }
}

fn mean_rows(stage: &str, rows: &[StageRow]) -> StageRow {
    let n = rows.len().max(1) as f64;
    StageRow {
        stage: stage.into(),
        precision: rows.iter().map(|r| r.precision).sum::<f64>() / n,
        coverage: rows.iter().map(|r| r.coverage).sum::<f64>() / n,
    }
}

/// Labeling precision on a target with known ground truth as the mechanisms are
/// added one at a time: single members with last-epoch weights, early-stopped
/// weights, JPEG ensembles (first quality factor only, then all), the weighted
/// team vote, and finally the agreement rule. Single-member rows average over members.
pub fn evaluate_stages(
    team: &Team,
    target: &Dataset,
    plan: &IntegrationPlan,
    embedder: &FeatureEmbedder,
) -> Result<Vec<StageRow>> {
    let kind = team.kind;
    let truth: Vec<usize> = target
        .records
        .iter()
        .map(|r| r.truth.and_then(|t| t.get(kind)).ok_or_else(|| Error::Config(format!("`{}` lacks ground truth", target.name))))
        .collect::<Result<_>>()?;
    let images: Vec<&RgbImage> = target.records.iter().map(|r| &r.image).collect();
    let qualities = &plan.ensemble.quality_factors;
    let copies = jpeg_copies(&images, qualities)?;

    let plain = |m: &TeamMember| -> Result<StageRow> {
        let predicted: Vec<usize> = m.predict(&images)?.iter().map(|d| ndgrad::argmax(d)).collect();
        Ok(StageRow { stage: String::new(), precision: accuracy(&predicted, &truth), coverage: 1.0 })
    };
    let initial = team.members.iter().map(|m| plain(&m.at_last_epoch())).collect::<Result<Vec<_>>>()?;
    let early = team.members.iter().map(plain).collect::<Result<Vec<_>>>()?;

    let per_member: Vec<_> = team.members.iter().map(|m| copy_predictions(m, &copies)).collect::<Result<_>>()?;
    let ensemble_rows = |n_copies: usize| -> Vec<StageRow> {
        per_member
            .iter()
            .map(|p| {
                let decided: Vec<Option<usize>> =
                    (0..images.len()).map(|i| ensemble_from_copies(&p[..n_copies], i).map(|v| v.label)).collect();
                precision_of(&decided, &truth)
            })
            .collect()
    };

    let mut rows = vec![mean_rows("Initial", &initial), mean_rows("+EarlyStop", &early)];
    if let Some(first) = qualities.first() {
        rows.push(mean_rows(&format!("+Compression({first})"), &ensemble_rows(2)));
    }
    let list: Vec<String> = qualities.iter().map(|q| q.to_string()).collect();
    rows.push(mean_rows(&format!("+Compression({})", list.join(",")), &ensemble_rows(copies.len())));

    let assessment = assess_target(team, target, plan, embedder)?;
    for (stage, agree) in [("+Team", false), ("+Agreement", true)] {
        let decided: Vec<Option<usize>> = (0..images.len())
            .map(|i| {
                let votes: Vec<Option<Vote>> = per_member.iter().map(|p| ensemble_from_copies(p, i)).collect();
                let w = &assessment.weights[assessment.clusters.assignments[i]];
                let w = if plan.ensemble.single_best_member { single_best(w) } else { w.clone() };
                team_vote(&votes, &w, plan.ensemble.agreement, agree)
            })
            .collect();
        let mut row = precision_of(&decided, &truth);
        row.stage = stage.into();
        rows.push(row);
    }
    Ok(rows)
}
