use std::path::{Path, PathBuf};

use colabel::corroborate::{IntegrationPlan, MemberConfig};
use colabel::net::{CascadeConfig, ModelConfig, Variant};
use colabel::synth::AnnotationKind;
use colabel::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::error::{CliError, CliResult};

/// Reads a JSON config; unknown fields and missing files are validation errors.
pub fn load<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

/// Joins relative paths onto `base`.
pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Fails unless `path` exists.
pub fn existing(base: &Path, path: &Path) -> CliResult<PathBuf> {
    let p = resolve(base, path);
    if p.exists() {
        Ok(p)
    } else {
        Err(CliError::validation(format!("path does not exist: {}", p.display())))
    }
}

/// `integrate`: dataset directories plus the integration plan.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrateConfig {
    pub datasets: Vec<PathBuf>,
    #[serde(default)]
    pub plan: IntegrationPlan,
    /// Also write the staged precision table for targets with ground truth.
    #[serde(default)]
    pub stage_table: bool,
}

/// `train-member`: one labeling-team member.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberRunConfig {
    pub train: PathBuf,
    pub validation: Vec<PathBuf>,
    pub kind: AnnotationKind,
    #[serde(default)]
    pub member: MemberConfig,
}

/// `train`: one model run.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub train: PathBuf,
    pub validation: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainConfig,
    /// Per-make heads for the two-stage cascade variant.
    #[serde(default)]
    pub cascade: CascadeConfig,
}

/// `ablate`: one training setup repeated over variants and seeds.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub train: PathBuf,
    pub validation: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub cascade: CascadeConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Head used for the convergence comparison.
    #[serde(default = "default_head")]
    pub head: String,
}

fn default_head() -> String {
    "model".into()
}

fn default_tau() -> f64 {
    0.5
}

/// `eval` and `correct`: a trained run scored on a dataset.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub run: PathBuf,
    pub dataset: PathBuf,
    /// Match threshold.
    #[serde(default = "default_tau")]
    pub tau: f64,
}

/// `report`: directories whose results are gathered into tables.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// Training run directories (`history.json`).
    #[serde(default)]
    pub runs: Vec<PathBuf>,
    /// Integration output directories (`coverage_report.json`, `stages.json`).
    #[serde(default)]
    pub integration: Vec<PathBuf>,
    /// Evaluation output directories (`evaluation.json`).
    #[serde(default)]
    pub evaluations: Vec<PathBuf>,
}

/// One pipeline step: a subcommand and its config file.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    pub command: String,
    pub config: PathBuf,
}

/// Stage configs are resolved against the pipeline file's directory; paths
/// inside stage configs are resolved against the output root, and each stage
/// writes to `<out>/<stage name>`.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub seed: u64,
    pub out: PathBuf,
}
