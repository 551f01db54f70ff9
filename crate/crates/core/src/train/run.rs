use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndgrad::{Adam, Tape64};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{compose_loss, total_step, Batch, LossConfig, LossReport};
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::net::{ForwardOutputs, Model};
use crate::synth::{AnnotationKind, DataRecord, Dataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 32, learning_rate: 1e-3, seed: 0, loss: LossConfig::default() }
    }
}

/// Mean losses of one pass, keyed like [`LossReport`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub fused: f64,
    pub branch: BTreeMap<String, f64>,
    pub harmonization: BTreeMap<String, f64>,
    pub total: f64,
}

impl LossSummary {
    fn accumulate(&mut self, r: &LossReport, weight: f64) {
        self.fused += r.fused * weight;
        self.total += r.total * weight;
        for b in &r.branches {
            let name = b.kind.map_or("?", |k| k.name()).to_string();
            *self.branch.entry(name.clone()).or_default() += b.branch * weight;
            *self.harmonization.entry(name).or_default() += b.harmonization * weight;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: LossSummary,
    pub val_loss: LossSummary,
    /// Validation top-1 accuracy per head (`model`, `color`, …).
    pub val_accuracy: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub variant: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_secs: f64,
}

impl RunHistory {
    /// Validation accuracy of `head` per epoch.
    pub fn accuracy_curve(&self, head: &str) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_accuracy.get(head).copied().unwrap_or(f64::NAN)).collect()
    }

    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss.total).collect()
    }

    pub fn final_accuracy(&self, head: &str) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_accuracy.get(head).copied())
    }

    /// `history.csv`: one row per epoch, losses then accuracies, columns sorted by name.
    pub fn to_csv(&self) -> String {
        let Some(first) = self.epochs.first() else { return "epoch\n".into() };
        let branch: Vec<&String> = first.train_loss.branch.keys().collect();
        let heads: Vec<&String> = first.val_accuracy.keys().collect();
        let mut out = String::from("epoch,train_total,train_fused");
        for b in &branch {
            let _ = write!(out, ",train_branch_{b},train_harmonization_{b}");
        }
        out.push_str(",val_total,val_fused");
        for h in &heads {
            let _ = write!(out, ",val_acc_{h}");
        }
        out.push('\n');
        for e in &self.epochs {
            let _ = write!(out, "{},{},{}", e.epoch, e.train_loss.total, e.train_loss.fused);
            for b in &branch {
                let _ = write!(out, ",{},{}", e.train_loss.branch[*b], e.train_loss.harmonization[*b]);
            }
            let _ = write!(out, ",{},{}", e.val_loss.total, e.val_loss.fused);
            for h in &heads {
                let _ = write!(out, ",{}", e.val_accuracy[*h]);
            }
            out.push('\n');
        }
        out
    }
}

/// Content hash over record ids, labels and pixels.
pub fn dataset_hash(dataset: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update(dataset.name.as_bytes());
    for r in &dataset.records {
        h.update(r.id.as_bytes());
        h.update(serde_json::to_vec(&r.labels).unwrap_or_default());
        h.update(r.image.as_raw());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Provenance written next to a run's history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub variant: String,
    pub model: crate::net::ModelConfig,
    pub train: TrainConfig,
    pub train_dataset: String,
    pub train_dataset_hash: String,
    pub val_dataset: String,
    pub val_dataset_hash: String,
    pub param_count: usize,
    /// Hyperparameters of the full-scale setting these runs scale down.
    pub reference_hyperparameters: BTreeMap<String, String>,
    pub wall_clock_secs: f64,
    pub finished_unix_secs: u64,
}

impl RunManifest {
    pub fn new(model: &Model, train: &Dataset, val: &Dataset, config: &TrainConfig, history: &RunHistory) -> Self {
        let reference = [("image_size", "224x224"), ("epochs", "50"), ("learning_rate", "1e-4"), ("batch_size", "64")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Self {
            variant: model.variant().to_string(),
            model: model.config.clone(),
            train: config.clone(),
            train_dataset: train.name.clone(),
            train_dataset_hash: dataset_hash(train),
            val_dataset: val.name.clone(),
            val_dataset_hash: dataset_hash(val),
            param_count: model.param_count(),
            reference_hyperparameters: reference,
            wall_clock_secs: history.wall_clock_secs,
            finished_unix_secs: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }
}

/// Writes `history.csv`, `history.json` and `run_manifest.json` into `dir`.
pub fn save_run(dir: impl AsRef<Path>, history: &RunHistory, manifest: &RunManifest) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("history.csv"), history.to_csv())?;
    std::fs::write(dir.join("history.json"), serde_json::to_vec_pretty(history)?)?;
    std::fs::write(dir.join("run_manifest.json"), serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

/// Top-1 accuracy of `head` over the records carrying that label.
pub fn accuracy_of(outputs: &ForwardOutputs, records: &[&DataRecord], head: AnnotationKind) -> Result<f64> {
    let logits = outputs.head(head).ok_or_else(|| Error::MissingHead(head.name().into()))?;
    let predicted = logits.argmax_rows();
    let (p, t): (Vec<usize>, Vec<usize>) =
        records.iter().zip(predicted).filter_map(|(r, p)| r.labels.get(head).map(|t| (p, t))).unzip();
    Ok(accuracy(&p, &t))
}

pub fn evaluate_accuracy(model: &Model, dataset: &Dataset, head: AnnotationKind) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if head != AnnotationKind::Model && !model.config.branches.contains(&head) {
        return Err(Error::MissingHead(head.name().into()));
    }
    let images: Vec<_> = dataset.records.iter().map(|r| &r.image).collect();
    let outputs = model.predict(&images)?;
    accuracy_of(&outputs, &dataset.records.iter().collect::<Vec<_>>(), head)
}

fn validate(model: &Model, val: &Dataset, config: &TrainConfig, epoch: usize) -> Result<(LossSummary, BTreeMap<String, f64>)> {
    let mut summary = LossSummary::default();
    let mut logits: Vec<ForwardOutputs> = Vec::new();
    let records: Vec<&DataRecord> = val.records.iter().collect();
    for chunk in records.chunks(64) {
        let batch = Batch::from_records(chunk);
        let mut tape = Tape64::new();
        let vars = model.forward(&mut tape, &batch.images)?;
        let (_, report) = compose_loss(&mut tape, model, &vars, &batch, &config.loss, epoch)?;
        summary.accumulate(&report, chunk.len() as f64 / records.len() as f64);
        logits.push(model.outputs(&tape, &vars));
    }
    let mut acc = BTreeMap::new();
    let mut heads = vec![AnnotationKind::Model];
    heads.extend(model.config.branches.iter().copied());
    for head in heads {
        let (mut correct, mut total) = (0usize, 0usize);
        let mut offset = 0;
        for out in &logits {
            let pred = out.head(head).expect("head exists").argmax_rows();
            for (i, p) in pred.into_iter().enumerate() {
                if let Some(t) = records[offset + i].labels.get(head) {
                    total += 1;
                    correct += usize::from(p == t);
                }
            }
            offset += out.len();
        }
        acc.insert(head.name().to_string(), if total == 0 { 0.0 } else { correct as f64 / total as f64 });
    }
    Ok((summary, acc))
}

/// Trains with seeded shuffling and Adam, validating after every epoch.
pub fn train(model: &mut Model, train_set: &Dataset, val_set: &Dataset, config: &TrainConfig) -> Result<RunHistory> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut train_loss = LossSummary::default();
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let records: Vec<&DataRecord> = idx.iter().map(|&i| &train_set.records[i]).collect();
            let batch = Batch::from_records(&records);
            let report = total_step(model, &batch, &mut optimizer, &config.loss, epoch, step)?;
            train_loss.accumulate(&report, idx.len() as f64 / train_set.len() as f64);
        }
        let (val_loss, val_accuracy) = validate(model, val_set, config, epoch)?;
        log::info!(
            "{} epoch {epoch}: train {:.4} val {:.4} acc {:?}",
            model.variant(),
            train_loss.total,
            val_loss.total,
            val_accuracy
        );
        epochs.push(EpochRecord { epoch, train_loss, val_loss, val_accuracy });
    }
    Ok(RunHistory {
        variant: model.variant().to_string(),
        seed: config.seed,
        epochs,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}
