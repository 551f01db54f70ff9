use image::RgbImage;
use ndgrad::{Optimizer, Tape64, Tensor64, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ForwardVars, Model, Variant};
use crate::synth::{AnnotationKind, DataRecord};

/// A mini-batch with per-kind label presence.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub images: Vec<&'a RgbImage>,
    /// `labels[k][i]` for each kind in [`AnnotationKind::ALL`] order.
    pub labels: [Vec<Option<usize>>; 4],
}

impl<'a> Batch<'a> {
    pub fn from_records(records: &[&'a DataRecord]) -> Self {
        let labels = AnnotationKind::ALL.map(|k| records.iter().map(|r| r.labels.get(k)).collect());
        Self { images: records.iter().map(|r| &r.image).collect(), labels }
    }

    /// `N_B`.
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels_of(&self, kind: AnnotationKind) -> &[Option<usize>] {
        &self.labels[kind as usize]
    }

    /// `N_C` for `kind`: samples carrying that annotation.
    pub fn annotated(&self, kind: AnnotationKind) -> usize {
        self.labels_of(kind).iter().filter(|l| l.is_some()).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub branch_weight: f64,
    pub harmonization_weight: f64,
    pub fused_weight: f64,
    /// Treat `softmax(y_F)` as a constant target in the harmonization loss.
    pub detach_target: bool,
    /// Epochs before the harmonization loss switches on.
    pub harmonization_warmup: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { branch_weight: 1.0, harmonization_weight: 1.0, fused_weight: 1.0, detach_target: true, harmonization_warmup: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BranchLoss {
    pub kind: Option<AnnotationKind>,
    /// `L_B^k`.
    pub branch: f64,
    /// `L_H^k`.
    pub harmonization: f64,
    /// `N_C` for this kind.
    pub annotated: usize,
}

impl BranchLoss {
    /// `L_k = L_B^k + L_H^k`.
    pub fn combined(&self) -> f64 {
        self.branch + self.harmonization
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// `L_F`.
    pub fused: f64,
    pub branches: Vec<BranchLoss>,
    /// `L_F + Σ_k L_k` (with the configured weights).
    pub total: f64,
    /// `N_B`.
    pub batch_size: usize,
}

/// Mean cross-entropy over the samples carrying a label; exactly 0, with no
/// gradient, when none do.
pub fn branch_loss(tape: &mut Tape64, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
    let (rows, targets): (Vec<usize>, Vec<usize>) =
        labels.iter().enumerate().filter_map(|(i, l)| l.map(|l| (i, l))).unzip();
    if rows.is_empty() {
        return Ok(tape.constant(Tensor64::scalar(0.0)));
    }
    let picked = if rows.len() == labels.len() { logits } else { tape.select_rows(logits, &rows)? };
    Ok(tape.cross_entropy(picked, &targets)?)
}

/// `−(1/N) Σ_i Σ_c p_c(y_F,i) · log p_c(y_{k-fused},i)`, with `y_F` detached unless `detach` is false.
pub fn harmonization_loss(tape: &mut Tape64, y_fused: Var, y_f: Var, detach: bool) -> Result<Var> {
    let (a, b) = (tape.value(y_fused).shape().to_vec(), tape.value(y_f).shape().to_vec());
    if a != b {
        return Err(ndgrad::Error::Shape { op: "harmonization_loss", detail: format!("{a:?} vs {b:?}") }.into());
    }
    let target = if detach { tape.detach(y_f) } else { y_f };
    let p = tape.softmax(target)?;
    let log_q = tape.log_softmax(y_fused)?;
    let prod = tape.mul(p, log_q)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0 / a[0] as f64))
}

/// Mean cross-entropy of the fused logits against model labels.
pub fn fused_loss(tape: &mut Tape64, y_f: Var, labels: &[usize]) -> Result<Var> {
    Ok(tape.cross_entropy(y_f, labels)?)
}

/// Batch-hard triplet loss with Euclidean distances.
pub fn triplet_loss(tape: &mut Tape64, embeddings: Var, labels: &[usize], margin: f64) -> Result<Var> {
    Ok(tape.batch_hard_triplet(embeddings, labels, margin)?)
}

/// Builds the variant's objective on `vars`. CoLabel-topology variants use
/// `L_F + Σ_k (L_B^k + L_H^k)`; FusionOnly uses `L_F`; SMBL uses `L_F + Σ_k L_B^k`.
pub fn compose_loss(
    tape: &mut Tape64,
    model: &Model,
    vars: &ForwardVars,
    batch: &Batch,
    config: &LossConfig,
    epoch: usize,
) -> Result<(Var, LossReport)> {
    let models: Vec<usize> = batch
        .labels_of(AnnotationKind::Model)
        .iter()
        .map(|l| l.ok_or_else(|| Error::Config("every training sample needs a model label".into())))
        .collect::<Result<_>>()?;
    let variant = model.variant();
    let l_f = fused_loss(tape, vars.y_f, &models)?;
    let mut terms = vec![tape.scale(l_f, config.fused_weight)];
    let mut report = LossReport { fused: tape.value(l_f).item(), batch_size: batch.len(), ..Default::default() };
    let use_branch = variant != Variant::FusionOnly;
    let use_harmonization =
        !matches!(variant, Variant::FusionOnly | Variant::Smbl) && epoch >= config.harmonization_warmup;
    for (i, &kind) in model.config.branches.iter().enumerate() {
        let mut entry = BranchLoss { kind: Some(kind), annotated: batch.annotated(kind), ..Default::default() };
        if use_branch {
            let l_b = branch_loss(tape, vars.y[i], batch.labels_of(kind))?;
            entry.branch = tape.value(l_b).item();
            terms.push(tape.scale(l_b, config.branch_weight));
        }
        if use_harmonization {
            let l_h = harmonization_loss(tape, vars.y_fused[i], vars.y_f, config.detach_target)?;
            entry.harmonization = tape.value(l_h).item();
            terms.push(tape.scale(l_h, config.harmonization_weight));
        }
        report.branches.push(entry);
    }
    let total = tape.add_all(&terms)?;
    report.total = tape.value(total).item();
    Ok((total, report))
}

/// One optimizer step on the variant's objective.
pub fn total_step(
    model: &mut Model,
    batch: &Batch,
    optimizer: &mut dyn Optimizer<f64>,
    config: &LossConfig,
    epoch: usize,
    step: usize,
) -> Result<LossReport> {
    let mut tape = Tape64::new();
    let vars = model.forward(&mut tape, &batch.images)?;
    let (total, report) = compose_loss(&mut tape, model, &vars, batch, config, epoch)?;
    if !report.total.is_finite() {
        return Err(Error::NonFiniteLoss { epoch, step, detail: format!("{report:?}") });
    }
    tape.backward_into(total, &mut model.store)?;
    optimizer.step(&mut model.store)?;
    model.store.zero_grad();
    Ok(report)
}
