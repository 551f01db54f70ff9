use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::ForwardOutputs;
use crate::synth::{AnnotationKind, KnowledgeBase};

/// One Match decision with the branch evidence behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionEntry {
    pub index: usize,
    pub id: Option<String>,
    pub original: usize,
    pub corrected: usize,
    pub predicted_make: usize,
    pub predicted_type: usize,
    pub make_confidence: f64,
    pub type_confidence: f64,
    /// The knowledge base agreed with both branches.
    pub consistent: bool,
    /// Size of the candidate set consistent with the branch predictions.
    pub candidates: usize,
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Match correction starting from `current` model predictions.
///
/// A prediction whose catalog make and type agree with the make and type
/// branches is kept. Otherwise the fused scores are restricted to the models
/// consistent with the branch make and type; the best of those replaces the
/// prediction when its probability is at least `tau` times that of `current`.
pub fn match_from(
    outputs: &ForwardOutputs,
    current: &[usize],
    kb: &KnowledgeBase,
    tau: f64,
) -> Result<(Vec<usize>, Vec<CorrectionEntry>)> {
    if kb.is_empty() {
        return Err(Error::EmptyKnowledgeBase);
    }
    let make_logits = outputs.head(AnnotationKind::Make).ok_or_else(|| Error::MissingHead("make".into()))?;
    let type_logits = outputs.head(AnnotationKind::Type).ok_or_else(|| Error::MissingHead("type".into()))?;
    let mut out = Vec::with_capacity(current.len());
    let mut log = Vec::with_capacity(current.len());
    for (i, &original) in current.iter().enumerate() {
        let make_p = softmax_row(make_logits.row(i));
        let type_p = softmax_row(type_logits.row(i));
        let predicted_make = ndgrad::argmax(&make_p);
        let predicted_type = ndgrad::argmax(&type_p);
        let consistent = kb.lookup(original) == Some((predicted_make, predicted_type));
        let candidates = kb.consistent_models(predicted_make, predicted_type);
        let mut corrected = original;
        if !consistent && !candidates.is_empty() {
            let p = softmax_row(outputs.y_f.row(i));
            let best = candidates
                .iter()
                .copied()
                .fold(candidates[0], |b, m| if p[m] > p[b] { m } else { b });
            if p[best] >= tau * p[original] {
                corrected = best;
            }
        }
        out.push(corrected);
        log.push(CorrectionEntry {
            index: i,
            id: None,
            original,
            corrected,
            predicted_make,
            predicted_type,
            make_confidence: make_p[predicted_make],
            type_confidence: type_p[predicted_type],
            consistent,
            candidates: candidates.len(),
        });
    }
    Ok((out, log))
}

/// Match correction of the fused argmax.
pub fn match_correct(outputs: &ForwardOutputs, kb: &KnowledgeBase, tau: f64) -> Result<(Vec<usize>, Vec<CorrectionEntry>)> {
    match_from(outputs, &outputs.y_f.argmax_rows(), kb, tau)
}

/// Appends entries as JSON lines.
pub fn write_corrections(path: impl AsRef<Path>, entries: &[CorrectionEntry]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
