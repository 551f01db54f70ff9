use std::collections::BTreeMap;

use ndgrad::{Adam, Optimizer, ParamStore64, Tape64, Tensor64};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ForwardOutputs, Model};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::synth::{AnnotationKind, Dataset, KnowledgeBase};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self { epochs: 40, batch_size: 32, learning_rate: 1e-2, seed: 0 }
    }
}

/// One linear model-classifier per make over the frozen fused feature `x_F`.
#[derive(Clone, Debug)]
pub struct CascadeHeads {
    pub store: ParamStore64,
    /// make → (head, the make's model ids in head-output order).
    pub heads: BTreeMap<usize, (Linear, Vec<usize>)>,
    pub models: usize,
}

impl CascadeHeads {
    /// Rebuilds the heads from a store written by [`train_cascade`], whose
    /// layers are named `cascade.{make}`.
    pub fn from_store(store: ParamStore64, kb: &KnowledgeBase) -> Result<Self> {
        let mut heads = BTreeMap::new();
        for (_, p) in store.iter() {
            let Some(make) = p.name.strip_prefix("cascade.").and_then(|s| s.strip_suffix(".weight")) else { continue };
            let make: usize = make.parse().map_err(|_| Error::Config(format!("bad cascade layer `{}`", p.name)))?;
            let weight = store.id(&p.name)?;
            let bias = store.id(&format!("cascade.{make}.bias"))?;
            let catalog = kb.models_of_make(make);
            if p.value.shape() != [p.value.shape()[0], catalog.len()] {
                return Err(Error::Config(format!("cascade head {make} does not match the catalog")));
            }
            heads.insert(make, (Linear { weight, bias }, catalog));
        }
        Ok(Self { store, heads, models: kb.len() })
    }
}

/// Trains each make's head only on samples of that make; makes without
/// samples get no head.
pub fn train_cascade(model: &Model, train: &Dataset, kb: &KnowledgeBase, config: &CascadeConfig) -> Result<CascadeHeads> {
    let records: Vec<_> = train.records.iter().filter(|r| r.labels.get(AnnotationKind::Model).is_some()).collect();
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let images: Vec<_> = records.iter().map(|r| &r.image).collect();
    let features = model.predict(&images)?.x_f;
    let dim = features.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore64::new();
    let mut heads = BTreeMap::new();
    let mut by_make: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let m = r.labels.get(AnnotationKind::Model).expect("filtered");
        let (make, _) = kb.lookup(m).ok_or(Error::OutOfRange { what: "model", id: m, limit: kb.len() })?;
        by_make.entry(make).or_default().push((i, m));
    }
    for (make, samples) in by_make {
        let catalog = kb.models_of_make(make);
        let head = Linear::new(&mut store, &format!("cascade.{make}"), dim, catalog.len(), &mut rng);
        let mut optimizer = Adam::new(config.learning_rate);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(config.batch_size) {
                let rows: Vec<f64> = batch.iter().flat_map(|&j| features.row(samples[j].0).to_vec()).collect();
                let targets: Vec<usize> = batch
                    .iter()
                    .map(|&j| catalog.iter().position(|&m| m == samples[j].1).expect("model of this make"))
                    .collect();
                let mut tape = Tape64::new();
                let x = tape.constant(Tensor64::new(vec![batch.len(), dim], rows)?);
                let logits = head.forward(&mut tape, &store, x)?;
                let loss = tape.cross_entropy(logits, &targets)?;
                tape.backward_into(loss, &mut store)?;
                optimizer.step(&mut store)?;
                store.zero_grad();
            }
        }
        heads.insert(make, (head, catalog));
    }
    Ok(CascadeHeads { store, heads, models: kb.len() })
}

/// Full-catalog scores: the make branch's argmax picks a head, which scores
/// that make's models; every other model gets `-∞`.
pub fn cascade_predict(outputs: &ForwardOutputs, heads: &CascadeHeads) -> Result<Tensor64> {
    let make_logits = outputs.head(AnnotationKind::Make).ok_or_else(|| Error::MissingHead("make".into()))?;
    let n = outputs.len();
    let mut data = vec![f64::NEG_INFINITY; n * heads.models];
    for (i, make) in make_logits.argmax_rows().into_iter().enumerate() {
        let (head, catalog) = heads.heads.get(&make).ok_or_else(|| Error::MissingHead(format!("cascade make {make}")))?;
        let mut tape = Tape64::new();
        let x = tape.constant(Tensor64::new(vec![1, outputs.x_f.cols()], outputs.x_f.row(i).to_vec())?);
        let scores = head.forward(&mut tape, &heads.store, x)?;
        for (&m, &s) in catalog.iter().zip(tape.value(scores).data()) {
            data[i * heads.models + m] = s;
        }
    }
    Ok(Tensor64::new(vec![n, heads.models], data)?)
}
