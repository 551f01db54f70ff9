use image::RgbImage;
use ndgrad::{Adam, Optimizer, ParamStore64, Tape64, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Augment;
use crate::error::{Error, Result};
use crate::layers::{flatten, images_to_tensor, Conv, Linear};
use crate::metrics::{accuracy, mean_average_precision};
use crate::synth::{AnnotationKind, Dataset, Schema};

/// Softmax temperature turning centroid distances into an embedder's class distribution.
const CENTROID_TEMPERATURE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemberConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Keep training for all `epochs` after patience runs out; the early-stop
    /// snapshot is still the one chosen under `patience`.
    pub run_full_budget: bool,
    pub augment: Augment,
    pub widths: [usize; 2],
    pub embedding_dim: usize,
    pub margin: f64,
    /// Resample the embedder's training set with replacement.
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for MemberConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 32,
            learning_rate: 1e-3,
            patience: 5,
            run_full_budget: false,
            augment: Augment::default(),
            widths: [8, 16],
            embedding_dim: 32,
            margin: 0.3,
            bootstrap: false,
            seed: 0,
        }
    }
}

/// Small conv net: two conv-ReLU-pool stages, a final pool, flatten, linear.
#[derive(Clone, Debug)]
pub struct MemberNet {
    convs: [Conv; 2],
    head: Linear,
    embedder: bool,
}

impl MemberNet {
    pub fn new(image_size: usize, widths: [usize; 2], out_dim: usize, embedder: bool, rng: &mut impl Rng) -> Result<(Self, ParamStore64)> {
        if !image_size.is_multiple_of(8) {
            return Err(Error::Config(format!("member nets need image size divisible by 8, got {image_size}")));
        }
        let mut store = ParamStore64::new();
        let convs = [Conv::new(&mut store, "member.conv1", 3, widths[0], rng), Conv::new(&mut store, "member.conv2", widths[0], widths[1], rng)];
        let side = image_size / 8;
        let head = Linear::new(&mut store, "member.head", widths[1] * side * side, out_dim, rng);
        Ok((Self { convs, head, embedder }, store))
    }

    /// Logits, or L2-normalized embeddings for an embedder.
    pub fn forward(&self, tape: &mut Tape64, store: &ParamStore64, images: &[&RgbImage]) -> Result<Var> {
        let mut h = tape.constant(images_to_tensor(images)?);
        for conv in &self.convs {
            h = conv.forward(tape, store, h)?;
            h = tape.relu(h);
            h = tape.avg_pool2(h)?;
        }
        h = tape.avg_pool2(h)?;
        let h = flatten(tape, h)?;
        let out = self.head.forward(tape, store, h)?;
        if self.embedder {
            Ok(tape.l2_normalize(out)?)
        } else {
            Ok(out)
        }
    }

    fn outputs(&self, store: &ParamStore64, images: &[&RgbImage]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut tape = Tape64::new();
            let y = self.forward(&mut tape, store, chunk)?;
            let v = tape.value(y);
            out.extend((0..v.rows()).map(|i| v.row(i).to_vec()));
        }
        Ok(out)
    }
}

/// Validation trace of one member's training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopTrace {
    /// Mean cross-dataset validation score per epoch (accuracy or mAP).
    pub scores: Vec<f64>,
    pub best_epoch: usize,
    /// Epoch after which patience ran out, if it did.
    pub stopped_epoch: Option<usize>,
}

/// Weights plus, for embedders, per-class centroids of the training embeddings.
#[derive(Clone, Debug)]
pub struct MemberWeights {
    pub store: ParamStore64,
    pub centroids: Vec<(usize, Vec<f64>)>,
}

/// A trained labeling model for one annotation kind.
#[derive(Clone, Debug)]
pub struct TeamMember {
    pub kind: AnnotationKind,
    pub source: String,
    pub classes: usize,
    net: MemberNet,
    /// Weights restored by early stopping.
    pub selected: MemberWeights,
    /// Weights after the last epoch that ran.
    pub last: MemberWeights,
    pub trace: EarlyStopTrace,
    /// Clusters of the member's training images in the shared feature space.
    pub training_clusters: Vec<Vec<Vec<f64>>>,
}

impl TeamMember {
    pub fn is_embedder(&self) -> bool {
        self.net.embedder
    }

    /// The same member with its last-epoch weights in place of the early-stopped ones.
    pub fn at_last_epoch(&self) -> TeamMember {
        TeamMember { selected: self.last.clone(), ..self.clone() }
    }

    /// Class distribution per image.
    pub fn predict(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f64>>> {
        let out = self.net.outputs(&self.selected.store, images)?;
        if !self.net.embedder {
            return Ok(out.iter().map(|z| softmax(z)).collect());
        }
        Ok(out.iter().map(|e| centroid_distribution(e, &self.selected.centroids, self.classes)).collect())
    }

    /// L2-normalized embeddings (embedders only).
    pub fn embed(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f64>>> {
        if !self.net.embedder {
            return Err(Error::MissingHead("embedding".into()));
        }
        self.net.outputs(&self.selected.store, images)
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn centroid_distribution(e: &[f64], centroids: &[(usize, Vec<f64>)], classes: usize) -> Vec<f64> {
    let mut logits = vec![f64::NEG_INFINITY; classes];
    for (c, centroid) in centroids {
        logits[*c] = -crate::metrics::euclidean(e, centroid) / CENTROID_TEMPERATURE;
    }
    softmax(&logits).into_iter().map(|p| if p.is_nan() { 0.0 } else { p }).collect()
}

fn class_centroids(embeddings: &[Vec<f64>], labels: &[usize]) -> Vec<(usize, Vec<f64>)> {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|c| {
            let dim = embeddings[0].len();
            let mut sum = vec![0.0; dim];
            for (e, _) in embeddings.iter().zip(labels).filter(|(_, &l)| l == c) {
                for (s, v) in sum.iter_mut().zip(e) {
                    *s += v;
                }
            }
            let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            (c, sum.into_iter().map(|v| v / norm).collect())
        })
        .collect()
}

/// Images and labels of the records carrying `kind`.
pub(crate) fn labeled(ds: &Dataset, kind: AnnotationKind) -> (Vec<&RgbImage>, Vec<usize>) {
    ds.records.iter().filter_map(|r| r.labels.get(kind).map(|l| (&r.image, l))).unzip()
}

/// Mean validation score across `sets`: accuracy for classifiers, mAP with an
/// even/odd query/gallery split for embedders.
fn validation_score(net: &MemberNet, store: &ParamStore64, sets: &[(Vec<&RgbImage>, Vec<usize>)]) -> Result<f64> {
    let mut total = 0.0;
    for (images, labels) in sets {
        let out = net.outputs(store, images)?;
        total += if net.embedder {
            let (mut q, mut ql, mut g, mut gl) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (i, (e, &l)) in out.into_iter().zip(labels).enumerate() {
                if i % 2 == 0 {
                    q.push(e);
                    ql.push(l);
                } else {
                    g.push(e);
                    gl.push(l);
                }
            }
            let keep: Vec<usize> = (0..q.len()).filter(|&i| gl.contains(&ql[i])).collect();
            let q: Vec<Vec<f64>> = keep.iter().map(|&i| q[i].clone()).collect();
            let ql: Vec<usize> = keep.iter().map(|&i| ql[i]).collect();
            mean_average_precision(&q, &ql, &g, &gl)?
        } else {
            let predicted: Vec<usize> = out.iter().map(|z| ndgrad::argmax(z)).collect();
            accuracy(&predicted, labels)
        };
    }
    Ok(total / sets.len() as f64)
}

/// Trains one member on the `kind` labels of `train`, early-stopping on the
/// mean score over `cross_val`. Color and type members are classifiers trained
/// with cross-entropy; make members are embedders trained with batch-hard triplets.
pub fn train_member(
    train: &Dataset,
    cross_val: &[&Dataset],
    kind: AnnotationKind,
    schema: &Schema,
    config: &MemberConfig,
) -> Result<TeamMember> {
    if cross_val.is_empty() {
        return Err(Error::NoValidation);
    }
    let (mut images, mut labels) = labeled(train, kind);
    if images.is_empty() {
        return Err(Error::NoSource(kind.name().into()));
    }
    let val_sets: Vec<_> = cross_val.iter().map(|d| labeled(d, kind)).filter(|(i, _)| !i.is_empty()).collect();
    if val_sets.is_empty() {
        return Err(Error::NoValidation);
    }
    let embedder = kind == AnnotationKind::Make;
    let classes = schema.cardinality(kind);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    if embedder && config.bootstrap {
        let n = images.len();
        let picks: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        images = picks.iter().map(|&i| images[i]).collect();
        labels = picks.iter().map(|&i| labels[i]).collect();
    }
    let out_dim = if embedder { config.embedding_dim } else { classes };
    let (net, mut store) = MemberNet::new(train.image_size, config.widths, out_dim, embedder, &mut rng)?;
    let mut optimizer = Adam::new(config.learning_rate);

    let mut scores = Vec::new();
    let mut best: Option<(f64, usize, ParamStore64)> = None;
    let mut stopped_epoch = None;
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let augmented: Vec<RgbImage> = batch.iter().map(|&i| config.augment.apply(images[i], &mut rng)).collect();
            let refs: Vec<&RgbImage> = augmented.iter().collect();
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape64::new();
            let y = net.forward(&mut tape, &store, &refs)?;
            let loss = if embedder {
                match tape.batch_hard_triplet(y, &targets, config.margin) {
                    Ok(l) => l,
                    Err(ndgrad::Error::Argument { .. }) => continue,
                    Err(e) => return Err(e.into()),
                }
            } else {
                tape.cross_entropy(y, &targets)?
            };
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, detail: format!("{kind} member on {}", train.name) });
            }
            tape.backward_into(loss, &mut store)?;
            optimizer.step(&mut store)?;
            store.zero_grad();
        }
        let score = validation_score(&net, &store, &val_sets)?;
        scores.push(score);
        if stopped_epoch.is_none() && best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch, store.clone()));
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.1);
        if stopped_epoch.is_none() && epoch - best_epoch >= config.patience {
            stopped_epoch = Some(epoch);
            if !config.run_full_budget {
                break;
            }
        }
    }
    let (_, best_epoch, best_store) = best.ok_or_else(|| Error::Config("member trained for 0 epochs".into()))?;
    let weights = |store: ParamStore64| -> Result<MemberWeights> {
        let centroids = if embedder { class_centroids(&net.outputs(&store, &images)?, &labels) } else { Vec::new() };
        Ok(MemberWeights { store, centroids })
    };
    Ok(TeamMember {
        kind,
        source: train.name.clone(),
        classes,
        selected: weights(best_store)?,
        last: weights(store)?,
        net,
        trace: EarlyStopTrace { scores, best_epoch, stopped_epoch },
        training_clusters: Vec::new(),
    })
}
