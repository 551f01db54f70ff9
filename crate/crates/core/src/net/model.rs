use image::RgbImage;
use ndgrad::{ParamStore64, Tape64, Tensor64, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AttentionGate, ModelConfig, Variant};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::layers::{images_to_tensor, Conv, Linear};
use crate::synth::AnnotationKind;

/// conv → ReLU → optional gate.
#[derive(Clone, Copy, Debug)]
struct Block {
    conv: Conv,
    gate: Option<AttentionGate>,
}

impl Block {
    fn forward(&self, tape: &mut Tape64, store: &ParamStore64, x: Var, masks: &mut Vec<(String, Var)>, name: &str) -> Result<Var> {
        let h = self.conv.forward(tape, store, x)?;
        let h = tape.relu(h);
        match &self.gate {
            Some(gate) => {
                let (h, mask) = gate.forward(tape, store, h)?;
                masks.push((name.to_string(), mask));
                Ok(h)
            }
            None => Ok(h),
        }
    }
}

/// pool → block → pool → block → GAP → linear → ReLU, optionally behind its own input block.
#[derive(Clone, Debug)]
struct Backbone {
    name: String,
    stem: Option<Block>,
    blocks: [Block; 2],
    proj: Linear,
}

#[derive(Clone, Debug)]
struct Arch {
    shared: Option<Block>,
    backbones: Vec<Backbone>,
    /// `(kind, head over x_k)`; SMBL heads all read the single backbone.
    heads: Vec<(AnnotationKind, Linear)>,
    /// Tentative fused predictions `y_{k-fused}` per branch (absent for SMBL).
    fused_heads: Vec<Linear>,
    fusion: Linear,
}

/// A built network: configuration, architecture and parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore64,
    arch: Arch,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub x_shared: Option<Var>,
    /// Branch features `x_k` (one per backbone).
    pub x: Vec<Var>,
    /// Branch logits `y_k`, in branch order.
    pub y: Vec<Var>,
    /// Tentative fused logits `y_{k-fused}`, in branch order.
    pub y_fused: Vec<Var>,
    pub x_f: Var,
    pub y_f: Var,
    /// Spatial gate masks `N×1×h×w` named `shared`, `<kind>.stem`, `<kind>.block1`, `<kind>.block2`.
    pub masks: Vec<(String, Var)>,
}

/// Values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs {
    pub branches: Vec<AnnotationKind>,
    pub x_shared: Option<Tensor64>,
    pub x: Vec<Tensor64>,
    pub y: Vec<Tensor64>,
    pub y_fused: Vec<Tensor64>,
    pub x_f: Tensor64,
    pub y_f: Tensor64,
    pub masks: Vec<(String, Tensor64)>,
    pub image_size: usize,
}

impl ForwardOutputs {
    /// Logits of the head for `kind`; `Model` is the fused head.
    pub fn head(&self, kind: AnnotationKind) -> Option<&Tensor64> {
        if kind == AnnotationKind::Model {
            return Some(&self.y_f);
        }
        self.branches.iter().position(|&k| k == kind).map(|i| &self.y[i])
    }

    pub fn len(&self) -> usize {
        self.y_f.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    let hash = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    ChaCha8Rng::seed_from_u64(derive_seed(seed, hash))
}

/// Builds a model with deterministic, per-layer seeded initialization: layers
/// with the same name get the same initial weights in every variant.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut store = ParamStore64::new();
    let attention = config.variant.has_attention();
    let block = |store: &mut ParamStore64, name: &str, cin: usize, cout: usize| -> Block {
        let conv = Conv::new(store, &format!("{name}.conv"), cin, cout, &mut rng_for(seed, &format!("{name}.conv")));
        let gate = attention.then(|| {
            AttentionGate::new(store, &format!("{name}.gate"), cout, config.reduction, &mut rng_for(seed, &format!("{name}.gate")))
        });
        Block { conv, gate }
    };
    let linear = |store: &mut ParamStore64, name: &str, fan_in: usize, fan_out: usize| {
        Linear::new(store, name, fan_in, fan_out, &mut rng_for(seed, name))
    };

    let c = config.shared_width;
    let [w1, w2] = config.branch_widths;
    let f = config.feature_dim;
    let models = config.schema.models();
    let shared = config.variant.shared_block().then(|| block(&mut store, "shared", 3, c));

    let backbone_names: Vec<String> = if config.variant == Variant::Smbl {
        vec!["backbone".into()]
    } else {
        config.branches.iter().map(|k| format!("branch.{k}")).collect()
    };
    let mut backbones = Vec::new();
    for name in backbone_names {
        let stem = (!config.variant.shared_block()).then(|| block(&mut store, &format!("{name}.stem"), 3, c));
        let blocks = [block(&mut store, &format!("{name}.block1"), c, w1), block(&mut store, &format!("{name}.block2"), w1, w2)];
        let proj = linear(&mut store, &format!("{name}.proj"), w2, f);
        backbones.push(Backbone { name, stem, blocks, proj });
    }
    let heads =
        config.branches.iter().map(|&k| (k, linear(&mut store, &format!("head.{k}"), f, config.classes(k)))).collect();
    let fused_heads = if config.variant == Variant::Smbl {
        Vec::new()
    } else {
        config.branches.iter().map(|k| linear(&mut store, &format!("fused_head.{k}"), f, models)).collect()
    };
    let fusion = linear(&mut store, "fusion", config.fusion_dim(), models);
    Ok(Model { config: config.clone(), store, arch: Arch { shared, backbones, heads, fused_heads, fusion } })
}

impl Model {
    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Records the forward pass of a `N×3×H×W` input.
    pub fn forward_input(&self, tape: &mut Tape64, input: Var) -> Result<ForwardVars> {
        let shape = tape.value(input).shape().to_vec();
        let s = self.config.image_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(ndgrad::Error::Shape { op: "forward", detail: format!("input {shape:?}, expected N×3×{s}×{s}") }.into());
        }
        let store = &self.store;
        let mut masks = Vec::new();
        let x_shared = match &self.arch.shared {
            Some(b) => Some(b.forward(tape, store, input, &mut masks, "shared")?),
            None => None,
        };
        let mut x = Vec::with_capacity(self.arch.backbones.len());
        for bb in &self.arch.backbones {
            let label = bb.name.trim_start_matches("branch.");
            let mut h = match (&bb.stem, x_shared) {
                (Some(stem), _) => stem.forward(tape, store, input, &mut masks, &format!("{label}.stem"))?,
                (None, Some(shared)) => shared,
                (None, None) => unreachable!("a backbone without a stem always has a shared block"),
            };
            for (i, block) in bb.blocks.iter().enumerate() {
                h = tape.avg_pool2(h)?;
                h = block.forward(tape, store, h, &mut masks, &format!("{label}.block{}", i + 1))?;
            }
            let pooled = tape.global_avg_pool(h)?;
            let feat = bb.proj.forward(tape, store, pooled)?;
            x.push(tape.relu(feat));
        }
        let smbl = self.config.variant == Variant::Smbl;
        let feature = |i: usize| if smbl { x[0] } else { x[i] };
        let mut y = Vec::new();
        for (i, (_, head)) in self.arch.heads.iter().enumerate() {
            y.push(head.forward(tape, store, feature(i))?);
        }
        let mut y_fused = Vec::new();
        for (i, head) in self.arch.fused_heads.iter().enumerate() {
            y_fused.push(head.forward(tape, store, x[i])?);
        }
        let x_f = if smbl { x[0] } else { tape.concat(&x)? };
        let y_f = self.arch.fusion.forward(tape, store, x_f)?;
        Ok(ForwardVars { x_shared, x, y, y_fused, x_f, y_f, masks })
    }

    pub fn forward(&self, tape: &mut Tape64, images: &[&RgbImage]) -> Result<ForwardVars> {
        let input = tape.constant(images_to_tensor(images)?);
        self.forward_input(tape, input)
    }

    /// Forward pass without gradients, in chunks of `chunk` images.
    pub fn predict_chunked(&self, images: &[&RgbImage], chunk: usize) -> Result<ForwardOutputs> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut parts = Vec::new();
        for batch in images.chunks(chunk.max(1)) {
            let mut tape = Tape64::new();
            let vars = self.forward(&mut tape, batch)?;
            parts.push(self.outputs(&tape, &vars));
        }
        Ok(merge(parts))
    }

    pub fn predict(&self, images: &[&RgbImage]) -> Result<ForwardOutputs> {
        self.predict_chunked(images, 64)
    }

    /// Copies the values behind `vars` out of `tape`.
    pub fn outputs(&self, tape: &Tape64, vars: &ForwardVars) -> ForwardOutputs {
        let get = |v: &Var| tape.value(*v).clone();
        ForwardOutputs {
            branches: self.config.branches.clone(),
            x_shared: vars.x_shared.as_ref().map(get),
            x: vars.x.iter().map(get).collect(),
            y: vars.y.iter().map(get).collect(),
            y_fused: vars.y_fused.iter().map(get).collect(),
            x_f: get(&vars.x_f),
            y_f: get(&vars.y_f),
            masks: vars.masks.iter().map(|(n, v)| (n.clone(), get(v))).collect(),
            image_size: self.config.image_size,
        }
    }
}

fn stack(parts: Vec<Tensor64>) -> Tensor64 {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data: Vec<f64> = parts.into_iter().flat_map(|p| p.into_data()).collect();
    Tensor64::new(shape, data).expect("stacked along the batch axis")
}

fn merge(mut parts: Vec<ForwardOutputs>) -> ForwardOutputs {
    if parts.len() == 1 {
        return parts.pop().expect("one part");
    }
    let column = |f: &dyn Fn(&ForwardOutputs) -> Tensor64| stack(parts.iter().map(f).collect());
    let list = |len: usize, f: &dyn Fn(&ForwardOutputs, usize) -> Tensor64| -> Vec<Tensor64> {
        (0..len).map(|i| stack(parts.iter().map(|p| f(p, i)).collect())).collect()
    };
    let first = &parts[0];
    ForwardOutputs {
        branches: first.branches.clone(),
        x_shared: first.x_shared.as_ref().map(|_| column(&|p| p.x_shared.clone().expect("uniform parts"))),
        x: list(first.x.len(), &|p, i| p.x[i].clone()),
        y: list(first.y.len(), &|p, i| p.y[i].clone()),
        y_fused: list(first.y_fused.len(), &|p, i| p.y_fused[i].clone()),
        x_f: column(&|p| p.x_f.clone()),
        y_f: column(&|p| p.y_f.clone()),
        masks: first
            .masks
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), stack(parts.iter().map(|p| p.masks[i].1.clone()).collect())))
            .collect(),
        image_size: first.image_size,
    }
}
