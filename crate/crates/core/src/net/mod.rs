//! The multi-branch classifier: a shared input block, one attention-gated
//! branch per interpretable annotation, per-branch heads, and a fusion head
//! over the concatenated branch features. Ablation variants change topology
//! (shared block, gates, number of backbones) or only the training losses.

mod cascade;
mod config;
mod gate;
mod masks;
mod model;

pub use cascade::{cascade_predict, train_cascade, CascadeConfig, CascadeHeads};
pub use config::{ModelConfig, Variant};
pub use gate::AttentionGate;
pub use masks::{attention_masks, export_masks, mask_mass_inside, BranchMask};
pub use model::{build_model, ForwardOutputs, ForwardVars, Model};
