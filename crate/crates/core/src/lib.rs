//! Interpretable vehicle classification on a synthetic image domain.
//!
//! * [`synth`] renders partially annotated datasets.
//! * [`corroborate`] completes missing annotations with labeling teams.
//! * [`net`] is the multi-branch classifier and its ablation variants.
//! * [`train`] holds losses, the training loop, metrics and knowledge-base correction.
//!
//! The tensor engine is generic over the scalar type; models here run in `f64`.

pub mod corroborate;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod net;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

/// Independent sub-seed for stream `stream` of `seed` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
