//! Self-supervised video representation learning with data mixing.
//!
//! Input-space mixing operators (mixup, temporal / spatio-temporal cutmix,
//! VideoMix), cross-modal manifold cutmix between hidden activations of two
//! modality encoders, an i-mix contrastive objective over a momentum key
//! encoder with a FIFO negative queue, the alternating multi-stage training
//! schedule, and linear-probe / fine-tune / retrieval evaluation, all on a
//! synthetic two-modality video corpus.

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod experiments;
pub mod gradcheck;
pub mod mixing;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::{beta_sample, SeededRng};
pub use tensor::{l2_normalize, softmax_cross_entropy, Tensor};
