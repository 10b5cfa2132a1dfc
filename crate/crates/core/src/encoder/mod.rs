//! Small hand-differentiated 3-D conv encoders with block-level partial
//! forward, so an encoder `f` can be split as `f_k(g_k(x))` at any conv
//! block boundary `k`.

mod checkpoint;
pub mod layers;
mod optim;
mod stack;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest};
pub use layers::{Layer, LayerKind, Linear, Param};
pub use optim::{Optimizer, OptimizerKind};
pub use stack::{ema_update, ArchSpec, ConvBlockSpec, EncoderStack};
