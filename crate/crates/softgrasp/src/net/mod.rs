//! The graph-network surrogate: autodiff tape, encode-process-decode model,
//! and checkpoint serialization.

pub mod checkpoint;
pub mod model;
pub mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{GraphTapeInputs, Mlp, ModelConfig, ModelParams, ParamIds, ProcessorBlock};
pub use tape::{Gradients, NodeId, Tape};
