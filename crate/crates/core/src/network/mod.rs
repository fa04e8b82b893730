//! CPU neural-network engine and the depth models built on it.
//!
//! Layers cache what their backward pass needs only when run with
//! `train = true`; evaluation leaves them empty.

pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod layers;
pub mod model;
pub mod tensor;

pub use checkpoint::{load_checkpoint, load_pretrained, read_meta, save_checkpoint, CheckpointMeta, PretrainedReport};
pub use encoder::{EncoderConfig, FusionKind};
pub use layers::{Param, Slot, Stateful};
pub use model::{
    forward_single, forward_two_stage, DepthModel, NetworkConfig, Prediction, SingleStageModel, TwoStageModel,
    TwoStageOutput, Variant, STRIDE,
};
pub use tensor::Tensor;
