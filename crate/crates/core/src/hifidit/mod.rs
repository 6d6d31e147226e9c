//! A small multimodal diffusion transformer with a gated, weight-shared
//! high-frequency branch in each dual-stream block.

mod checkpoint;
mod model;
pub mod oracle;
mod patch;
mod state;
mod tokens;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use model::{
    predict_velocity, token_positions, Dit, ForwardOptions, ForwardOutput, ModelInput, RopeTable,
    Streams, VelocityField,
};
pub use patch::{downsample_mask, patchify, unpatchify, unpatchify_index, DownsampledMask};
pub use state::{round_f32, BlockParams, Layout, ModelConfig, ModelState, StreamParams};
pub use tokens::{
    assemble, build_hf_tokens, build_joint_tokens, corrupt, hf_variant, SegmentTag, TokenBatch,
};
