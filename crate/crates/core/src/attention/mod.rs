//! Cross-frame attention, its dual consistency fusion over the anchor,
//! previous and current frame, mask-guided decoupling of character and
//! background, and the processor that wires it into a denoiser.

mod bank;
mod fusion;
pub mod kernels;
mod mask;
mod processor;

pub use bank::{AttentionBank, Branch};
pub use fusion::{
    compose_by_mask, dual_consistency_attention, masked_kv_select, masked_kv_split, mgdm_attention, FrameKeyValues,
    FrameMasks, FusionWeights, KeyValue, MaskedKeyValue,
};
pub use kernels::{attention_probs, cross_frame_attention, multi_head_attention, softmax_rows};
pub use mask::{aggregate_token_attention, binarize, extract_body_mask, BodyMask, MaskOptions, MaskSites, MaskSource};
pub use processor::{
    frame_generation_attention_schedule, DualConsistencyProcessor, FrameRole, MgdmSettings, WiringPlan,
};
