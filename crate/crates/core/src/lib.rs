//! Morph-token multimodal pipeline at desk scale.
//!
//! Images from a synthetic shape world are abstracted into discrete
//! *pre-MLLM* morph tokens by a deconfounded slot-attention encoder; a small
//! decoder-only language model consumes them for comprehension and
//! regenerates *post-MLLM* morph tokens for generation; a dedicated visual
//! decoder expands those into low-level pixel tokens that a VQ codec renders
//! back to pixels. Comprehension and generation losses never couple the two
//! morph-token streams.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod morph_encoder;
pub mod nn;
pub mod params;
pub mod pixel_codec;
pub mod synth_data;
pub mod tensor;
pub mod vocab;
