//! Attention-based spectrogram prediction network: character encoder,
//! location-sensitive attention, autoregressive decoder, post-net and
//! stop-token head.
//!
//! Parameter names start with `encoder.`, `decoder.` or `postnet.`;
//! freeze policies select on these prefixes.

mod config;
mod model;

pub use config::AcousticConfig;
pub use model::{
    attention_step, decode_step, encode_text, forward_teacher_forced, infer, init_params, loss, param_shapes, postnet,
    update_running_stats, vocab_size, AcousticOutput, AttentionState, DecoderState, Halt, Inference, LossParts,
    Memory, RunContext, StepOutput, BN_MOMENTUM, EMBEDDING,
};
