//! Text encoder, speech encoder, text decoder, autoregressive speech
//! decoder and vocoder, with checkpointing and the two inference modes.

mod checkpoint;
mod config;
mod infer;
pub mod nets;
mod params;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, Progress, Stage, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{Group, ModelConfig};
pub use infer::{
    decode_speech, decode_text, encode_speech, encode_text, lle_means, synthesize_tts, synthesize_vc,
    vocode_free_running, vocoder_logits, DecodeMode, Lle, Synthesis,
};
pub(crate) use infer::decode_speech_free;
pub use params::{param_shapes, Dense, Layout, ModelParams};

use crate::corpus::{AcousticFeatures, PhonemeSequence};
use crate::error::Result;

/// TTS into the checkpoint's adapted target speaker.
pub fn tts_infer(ckpt: &Checkpoint, x: &PhonemeSequence, seed: u64) -> Result<Synthesis> {
    synthesize_tts(&ckpt.params, x, ckpt.target()?, seed)
}

/// VC into the checkpoint's adapted target speaker; frame count is
/// copied from the source.
pub fn vc_infer(ckpt: &Checkpoint, y_src: &AcousticFeatures, seed: u64) -> Result<Synthesis> {
    synthesize_vc(&ckpt.params, &y_src.to_tensor(), ckpt.target()?, seed)
}
