//! Emotion-controllable speech-token modeling on a synthetic corpus.
//!
//! The pipeline has two training stages over a small causal decoder:
//!
//! 1. **Instruction tuning** — supervised fine-tuning on instruction-formatted
//!    sequences (`[speaker] E <endofprompt> text </s> speech </s>`) with a
//!    label-smoothed KL loss. The converged model is frozen as the reference.
//! 2. **Preference optimization** — direct preference optimization over pairs
//!    that share the same text but differ in emotion, with a Jensen-Shannon
//!    corrected logit and auxiliary KL/SFT regularizers.
//!
//! The corpus is synthesized from a known generative rule (content and prosody
//! channels factorized into one discrete token), so evaluation can invert the
//! rule: a deterministic oracle classifier scores emotion recognition, the
//! content channel yields an intelligibility proxy, and the prosody channel
//! yields similarity proxies.
//!
//! Everything is deterministic given a seed. With the `parallel` feature
//! (default) the per-utterance, per-sequence and per-item inner loops run on
//! rayon; reductions keep a fixed order so results are bit-identical to the
//! sequential fallback.

pub mod corpus;
pub mod error;
pub mod eval;
pub(crate) mod exec;
pub mod fsutil;
pub mod gradcheck;
pub mod math;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod training;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
