//! Full-stream text-to-speech at desk scale.
//!
//! Words arrive one at a time and are turned into phonemes; a phoneme
//! transformer encodes them with a bounded, growing look-ahead; a temporal
//! transformer predicts one semantic token and one duration token per 80 ms
//! frame, the duration token moving a monotonic pointer over the phonemes; a
//! depth transformer fills in the remaining eleven codebooks one step later. A
//! toy sinusoid codec stands in for a neural audio codec with the same grid
//! geometry.

pub mod align;
pub mod bench;
pub mod codec;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod model;
pub mod phonemizer;
pub mod tensor;
pub mod trainer;

pub use align::{CoverageStats, DurationToken, ForcedAlignment, FrameCoverage, Shift};
pub use codec::CodecSpec;
pub use corpus::{CorpusSpec, Utterance};
pub use engine::{FrameOut, StreamEngine};
pub use error::{Error, Result};
pub use model::{InferenceModel, JointToken, ModelConfig, SpeakerVector, TokenGrid};
pub use phonemizer::{Lexicon, PhonemeId};
pub use tensor::{ParameterStore, Tensor};
