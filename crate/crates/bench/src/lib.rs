//! Shared fixtures for the pipeline benchmarks.

use fullstream_core::codec::CodecSpec;
use fullstream_core::model::{InferenceModel, Model, ModelConfig};
use fullstream_core::Lexicon;

pub const SENTENCE: &str = "the quick brown fox jumps over the lazy dog while seven small birds sing";

pub struct Fixture {
    pub model: InferenceModel<f32>,
    pub lexicon: Lexicon,
    pub codec: CodecSpec,
}

/// Untrained toy-size model; timing does not depend on the weights.
pub fn fixture() -> Fixture {
    let model = Model::new(ModelConfig::toy(), 1).expect("toy config is valid");
    let codec = CodecSpec::new(model.config.semantic_vocab, model.config.acoustic_vocab).expect("toy vocab fits");
    Fixture {
        model: InferenceModel::from_model(&model).expect("f32 conversion"),
        lexicon: Lexicon::builtin(),
        codec,
    }
}
