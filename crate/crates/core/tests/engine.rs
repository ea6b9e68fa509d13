use std::time::Duration;

use fullstream_core::align::{DurationToken, Shift};
use fullstream_core::codec::CodecSpec;
use fullstream_core::corpus::CorpusSpec;
use fullstream_core::engine::{
    drive, generate_offline, token_log, EngineConfig, FeedMode, Prompt, StreamEngine, VirtualClock,
};
use fullstream_core::model::{InferenceModel, JointToken, Model, ModelConfig};
use fullstream_core::{Error, Lexicon, SpeakerVector};

fn toy(seed: u64) -> Model {
    Model::new(ModelConfig::toy(), seed).unwrap()
}

fn infer(m: &Model) -> InferenceModel<f32> {
    InferenceModel::from_model(m).unwrap()
}

/// Model whose temporal head prefers `first`, then `second`, by a wide margin.
fn biased(first: DurationToken, second: DurationToken) -> Model {
    let mut m = toy(3);
    let id = m.params.id("tt.head_bias").unwrap();
    let bias = m.params.value_mut(id).data_mut();
    bias[JointToken { semantic: 0, duration: first }.class()] = 1e3;
    bias[JointToken { semantic: 0, duration: second }.class()] = 5e2;
    m
}

fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(String::from).collect()
}

#[test]
fn first_word_buffer() {
    let m = toy(1);
    let im = infer(&m);
    let lex = Lexicon::builtin();
    let mut e = StreamEngine::new(&im, &lex, EngineConfig::default()).unwrap();
    e.push_word("hi").unwrap();
    let ph: Vec<&str> = e.phonemes().iter().map(|&p| Lexicon::symbol(p)).collect();
    assert_eq!(ph, ["HH", "AY"]);
    assert_eq!(e.la_limits(), vec![1, 0]);
}

#[test]
fn long_word_finalizes_first_position() {
    let m = toy(1);
    let im = infer(&m);
    let lex = Lexicon::parse("a\tAH\nlong\tB D F G K L M N P R T\n", "test").unwrap();
    let mut e = StreamEngine::new(&im, &lex, EngineConfig::default()).unwrap();
    e.push_word("a").unwrap();
    assert_eq!(e.finalized(), 0);
    e.push_word("long").unwrap();
    assert_eq!(e.la_limits()[0], 10);
    assert!(e.finalized() >= 1);
}

#[test]
fn gate_waits_for_next_phoneme() {
    let m = toy(2);
    let im = infer(&m);
    let lex = Lexicon::builtin();
    let mut e = StreamEngine::new(&im, &lex, EngineConfig::default()).unwrap();
    assert!(e.try_step().unwrap().is_none());
    e.push_word("hi").unwrap();
    let mut steps = 0;
    while e.try_step().unwrap().is_some() {
        steps += 1;
        assert!(steps < 100);
    }
    assert_eq!(e.pointer(), 2, "waits on the last buffered phoneme");
    e.close().unwrap();
    while e.try_step().unwrap().is_some() {}
    assert!(e.is_finished());
    assert!(matches!(e.push_word("more"), Err(Error::State(_))));
}

#[test]
fn close_empty_stream() {
    let m = toy(2);
    let im = infer(&m);
    let lex = Lexicon::builtin();
    let mut e = StreamEngine::new(&im, &lex, EngineConfig::default()).unwrap();
    e.close().unwrap();
    assert!(e.try_step().unwrap().is_none());
    assert!(e.is_finished());
    assert!(e.emitted().is_empty());
    assert!(e.latency_report().is_err());
}

#[test]
fn consumed_embeddings_are_frozen() {
    let m = toy(4);
    let im = infer(&m);
    let lex = Lexicon::builtin();
    let mut e = StreamEngine::new(&im, &lex, EngineConfig::default()).unwrap();
    e.push_word("cat").unwrap();
    while e.try_step().unwrap().is_some() {}
    let consumed = e.consumed();
    assert!(consumed > 0);
    let before: Vec<Vec<f32>> = (0..consumed).map(|i| e.embedding(i).unwrap().to_vec()).collect();
    for w in ["sat", "on", "the", "mat"] {
        e.push_word(w).unwrap();
    }
    let reference = im.pt_encode(e.phonemes(), &e.la_limits()).unwrap();
    let mut changed = 0;
    for (i, b) in before.iter().enumerate() {
        assert_eq!(e.embedding(i).unwrap(), &b[..]);
        changed += usize::from(reference[i] != *b);
    }
    assert!(changed > 0, "the recompute reference sees the new context");
}

#[test]
fn up_front_matches_offline() {
    let m = toy(5);
    let im = infer(&m);
    let lex = Lexicon::builtin();
    let spk = SpeakerVector::default_for(16);
    for (k, text) in ["the cat sat", "one two three four five", "hello world"].iter().enumerate() {
        for temperature in [0.0, 0.8] {
            let cfg = EngineConfig {
                temperature,
                seed: k as u64,
                ..EngineConfig::default()
            };
            let w = words(text);
            let mut e = StreamEngine::new(&im, &lex, cfg).unwrap();
            let streamed = drive(&mut e, &w, FeedMode::UpFront).unwrap();
            let offline = generate_offline(&im, &lex, &w, None, &spk, &cfg).unwrap();
            assert!(!streamed.is_empty());
            assert_eq!(token_log(&streamed, false), token_log(&offline, false));
            assert_eq!(e.ledger().delay_violations(), 0);
        }
    }
}

#[test]
fn prefill_then_generate_matches_offline() {
    let m = toy(6);
    let im = infer(&m);
    let lex = Lexicon::builtin();
    let corpus = CorpusSpec::default();
    let u = corpus.generate_utterance(&lex, 11).unwrap();
    let prompt = Prompt::from_utterance(&u, 64);
    let cfg = EngineConfig::default();
    let mut e = StreamEngine::new(&im, &lex, cfg).unwrap();
    e.prefill_prompt(&prompt).unwrap();
    assert_eq!(e.steps(), prompt.grid.width());
    assert!(e.emitted().is_empty());
    let w = words("good morning");
    let streamed = drive(&mut e, &w, FeedMode::UpFront).unwrap();
    let offline = generate_offline(&im, &lex, &w, Some(&prompt), &u.speaker, &cfg).unwrap();
    assert_eq!(token_log(&streamed, false), token_log(&offline, false));
    assert_eq!(e.ledger().delay_violations(), 0);
}

#[test]
fn bad_prompt_rejected() {
    let m = toy(6);
    let im = infer(&m);
    let lex = Lexicon::builtin();
    let u = CorpusSpec::default().generate_utterance(&lex, 12).unwrap();
    let mut prompt = Prompt::from_utterance(&u, 64);
    prompt.grid = prompt.grid.slice(0, prompt.grid.width() - 1);
    let mut e = StreamEngine::new(&im, &lex, EngineConfig::default()).unwrap();
    assert!(e.prefill_prompt(&prompt).unwrap_err().is_validation());
}

#[test]
fn single_phoneme_go_one() {
    let m = biased(DurationToken::go(1), DurationToken::stay(1));
    let im = infer(&m);
    let lex = Lexicon::parse("a\tAH\n", "test").unwrap();
    let mut e = StreamEngine::new(&im, &lex, EngineConfig::default()).unwrap();
    let frames = drive(&mut e, &["a"], FeedMode::WordByWord).unwrap();
    assert_eq!(frames.len(), 1);
    assert_eq!(e.steps(), 2, "one content step and one flush step");
}

#[test]
fn stay_forever_hits_guard() {
    let m = biased(DurationToken::stay(1), DurationToken::go(1));
    let im = infer(&m);
    let lex = Lexicon::builtin();
    let mut e = StreamEngine::new(&im, &lex, EngineConfig::default()).unwrap();
    let frames = drive(&mut e, &["cat"], FeedMode::UpFront).unwrap();
    assert_eq!(frames.len(), 25 * 3);
    assert!(frames
        .chunks(25)
        .all(|c| c[..24].iter().all(|f| f.duration.shift == Shift::Stay) && c[24].duration == DurationToken::go(1)));
}

#[test]
fn virtual_clock_ledger() {
    let m = toy(7);
    let im = infer(&m);
    let lex = Lexicon::builtin();
    let ms = Duration::from_millis;
    let clock = VirtualClock::new([ms(1), ms(3), ms(10), ms(20), ms(2)]);
    let mut e = StreamEngine::new(&im, &lex, EngineConfig::default())
        .unwrap()
        .with_clock(clock)
        .with_codec(CodecSpec::new(64, 64).unwrap());
    let frames = drive(&mut e, &words("seven cats"), FeedMode::WordByWord).unwrap();
    assert!(frames.iter().all(|f| f.audio.as_ref().unwrap().len() == 1920));
    let r = e.latency_report().unwrap();
    let first = r.first_frame;
    assert_eq!((first.tt_steps, first.dt_columns, first.decodes), (2, 2, 1));
    assert!(first.pt_passes >= 1);
    // one phonemize + pt pass for the first word; 2 tt steps, one dt call
    // (the first column is padding), one decode
    let expected = if first.pt_passes == 1 { 1 + 3 + 20 + 20 + 2 } else { 2 * (1 + 3) + 20 + 20 + 2 };
    assert_eq!(r.fpl_ms, expected as f64);
    assert_eq!(e.ledger().delay_violations(), 0);
    let sum: f64 = r.stages.values().map(|s| s.seconds).sum();
    assert!((sum - r.stage_s).abs() < 1e-9);
    assert!((r.stage_s - r.wall_s).abs() <= 0.01 * r.wall_s);
}

#[test]
fn word_by_word_emits_before_close() {
    let m = toy(8);
    let im = infer(&m);
    let lex = Lexicon::builtin();
    let mut e = StreamEngine::new(&im, &lex, EngineConfig::default()).unwrap();
    for w in words("the quick brown fox jumps over the lazy dog") {
        e.push_word(&w).unwrap();
        while e.try_step().unwrap().is_some() {}
    }
    let before_close = e.emitted().to_vec();
    assert!(!before_close.is_empty());
    e.close().unwrap();
    while e.try_step().unwrap().is_some() {}
    assert_eq!(&e.emitted()[..before_close.len()], &before_close[..]);
    assert!(e.emitted().len() <= 25 * e.phonemes().len());
}

#[test]
fn real_clock_stages_cover_wall_time() {
    let m = toy(9);
    let im = infer(&m);
    let lex = Lexicon::builtin();
    let mut e = StreamEngine::new(&im, &lex, EngineConfig::default())
        .unwrap()
        .with_codec(CodecSpec::new(64, 64).unwrap());
    drive(&mut e, &words("one two three four five six seven"), FeedMode::UpFront).unwrap();
    let r = e.latency_report().unwrap();
    assert!(r.wall_s > 0.0 && r.rtf > 0.0);
    assert!((r.stage_s - r.wall_s).abs() <= 0.01 * r.wall_s, "{r:?}");
}
