use fullstream_core::align::{decode_tokens, DurationToken, Shift};
use fullstream_core::corpus::{manifest_lines, phoneme_error_rate, CorpusSpec};
use fullstream_core::model::TokenGrid;
use fullstream_core::{Lexicon, PhonemeId};
use proptest::prelude::*;

fn spec() -> CorpusSpec {
    CorpusSpec {
        utterances: 60,
        ..CorpusSpec::default()
    }
}

#[test]
fn semantic_map_inverts_on_single_phoneme_frames() {
    let lex = Lexicon::builtin();
    let s = spec();
    for u in s.generate(&lex).unwrap() {
        let cov = decode_tokens(&u.durations, u.phonemes.len()).unwrap().coverage;
        for (c, f) in cov.iter().zip(&u.frames) {
            if c.b == c.e {
                assert_eq!(PhonemeId(f[0] + 2), u.phonemes[c.b - 1]);
            }
        }
    }
}

#[test]
fn clean_grids_score_zero() {
    let lex = Lexicon::builtin();
    let s = spec();
    for u in s.generate(&lex).unwrap() {
        let g = u.grid(s.acoustic_pad());
        assert_eq!(phoneme_error_rate(&u.phonemes, &g, &u.durations), 0.0);
    }
}

// Ten single-phoneme frames; substituting the fifth frame's phoneme costs one edit.
#[test]
fn one_substitution_in_ten() {
    let reference: Vec<PhonemeId> = (2..12).map(PhonemeId).collect();
    let go1 = DurationToken::new(Shift::Go, 1);
    let mut cols: Vec<[u16; 12]> = (0..10).map(|k| [k as u16; 12]).collect();
    cols[4][0] = 30;
    let g = TokenGrid::from_columns(cols);
    let per = phoneme_error_rate(&reference, &g, &[go1; 10]);
    assert!((per - 0.1).abs() < 1e-12);
}

#[test]
fn manifest_has_one_line_per_utterance() {
    let lex = Lexicon::builtin();
    let s = spec();
    let u = s.generate(&lex).unwrap();
    let m = manifest_lines(&s, &u).unwrap();
    assert_eq!(m.lines().count(), u.len());
    let first: serde_json::Value = serde_json::from_str(m.lines().next().unwrap()).unwrap();
    assert_eq!(first["seed"].as_u64().unwrap(), u[0].seed);
}

#[test]
fn rejects_small_semantic_vocab() {
    let s = CorpusSpec {
        semantic_vocab: 20,
        ..spec()
    };
    assert!(s.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn grids_are_well_formed(seed in any::<u64>()) {
        let lex = Lexicon::builtin();
        let s = spec();
        let u = s.generate_utterance(&lex, seed).unwrap();
        prop_assert!(u.phonemes.len() >= s.min_phonemes);
        prop_assert_eq!(u.frames.len(), u.durations.len());
        let g = u.grid(s.acoustic_pad());
        prop_assert!(g.validate(&fullstream_core::ModelConfig::toy()).is_ok());
        let frames = (u.alignment.end_frames.last().unwrap()).ceil() as usize;
        prop_assert_eq!(frames, u.frames.len());
    }
}
