//! Reference generator with all text known up front.

use num_traits::Float;

use super::{advance, duration_rule, lookahead_limits, EngineConfig, FrameOut, Prompt};
use crate::align::decode_tokens;
use crate::error::Result;
use crate::model::{InferenceModel, SpeakerVector, ACOUSTIC_ROWS, CODEBOOKS};
use crate::phonemizer::{Lexicon, PhonemeId};

/// Generates the frames of `words` in one loop over a fully encoded buffer.
/// With a prompt, the prompt is teacher-forced first and `speaker` is ignored.
pub fn generate_offline<T: Float, W: AsRef<str>>(
    model: &InferenceModel<T>,
    lexicon: &Lexicon,
    words: &[W],
    prompt: Option<&Prompt>,
    speaker: &SpeakerVector,
    config: &EngineConfig,
) -> Result<Vec<FrameOut>> {
    config.validate(model.config.lookahead_cap)?;
    let cap = config.lookahead;
    let pad = model.config.acoustic_pad();
    let zero = vec![T::zero(); model.config.pt.d_model];
    let prompt_ph: Vec<PhonemeId> = prompt.map(|p| p.phonemes.clone()).unwrap_or_default();
    let target: Vec<PhonemeId> = words.iter().flat_map(|w| lexicon.phonemize_word(w.as_ref())).collect();
    let speaker = prompt.map_or(speaker, |p| &p.speaker);
    let mut all = prompt_ph.clone();
    all.extend(&target);
    let m = all.len();
    let mp = prompt_ph.len();

    let mut emb = if m > 0 {
        model.pt_encode(&all, &lookahead_limits(m, cap))?
    } else {
        Vec::new()
    };
    if mp > 0 {
        let pe = model.pt_encode(&prompt_ph, &lookahead_limits(mp, cap))?;
        emb[..mp].clone_from_slice(&pe);
    }

    let mut cache = model.new_tt_cache();
    let mut sampler = config.sampler()?;
    let mut col = 0;
    let mut prev = None;
    if let Some(p) = prompt.filter(|p| !p.phonemes.is_empty()) {
        let durations = p.durations()?;
        for (t, c) in decode_tokens(&durations, mp)?.coverage.iter().enumerate() {
            let a = c.b - 1;
            let slot_b = (a + 1 < mp).then(|| &emb[a + 1][..]);
            model.tt_step(&mut cache, t, prev, &emb[a], slot_b, speaker)?;
            prev = Some(p.grid.semantic(t));
        }
        col = p.grid.width();
    }
    if target.is_empty() {
        return Ok(Vec::new());
    }
    let first_col = col;
    let mut b = mp + 1;
    let mut run = 0;
    let mut joints = Vec::new();
    let mut acoustics = Vec::new();
    while b <= m {
        let a = b - 1;
        let slot_b = (a + 1 < m).then(|| &emb[a + 1][..]);
        let (h, logits) = model.tt_step(&mut cache, col, prev, &emb[a], slot_b, speaker)?;
        let j = model.sample_joint(&logits, &mut sampler, duration_rule(b, m, run, config.max_frames_per_phoneme))?;
        if col > 0 {
            let ac = model.dt_generate(&h, j.semantic, speaker, &mut sampler)?;
            if col > first_col {
                acoustics.push(ac);
            }
        }
        joints.push(j);
        (b, run) = advance(b, run, j.duration);
        prev = Some(j.semantic);
        col += 1;
    }
    let (h, logits) = model.tt_step(&mut cache, col, prev, &zero, None, speaker)?;
    let j = model.sample_joint(&logits, &mut sampler, |_| true)?;
    acoustics.push(model.dt_generate(&h, j.semantic, speaker, &mut sampler)?);

    Ok(joints
        .iter()
        .zip(&acoustics)
        .enumerate()
        .map(|(i, (j, ac))| {
            let mut tokens = [pad; CODEBOOKS];
            tokens[0] = j.semantic;
            tokens[1..].copy_from_slice(&ac[..ACOUSTIC_ROWS]);
            FrameOut {
                index: i,
                tokens,
                duration: j.duration,
                emit_time: std::time::Duration::ZERO,
                decodable: true,
                audio: None,
            }
        })
        .collect())
}
