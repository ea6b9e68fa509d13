//! Same-speaker concatenation into fixed-length training chunks.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{decode_tokens, DurationToken};
use crate::corpus::{mix, Utterance};
use crate::error::{Error, Result};
use crate::model::{Frame, SpeakerVector, TokenGrid, TrainExample, LOOKAHEAD_CAP};
use crate::phonemizer::PhonemeId;

/// Look-ahead per position that never crosses the end of the position's
/// utterance (`ends` holds the last index of every utterance, ascending).
pub fn utterance_lookahead(n: usize, ends: &[usize], cap: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    let mut k = 0;
    for i in 0..n {
        while k < ends.len() && ends[k] < i {
            k += 1;
        }
        let end = ends.get(k).copied().unwrap_or(n - 1).min(n - 1);
        out.push(cap.min(end - i));
    }
    out
}

struct Stream {
    speaker: SpeakerVector,
    phonemes: Vec<PhonemeId>,
    /// Last phoneme index of each utterance.
    ends: Vec<usize>,
    durations: Vec<DurationToken>,
    frames: Vec<Frame>,
}

/// Groups utterances by speaker, concatenates each group in a seeded order
/// and cuts it into `chunk_frames`-frame chunks; the remainder is dropped.
/// A chunk keeps the phonemes its frames cover plus up to the look-ahead cap
/// of following phonemes from the same utterance.
pub fn make_chunks(
    utts: &[Utterance],
    acoustic_pad: u16,
    chunk_frames: usize,
    seed: u64,
) -> Result<Vec<TrainExample>> {
    if chunk_frames < 8 {
        return Err(Error::Validation(format!("chunk length {chunk_frames} below 8 frames")));
    }
    let mut by_speaker: BTreeMap<usize, Vec<&Utterance>> = BTreeMap::new();
    for u in utts {
        by_speaker.entry(u.speaker_id).or_default().push(u);
    }
    let mut out = Vec::new();
    for (spk, mut group) in by_speaker {
        group.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed ^ mix(spk as u64))));
        let mut s = Stream {
            speaker: group[0].speaker.clone(),
            phonemes: Vec::new(),
            ends: Vec::new(),
            durations: Vec::new(),
            frames: Vec::new(),
        };
        for u in group {
            s.phonemes.extend(&u.phonemes);
            s.ends.push(s.phonemes.len() - 1);
            s.durations.extend(&u.durations);
            s.frames.extend(&u.frames);
        }
        let coverage = decode_tokens(&s.durations, s.phonemes.len())?.coverage;
        for start in (0..s.frames.len() / chunk_frames).map(|c| c * chunk_frames) {
            let end = start + chunk_frames;
            let lo = coverage[start].b - 1;
            let hi = coverage[end - 1].e;
            let utt_end = s.ends[s.ends.partition_point(|&e| e < hi - 1)];
            let stop = (hi + LOOKAHEAD_CAP).min(utt_end + 1).max(hi);
            let ends: Vec<usize> = s
                .ends
                .iter()
                .filter(|&&e| e >= lo && e < stop)
                .map(|&e| e - lo)
                .collect();
            let n = stop - lo;
            out.push(TrainExample {
                phonemes: s.phonemes[lo..stop].to_vec(),
                la_limits: utterance_lookahead(n, &ends, LOOKAHEAD_CAP),
                grid: TokenGrid::from_frames(&s.frames[start..end], acoustic_pad),
                durations: s.durations[start..end].to_vec(),
                speaker: s.speaker.clone(),
                final_phonemes: ends,
            });
        }
    }
    Ok(out)
}
