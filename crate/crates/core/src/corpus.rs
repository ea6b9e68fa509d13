//! Synthetic corpus: word sequences from the lexicon, table-driven phoneme
//! durations, and token grids that are deterministic functions of the
//! phonemes and the speaker.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{decode_tokens, encode_alignment, DurationToken, ForcedAlignment};
use crate::error::{Error, Result};
use crate::model::{Frame, SpeakerVector, TokenGrid, CODEBOOKS};
use crate::phonemizer::{Lexicon, PhonemeId, INVENTORY};

/// Number of speaker groups shaping the acoustic rows.
pub const SPEAKER_GROUPS: usize = 4;

const VOWELS: [&str; 15] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER", "EY", "IH", "IY", "OW", "OY", "UH", "UW",
];

fn default_durations() -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for &p in &INVENTORY[2..] {
        let d = match p {
            "B" | "D" | "G" | "K" | "P" | "T" => 1.0,
            "M" | "N" | "NG" | "L" | "R" | "W" | "Y" => 1.0,
            "AH" | "IH" | "UH" | "EH" | "AE" => 1.5,
            "AA" | "AO" | "ER" | "IY" | "UW" => 2.0,
            "AW" | "AY" | "EY" | "OW" | "OY" => 2.5,
            _ => 1.5,
        };
        m.insert(p.to_string(), d);
    }
    m
}

fn d_speakers() -> usize {
    200
}
fn d_utterances() -> usize {
    2000
}
fn d_min() -> usize {
    8
}
fn d_max() -> usize {
    24
}
fn d_slow() -> f64 {
    0.5
}
fn d_jitter() -> f64 {
    0.1
}
fn d_vocab() -> usize {
    64
}
fn d_spk_dim() -> usize {
    16
}
fn d_held_out() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    #[serde(default = "d_speakers")]
    pub speakers: usize,
    #[serde(default = "d_utterances")]
    pub utterances: usize,
    #[serde(default = "d_min")]
    pub min_phonemes: usize,
    #[serde(default = "d_max")]
    pub max_phonemes: usize,
    /// Frames per phoneme symbol.
    #[serde(default = "default_durations")]
    pub base_durations: BTreeMap<String, f64>,
    /// Added to vowels for speakers in odd groups.
    #[serde(default = "d_slow")]
    pub slow_vowel_extra: f64,
    /// Fraction of (previous, current) phoneme pairs lengthened by half a frame.
    #[serde(default = "d_jitter")]
    pub jitter: f64,
    #[serde(default = "d_vocab")]
    pub semantic_vocab: usize,
    #[serde(default = "d_vocab")]
    pub acoustic_vocab: usize,
    #[serde(default = "d_spk_dim")]
    pub speaker_dim: usize,
    /// The highest-numbered speakers are kept out of training.
    #[serde(default = "d_held_out")]
    pub held_out_speakers: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

pub fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn mix_all(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED, |h, &p| mix(h ^ p))
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.speakers == 0 || self.utterances == 0 {
            return Err(Error::Validation("corpus needs speakers and utterances".into()));
        }
        if self.min_phonemes == 0 || self.min_phonemes > self.max_phonemes {
            return Err(Error::Validation("utterance length range".into()));
        }
        if self.semantic_vocab < INVENTORY.len() - 2 {
            return Err(Error::Validation(format!(
                "semantic vocabulary {} cannot hold {} phonemes",
                self.semantic_vocab,
                INVENTORY.len() - 2
            )));
        }
        if self.acoustic_vocab == 0 || self.speaker_dim == 0 {
            return Err(Error::Validation("empty acoustic vocabulary or speaker dim".into()));
        }
        if !(0.0..=1.0).contains(&self.jitter) || self.slow_vowel_extra < 0.0 {
            return Err(Error::Validation("jitter must be a fraction".into()));
        }
        for p in &INVENTORY[2..] {
            match self.base_durations.get(*p) {
                Some(&d) if d >= 0.4 && d.is_finite() => {}
                _ => {
                    return Err(Error::Validation(format!(
                        "base duration for {p} missing or below 0.4 frames"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: Self = serde_json::from_str(&text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn utterance_seed(&self, index: usize) -> u64 {
        mix_all(&[self.seed, index as u64, 0xA11])
    }

    pub fn is_held_out(&self, speaker_id: usize) -> bool {
        speaker_id + self.held_out_speakers >= self.speakers && self.held_out_speakers < self.speakers
    }

    /// Phoneme duration in frames for a speaker.
    pub fn duration(&self, prev: Option<PhonemeId>, p: PhonemeId, speaker_id: usize) -> f64 {
        let sym = Lexicon::symbol(p);
        let mut d = self.base_durations.get(sym).copied().unwrap_or(1.0);
        if VOWELS.contains(&sym) && (speaker_id % SPEAKER_GROUPS) % 2 == 1 {
            d += self.slow_vowel_extra;
        }
        let h = mix_all(&[self.seed, prev.map_or(0, |q| q.0 as u64 + 1), p.0 as u64, 0xD0]);
        if (h % 10_000) as f64 / 10_000.0 < self.jitter {
            d += 0.5;
        }
        d
    }

    pub fn speaker_vector(&self, speaker_id: usize) -> SpeakerVector {
        let group = speaker_id % SPEAKER_GROUPS;
        let mut g = ChaCha8Rng::seed_from_u64(mix_all(&[self.seed, group as u64, 0x6E]));
        let mut s = ChaCha8Rng::seed_from_u64(mix_all(&[self.seed, speaker_id as u64, 0x5E]));
        let v = (0..self.speaker_dim)
            .map(|_| g.gen_range(-1.0..1.0) + 0.5 * s.gen_range(-1.0..1.0))
            .collect();
        SpeakerVector::new(v).unwrap_or_else(|_| SpeakerVector::default_for(self.speaker_dim))
    }

    /// Semantic token of a frame: determined by its last covered phoneme.
    pub fn semantic_token(&self, last: PhonemeId) -> u16 {
        (last.index() - 2) as u16
    }

    pub fn acoustic_token(&self, first: PhonemeId, speaker_id: usize, codebook: usize, frame: usize) -> u16 {
        let group = (speaker_id % SPEAKER_GROUPS) as u64;
        let h = mix_all(&[first.0 as u64, group, codebook as u64, (frame % 2) as u64, 0xAC]);
        (h % self.acoustic_vocab as u64) as u16
    }

    pub fn acoustic_pad(&self) -> u16 {
        self.acoustic_vocab as u16
    }

    pub fn generate_utterance(&self, lexicon: &Lexicon, utt_seed: u64) -> Result<Utterance> {
        let mut rng = ChaCha8Rng::seed_from_u64(utt_seed);
        let speaker_id = rng.gen_range(0..self.speakers);
        let target = rng.gen_range(self.min_phonemes..=self.max_phonemes);
        let vocab: Vec<&str> = lexicon.words().map(|(w, _)| w).collect();
        if vocab.is_empty() {
            return Err(Error::Validation("lexicon has no words".into()));
        }
        let mut words = Vec::new();
        let mut phonemes = Vec::new();
        while phonemes.len() < target {
            let w = vocab[rng.gen_range(0..vocab.len())];
            phonemes.extend(lexicon.phonemize_word(w));
            words.push(w.to_string());
        }
        let mut ends = Vec::with_capacity(phonemes.len());
        let mut t = 0.0;
        let mut prev = None;
        for &p in &phonemes {
            t += self.duration(prev, p, speaker_id);
            ends.push(t);
            prev = Some(p);
        }
        let alignment = ForcedAlignment::new(phonemes.clone(), ends)?;
        let durations = encode_alignment(&alignment)?;
        let coverage = decode_tokens(&durations, phonemes.len())?.coverage;
        let frames = coverage
            .iter()
            .enumerate()
            .map(|(t, c)| {
                let mut f = [0u16; CODEBOOKS];
                f[0] = self.semantic_token(phonemes[c.e - 1]);
                for (q, x) in f[1..].iter_mut().enumerate() {
                    *x = self.acoustic_token(phonemes[c.b - 1], speaker_id, q + 2, t);
                }
                f
            })
            .collect();
        Ok(Utterance {
            seed: utt_seed,
            speaker_id,
            words,
            phonemes,
            alignment,
            durations,
            frames,
            speaker: self.speaker_vector(speaker_id),
        })
    }

    pub fn generate(&self, lexicon: &Lexicon) -> Result<Vec<Utterance>> {
        self.validate()?;
        (0..self.utterances)
            .map(|i| self.generate_utterance(lexicon, self.utterance_seed(i)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub seed: u64,
    pub speaker_id: usize,
    pub words: Vec<String>,
    pub phonemes: Vec<PhonemeId>,
    pub alignment: ForcedAlignment,
    pub durations: Vec<DurationToken>,
    /// Undelayed frames: semantic token then codebooks 2..=12.
    pub frames: Vec<Frame>,
    pub speaker: SpeakerVector,
}

impl Utterance {
    pub fn grid(&self, acoustic_pad: u16) -> TokenGrid {
        TokenGrid::from_frames(&self.frames, acoustic_pad)
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

/// One line of the corpus manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub speaker_id: usize,
    pub held_out: bool,
    pub phonemes: usize,
    pub frames: usize,
    pub text: String,
}

pub fn manifest_lines(spec: &CorpusSpec, utts: &[Utterance]) -> Result<String> {
    let mut out = String::new();
    for (i, u) in utts.iter().enumerate() {
        let e = ManifestEntry {
            index: i,
            seed: u.seed,
            speaker_id: u.speaker_id,
            held_out: spec.is_held_out(u.speaker_id),
            phonemes: u.phonemes.len(),
            frames: u.frames.len(),
            text: u.text(),
        };
        out.push_str(&serde_json::to_string(&e)?);
        out.push('\n');
    }
    Ok(out)
}

/// Phoneme error rate of a generated semantic row with its duration tokens:
/// phoneme `k` is read from the first frame whose last covered phoneme is
/// `k`, then compared with `reference` by edit distance.
pub fn phoneme_error_rate(reference: &[PhonemeId], grid: &TokenGrid, durations: &[DurationToken]) -> f64 {
    if reference.is_empty() {
        return 0.0;
    }
    let mut hyp: Vec<Option<PhonemeId>> = Vec::new();
    let mut b = 1usize;
    for (t, d) in durations.iter().enumerate().take(grid.width()) {
        let e = b + d.count as usize - 1;
        while hyp.len() < e {
            hyp.push(None);
        }
        if hyp[e - 1].is_none() {
            let id = grid.semantic(t) as usize + 2;
            hyp[e - 1] = (id < INVENTORY.len()).then_some(PhonemeId(id as u16));
        }
        b = if d.shift == crate::align::Shift::Go { e + 1 } else { e };
    }
    let dist = levenshtein(reference, &hyp);
    (dist as f64 / reference.len() as f64).min(1.0)
}

fn levenshtein(a: &[PhonemeId], b: &[Option<PhonemeId>]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(*y != Some(*x));
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}
