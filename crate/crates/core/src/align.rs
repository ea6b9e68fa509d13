//! Monotonic alignment through per-frame duration tokens.
//!
//! Each frame covers one or two consecutive phonemes. A duration token says
//! how many (`count`) and whether the pointer moves past the last of them
//! (`go`) or stays on it (`stay`) for the next frame. Phoneme indices in
//! [`FrameCoverage`] are 1-based.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phonemizer::{Lexicon, PhonemeId};

pub const FRAME_RATE: f64 = 12.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shift {
    Stay,
    Go,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DurationToken {
    pub shift: Shift,
    pub count: u8,
}

impl DurationToken {
    pub const fn new(shift: Shift, count: u8) -> Self {
        Self { shift, count }
    }

    pub fn stay(count: u8) -> Self {
        Self::new(Shift::Stay, count)
    }

    pub fn go(count: u8) -> Self {
        Self::new(Shift::Go, count)
    }

    pub fn packed(self) -> u8 {
        2 * (self.shift == Shift::Go) as u8 + (self.count - 1)
    }

    pub fn from_packed(id: u8) -> Result<Self> {
        if id > 3 {
            return Err(Error::Argument(format!("duration id {id} outside 0..=3")));
        }
        let shift = if id >= 2 { Shift::Go } else { Shift::Stay };
        Ok(Self::new(shift, id % 2 + 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameCoverage {
    pub b: usize,
    pub e: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcedAlignment {
    pub phonemes: Vec<PhonemeId>,
    /// Cumulative phoneme end times in frames.
    pub end_frames: Vec<f64>,
}

impl ForcedAlignment {
    pub fn new(phonemes: Vec<PhonemeId>, end_frames: Vec<f64>) -> Result<Self> {
        let a = Self {
            phonemes,
            end_frames,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.phonemes.is_empty() {
            return Err(Error::EmptyUtterance);
        }
        if self.phonemes.len() != self.end_frames.len() {
            return Err(Error::Validation(format!(
                "{} phonemes with {} end times",
                self.phonemes.len(),
                self.end_frames.len()
            )));
        }
        let mut prev = 0.0;
        for (i, &t) in self.end_frames.iter().enumerate() {
            if !t.is_finite() || t <= prev {
                return Err(Error::Validation(format!(
                    "end time {t} at phoneme {i} is not after {prev}"
                )));
            }
            prev = t;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }

    /// Frame count of the ideal quantization.
    pub fn frames(&self) -> usize {
        self.end_frames.last().map_or(0, |t| t.ceil() as usize)
    }

    /// Parses either `{"phonemes": [...], "end_frames": [...]}` or an interval
    /// list `{"intervals": [{"phoneme", "start_s", "end_s"}]}` with symbols
    /// resolved through `lexicon`.
    pub fn from_json(text: &str, lexicon: &Lexicon) -> Result<Self> {
        #[derive(Deserialize)]
        struct Interval {
            phoneme: String,
            #[allow(dead_code)]
            start_s: f64,
            end_s: f64,
        }
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Doc {
            Frames {
                phonemes: Vec<PhonemeId>,
                end_frames: Vec<f64>,
            },
            Intervals {
                intervals: Vec<Interval>,
            },
        }
        match serde_json::from_str::<Doc>(text)? {
            Doc::Frames {
                phonemes,
                end_frames,
            } => {
                if let Some(p) = phonemes.iter().find(|p| p.index() >= lexicon.inventory_size()) {
                    return Err(Error::Validation(format!("phoneme id {p} outside inventory")));
                }
                Self::new(phonemes, end_frames)
            }
            Doc::Intervals { intervals } => {
                let mut phonemes = Vec::with_capacity(intervals.len());
                let mut ends = Vec::with_capacity(intervals.len());
                for iv in intervals {
                    let id = lexicon.phoneme(&iv.phoneme).ok_or_else(|| {
                        Error::Validation(format!("unknown phoneme {:?}", iv.phoneme))
                    })?;
                    phonemes.push(id);
                    ends.push(iv.end_s * FRAME_RATE);
                }
                Self::new(phonemes, ends)
            }
        }
    }
}

/// Result of replaying duration tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub coverage: Vec<FrameCoverage>,
    /// Last token is `go` with `e == M`.
    pub terminated: bool,
}

pub fn decode_tokens(tokens: &[DurationToken], phonemes: usize) -> Result<Decoded> {
    if phonemes == 0 {
        return Err(Error::EmptyUtterance);
    }
    let mut coverage = Vec::with_capacity(tokens.len());
    let mut b = 1;
    for (t, tok) in tokens.iter().enumerate() {
        if !(1..=2).contains(&tok.count) {
            return Err(Error::Argument(format!("duration count {}", tok.count)));
        }
        let e = b + tok.count as usize - 1;
        if e > phonemes {
            return Err(Error::Overrun {
                frame: t + 1,
                end: e,
                phonemes,
            });
        }
        coverage.push(FrameCoverage { b, e });
        b = if tok.shift == Shift::Go { e + 1 } else { e };
    }
    let terminated = matches!(
        (tokens.last(), coverage.last()),
        (Some(tok), Some(c)) if tok.shift == Shift::Go && c.e == phonemes
    );
    Ok(Decoded {
        coverage,
        terminated,
    })
}

/// Greedy encoder. Frame `t` spans `(t-1, t]`; a phoneme ending exactly on a
/// boundary belongs to the frame on its left. When more than two phonemes fall
/// into a frame the pointer lags behind and catches up over the following
/// frames, so tokens may extend past the ideal frame count.
pub fn encode_alignment(a: &ForcedAlignment) -> Result<Vec<DurationToken>> {
    a.validate()?;
    let m = a.len();
    let frames = a.frames();
    if frames == 0 {
        return Err(Error::EmptyUtterance);
    }
    let ends = &a.end_frames;
    let mut tokens = Vec::with_capacity(frames);
    let mut b = 1;
    // Number of phonemes ending strictly before the current frame's right edge.
    let mut ended = 0;
    let mut t = 0usize;
    loop {
        t += 1;
        let right = t as f64;
        while ended < m && ends[ended] < right {
            ended += 1;
        }
        let hi = (ended + 1).min(m);
        let count = (hi + 1 - b).min(2);
        let e = b + count - 1;
        let shift = if e < hi || ends[e - 1] > right {
            Shift::Stay
        } else {
            Shift::Go
        };
        tokens.push(DurationToken::new(shift, count as u8));
        if shift == Shift::Go {
            if e == m {
                return Ok(tokens);
            }
            b = e + 1;
        } else {
            b = e;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    /// frames-per-phoneme → number of phonemes with that many frames.
    pub frames_per_phoneme: BTreeMap<usize, usize>,
    pub two_phoneme_frame_rate: f64,
    pub stay_rate: f64,
}

pub fn coverage_stats(tokens: &[DurationToken], phonemes: usize) -> Result<CoverageStats> {
    let decoded = decode_tokens(tokens, phonemes)?;
    let mut per = vec![0usize; phonemes];
    for c in &decoded.coverage {
        for k in c.b..=c.e {
            per[k - 1] += 1;
        }
    }
    let mut frames_per_phoneme = BTreeMap::new();
    for n in per {
        *frames_per_phoneme.entry(n).or_insert(0) += 1;
    }
    let n = tokens.len().max(1) as f64;
    Ok(CoverageStats {
        frames_per_phoneme,
        two_phoneme_frame_rate: tokens.iter().filter(|t| t.count == 2).count() as f64 / n,
        stay_rate: tokens.iter().filter(|t| t.shift == Shift::Stay).count() as f64 / n,
    })
}
