//! The three transformer stacks: a phoneme encoder with bounded look-ahead, a
//! temporal stack predicting one joint (semantic, duration) token per frame,
//! and a depth stack generating the remaining codebooks of each frame.

mod infer;
mod params;
pub mod sampling;
mod train;

use serde::{Deserialize, Serialize};

use crate::align::DurationToken;
use crate::error::{Error, Result};

pub use infer::{InferenceModel, PtCache, TtCache};
pub use params::Model;
pub use sampling::{sample_joint, Sampler};
pub use train::{forward, teacher_forced_nll, ForwardVars, TrainExample};

/// Codebooks per frame.
pub const CODEBOOKS: usize = 12;
/// Codebooks produced by the depth stack (2..=12).
pub const ACOUSTIC_ROWS: usize = CODEBOOKS - 1;
pub const DURATION_VOCAB: usize = 4;
pub const LOOKAHEAD_CAP: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
}

impl StackConfig {
    fn validate(&self, name: &str) -> Result<()> {
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.ff_hidden == 0 {
            return Err(Error::Validation(format!("{name}: zero-sized stack")));
        }
        if self.d_model % self.heads != 0 || (self.d_model / self.heads) % 2 != 0 {
            return Err(Error::Validation(format!(
                "{name}: d_model {} needs an even head size for {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub pt: StackConfig,
    pub tt: StackConfig,
    pub dt: StackConfig,
    pub phoneme_vocab: usize,
    pub semantic_vocab: usize,
    pub acoustic_vocab: usize,
    pub codebooks: usize,
    pub duration_vocab: usize,
    pub lookahead_cap: usize,
    pub speaker_dim: usize,
    /// Feeds the speaker vector to the temporal stack as well.
    #[serde(default)]
    pub tt_speaker: bool,
    /// When false the speaker vector is ignored (treated as zero).
    #[serde(default = "yes")]
    pub use_speaker: bool,
    pub rope_base: f64,
    pub norm_eps: f64,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn toy() -> Self {
        let stack = StackConfig {
            d_model: 64,
            layers: 2,
            heads: 4,
            ff_hidden: 128,
        };
        Self {
            pt: stack,
            tt: stack,
            dt: stack,
            phoneme_vocab: crate::phonemizer::INVENTORY.len(),
            semantic_vocab: 64,
            acoustic_vocab: 64,
            codebooks: CODEBOOKS,
            duration_vocab: DURATION_VOCAB,
            lookahead_cap: LOOKAHEAD_CAP,
            speaker_dim: 16,
            tt_speaker: false,
            use_speaker: true,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
        }
    }

    /// Full-size reference dimensions (not trainable here; kept for sizing).
    pub fn reference() -> Self {
        Self {
            pt: StackConfig {
                d_model: 1024,
                layers: 6,
                heads: 8,
                ff_hidden: 4096,
            },
            tt: StackConfig {
                d_model: 1024,
                layers: 12,
                heads: 16,
                ff_hidden: 4096,
            },
            dt: StackConfig {
                d_model: 1024,
                layers: 4,
                heads: 8,
                ff_hidden: 8192,
            },
            semantic_vocab: 2048,
            acoustic_vocab: 2048,
            speaker_dim: 192,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pt.validate("pt")?;
        self.tt.validate("tt")?;
        self.dt.validate("dt")?;
        if self.codebooks != CODEBOOKS
            || self.duration_vocab != DURATION_VOCAB
            || self.lookahead_cap != LOOKAHEAD_CAP
        {
            return Err(Error::Validation(format!(
                "grid constants must be {CODEBOOKS} codebooks, {DURATION_VOCAB} duration classes, look-ahead {LOOKAHEAD_CAP}"
            )));
        }
        if self.semantic_vocab == 0 || self.acoustic_vocab == 0 || self.speaker_dim == 0 {
            return Err(Error::Validation("empty vocabulary".into()));
        }
        if self.phoneme_vocab < 3 {
            return Err(Error::Validation("phoneme vocabulary too small".into()));
        }
        if self.acoustic_vocab >= u16::MAX as usize || self.semantic_vocab >= u16::MAX as usize {
            return Err(Error::Validation("vocabulary exceeds token width".into()));
        }
        Ok(())
    }

    /// Joint classes including the trailing PAD class.
    pub fn joint_classes(&self) -> usize {
        self.semantic_vocab * DURATION_VOCAB + 1
    }

    pub fn joint_pad(&self) -> usize {
        self.semantic_vocab * DURATION_VOCAB
    }

    pub fn acoustic_pad(&self) -> u16 {
        self.acoustic_vocab as u16
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JointToken {
    pub semantic: u16,
    pub duration: DurationToken,
}

impl JointToken {
    pub fn class(self) -> usize {
        self.semantic as usize * DURATION_VOCAB + self.duration.packed() as usize
    }

    pub fn from_class(class: usize, semantic_vocab: usize) -> Result<Self> {
        if class >= semantic_vocab * DURATION_VOCAB {
            return Err(Error::Argument(format!(
                "joint class {class} is PAD or out of range"
            )));
        }
        Ok(Self {
            semantic: (class / DURATION_VOCAB) as u16,
            duration: DurationToken::from_packed((class % DURATION_VOCAB) as u8)?,
        })
    }
}

/// One frame's tokens: semantic first, then codebooks 2..=12.
pub type Frame = [u16; CODEBOOKS];

/// Token columns with the acoustic rows delayed by one column: column `t`
/// carries frame `t`'s semantic token and frame `t-1`'s acoustic tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    columns: Vec<Frame>,
}

impl TokenGrid {
    pub fn from_columns(columns: Vec<Frame>) -> Self {
        Self { columns }
    }

    /// Builds the delayed grid from undelayed frames. The last frame's
    /// acoustic tokens fall outside the grid.
    pub fn from_frames(frames: &[Frame], acoustic_pad: u16) -> Self {
        let columns = frames
            .iter()
            .enumerate()
            .map(|(t, f)| {
                let mut c = [acoustic_pad; CODEBOOKS];
                c[0] = f[0];
                if t > 0 {
                    c[1..].copy_from_slice(&frames[t - 1][1..]);
                }
                c
            })
            .collect();
        Self { columns }
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[Frame] {
        &self.columns
    }

    pub fn semantic(&self, t: usize) -> u16 {
        self.columns[t][0]
    }

    pub fn semantic_row(&self) -> Vec<u16> {
        self.columns.iter().map(|c| c[0]).collect()
    }

    pub fn acoustic(&self, t: usize) -> &[u16] {
        &self.columns[t][1..]
    }

    /// Undelayed frames `0..width-1` (the last frame's acoustics are not in the grid).
    pub fn resolved_frames(&self) -> Vec<Frame> {
        (1..self.columns.len())
            .map(|t| {
                let mut f = self.columns[t];
                f[0] = self.columns[t - 1][0];
                f
            })
            .collect()
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            columns: self.columns[start..end].to_vec(),
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let pad = cfg.acoustic_pad();
        for (t, c) in self.columns.iter().enumerate() {
            if c[0] as usize >= cfg.semantic_vocab {
                return Err(Error::Validation(format!("semantic token {} at column {t}", c[0])));
            }
            for (q, &a) in c[1..].iter().enumerate() {
                let ok = if t == 0 {
                    a == pad
                } else {
                    (a as usize) < cfg.acoustic_vocab
                };
                if !ok {
                    return Err(Error::Validation(format!(
                        "acoustic token {a} at column {t}, codebook {}",
                        q + 2
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Unit-norm speaker embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerVector(Vec<f64>);

impl SpeakerVector {
    pub fn new(mut v: Vec<f64>) -> Result<Self> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if v.is_empty() || !n.is_finite() || n == 0.0 {
            return Err(Error::Argument("speaker vector has no direction".into()));
        }
        v.iter_mut().for_each(|x| *x /= n);
        Ok(Self(v))
    }

    /// First-axis unit vector, used when no speaker is given.
    pub fn default_for(dim: usize) -> Self {
        let mut v = vec![0.0; dim.max(1)];
        v[0] = 1.0;
        Self(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}
