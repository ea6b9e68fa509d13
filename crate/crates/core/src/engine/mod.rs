//! Full-stream scheduler: words in, decodable frames out.
//!
//! Phoneme embeddings are recomputed on every push for positions that still
//! lack a full look-ahead; a position is frozen as soon as a temporal step
//! reads it. A step runs when the pointer's phoneme and its successor are
//! buffered (or the stream is closed). Frame `t` becomes decodable after step
//! `t + 1`, when the depth stack has produced its acoustic rows.

pub mod clock;
pub mod feed;
pub mod ledger;
pub mod offline;

use std::ops::Range;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::align::{decode_tokens, encode_alignment, DurationToken, ForcedAlignment, Shift};
use crate::codec::CodecSpec;
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::model::{
    Frame, InferenceModel, JointToken, PtCache, Sampler, SpeakerVector, TokenGrid, TtCache, ACOUSTIC_ROWS,
    CODEBOOKS,
};
use crate::phonemizer::{Lexicon, PhonemeId};

pub use clock::{Clock, MonotonicClock, Stage, VirtualClock};
pub use feed::{drain, drive, parse_token_log, token_log, FeedMode};
pub use ledger::{EmitRecord, LatencyLedger, LatencyReport, StageReport};
pub use offline::generate_offline;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
    /// Frames a single pointer position may last before `go` is forced.
    pub max_frames_per_phoneme: usize,
    /// Look-ahead used by the phoneme stack, at most the model's cap.
    #[serde(default = "default_lookahead")]
    pub lookahead: usize,
}

fn default_lookahead() -> usize {
    crate::model::LOOKAHEAD_CAP
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            top_k: 0,
            seed: 0,
            max_frames_per_phoneme: 25,
            lookahead: default_lookahead(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self, model_cap: usize) -> Result<()> {
        if self.max_frames_per_phoneme == 0 {
            return Err(Error::Argument("max_frames_per_phoneme must be positive".into()));
        }
        if self.lookahead > model_cap {
            return Err(Error::Argument(format!(
                "look-ahead {} above the model cap {model_cap}",
                self.lookahead
            )));
        }
        Ok(())
    }

    pub fn sampler(&self) -> Result<Sampler> {
        Sampler::new(self.temperature, self.top_k, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameOut {
    /// Frame index counted from the first generated frame.
    pub index: usize,
    /// Semantic token then codebooks 2..=12; acoustic rows are PAD while
    /// the frame is not yet decodable.
    pub tokens: Frame,
    pub duration: DurationToken,
    #[serde(with = "micros")]
    pub emit_time: std::time::Duration,
    pub decodable: bool,
    #[serde(skip)]
    pub audio: Option<Vec<f32>>,
}

mod micros {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_micros() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_micros(u64::deserialize(d)?))
    }
}

/// Voice prompt: phonemes, their alignment and the matching token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub phonemes: Vec<PhonemeId>,
    pub grid: TokenGrid,
    pub alignment: ForcedAlignment,
    pub speaker: SpeakerVector,
}

impl Prompt {
    pub fn from_utterance(u: &Utterance, acoustic_pad: u16) -> Self {
        Self {
            phonemes: u.phonemes.clone(),
            grid: u.grid(acoustic_pad),
            alignment: u.alignment.clone(),
            speaker: u.speaker.clone(),
        }
    }

    /// Duration tokens of the prompt; checks them against the grid.
    pub fn durations(&self) -> Result<Vec<DurationToken>> {
        if self.alignment.phonemes != self.phonemes {
            return Err(Error::Validation("prompt alignment covers different phonemes".into()));
        }
        let d = encode_alignment(&self.alignment)?;
        if d.len() != self.grid.width() {
            return Err(Error::Validation(format!(
                "prompt alignment needs {} frames, grid has {}",
                d.len(),
                self.grid.width()
            )));
        }
        Ok(d)
    }
}

pub(crate) fn lookahead_limits(n: usize, cap: usize) -> Vec<usize> {
    (0..n).map(|i| cap.min(n - 1 - i)).collect()
}

/// Duration choices open at 1-based pointer `b` over `n` phonemes, with
/// `run` frames already spent at `b`.
pub(crate) fn duration_rule(b: usize, n: usize, run: usize, guard: usize) -> impl Fn(JointToken) -> bool {
    move |j: JointToken| {
        let e = b + j.duration.count as usize - 1;
        e <= n && (run + 1 < guard || j.duration.shift == Shift::Go)
    }
}

/// `(new pointer, new run length)` after a frame.
pub(crate) fn advance(b: usize, run: usize, d: DurationToken) -> (usize, usize) {
    let e = b + d.count as usize - 1;
    let nb = if d.shift == Shift::Go { e + 1 } else { e };
    (nb, if nb == b { run + 1 } else { 0 })
}

struct Pending {
    frame: Option<usize>,
    semantic: u16,
    duration: DurationToken,
}

pub struct StreamEngine<'m, T: Float = f32> {
    model: &'m InferenceModel<T>,
    lexicon: &'m Lexicon,
    codec: Option<CodecSpec>,
    config: EngineConfig,
    sampler: Sampler,
    clock: Box<dyn Clock + 'm>,
    ledger: LatencyLedger,
    speaker: SpeakerVector,
    phonemes: Vec<PhonemeId>,
    words: Vec<Range<usize>>,
    closed: bool,
    finished: bool,
    pt_cache: PtCache<T>,
    embeddings: Vec<Vec<T>>,
    frozen: usize,
    tt_cache: TtCache<T>,
    column: usize,
    prompt_columns: usize,
    prompt_phonemes: usize,
    pointer: usize,
    run: usize,
    prev_semantic: Option<u16>,
    pending: Option<Pending>,
    emitted: Vec<FrameOut>,
    zero: Vec<T>,
}

impl<'m, T: Float> StreamEngine<'m, T> {
    pub fn new(model: &'m InferenceModel<T>, lexicon: &'m Lexicon, config: EngineConfig) -> Result<Self> {
        config.validate(model.config.lookahead_cap)?;
        Ok(Self {
            model,
            lexicon,
            codec: None,
            sampler: config.sampler()?,
            config,
            clock: Box::new(MonotonicClock::new()),
            ledger: LatencyLedger::default(),
            speaker: SpeakerVector::default_for(model.config.speaker_dim),
            phonemes: Vec::new(),
            words: Vec::new(),
            closed: false,
            finished: false,
            pt_cache: model.new_pt_cache(),
            embeddings: Vec::new(),
            frozen: 0,
            tt_cache: model.new_tt_cache(),
            column: 0,
            prompt_columns: 0,
            prompt_phonemes: 0,
            pointer: 1,
            run: 0,
            prev_semantic: None,
            pending: None,
            emitted: Vec::new(),
            zero: vec![T::zero(); model.config.pt.d_model],
        })
    }

    pub fn with_clock(mut self, clock: impl Clock + 'm) -> Self {
        self.clock = Box::new(clock);
        self
    }

    /// Decode every decodable frame to audio as part of the pipeline.
    pub fn with_codec(mut self, codec: CodecSpec) -> Self {
        self.codec = Some(codec);
        self
    }

    pub fn with_speaker(mut self, speaker: SpeakerVector) -> Result<Self> {
        if speaker.dim() != self.model.config.speaker_dim {
            return Err(Error::Argument(format!(
                "speaker dim {} != {}",
                speaker.dim(),
                self.model.config.speaker_dim
            )));
        }
        self.speaker = speaker;
        Ok(self)
    }

    fn is_fresh(&self) -> bool {
        self.phonemes.is_empty() && self.column == 0 && !self.closed
    }

    fn finish_stage(&mut self, stage: Stage, start: std::time::Duration) {
        self.clock.charge(stage);
        let elapsed = self.clock.now().saturating_sub(start);
        self.ledger.record(stage, elapsed);
    }

    /// Teacher-forces a prompt through the phoneme and temporal stacks.
    pub fn prefill_prompt(&mut self, prompt: &Prompt) -> Result<()> {
        if !self.is_fresh() {
            return Err(Error::State("prompt must be prefilled on a fresh stream".into()));
        }
        if prompt.speaker.dim() != self.model.config.speaker_dim {
            return Err(Error::Validation("prompt speaker dimension".into()));
        }
        if prompt.phonemes.is_empty() {
            if prompt.grid.width() != 0 {
                return Err(Error::Validation("prompt grid without phonemes".into()));
            }
            return Ok(());
        }
        let durations = prompt.durations()?;
        prompt.grid.validate(&self.model.config)?;
        self.speaker = prompt.speaker.clone();
        self.phonemes = prompt.phonemes.clone();
        self.refresh_embeddings()?;
        let m = self.phonemes.len();
        let cov = decode_tokens(&durations, m)?.coverage;
        for (t, c) in cov.iter().enumerate() {
            let a = c.b - 1;
            let slot_b = (a + 1 < m).then(|| &self.embeddings[a + 1][..]);
            let prev = (t > 0).then(|| prompt.grid.semantic(t - 1));
            self.model
                .tt_step(&mut self.tt_cache, t, prev, &self.embeddings[a], slot_b, &self.speaker)?;
            self.ledger.prefill_steps += 1;
        }
        let width = prompt.grid.width();
        self.frozen = m;
        self.prompt_phonemes = m;
        self.pointer = m + 1;
        self.column = width;
        self.prompt_columns = width;
        self.prev_semantic = Some(prompt.grid.semantic(width - 1));
        self.pending = Some(Pending {
            frame: None,
            semantic: prompt.grid.semantic(width - 1),
            duration: durations[width - 1],
        });
        Ok(())
    }

    pub fn push_word(&mut self, word: &str) -> Result<()> {
        if self.closed {
            return Err(Error::State("push after close".into()));
        }
        let start = self.clock.now();
        self.ledger.first_arrival.get_or_insert(start);
        let ph = self.lexicon.phonemize_word(word);
        self.finish_stage(Stage::Phonemize, start);
        if ph.is_empty() {
            return Ok(());
        }
        let n = self.phonemes.len();
        self.words.push(n..n + ph.len());
        self.phonemes.extend(ph);
        self.refresh_embeddings()
    }

    fn refresh_embeddings(&mut self) -> Result<()> {
        let n = self.phonemes.len();
        let cap = self.config.lookahead;
        let la = lookahead_limits(n, cap);
        let cached = self.pt_cache.len(0);
        let commit = n.saturating_sub(cap).max(cached);
        let start = self.clock.now();
        let rows = self
            .model
            .pt_rows(&mut self.pt_cache, &self.phonemes, &la, commit)?;
        self.finish_stage(Stage::Pt, start);
        self.embeddings.resize(n, self.zero.clone());
        for (k, row) in rows.into_iter().enumerate() {
            let i = cached + k;
            if i >= self.frozen {
                self.embeddings[i] = row;
            }
        }
        Ok(())
    }

    pub fn close(&mut self) -> Result<()> {
        if self.closed {
            return Err(Error::State("stream already closed".into()));
        }
        self.closed = true;
        if self.pointer > self.phonemes.len() && self.pending.as_ref().map_or(true, |p| p.frame.is_none()) {
            self.finished = true;
        }
        Ok(())
    }

    /// Runs one step if the gate allows it. Returns the frame completed by
    /// the step, or a non-decodable marker for the first generated column.
    pub fn try_step(&mut self) -> Result<Option<FrameOut>> {
        if self.finished {
            return Ok(None);
        }
        let n = self.phonemes.len();
        if self.pointer > n {
            if !self.closed {
                return Ok(None);
            }
            return self.flush().map(Some);
        }
        let a = self.pointer - 1;
        if a + 1 >= n && !self.closed {
            return Ok(None);
        }
        let b_slot = (a + 1 < n).then_some(a + 1);
        self.frozen = self.frozen.max(a + 1 + usize::from(b_slot.is_some()));

        let start = self.clock.now();
        let (h, logits) = self.model.tt_step(
            &mut self.tt_cache,
            self.column,
            self.prev_semantic,
            &self.embeddings[a],
            b_slot.map(|i| &self.embeddings[i][..]),
            &self.speaker,
        )?;
        let rule = duration_rule(self.pointer, n, self.run, self.config.max_frames_per_phoneme);
        let joint = self.model.sample_joint(&logits, &mut self.sampler, rule)?;
        self.finish_stage(Stage::Tt, start);

        let acoustic = self.depth(&h, joint.semantic)?;
        let resolved = self.resolve(acoustic)?;
        let frame = self.column - self.prompt_columns;
        self.pending = Some(Pending {
            frame: Some(frame),
            semantic: joint.semantic,
            duration: joint.duration,
        });
        let e = self.pointer + joint.duration.count as usize - 1;
        if e > n {
            return Err(Error::Generation(format!(
                "frame {frame}: duration {:?} at phoneme {} overruns {n} buffered phonemes",
                joint.duration, self.pointer
            )));
        }
        (self.pointer, self.run) = advance(self.pointer, self.run, joint.duration);
        self.prev_semantic = Some(joint.semantic);
        self.column += 1;
        Ok(Some(resolved.unwrap_or_else(|| {
            let mut tokens = [self.model.config.acoustic_pad(); CODEBOOKS];
            tokens[0] = joint.semantic;
            FrameOut {
                index: frame,
                tokens,
                duration: joint.duration,
                emit_time: self.clock.now(),
                decodable: false,
                audio: None,
            }
        })))
    }

    /// Extra column with empty phoneme slots that releases the last frame's
    /// acoustic rows.
    fn flush(&mut self) -> Result<FrameOut> {
        let start = self.clock.now();
        let (h, logits) = self.model.tt_step(
            &mut self.tt_cache,
            self.column,
            self.prev_semantic,
            &self.zero,
            None,
            &self.speaker,
        )?;
        let joint = self.model.sample_joint(&logits, &mut self.sampler, |_| true)?;
        self.finish_stage(Stage::Tt, start);
        let acoustic = self.depth(&h, joint.semantic)?;
        let out = self.resolve(acoustic)?;
        self.pending = None;
        self.column += 1;
        self.finished = true;
        out.ok_or_else(|| Error::State("flush without a pending frame".into()))
    }

    fn depth(&mut self, h: &[T], semantic: u16) -> Result<[u16; ACOUSTIC_ROWS]> {
        self.ledger.dt_columns += 1;
        if self.column == 0 {
            return Ok([self.model.config.acoustic_pad(); ACOUSTIC_ROWS]);
        }
        let start = self.clock.now();
        let out = self.model.dt_generate(h, semantic, &self.speaker, &mut self.sampler)?;
        self.finish_stage(Stage::Dt, start);
        Ok(out)
    }

    fn resolve(&mut self, acoustic: [u16; ACOUSTIC_ROWS]) -> Result<Option<FrameOut>> {
        let Some(p) = self.pending.take() else {
            return Ok(None);
        };
        let Some(index) = p.frame else {
            return Ok(None);
        };
        let mut tokens = [0u16; CODEBOOKS];
        tokens[0] = p.semantic;
        tokens[1..].copy_from_slice(&acoustic);
        let audio = match self.codec {
            Some(c) => {
                let start = self.clock.now();
                let a = c.decode_frame(&tokens)?;
                self.finish_stage(Stage::Decode, start);
                Some(a)
            }
            None => None,
        };
        let now = self.clock.now();
        self.ledger.emits.push(EmitRecord {
            frame: index,
            step: self.column - self.prompt_columns,
            tt_steps: self.ledger.calls(Stage::Tt),
            dt_columns: self.ledger.dt_columns,
            pt_passes: self.ledger.calls(Stage::Pt),
            decodes: self.ledger.calls(Stage::Decode),
            time: now,
        });
        let out = FrameOut {
            index,
            tokens,
            duration: p.duration,
            emit_time: now,
            decodable: true,
            audio,
        };
        self.emitted.push(FrameOut {
            audio: None,
            ..out.clone()
        });
        Ok(Some(out))
    }

    pub fn now(&self) -> std::time::Duration {
        self.clock.now()
    }

    pub fn wait_until(&mut self, t: std::time::Duration) {
        self.clock.wait_until(t);
    }

    pub fn latency_report(&self) -> Result<LatencyReport> {
        self.ledger.report()
    }

    pub fn ledger(&self) -> &LatencyLedger {
        &self.ledger
    }

    /// Decodable frames so far, without audio.
    pub fn emitted(&self) -> &[FrameOut] {
        &self.emitted
    }

    pub fn phonemes(&self) -> &[PhonemeId] {
        &self.phonemes
    }

    pub fn word_extents(&self) -> &[Range<usize>] {
        &self.words
    }

    /// Current look-ahead per buffered position.
    pub fn la_limits(&self) -> Vec<usize> {
        lookahead_limits(self.phonemes.len(), self.config.lookahead)
    }

    /// Positions whose embeddings are cached for good.
    pub fn finalized(&self) -> usize {
        self.pt_cache.len(0)
    }

    /// Positions read by a temporal step (their embeddings no longer change).
    pub fn consumed(&self) -> usize {
        self.frozen
    }

    pub fn embedding(&self, i: usize) -> Option<&[T]> {
        self.embeddings.get(i).map(|v| &v[..])
    }

    /// 1-based index of the next frame's first phoneme.
    pub fn pointer(&self) -> usize {
        self.pointer
    }

    pub fn steps(&self) -> usize {
        self.column
    }

    pub fn prompt_phonemes(&self) -> usize {
        self.prompt_phonemes
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }
}
