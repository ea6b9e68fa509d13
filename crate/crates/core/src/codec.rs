//! Sinusoid-bank codec with the grid geometry of a 12.5 Hz, 12-codebook,
//! 24 kHz neural codec. Every (row, token) pair owns one exact DFT bin of the
//! 1920-sample frame, so decoding is a sum of 12 tones and encoding is a
//! per-row peak pick.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Frame, CODEBOOKS};

/// First DFT bin used by row 0.
const FIRST_BIN: usize = 16;
const TAPER: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecSpec {
    pub frame_rate: f64,
    pub sample_rate: u32,
    pub samples_per_frame: usize,
    pub codebooks: usize,
    pub semantic_vocab: usize,
    pub acoustic_vocab: usize,
}

impl CodecSpec {
    pub fn new(semantic_vocab: usize, acoustic_vocab: usize) -> Result<Self> {
        let s = Self {
            frame_rate: 12.5,
            sample_rate: 24_000,
            samples_per_frame: 1920,
            codebooks: CODEBOOKS,
            semantic_vocab,
            acoustic_vocab,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_frame as f64 * self.frame_rate != self.sample_rate as f64 {
            return Err(Error::Validation("samples per frame must equal rate / frame rate".into()));
        }
        if self.codebooks != CODEBOOKS || self.semantic_vocab == 0 || self.acoustic_vocab == 0 {
            return Err(Error::Validation("codec grid geometry".into()));
        }
        if self.last_bin() >= self.samples_per_frame / 2 {
            return Err(Error::Validation(format!(
                "vocabularies need {} bins, above Nyquist",
                self.last_bin()
            )));
        }
        Ok(())
    }

    pub fn row_vocab(&self, row: usize) -> usize {
        if row == 0 {
            self.semantic_vocab
        } else {
            self.acoustic_vocab
        }
    }

    fn bank_start(&self, row: usize) -> usize {
        FIRST_BIN + (0..row).map(|r| self.row_vocab(r)).sum::<usize>()
    }

    fn last_bin(&self) -> usize {
        self.bank_start(CODEBOOKS)
    }

    /// DFT bin (cycles per frame) of a token.
    pub fn bin(&self, row: usize, token: u16) -> usize {
        self.bank_start(row) + token as usize
    }

    pub fn frequency(&self, row: usize, token: u16) -> f64 {
        self.bin(row, token) as f64 * self.frame_rate
    }

    fn amplitude(&self) -> f64 {
        0.9 / CODEBOOKS as f64
    }

    fn phase(row: usize) -> f64 {
        0.7 * row as f64
    }

    fn check(&self, frame: &Frame) -> Result<()> {
        for (row, &t) in frame.iter().enumerate() {
            if t as usize >= self.row_vocab(row) {
                return Err(Error::Argument(format!("token {t} outside row {row} vocabulary")));
            }
        }
        Ok(())
    }

    fn taper(&self, n: usize) -> f64 {
        let edge = n.min(self.samples_per_frame - 1 - n);
        if edge >= TAPER {
            1.0
        } else {
            0.5 * (1.0 - (PI * (edge as f64 + 0.5) / TAPER as f64).cos())
        }
    }

    pub fn decode_frame(&self, frame: &Frame) -> Result<Vec<f32>> {
        self.check(frame)?;
        let n = self.samples_per_frame;
        let a = self.amplitude();
        let mut out = vec![0.0f64; n];
        for (row, &tok) in frame.iter().enumerate() {
            let k = self.bin(row, tok) as f64;
            let ph = Self::phase(row);
            for (i, o) in out.iter_mut().enumerate() {
                *o += a * (2.0 * PI * k * i as f64 / n as f64 + ph).sin();
            }
        }
        Ok(out
            .iter()
            .enumerate()
            .map(|(i, &v)| (v * self.taper(i)) as f32)
            .collect())
    }

    pub fn decode_frames(&self, frames: &[Frame]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(frames.len() * self.samples_per_frame);
        for f in frames {
            out.extend(self.decode_frame(f)?);
        }
        Ok(out)
    }
}

/// Inverse of [`CodecSpec::decode_frame`] by DFT peak picking per row bank.
pub struct FrameEncoder {
    spec: CodecSpec,
    fft: Arc<dyn Fft<f64>>,
}

impl FrameEncoder {
    pub fn new(spec: CodecSpec) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(spec.samples_per_frame);
        Self { spec, fft }
    }

    /// Magnitude spectrum of one frame.
    pub fn spectrum(&self, samples: &[f32]) -> Result<Vec<f64>> {
        if samples.len() != self.spec.samples_per_frame {
            return Err(Error::Argument(format!(
                "{} samples, expected {}",
                samples.len(),
                self.spec.samples_per_frame
            )));
        }
        let mut buf: Vec<Complex<f64>> = samples.iter().map(|&s| Complex::new(s as f64, 0.0)).collect();
        self.fft.process(&mut buf);
        Ok(buf.iter().map(|c| c.norm()).collect())
    }

    pub fn encode_frame(&self, samples: &[f32]) -> Result<Frame> {
        let mag = self.spectrum(samples)?;
        let mut frame = [0u16; CODEBOOKS];
        for (row, slot) in frame.iter_mut().enumerate() {
            let start = self.spec.bank_start(row);
            let bank = &mag[start..start + self.spec.row_vocab(row)];
            let (mut best, mut best_v, mut second) = (0, f64::NEG_INFINITY, f64::NEG_INFINITY);
            for (i, &v) in bank.iter().enumerate() {
                if v > best_v {
                    second = best_v;
                    best = i;
                    best_v = v;
                } else if v > second {
                    second = v;
                }
            }
            let margin = 1e-9 * best_v.abs().max(1.0);
            if best_v <= 1e-6 || best_v - second <= margin {
                return Err(Error::DecodeAmbiguity { row });
            }
            *slot = best as u16;
        }
        Ok(frame)
    }
}

/// 24 kHz, 16-bit PCM mono.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample(to_pcm16(s))?;
    }
    w.finalize()?;
    Ok(())
}

pub fn to_pcm16(s: f32) -> i16 {
    (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16
}

pub fn read_wav(path: &Path) -> Result<(Vec<i16>, u32)> {
    let mut r = hound::WavReader::open(path)?;
    let rate = r.spec().sample_rate;
    let samples = r.samples::<i16>().collect::<std::result::Result<_, _>>()?;
    Ok((samples, rate))
}
