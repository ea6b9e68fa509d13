use std::f64::consts::PI;

use fullstream_core::codec::{read_wav, to_pcm16, write_wav, FrameEncoder};
use fullstream_core::model::Frame;
use fullstream_core::{CodecSpec, Error};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec() -> CodecSpec {
    CodecSpec::new(64, 64).unwrap()
}

fn random_frame(r: &mut ChaCha8Rng, s: &CodecSpec) -> Frame {
    let mut f = [0u16; 12];
    for (q, x) in f.iter_mut().enumerate() {
        *x = r.gen_range(0..s.row_vocab(q) as u16);
    }
    f
}

// Plain O(n) DFT at one bin, independent of the FFT used by the encoder.
fn dft_mag(x: &[f32], k: usize) -> f64 {
    let n = x.len() as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (i, &v) in x.iter().enumerate() {
        let w = 2.0 * PI * k as f64 * i as f64 / n;
        re += v as f64 * w.cos();
        im -= v as f64 * w.sin();
    }
    (re * re + im * im).sqrt()
}

#[test]
fn exhaustive_round_trip() {
    let s = spec();
    let enc = FrameEncoder::new(s);
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for q in 0..12 {
        for tok in 0..s.row_vocab(q) as u16 {
            let mut f = random_frame(&mut r, &s);
            f[q] = tok;
            assert_eq!(enc.encode_frame(&s.decode_frame(&f).unwrap()).unwrap(), f);
        }
    }
}

#[test]
fn random_frames_round_trip() {
    let s = spec();
    let enc = FrameEncoder::new(s);
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let f = random_frame(&mut r, &s);
        assert_eq!(enc.encode_frame(&s.decode_frame(&f).unwrap()).unwrap(), f);
    }
}

#[test]
fn noisy_round_trip() {
    let s = spec();
    let enc = FrameEncoder::new(s);
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let f = random_frame(&mut r, &s);
        let clean = s.decode_frame(&f).unwrap();
        let rms = (clean.iter().map(|x| (*x as f64).powi(2)).sum::<f64>() / clean.len() as f64).sqrt();
        // uniform noise with RMS 40 dB under the signal
        let amp = rms * 0.01 * 3f64.sqrt();
        let noisy: Vec<f32> = clean
            .iter()
            .map(|&x| x + r.gen_range(-amp..amp) as f32)
            .collect();
        assert_eq!(enc.encode_frame(&noisy).unwrap(), f);
    }
}

#[test]
fn bank_peak_dominates_by_20db() {
    let s = spec();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let f = random_frame(&mut r, &s);
        let x = s.decode_frame(&f).unwrap();
        for q in 0..12 {
            let peak = dft_mag(&x, s.bin(q, f[q]));
            for tok in 0..s.row_vocab(q) as u16 {
                if tok != f[q] {
                    let other = dft_mag(&x, s.bin(q, tok));
                    assert!(20.0 * (peak / other.max(1e-300)).log10() > 20.0, "row {q} token {tok}");
                }
            }
        }
    }
}

#[test]
fn streaming_equals_offline() {
    let s = spec();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let frames: Vec<Frame> = (0..40).map(|_| random_frame(&mut r, &s)).collect();
    let offline = s.decode_frames(&frames).unwrap();
    let mut streamed = Vec::new();
    for f in &frames {
        streamed.extend(s.decode_frame(f).unwrap());
    }
    assert_eq!(offline, streamed);
    assert_eq!(offline.len(), 40 * 1920);
}

#[test]
fn silence_is_ambiguous() {
    let enc = FrameEncoder::new(spec());
    assert!(matches!(enc.encode_frame(&[0.0; 1920]), Err(Error::DecodeAmbiguity { .. })));
}

#[test]
fn wav_round_trip() {
    let s = spec();
    let x = s.decode_frames(&[[3; 12], [7; 12]]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.wav");
    write_wav(&p, &x, s.sample_rate).unwrap();
    let (pcm, rate) = read_wav(&p).unwrap();
    assert_eq!(rate, 24_000);
    assert_eq!(pcm, x.iter().map(|&v| to_pcm16(v)).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn decode_is_bounded(toks in proptest::array::uniform12(0u16..64)) {
        let x = spec().decode_frame(&toks).unwrap();
        prop_assert!(x.iter().all(|v| v.abs() <= 0.9 + 1e-6));
    }
}
