//! Word feeders and the token log.

use std::fmt::Write;

use num_traits::Float;

use super::{FrameOut, StreamEngine};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedMode {
    /// Every word is pushed and the stream closed before the first step.
    UpFront,
    /// Each push is followed by as many steps as the gate allows.
    WordByWord,
}

/// Runs `words` through the engine to completion and returns the decodable
/// frames in order.
pub fn drive<T: Float, W: AsRef<str>>(
    engine: &mut StreamEngine<'_, T>,
    words: &[W],
    mode: FeedMode,
) -> Result<Vec<FrameOut>> {
    let mut out = Vec::new();
    for w in words {
        engine.push_word(w.as_ref())?;
        if mode == FeedMode::WordByWord {
            drain(engine, &mut out)?;
        }
    }
    engine.close()?;
    drain(engine, &mut out)?;
    Ok(out)
}

/// Steps until the gate closes, collecting decodable frames.
pub fn drain<T: Float>(engine: &mut StreamEngine<'_, T>, out: &mut Vec<FrameOut>) -> Result<()> {
    while let Some(f) = engine.try_step()? {
        if f.decodable {
            out.push(f);
        }
    }
    Ok(())
}

/// One line per frame: index, 12 tokens, packed duration and, optionally,
/// the emission time in microseconds.
pub fn token_log(frames: &[FrameOut], with_time: bool) -> String {
    let mut s = String::new();
    for f in frames {
        let toks: Vec<String> = f.tokens.iter().map(|t| t.to_string()).collect();
        let _ = write!(s, "{}\t{}\t{}", f.index, toks.join(" "), f.duration.packed());
        if with_time {
            let _ = write!(s, "\t{}", f.emit_time.as_micros());
        }
        s.push('\n');
    }
    s
}

/// Reads a token log written by [`token_log`] (with or without times).
pub fn parse_token_log(text: &str) -> Result<Vec<FrameOut>> {
    use crate::align::DurationToken;
    use crate::error::Error;
    use crate::model::CODEBOOKS;

    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let err = |message: String| Error::Parse {
            source_name: "token log".into(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(err(format!("{} fields", fields.len())));
        }
        let index = fields[0].parse().map_err(|e| err(format!("index: {e}")))?;
        let toks: Vec<u16> = fields[1]
            .split(' ')
            .map(|t| t.parse::<u16>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(format!("token: {e}")))?;
        let tokens: [u16; CODEBOOKS] = toks
            .try_into()
            .map_err(|v: Vec<u16>| err(format!("{} tokens", v.len())))?;
        let packed = fields[2].parse::<u8>().map_err(|e| err(format!("duration: {e}")))?;
        let micros = match fields.get(3) {
            Some(f) => f.parse::<u64>().map_err(|e| err(format!("time: {e}")))?,
            None => 0,
        };
        out.push(FrameOut {
            index,
            tokens,
            duration: DurationToken::from_packed(packed).map_err(|e| err(e.to_string()))?,
            emit_time: std::time::Duration::from_micros(micros),
            decodable: true,
            audio: None,
        });
    }
    Ok(out)
}
