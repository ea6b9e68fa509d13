//! Word-feed schedules and the latency benchmark.

use std::path::Path;
use std::time::Duration;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::codec::CodecSpec;
use crate::engine::{Clock, EngineConfig, FrameOut, LatencyReport, StreamEngine};
use crate::error::{Error, Result};
use crate::model::InferenceModel;
use crate::phonemizer::Lexicon;

/// Words with release offsets (milliseconds from the start of the run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedSchedule {
    pub words: Vec<(String, u64)>,
}

impl FeedSchedule {
    pub fn new(words: Vec<(String, u64)>) -> Result<Self> {
        if words.windows(2).any(|w| w[1].1 < w[0].1) {
            return Err(Error::Validation("feed offsets must be non-decreasing".into()));
        }
        Ok(Self { words })
    }

    /// Every word released at time zero.
    pub fn all_at_once(text: &str) -> Self {
        Self {
            words: text.split_whitespace().map(|w| (w.to_string(), 0)).collect(),
        }
    }

    /// Word `i` released at `i * interval_ms`.
    pub fn fixed_interval(text: &str, interval_ms: u64) -> Self {
        Self {
            words: text
                .split_whitespace()
                .enumerate()
                .map(|(i, w)| (w.to_string(), i as u64 * interval_ms))
                .collect(),
        }
    }

    /// Lines of `offset_ms<TAB>word`; blank lines and `#` comments skipped.
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut words = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                source_name: source_name.to_string(),
                line: i + 1,
                message,
            };
            let (off, word) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| parse_err("expected `offset_ms word`".into()))?;
            let off = off
                .parse::<u64>()
                .map_err(|e| parse_err(format!("offset: {e}")))?;
            words.push((word.trim().to_string(), off));
        }
        Self::new(words)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn text(&self) -> String {
        self.words.iter().map(|w| w.0.as_str()).collect::<Vec<_>>().join(" ")
    }
}

/// Releases words on the engine's clock, stepping whenever the gate allows,
/// then closes and drains the stream.
pub fn run_schedule<T: Float>(engine: &mut StreamEngine<'_, T>, schedule: &FeedSchedule) -> Result<Vec<FrameOut>> {
    let origin = engine.now();
    let mut out = Vec::new();
    let mut next = 0;
    loop {
        while next < schedule.words.len() && origin + Duration::from_millis(schedule.words[next].1) <= engine.now() {
            engine.push_word(&schedule.words[next].0)?;
            next += 1;
        }
        if next == schedule.words.len() && !engine.is_closed() {
            engine.close()?;
        }
        match engine.try_step()? {
            Some(f) => {
                if f.decodable {
                    out.push(f);
                }
            }
            None if next < schedule.words.len() => {
                engine.wait_until(origin + Duration::from_millis(schedule.words[next].1));
            }
            None => return Ok(out),
        }
    }
}

/// One workload entry: text and how it is released.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub texts: Vec<String>,
    /// 0 releases all words at once.
    #[serde(default)]
    pub interval_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub runs: usize,
    pub failed_runs: usize,
    pub fpl_ms_median: f64,
    pub fpl_ms_p95: f64,
    pub rtf_median: f64,
    pub rtf_p95: f64,
    /// Median seconds per stage across runs.
    pub stage_seconds: std::collections::BTreeMap<String, f64>,
    /// Largest relative gap between the stage sum and wall time of a run.
    pub max_stage_gap: f64,
    /// Runs where the first decodable frame did not take exactly 2 temporal
    /// steps and 2 depth columns, or a later frame broke the delay.
    pub identity_violations: usize,
    pub per_run: Vec<LatencyReport>,
    pub config: serde_json::Value,
}

fn quantile(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

pub fn median(v: &[f64]) -> f64 {
    quantile(v, 0.5)
}

/// Runs every workload text `runs` times; a faulting run is logged, counted
/// and skipped.
#[allow(clippy::too_many_arguments)]
pub fn run_bench<'m, T: Float, C: Clock + 'm>(
    model: &'m InferenceModel<T>,
    lexicon: &'m Lexicon,
    codec: CodecSpec,
    workload: &Workload,
    engine: EngineConfig,
    runs: usize,
    clock: impl Fn() -> C,
    config_echo: serde_json::Value,
) -> Result<BenchReport> {
    if runs < 10 {
        return Err(Error::Validation(format!("{runs} runs; medians need at least 10")));
    }
    if workload.texts.is_empty() {
        return Err(Error::Validation("empty workload".into()));
    }
    let mut reports = Vec::new();
    let mut failed = 0;
    let mut violations = 0;
    for r in 0..runs {
        let text = &workload.texts[r % workload.texts.len()];
        let schedule = if workload.interval_ms == 0 {
            FeedSchedule::all_at_once(text)
        } else {
            FeedSchedule::fixed_interval(text, workload.interval_ms)
        };
        let mut e = StreamEngine::new(model, lexicon, engine)?
            .with_clock(clock())
            .with_codec(codec);
        match run_schedule(&mut e, &schedule).and_then(|_| e.latency_report()) {
            Ok(rep) => {
                let f = rep.first_frame;
                if f.tt_steps != 2 || f.dt_columns != 2 || e.ledger().delay_violations() > 0 {
                    violations += 1;
                }
                reports.push(rep);
            }
            Err(err) => {
                warn!(run = r, error = %err, "bench run failed");
                failed += 1;
            }
        }
    }
    let fpl: Vec<f64> = reports.iter().map(|r| r.fpl_ms).collect();
    let rtf: Vec<f64> = reports.iter().map(|r| r.rtf).collect();
    let mut stage_seconds = std::collections::BTreeMap::new();
    if let Some(first) = reports.first() {
        for name in first.stages.keys() {
            let v: Vec<f64> = reports.iter().map(|r| r.stages[name].seconds).collect();
            stage_seconds.insert(name.clone(), median(&v));
        }
    }
    let max_stage_gap = reports
        .iter()
        .filter(|r| r.wall_s > 0.0)
        .map(|r| (r.stage_s - r.wall_s).abs() / r.wall_s)
        .fold(0.0, f64::max);
    Ok(BenchReport {
        runs,
        failed_runs: failed,
        fpl_ms_median: median(&fpl),
        fpl_ms_p95: quantile(&fpl, 0.95),
        rtf_median: median(&rtf),
        rtf_p95: quantile(&rtf, 0.95),
        stage_seconds,
        max_stage_gap,
        identity_violations: violations,
        per_run: reports,
        config: config_echo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        let s = FeedSchedule::fixed_interval("a b c", 100);
        assert_eq!(s.words[2], ("c".to_string(), 200));
        assert!(FeedSchedule::new(vec![("a".into(), 5), ("b".into(), 1)]).is_err());
        let p = FeedSchedule::parse("# feed\n0\thello\n120 world\n", "t").unwrap();
        assert_eq!(p.text(), "hello world");
        assert!(matches!(FeedSchedule::parse("x y", "t"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn quantiles() {
        let v: Vec<f64> = (1..=11).map(f64::from).collect();
        assert_eq!(median(&v), 6.0);
        assert!((quantile(&v, 0.95) - 10.5).abs() < 1e-12);
    }
}
