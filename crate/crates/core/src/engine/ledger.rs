//! Per-stage timings, call counts and the acoustic-delay record.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::clock::Stage;
use crate::error::{Error, Result};

/// Counters at the moment a frame became decodable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmitRecord {
    pub frame: usize,
    /// 0-based generation step that completed the frame.
    pub step: usize,
    pub tt_steps: u64,
    pub dt_columns: u64,
    pub pt_passes: u64,
    pub decodes: u64,
    pub time: Duration,
}

#[derive(Debug, Clone, Default)]
pub struct LatencyLedger {
    pub stage_time: [Duration; 5],
    pub calls: [u64; 5],
    /// Generation columns, including the padded first one.
    pub dt_columns: u64,
    pub prefill_steps: u64,
    pub first_arrival: Option<Duration>,
    pub emits: Vec<EmitRecord>,
}

impl LatencyLedger {
    pub fn record(&mut self, stage: Stage, elapsed: Duration) {
        self.stage_time[stage.index()] += elapsed;
        self.calls[stage.index()] += 1;
    }

    pub fn calls(&self, stage: Stage) -> u64 {
        self.calls[stage.index()]
    }

    pub fn stage_total(&self) -> Duration {
        self.stage_time.iter().sum()
    }

    /// Frames whose emission breaks the one-step acoustic delay: frame `f`
    /// must complete at step `f + 1`, after exactly `f + 2` temporal steps and
    /// depth columns.
    pub fn delay_violations(&self) -> usize {
        self.emits
            .iter()
            .enumerate()
            .filter(|(i, e)| {
                let want = e.frame as u64 + 2;
                e.frame != *i || e.step != e.frame + 1 || e.tt_steps != want || e.dt_columns != want
            })
            .count()
    }

    pub fn report(&self) -> Result<LatencyReport> {
        let (first, last) = match (self.emits.first(), self.emits.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(Error::Report("no decodable frame was emitted".into())),
        };
        let arrival = self.first_arrival.unwrap_or_default();
        let frames = self.emits.len();
        let audio = 0.08 * frames as f64;
        let stage_s = self.stage_total().as_secs_f64();
        let stages = Stage::ALL
            .iter()
            .map(|&s| {
                (
                    s.name().to_string(),
                    StageReport {
                        seconds: self.stage_time[s.index()].as_secs_f64(),
                        calls: self.calls[s.index()],
                    },
                )
            })
            .collect();
        Ok(LatencyReport {
            fpl_ms: first.time.saturating_sub(arrival).as_secs_f64() * 1e3,
            rtf: stage_s / audio,
            wall_s: last.time.saturating_sub(arrival).as_secs_f64(),
            stage_s,
            frames,
            stages,
            first_frame: *first,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub seconds: f64,
    pub calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    /// First decodable frame minus first word arrival.
    pub fpl_ms: f64,
    /// Generation time (sum of stage times) over audio duration.
    pub rtf: f64,
    /// First word arrival to last frame emission.
    pub wall_s: f64,
    pub stage_s: f64,
    pub frames: usize,
    pub stages: BTreeMap<String, StageReport>,
    pub first_frame: EmitRecord,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emit(frame: usize, step: usize, n: u64) -> EmitRecord {
        EmitRecord {
            frame,
            step,
            tt_steps: n,
            dt_columns: n,
            pt_passes: 1,
            decodes: 1,
            time: Duration::from_millis(80 * (frame as u64 + 1)),
        }
    }

    #[test]
    fn rtf_definition() {
        let mut l = LatencyLedger::default();
        l.first_arrival = Some(Duration::ZERO);
        for f in 0..10 {
            l.emits.push(emit(f, f + 1, f as u64 + 2));
        }
        l.record(Stage::Tt, Duration::from_millis(800));
        let r = l.report().unwrap();
        assert!((r.rtf - 1.0).abs() < 1e-12);
        assert_eq!(l.delay_violations(), 0);
    }

    #[test]
    fn violations_counted() {
        let mut l = LatencyLedger::default();
        l.emits.push(emit(0, 1, 3));
        assert_eq!(l.delay_violations(), 1);
        assert!(LatencyLedger::default().report().is_err());
    }
}
