//! Injected monotonic clocks.

use std::time::{Duration, Instant};

/// Pipeline stages tracked by the latency ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Phonemize,
    Pt,
    Tt,
    Dt,
    Decode,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Phonemize, Stage::Pt, Stage::Tt, Stage::Dt, Stage::Decode];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Phonemize => "phonemize",
            Stage::Pt => "pt",
            Stage::Tt => "tt",
            Stage::Dt => "dt",
            Stage::Decode => "decode",
        }
    }
}

pub trait Clock: Send {
    /// Time since an arbitrary fixed origin.
    fn now(&self) -> Duration;

    /// Called once after every stage invocation.
    fn charge(&mut self, _stage: Stage) {}

    /// Blocks (or jumps) until `t`.
    fn wait_until(&mut self, t: Duration) {
        if let Some(d) = t.checked_sub(self.now()) {
            std::thread::sleep(d);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

/// Time moves only by a fixed cost per stage invocation.
#[derive(Debug, Clone)]
pub struct VirtualClock {
    now: Duration,
    costs: [Duration; 5],
}

impl VirtualClock {
    pub fn new(costs: [Duration; 5]) -> Self {
        Self {
            now: Duration::ZERO,
            costs,
        }
    }

    pub fn uniform(cost: Duration) -> Self {
        Self::new([cost; 5])
    }

    pub fn cost(&self, stage: Stage) -> Duration {
        self.costs[stage.index()]
    }

    pub fn advance(&mut self, d: Duration) {
        self.now += d;
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        self.now
    }

    fn charge(&mut self, stage: Stage) {
        self.now += self.costs[stage.index()];
    }

    fn wait_until(&mut self, t: Duration) {
        self.now = self.now.max(t);
    }
}
