//! Wall and logical clocks.
//!
//! Latency measurements run on [`WallClock`]; protocol tests that need
//! PERIOD gather or lease expiry to be deterministic drive a
//! [`LogicalClock`] by hand.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub trait Clock: Send + Sync + std::fmt::Debug {
    /// Time elapsed since the clock's origin.
    fn now(&self) -> Duration;

    fn is_logical(&self) -> bool {
        false
    }

    /// Moves a logical clock forward; real clocks ignore it.
    fn advance_by(&self, _by: Duration) {}
}

#[derive(Debug)]
pub struct WallClock {
    origin: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        WallClock {
            origin: Instant::now(),
        }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

#[derive(Debug, Default)]
pub struct LogicalClock {
    nanos: AtomicU64,
}

impl LogicalClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, by: Duration) {
        self.nanos.fetch_add(by.as_nanos() as u64, Ordering::SeqCst);
    }

    pub fn set(&self, at: Duration) {
        self.nanos.store(at.as_nanos() as u64, Ordering::SeqCst);
    }
}

impl Clock for LogicalClock {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.nanos.load(Ordering::SeqCst))
    }

    fn is_logical(&self) -> bool {
        true
    }

    fn advance_by(&self, by: Duration) {
        self.advance(by);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClockMode {
    #[default]
    Wall,
    Logical,
}

impl ClockMode {
    pub fn build(self) -> Arc<dyn Clock> {
        match self {
            ClockMode::Wall => Arc::new(WallClock::new()),
            ClockMode::Logical => Arc::new(LogicalClock::new()),
        }
    }
}

/// Milliseconds since the unix epoch, for human-facing timestamps.
pub fn unix_millis() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
