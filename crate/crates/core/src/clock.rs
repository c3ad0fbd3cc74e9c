//! Time sources.
//!
//! Every component takes its notion of "now" from a [`Clock`] so the whole
//! pipeline can run against wall time, an accelerated clock (soak and
//! recovery tests compress minutes into seconds), or a hand-driven clock in
//! unit tests.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::{DateTime, TimeDelta, Utc};

pub trait Clock: Send + Sync + 'static {
    fn now(&self) -> DateTime<Utc>;

    /// Wall-clock time that elapses while this clock advances by `span`.
    fn to_real(&self, span: Duration) -> Duration;
}

/// Sleeps until `span` of clock time has passed.
pub async fn sleep(clock: &dyn Clock, span: Duration) {
    tokio::time::sleep(clock.to_real(span)).await
}

pub fn delta(d: Duration) -> TimeDelta {
    TimeDelta::from_std(d).unwrap_or(TimeDelta::MAX)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }

    fn to_real(&self, span: Duration) -> Duration {
        span
    }
}

/// Runs `factor` times faster than wall time, starting at `origin`.
#[derive(Debug)]
pub struct ScaledClock {
    origin: DateTime<Utc>,
    started: Instant,
    factor: f64,
}

impl ScaledClock {
    pub fn new(origin: DateTime<Utc>, factor: f64) -> Self {
        assert!(factor > 0.0, "clock factor must be positive");
        Self {
            origin,
            started: Instant::now(),
            factor,
        }
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }
}

impl Clock for ScaledClock {
    fn now(&self) -> DateTime<Utc> {
        let elapsed = self.started.elapsed().mul_f64(self.factor);
        self.origin + delta(elapsed)
    }

    fn to_real(&self, span: Duration) -> Duration {
        span.div_f64(self.factor)
    }
}

/// A clock that only moves when told to.
#[derive(Debug)]
pub struct ManualClock {
    now: Mutex<DateTime<Utc>>,
}

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self {
            now: Mutex::new(start),
        }
    }

    pub fn advance(&self, by: Duration) {
        let mut now = self.now.lock().unwrap();
        *now += delta(by);
    }

    pub fn set(&self, to: DateTime<Utc>) {
        *self.now.lock().unwrap() = to;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.now.lock().unwrap()
    }

    fn to_real(&self, span: Duration) -> Duration {
        // Loops driven by a manual clock still need to yield.
        span.min(Duration::from_millis(10))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_clock_runs_faster() {
        let origin = Utc::now();
        let clock = ScaledClock::new(origin, 100.0);
        std::thread::sleep(Duration::from_millis(20));
        let advanced = clock.now() - origin;
        assert!(advanced >= TimeDelta::seconds(2), "{advanced}");
        assert_eq!(clock.to_real(Duration::from_secs(10)), Duration::from_millis(100));
    }

    #[test]
    fn manual_clock_moves_on_demand() {
        let start = Utc::now();
        let clock = ManualClock::new(start);
        assert_eq!(clock.now(), start);
        clock.advance(Duration::from_secs(5));
        assert_eq!(clock.now() - start, TimeDelta::seconds(5));
    }
}
