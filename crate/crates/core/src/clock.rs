//! Wall-clock and simulated time sources.
//!
//! Every component that stamps or compares times takes an `Arc<dyn Clock>`,
//! so a whole deployment (gateway, hubs, probes) can run on one shared
//! simulated timeline and compress days of operation into seconds.

use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};
use parking_lot::Mutex;

pub trait Clock: Send + Sync + std::fmt::Debug {
    fn now(&self) -> DateTime<Utc>;

    /// Blocks (or, for simulated clocks, jumps) until `deadline`.
    fn sleep_until(&self, deadline: DateTime<Utc>);

    fn is_simulated(&self) -> bool {
        false
    }
}

pub type SharedClock = Arc<dyn Clock>;

/// Truncates to millisecond precision, the resolution used on the wire and on disk.
pub fn truncate_ms(t: DateTime<Utc>) -> DateTime<Utc> {
    Utc.timestamp_millis_opt(t.timestamp_millis())
        .single()
        .unwrap_or(t)
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        truncate_ms(Utc::now())
    }

    fn sleep_until(&self, deadline: DateTime<Utc>) {
        let now = Utc::now();
        if let Ok(d) = (deadline - now).to_std() {
            std::thread::sleep(d);
        }
    }
}

/// Manually driven clock. `sleep_until` advances time instead of blocking.
#[derive(Debug)]
pub struct SimClock {
    now: Mutex<DateTime<Utc>>,
}

impl SimClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self {
            now: Mutex::new(truncate_ms(start)),
        }
    }

    /// A fixed, reproducible epoch for simulations: 2024-01-01T00:00:00Z.
    pub fn at_default_epoch() -> Self {
        Self::new(default_epoch())
    }

    pub fn set(&self, t: DateTime<Utc>) {
        *self.now.lock() = truncate_ms(t);
    }

    pub fn advance(&self, by: Duration) {
        let mut now = self.now.lock();
        *now += chrono::Duration::from_std(by).expect("duration in range");
    }
}

impl Clock for SimClock {
    fn now(&self) -> DateTime<Utc> {
        *self.now.lock()
    }

    fn sleep_until(&self, deadline: DateTime<Utc>) {
        let mut now = self.now.lock();
        if deadline > *now {
            *now = truncate_ms(deadline);
        }
    }

    fn is_simulated(&self) -> bool {
        true
    }
}

pub fn default_epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sim_clock_only_moves_forward_on_sleep() {
        let c = SimClock::at_default_epoch();
        let t0 = c.now();
        c.sleep_until(t0 - chrono::Duration::seconds(5));
        assert_eq!(c.now(), t0);
        c.sleep_until(t0 + chrono::Duration::seconds(5));
        assert_eq!(c.now(), t0 + chrono::Duration::seconds(5));
        c.advance(Duration::from_millis(1500));
        assert_eq!(c.now(), t0 + chrono::Duration::milliseconds(6500));
    }
}
