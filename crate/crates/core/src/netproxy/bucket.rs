use std::time::Duration;

use tokio::time::Instant;

pub(crate) const REFILL: Duration = Duration::from_millis(100);

/// Token bucket refilled every 100 ms with a tenth of the per-second rate.
/// Holds at most one refill's worth, so bursts never exceed 100 ms of budget.
#[derive(Debug)]
pub(crate) struct TokenBucket {
    rate: u64,
    /// In tenths of a byte, so a refill of `rate / 10` bytes stays exact.
    tenths: u64,
    last: Instant,
}

impl TokenBucket {
    pub(crate) fn new(rate: u64, now: Instant) -> Self {
        TokenBucket {
            rate,
            tenths: rate,
            last: now,
        }
    }

    pub(crate) fn set_rate(&mut self, rate: u64) {
        if rate != self.rate {
            self.rate = rate;
            self.tenths = self.tenths.min(rate);
        }
    }

    fn refill(&mut self, now: Instant) {
        let ticks = (now - self.last).as_millis() as u64 / REFILL.as_millis() as u64;
        if ticks > 0 {
            self.tenths = (self.tenths + ticks * self.rate).min(self.rate);
            self.last += REFILL * ticks as u32;
        }
    }

    /// Bytes that may go out now (up to `want`), or how long to wait.
    pub(crate) fn take(&mut self, want: usize, now: Instant) -> Result<usize, Instant> {
        self.refill(now);
        let whole = (self.tenths / 10) as usize;
        if whole == 0 {
            return Err(self.last + REFILL);
        }
        let n = whole.min(want);
        self.tenths -= n as u64 * 10;
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_1024_moves_4096_bytes_in_about_four_seconds() {
        let start = Instant::now();
        let mut b = TokenBucket::new(1024, start);
        let mut now = start;
        let mut left = 4096usize;
        while left > 0 {
            match b.take(left, now) {
                Ok(n) => left -= n,
                Err(until) => now = until,
            }
        }
        let secs = (now - start).as_secs_f64();
        assert!((3.0..=5.0).contains(&secs), "{secs}");
    }
}
