//! Token-bucket pacing for simulated bandwidth limits.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

/// Pacing state of one link direction.
///
/// Tokens are bytes. The bucket refills at `rate` bytes per second up to
/// `burst` and may go into debt; a transfer completes once the debt it created
/// has been paid back. With `burst = 0` a transfer of `B` bytes occupies the
/// link for exactly `B / rate` seconds and back-to-back transfers queue.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    rate: f64,
    burst: f64,
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    pub fn new(rate_bytes_per_sec: u64, burst_bytes: u64) -> Self {
        assert!(rate_bytes_per_sec > 0, "bandwidth limit must be positive");
        Self { rate: rate_bytes_per_sec as f64, burst: burst_bytes as f64, tokens: burst_bytes as f64, last: Instant::now() }
    }

    pub fn rate(&self) -> u64 {
        self.rate as u64
    }

    /// Reserves `bytes` of link time starting at `now` and returns the instant
    /// at which the transfer has fully left the link.
    pub fn reserve_at(&mut self, bytes: usize, now: Instant) -> Instant {
        if now > self.last {
            let elapsed = now.duration_since(self.last).as_secs_f64();
            self.tokens = (self.tokens + elapsed * self.rate).min(self.burst);
            self.last = now;
        }
        self.tokens -= bytes as f64;
        if self.tokens >= 0.0 {
            now
        } else {
            now + Duration::from_secs_f64(-self.tokens / self.rate)
        }
    }
}

/// A shareable, optionally disabled pacer for one link direction.
#[derive(Debug, Clone, Default)]
pub struct Link {
    bucket: Option<Arc<Mutex<TokenBucket>>>,
}

impl Link {
    pub fn unlimited() -> Self {
        Self { bucket: None }
    }

    pub fn is_limited(&self) -> bool {
        self.bucket.is_some()
    }

    /// Blocks the calling thread for as long as `bytes` occupy the link.
    pub fn pace(&self, bytes: usize) {
        if let Some(bucket) = &self.bucket {
            let done = bucket.lock().unwrap().reserve_at(bytes, Instant::now());
            let now = Instant::now();
            if done > now {
                std::thread::sleep(done - now);
            }
        }
    }
}

/// Applies a bandwidth limit to a link; `None` disables pacing.
pub fn throttle(link: &mut Link, bandwidth_limit: Option<u64>) {
    link.bucket = bandwidth_limit.map(|rate| Arc::new(Mutex::new(TokenBucket::new(rate, 0))));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hundred_kilobytes_at_hundred_kilobytes_per_second_takes_a_second() {
        let mut bucket = TokenBucket::new(100_000, 0);
        let t0 = Instant::now();
        let done = bucket.reserve_at(100_000, t0);
        assert!(done.duration_since(t0) >= Duration::from_secs_f64(1.0));
    }

    #[test]
    fn back_to_back_frames_queue() {
        let mut bucket = TokenBucket::new(1_000, 0);
        let t0 = Instant::now();
        let first = bucket.reserve_at(500, t0);
        let second = bucket.reserve_at(250, t0);
        assert!(second.duration_since(t0) >= Duration::from_secs_f64(0.75));
        assert!(second >= first);
    }

    #[test]
    fn idle_link_refills_up_to_burst() {
        let mut bucket = TokenBucket::new(1_000, 0);
        let t0 = Instant::now();
        bucket.reserve_at(1_000, t0);
        let later = t0 + Duration::from_secs(10);
        // Idle time does not bank credit beyond the burst size.
        let done = bucket.reserve_at(1_000, later);
        assert!(done.duration_since(later) >= Duration::from_secs_f64(1.0));

        let mut bursty = TokenBucket::new(1_000, 500);
        let t1 = Instant::now();
        assert_eq!(bursty.reserve_at(500, t1), t1);
    }

    #[test]
    fn unlimited_link_does_not_sleep() {
        let link = Link::unlimited();
        let t0 = Instant::now();
        link.pace(10_000_000);
        assert!(t0.elapsed() < Duration::from_millis(50));
    }

    #[test]
    fn limited_link_sleeps() {
        let mut link = Link::unlimited();
        throttle(&mut link, Some(10_000));
        assert!(link.is_limited());
        let t0 = Instant::now();
        link.pace(1_000);
        link.pace(1_000);
        assert!(t0.elapsed() >= Duration::from_millis(200));
    }
}
