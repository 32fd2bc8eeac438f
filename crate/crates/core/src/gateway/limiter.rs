use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use super::clock::Clock;

const WINDOW: Duration = Duration::from_secs(60);

/// Admits at most `rpm` request starts in any sliding 60-second window.
///
/// Admission is serialised: a caller that has to wait holds the lock while
/// it sleeps, so later callers queue behind it in arrival order.
pub struct RateLimiter {
    rpm: Option<u32>,
    starts: Mutex<VecDeque<Duration>>,
    clock: Arc<dyn Clock>,
}

impl RateLimiter {
    pub fn new(rpm: Option<u32>, clock: Arc<dyn Clock>) -> Self {
        Self { rpm: rpm.filter(|&r| r > 0), starts: Mutex::new(VecDeque::new()), clock }
    }

    /// Blocks until a start is allowed and returns its timestamp.
    pub fn acquire(&self) -> Duration {
        let Some(rpm) = self.rpm else {
            return self.clock.now();
        };
        let mut starts = self.starts.lock().unwrap();
        loop {
            let now = self.clock.now();
            while starts.front().is_some_and(|&t| now >= t + WINDOW) {
                starts.pop_front();
            }
            if starts.len() < rpm as usize {
                starts.push_back(now);
                return now;
            }
            let oldest = *starts.front().unwrap();
            self.clock.sleep(oldest + WINDOW - now);
        }
    }
}

/// Counting semaphore bounding concurrent in-flight requests.
pub struct InFlight {
    limit: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    owner: &'a InFlight,
}

impl InFlight {
    pub fn new(limit: usize) -> Self {
        Self { limit: limit.max(1), used: Mutex::new(0), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.limit {
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        Permit { owner: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.owner.used.lock().unwrap() -= 1;
        self.owner.freed.notify_one();
    }
}
