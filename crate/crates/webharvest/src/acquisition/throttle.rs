use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

/// Up to `attempts` tries; the n-th retry waits `initial_backoff · 2^(n-1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn run<T, E>(
        &self,
        mut op: impl FnMut() -> Result<T, E>,
        retriable: impl Fn(&E) -> bool,
    ) -> Result<T, E> {
        let mut wait = self.initial_backoff;
        let mut attempt = 1;
        loop {
            match op() {
                Err(e) if attempt < self.attempts.max(1) && retriable(&e) => {
                    thread::sleep(wait);
                    wait = wait.saturating_mul(2);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Caps concurrent requests to one engine and spaces their start times.
#[derive(Debug)]
pub struct EngineGate {
    max: usize,
    interval: Duration,
    state: Mutex<GateState>,
    freed: Condvar,
}

#[derive(Debug)]
struct GateState {
    active: usize,
    next_start: Option<Instant>,
}

pub struct GatePermit<'a>(&'a EngineGate);

impl EngineGate {
    pub fn new(max_concurrent: usize, min_interval: Duration) -> Self {
        EngineGate {
            max: max_concurrent.max(1),
            interval: min_interval,
            state: Mutex::new(GateState {
                active: 0,
                next_start: None,
            }),
            freed: Condvar::new(),
        }
    }

    /// Blocks until a slot is free and the minimum interval has passed.
    pub fn acquire(&self) -> GatePermit<'_> {
        let start = {
            let mut s = self.state.lock().unwrap_or_else(|e| e.into_inner());
            while s.active >= self.max {
                s = self.freed.wait(s).unwrap_or_else(|e| e.into_inner());
            }
            s.active += 1;
            let now = Instant::now();
            let start = s.next_start.filter(|t| *t > now).unwrap_or(now);
            s.next_start = Some(start + self.interval);
            start
        };
        let now = Instant::now();
        if start > now {
            thread::sleep(start - now);
        }
        GatePermit(self)
    }
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        let mut s = self.0.state.lock().unwrap_or_else(|e| e.into_inner());
        s.active -= 1;
        self.0.freed.notify_one();
    }
}
