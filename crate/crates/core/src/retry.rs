use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Exponential backoff: the delay before retry `k` (1-based) is
/// `base * factor^(k-1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    #[serde(with = "duration_ms")]
    pub backoff_base: Duration,
    pub backoff_factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            backoff_base: Duration::from_millis(250),
            backoff_factor: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn delay_before_retry(&self, retry: u32) -> Duration {
        let scale = self.backoff_factor.powi(retry.saturating_sub(1) as i32);
        self.backoff_base.mul_f64(scale.max(0.0))
    }
}

pub(crate) enum Attempt<T> {
    Done(T),
    /// A transient failure; retried while budget remains, otherwise returned.
    Retry(T),
}

/// Runs `op` until it yields `Done` or the retry budget is spent. Returns the
/// final value and the number of attempts made.
pub(crate) fn run_with_retries<T>(
    policy: &RetryPolicy,
    mut op: impl FnMut(u32) -> Attempt<T>,
) -> (T, u32) {
    let mut attempt = 1;
    loop {
        match op(attempt) {
            Attempt::Done(v) => return (v, attempt),
            Attempt::Retry(v) if attempt > policy.max_retries => return (v, attempt),
            Attempt::Retry(_) => {
                thread::sleep(policy.delay_before_retry(attempt));
                attempt += 1;
            }
        }
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub(crate) struct Semaphore {
    available: Mutex<usize>,
    cv: Condvar,
}

pub(crate) struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            available: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.cv.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub(crate) mod duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64() * 1000.0)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let ms = f64::deserialize(d)?;
        if !ms.is_finite() || ms < 0.0 {
            return Err(serde::de::Error::custom(
                "duration must be a non-negative number of milliseconds",
            ));
        }
        Ok(Duration::from_secs_f64(ms / 1000.0))
    }
}
