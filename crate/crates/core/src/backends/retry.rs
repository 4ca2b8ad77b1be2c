use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::BackendError;

/// Exponential backoff: after failed attempt `i` (0-based) the caller sleeps
/// `base_delay · 2^i`, for up to `max_retries` retries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    #[serde(with = "millis")]
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            base_delay: Duration::ZERO,
        }
    }

    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << retry.min(16))
    }

    pub fn total_backoff(&self) -> Duration {
        (0..self.max_retries).map(|i| self.delay(i)).sum()
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// Run `op`, retrying transient failures. Non-transient errors return immediately.
pub fn with_retry<T>(
    policy: &RetryPolicy,
    mut sleep: impl FnMut(Duration),
    mut op: impl FnMut() -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let mut attempt = 0u32;
    loop {
        match op() {
            Ok(v) => return Ok(v),
            Err(e) if e.is_transient() && attempt < policy.max_retries => {
                log::debug!("transient backend error (attempt {}): {e}", attempt + 1);
                sleep(policy.delay(attempt));
                attempt += 1;
            }
            Err(BackendError::Unavailable { last_error, .. }) => {
                return Err(BackendError::Unavailable {
                    attempts: attempt + 1,
                    last_error,
                })
            }
            Err(e) => return Err(e),
        }
    }
}
