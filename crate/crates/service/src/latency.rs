//! Injected transport delay.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::sync::mpsc;
use tokio::time::{sleep_until, Duration, Instant};

/// Delivery times for one sender: `sent + delay + U(-jitter, jitter)`,
/// raised where needed so no message overtakes the one before it.
#[derive(Debug, Clone)]
pub struct LatencySchedule {
    delay_ms: f64,
    jitter_ms: f64,
    rng: ChaCha8Rng,
    last_due: f64,
}

impl LatencySchedule {
    /// `jitter_ms` is clamped to `delay_ms` so delivery never precedes sending.
    pub fn new(delay_ms: f64, jitter_ms: f64, seed: u64) -> Self {
        let delay_ms = delay_ms.max(0.0);
        Self {
            delay_ms,
            jitter_ms: jitter_ms.clamp(0.0, delay_ms),
            rng: ChaCha8Rng::seed_from_u64(seed),
            last_due: f64::NEG_INFINITY,
        }
    }

    pub fn is_passthrough(&self) -> bool {
        self.delay_ms == 0.0 && self.jitter_ms == 0.0
    }

    /// Due time (ms) of a message sent at `sent_ms`.
    pub fn due(&mut self, sent_ms: f64) -> f64 {
        let jitter = if self.jitter_ms > 0.0 {
            self.rng.random_range(-self.jitter_ms..=self.jitter_ms)
        } else {
            0.0
        };
        let due = (sent_ms + self.delay_ms + jitter).max(self.last_due);
        self.last_due = due;
        due
    }
}

/// Sending half of a delay line; stamps each item when it is sent.
#[derive(Debug)]
pub struct DelaySender<T> {
    tx: mpsc::UnboundedSender<(Instant, T)>,
}

impl<T> Clone for DelaySender<T> {
    fn clone(&self) -> Self {
        Self { tx: self.tx.clone() }
    }
}

impl<T> DelaySender<T> {
    /// Fails only when the receiving side is gone.
    pub fn send(&self, item: T) -> Result<(), T> {
        self.tx.send((Instant::now(), item)).map_err(|e| e.0 .1)
    }
}

/// Wrap a channel in `schedule`. Items come out of the returned receiver
/// in send order, each no earlier than its due time.
pub fn delay_line<T: Send + 'static>(mut schedule: LatencySchedule) -> (DelaySender<T>, mpsc::UnboundedReceiver<T>) {
    let (tx, mut rx) = mpsc::unbounded_channel::<(Instant, T)>();
    let (out_tx, out_rx) = mpsc::unbounded_channel();
    let origin = Instant::now();
    tokio::spawn(async move {
        while let Some((sent, item)) = rx.recv().await {
            if !schedule.is_passthrough() {
                let sent_ms = sent.duration_since(origin).as_secs_f64() * 1e3;
                let due = schedule.due(sent_ms);
                sleep_until(origin + Duration::from_secs_f64(due.max(0.0) / 1e3)).await;
            }
            if out_tx.send(item).is_err() {
                break;
            }
        }
    });
    (DelaySender { tx }, out_rx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_delay_is_identity() {
        let mut s = LatencySchedule::new(0.0, 0.0, 1);
        for t in [0.0, 3.0, 3.0, 10.5] {
            assert_eq!(s.due(t), t);
        }
    }

    #[test]
    fn jitter_never_reorders() {
        let mut s = LatencySchedule::new(50.0, 10.0, 9);
        let mut prev = f64::NEG_INFINITY;
        for k in 0..1000 {
            let sent = k as f64 * 2.0;
            let due = s.due(sent);
            assert!(due >= prev && due >= sent + 40.0 && due <= (sent + 60.0).max(prev));
            prev = due;
        }
    }
}
