use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

/// Source of epoch seconds.
pub trait Clock: Send + Sync {
    fn now(&self) -> i64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> i64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs() as i64)
            .unwrap_or(0)
    }
}

/// Shared manually-advanced clock. Clones observe the same time.
#[derive(Debug, Clone, Default)]
pub struct SimClock(Arc<AtomicI64>);

impl SimClock {
    pub fn new(start: i64) -> Self {
        SimClock(Arc::new(AtomicI64::new(start)))
    }

    /// Panics on a negative delta.
    pub fn advance(&self, delta: i64) -> i64 {
        assert!(delta >= 0, "clock cannot run backwards");
        self.0.fetch_add(delta, Ordering::SeqCst) + delta
    }

    pub fn set(&self, now: i64) {
        self.0.store(now, Ordering::SeqCst);
    }
}

impl Clock for SimClock {
    fn now(&self) -> i64 {
        self.0.load(Ordering::SeqCst)
    }
}
