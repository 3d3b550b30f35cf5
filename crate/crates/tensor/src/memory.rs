//! Live-tensor byte accounting.
//!
//! Every tensor buffer registers its size on creation and unregisters on
//! drop. Counters are per thread, matching the one-tape-per-thread model;
//! buffers dropped on a different thread than they were created on make the
//! counters of both threads approximate.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn register(bytes: usize) {
    LIVE.with(|l| {
        let now = l.get() + bytes;
        l.set(now);
        PEAK.with(|p| {
            if now > p.get() {
                p.set(now)
            }
        });
    });
}

pub(crate) fn release(bytes: usize) {
    LIVE.with(|l| l.set(l.get().saturating_sub(bytes)));
}

/// Bytes currently held by live tensor buffers on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(|l| l.get())
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(|p| p.get())
}

/// Resets the high-water mark to the current live byte count.
pub fn reset_peak() {
    let now = live_bytes();
    PEAK.with(|p| p.set(now));
}
