//! Records the branch decisions of non-smooth operations.
//!
//! ReLU, clamping, max-pooling and hinge selection are piecewise smooth. A
//! central difference whose two probes land on different pieces does not
//! estimate the derivative at the base point. While a recording is active on
//! the current thread, those ops fold their decisions into a fingerprint so
//! the gradient checker can tell when a probe crossed a kink.

use std::cell::RefCell;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

thread_local! {
    static RECORDER: RefCell<Option<DefaultHasher>> = const { RefCell::new(None) };
}

/// Runs `f` with recording enabled and returns its result with the fingerprint
/// of every branch decision taken on this thread meanwhile.
pub fn record<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let previous = RECORDER.with(|r| r.replace(Some(DefaultHasher::new())));
    let out = f();
    let hasher = RECORDER.with(|r| r.replace(previous));
    (out, hasher.map_or(0, |h| h.finish()))
}

fn active() -> bool {
    RECORDER.with(|r| r.borrow().is_some())
}

/// Folds a decision into the active fingerprint; no-op when nothing records.
/// Callers that cache part of a computation can fold in the fingerprint that
/// part produced when it was recorded.
pub fn note<H: Hash + ?Sized>(tag: &str, decision: &H) {
    RECORDER.with(|r| {
        if let Some(h) = r.borrow_mut().as_mut() {
            tag.hash(h);
            decision.hash(h);
        }
    });
}

/// Notes a boolean mask derived lazily from `values`.
pub(crate) fn note_mask(tag: &str, values: &[f64], pred: impl Fn(f64) -> bool) {
    if !active() {
        return;
    }
    let mask: Vec<bool> = values.iter().map(|&v| pred(v)).collect();
    note(tag, &mask);
}
