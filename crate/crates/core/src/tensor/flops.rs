//! Per-thread multiply counter for matrix products.
//!
//! One unit is one scalar multiplication inside a forward matrix product
//! (`p * q * r` for a `p x q` by `q x r` product). Elementwise work and
//! adjoint products issued during `backward` are not counted. The counter is
//! thread-local so independent workers never share a count.

use std::cell::Cell;

thread_local! {
    static MULTS: Cell<u64> = const { Cell::new(0) };
    static ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub(crate) fn record(p: usize, q: usize, r: usize) {
    if ENABLED.with(Cell::get) {
        MULTS.with(|m| m.set(m.get() + (p as u64) * (q as u64) * (r as u64)));
    }
}

/// Multiplies counted on this thread since the last reset.
pub fn mult_count() -> u64 {
    MULTS.with(Cell::get)
}

pub fn reset_mult_count() {
    MULTS.with(|m| m.set(0));
}

/// Turns counting on or off for this thread; returns the previous state.
pub fn set_instrumentation(enabled: bool) -> bool {
    ENABLED.with(|e| e.replace(enabled))
}

/// Runs `f` with a fresh, enabled counter and returns its result together
/// with the multiplies it issued. The previous count and state are restored.
pub fn count_mults<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let saved = mult_count();
    let was_enabled = set_instrumentation(true);
    reset_mult_count();
    let out = f();
    let used = mult_count();
    MULTS.with(|m| m.set(saved));
    set_instrumentation(was_enabled);
    (out, used)
}
