//! Instrumented forward-FLOP counter.
//!
//! Every forward op adds its cost to a thread-local total as it executes;
//! backward closures never count. Conventions:
//!
//! | op | FLOPs |
//! |----|-------|
//! | matmul `(m×k)·(k×n)` | `2·m·k·n` |
//! | elementwise add / scale / mul | `n` |
//! | softmax over `n` values | `5·n` |
//! | layer norm over `n` values | `8·n` |
//! | GELU over `n` values | `8·n` |
//!
//! Reshapes, gathers and concatenations move data only and count zero.

use std::cell::Cell;

pub const SOFTMAX_PER_ELEMENT: u64 = 5;
pub const LAYER_NORM_PER_ELEMENT: u64 = 8;
pub const GELU_PER_ELEMENT: u64 = 8;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn add(n: u64) {
    COUNTER.with(|c| c.set(c.get() + n));
}

pub fn reset() {
    COUNTER.with(|c| c.set(0));
}

pub fn current() -> u64 {
    COUNTER.with(|c| c.get())
}

/// Runs `f` and returns its result with the FLOPs it executed.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = current();
    let out = f();
    (out, current() - before)
}
