//! Thread-local floating-point multiply counter.
//!
//! Kernels that promise a specific multiply budget route their scalar
//! products through [`mul`]; tests read the count back with [`count`].

use std::cell::Cell;

use crate::linalg::Real;

thread_local! {
    static MULTIPLIES: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub fn mul<T: Real>(a: T, b: T) -> T {
    MULTIPLIES.with(|c| c.set(c.get() + 1));
    a * b
}

pub fn reset() {
    MULTIPLIES.with(|c| c.set(0));
}

pub fn count() -> u64 {
    MULTIPLIES.with(Cell::get)
}

/// Runs `f` and returns its result with the number of counted multiplies.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = count();
    let out = f();
    (out, count() - before)
}
