//! Multiply-accumulate counter.
//!
//! Every GEMM issued by the kernels reports `m·n·k` here. The counter is
//! thread-local; [`measure`] captures the work done by a closure on the
//! current thread, and parallel dispatchers fold worker counts back in
//! with [`add`].

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub fn add(n: u64) {
    MACS.with(|c| c.set(c.get().wrapping_add(n)));
}

/// Total MACs recorded on this thread so far.
pub fn current() -> u64 {
    MACS.with(Cell::get)
}

/// Runs `f` and returns its result with the MACs it performed.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = current();
    let out = f();
    (out, current().wrapping_sub(before))
}
