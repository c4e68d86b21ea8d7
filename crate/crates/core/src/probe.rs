//! Per-thread instrumentation counters.
//!
//! The Sinkhorn solver and the teacher encoder bump these on every call so
//! callers can verify which code paths a computation touched. Counters are
//! thread-local: a training run or evaluation that stays on one thread sees
//! only its own activity, even when other runs execute concurrently.

use std::cell::Cell;

thread_local! {
    static SINKHORN_CALLS: Cell<u64> = const { Cell::new(0) };
    static SINKHORN_ITERATIONS: Cell<u64> = const { Cell::new(0) };
    static TEACHER_PASSES: Cell<u64> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub sinkhorn_calls: u64,
    pub sinkhorn_iterations: u64,
    pub teacher_passes: u64,
}

impl Counters {
    /// Activity since `earlier`.
    pub fn since(&self, earlier: &Counters) -> Counters {
        Counters {
            sinkhorn_calls: self.sinkhorn_calls - earlier.sinkhorn_calls,
            sinkhorn_iterations: self.sinkhorn_iterations - earlier.sinkhorn_iterations,
            teacher_passes: self.teacher_passes - earlier.teacher_passes,
        }
    }
}

pub fn snapshot() -> Counters {
    Counters {
        sinkhorn_calls: SINKHORN_CALLS.get(),
        sinkhorn_iterations: SINKHORN_ITERATIONS.get(),
        teacher_passes: TEACHER_PASSES.get(),
    }
}

pub(crate) fn record_sinkhorn(iterations: usize) {
    SINKHORN_CALLS.set(SINKHORN_CALLS.get() + 1);
    SINKHORN_ITERATIONS.set(SINKHORN_ITERATIONS.get() + iterations as u64);
}

pub(crate) fn record_teacher_pass() {
    TEACHER_PASSES.set(TEACHER_PASSES.get() + 1);
}
