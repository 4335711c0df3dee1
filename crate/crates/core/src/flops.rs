//! Operation-counting instrumentation. When enabled, every numeric kernel
//! reports its floating-point cost here (matmuls exactly as 2*m*n*k, the
//! nonlinearities with the same documented constants the analytic profiler
//! uses). Used to cross-validate the analytic FLOPs model against what the
//! implementation actually executes.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(false);
static TOTAL: AtomicU64 = AtomicU64::new(0);

/// Per-element cost constants shared with the analytic model.
pub const SOFTMAX_COST: u64 = 6;
pub const NORM_COST: u64 = 6;
pub const ACT_COST: u64 = 4;
pub const DISC_COST: u64 = 4;
/// Per state element per step: two multiplies and one add for the update,
/// one multiply-accumulate reading the state out.
pub const SCAN_COST: u64 = 6;

pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::Relaxed);
}

pub fn enabled() -> bool {
    ENABLED.load(Ordering::Relaxed)
}

pub fn reset() {
    TOTAL.store(0, Ordering::Relaxed);
}

pub fn total() -> u64 {
    TOTAL.load(Ordering::Relaxed)
}

#[inline]
pub fn add(flops: u64) {
    if enabled() {
        TOTAL.fetch_add(flops, Ordering::Relaxed);
    }
}

#[inline]
pub fn add_matmul(m: usize, n: usize, k: usize) {
    add(2 * (m as u64) * (n as u64) * (k as u64));
}
