//! Process-wide execution switches.
//!
//! The only knob is row-parallel forward kernels (blur, conv). Every output
//! element is computed by an independent sequential accumulation, so the
//! parallel and sequential paths are bitwise identical; the flag only
//! changes wall-clock time.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(false);

/// Enable or disable row-parallel forward kernels.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}
