//! Configuration, persistence and the command pipeline behind the binary.

pub mod artifacts;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
pub use commands::*;
pub use config::RunConfig;

/// Keeps freed heap memory mapped so that repeated training steps reuse
/// the same pages instead of faulting in fresh ones. A no-op outside
/// glibc targets.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tuning parameters.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}
