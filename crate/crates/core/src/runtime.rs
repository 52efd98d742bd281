//! Process-level tuning for the training workload.

/// Keeps freed activation buffers in the heap instead of returning them to
/// the OS. Training allocates and drops tens of megabytes per layer and step;
/// with glibc defaults every one of those buffers is a fresh `mmap` whose
/// pages fault in again on first touch. No-op off glibc.
///
/// Serving every allocation from the main heap (`M_MMAP_MAX = 0`) and never
/// trimming it makes freed buffers reusable without new page faults.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_MAX, 0);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}
