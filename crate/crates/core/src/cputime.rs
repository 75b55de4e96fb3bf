//! Process and thread CPU clocks.

fn read(clock: libc::clockid_t) -> f64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: `ts` is a valid out-pointer and both clock ids exist on Linux.
    let rc = unsafe { libc::clock_gettime(clock, &mut ts) };
    if rc != 0 {
        return 0.0;
    }
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

/// CPU seconds consumed by all threads of this process.
pub fn process_seconds() -> f64 {
    read(libc::CLOCK_PROCESS_CPUTIME_ID)
}

/// CPU seconds consumed by the calling thread.
pub fn thread_seconds() -> f64 {
    read(libc::CLOCK_THREAD_CPUTIME_ID)
}

/// Runs `f` and returns its result with the calling thread's CPU seconds.
pub fn time_thread<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = thread_seconds();
    let out = f();
    (out, thread_seconds() - start)
}
