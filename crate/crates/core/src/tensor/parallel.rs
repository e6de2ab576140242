use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

static OVERRIDE: AtomicUsize = AtomicUsize::new(0);
static FROM_ENV: OnceLock<usize> = OnceLock::new();

/// Worker count for kernel-level parallelism. `MONOVIT_THREADS`, default 1.
pub fn threads() -> usize {
    match OVERRIDE.load(Ordering::Relaxed) {
        0 => *FROM_ENV.get_or_init(|| {
            std::env::var("MONOVIT_THREADS")
                .ok()
                .and_then(|s| s.trim().parse::<usize>().ok())
                .filter(|&n| n > 0)
                .unwrap_or(1)
        }),
        n => n,
    }
}

/// Overrides the environment setting for this process; 0 restores it.
pub fn set_threads(n: usize) {
    OVERRIDE.store(n, Ordering::Relaxed);
}

/// Runs `f(chunk_index, chunk)` over consecutive `chunk_len` slices of `out`.
/// Every chunk is written by exactly one worker, so results do not depend on
/// the thread count.
pub(crate) fn for_each_chunk<F>(out: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let chunk_len = chunk_len.max(1);
    let n_chunks = out.len().div_ceil(chunk_len);
    let workers = threads().min(n_chunks);
    if workers <= 1 || out.len() < 4096 {
        for (i, c) in out.chunks_mut(chunk_len).enumerate() {
            f(i, c);
        }
        return;
    }
    let per_worker = n_chunks.div_ceil(workers);
    std::thread::scope(|s| {
        for (w, block) in out.chunks_mut(per_worker * chunk_len).enumerate() {
            let f = &f;
            s.spawn(move || {
                for (i, c) in block.chunks_mut(chunk_len).enumerate() {
                    f(w * per_worker + i, c);
                }
            });
        }
    });
}
