//! Thread-control helpers shared by the kernels and the trainer.
//!
//! Every parallel loop in this crate splits work across *independent* output
//! rows or segments, so results are bitwise identical for any thread count,
//! including the sequential build without the `parallel` feature. Reductions
//! whose order would depend on scheduling stay sequential on purpose.

/// Work smaller than this many scalar elements is not worth scheduling.
pub(crate) const PAR_THRESHOLD: usize = 1 << 12;

/// Runs `f` once for every chunk of `chunk` consecutive elements of `data`,
/// passing the chunk index. Chunks are processed in parallel when the
/// `parallel` feature is on and the buffer is large enough.
pub(crate) fn for_each_chunk_mut<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    if chunk == 0 || data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if data.len() >= PAR_THRESHOLD {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Splits `data` into consecutive variable-length parts, part `i` covering
/// element range `offsets[i] * width .. offsets[i + 1] * width`, and runs `f`
/// on each part with its index. Parts never overlap, so this parallelizes
/// cleanly under the `parallel` feature.
pub(crate) fn for_each_part_mut<F>(data: &mut [f64], width: usize, offsets: &[usize], f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let n_parts = offsets.len().saturating_sub(1);
    if n_parts == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if data.len() >= PAR_THRESHOLD {
            use rayon::prelude::*;
            let mut parts = Vec::with_capacity(n_parts);
            let mut rest = data;
            let mut consumed = 0;
            for s in 0..n_parts {
                let end = offsets[s + 1] * width;
                let (head, tail) = rest.split_at_mut(end - consumed);
                parts.push(head);
                rest = tail;
                consumed = end;
            }
            parts.into_par_iter().enumerate().for_each(|(i, part)| f(i, part));
            return;
        }
    }
    for s in 0..n_parts {
        f(s, &mut data[offsets[s] * width..offsets[s + 1] * width]);
    }
}

/// Runs `f` inside a thread pool of `jobs` workers when the `parallel`
/// feature is on; with the feature off (or `jobs == 0`, meaning "default"),
/// just calls `f`. A pool of one worker pins every kernel to a single thread.
pub fn with_thread_count<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> T {
    #[cfg(feature = "parallel")]
    {
        if jobs > 0 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .expect("thread pool construction failed");
            return pool.install(f);
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = jobs;
    f()
}
