//! Worker-thread helpers. `FLMGROW_THREADS` caps the thread count and
//! defaults to 1. Parallelism is only applied to per-item read-only work
//! (probe forwards, sample scoring) whose results merge by index or by
//! max, so the outcome is bitwise-identical at any thread count.

pub fn thread_count() -> usize {
    std::env::var("FLMGROW_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Applies `f` to every item, preserving order in the output.
pub fn ordered_map<T, U, F>(items: &[T], threads: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let workers = threads.min(items.len());
    let mut indexed: Vec<(usize, U)> = Vec::with_capacity(items.len());
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(workers);
        for w in 0..workers {
            let f = &f;
            handles.push(scope.spawn(move || {
                let mut part = Vec::new();
                let mut i = w;
                while i < items.len() {
                    part.push((i, f(&items[i])));
                    i += workers;
                }
                part
            }));
        }
        for h in handles {
            indexed.extend(h.join().expect("worker panicked"));
        }
    });
    indexed.sort_by_key(|(i, _)| *i);
    indexed.into_iter().map(|(_, u)| u).collect()
}
